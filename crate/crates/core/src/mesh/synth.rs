//! Synthetic surface meshes standing in for anatomical geometry.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Mesh, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    /// Unit icosphere.
    Sphere,
    /// Icosphere stretched to semi-axes (1, 0.8, 1.5).
    Ellipsoid,
    /// Lower half of a (1, 1, 1.5) ellipsoid: an open cup whose apex is the
    /// minimum-z vertex, loosely shaped like a ventricle.
    VentricleShell,
}

/// Triangulates `kind` by subdividing an icosahedron `subdivisions` times.
///
/// A closed surface at level `s` has `10·4^s + 2` vertices and `20·4^s` faces.
pub fn synth_mesh(kind: MeshKind, subdivisions: u32) -> Result<Mesh> {
    let (mut verts, mut faces) = icosphere(subdivisions);
    match kind {
        MeshKind::Sphere => {}
        MeshKind::Ellipsoid => scale(&mut verts, [1.0, 0.8, 1.5]),
        MeshKind::VentricleShell => {
            scale(&mut verts, [1.0, 1.0, 1.5]);
            let keep: Vec<bool> = verts.iter().map(|v| v[2] <= 1e-9).collect();
            faces.retain(|f| f.iter().all(|&i| keep[i]));
            (verts, faces) = compact(&verts, &faces);
        }
    }
    if verts.len() < 12 {
        return Err(Error::InvalidMesh(format!(
            "resolution too coarse: {} vertices (need at least 12)",
            verts.len()
        )));
    }
    Mesh::new(verts, faces)
}

fn scale(verts: &mut [Point], axes: [f64; 3]) {
    for v in verts {
        for k in 0..3 {
            v[k] *= axes[k];
        }
    }
}

fn compact(verts: &[Point], faces: &[[usize; 3]]) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut remap = vec![usize::MAX; verts.len()];
    let mut out = Vec::new();
    for f in faces {
        for &i in f {
            if remap[i] == usize::MAX {
                remap[i] = out.len();
                out.push(verts[i]);
            }
        }
    }
    let faces = faces.iter().map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]]).collect();
    (out, faces)
}

fn normalize(p: Point) -> Point {
    let n = libm::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    [p[0] / n, p[1] / n, p[2] / n]
}

fn icosphere(subdivisions: u32) -> (Vec<Point>, Vec<[usize; 3]>) {
    // Pole-aligned icosahedron: apex at (0,0,-1), two staggered rings of five.
    let h = 1.0 / libm::sqrt(5.0);
    let r = 2.0 * h;
    let mut verts: Vec<Point> = vec![[0.0, 0.0, 1.0]];
    for k in 0..5 {
        let a = 2.0 * core::f64::consts::PI * k as f64 / 5.0;
        verts.push([r * libm::cos(a), r * libm::sin(a), h]);
    }
    for k in 0..5 {
        let a = 2.0 * core::f64::consts::PI * (k as f64 + 0.5) / 5.0;
        verts.push([r * libm::cos(a), r * libm::sin(a), -h]);
    }
    verts.push([0.0, 0.0, -1.0]);
    let mut faces: Vec<[usize; 3]> = Vec::with_capacity(20);
    for k in 0..5 {
        let (u0, u1) = (1 + k, 1 + (k + 1) % 5);
        let (l0, l1) = (6 + k, 6 + (k + 1) % 5);
        faces.push([0, u0, u1]);
        faces.push([u0, l0, u1]);
        faces.push([u1, l0, l1]);
        faces.push([11, l1, l0]);
    }
    for _ in 0..subdivisions {
        let mut cache: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let (pa, pb) = (verts[a], verts[b]);
                verts.push(normalize([
                    (pa[0] + pb[0]) / 2.0,
                    (pa[1] + pb[1]) / 2.0,
                    (pa[2] + pb[2]) / 2.0,
                ]));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}
