//! On-disk formats: KFCK parameter checkpoints, STDF trajectory containers
//! with JSON sidecars, and the plain-text mesh format. Every writer goes
//! through [`write_atomic`].

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use tkgcn_core::mesh::{Mesh, Point};
use tkgcn_core::{ParamStore, Tensor};

use crate::error::{LabError, Result};

const KFCK_MAGIC: &[u8; 4] = b"KFCK";
const KFCK_VERSION: u32 = 1;
const STDF_MAGIC: &[u8; 4] = b"STDF";
const STDF_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| LabError::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(LabError::io(path, e));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LabError::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| LabError::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(LabError::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| LabError::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes every parameter as `name → shape + f64 payload`.
pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.total_values() * 8);
    out.extend_from_slice(KFCK_MAGIC);
    out.extend_from_slice(&KFCK_VERSION.to_le_bytes());
    push_u32(&mut out, store.len())?;
    for (_, name, t) in store.iter() {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0, what: "KFCK" };
    if r.take(4)? != KFCK_MAGIC {
        return Err(LabError::Format("not a KFCK checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != KFCK_VERSION {
        return Err(LabError::Format(format!("unsupported KFCK version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| LabError::Format("KFCK: parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let size = size.ok_or_else(|| LabError::Format("KFCK: shape overflow".into()))?;
        let data = r.f64s(size)?;
        if store.id(name).is_some() {
            return Err(LabError::Format(format!("KFCK: duplicate parameter `{name}`")));
        }
        store.insert(name, Tensor::new(&shape, data)?);
    }
    r.finish()?;
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&read_file(path)?)
}

/// A trajectory of `frames` snapshots over `nodes` nodes with `features`
/// values each. In memory it is frame-major: `data[(t·nodes + i)·features + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub nodes: usize,
    pub frames: usize,
    pub features: usize,
    pub data: Vec<f64>,
}

impl Trajectory {
    pub fn new(nodes: usize, frames: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if nodes * frames * features != data.len() {
            return Err(LabError::Invalid(format!(
                "trajectory of {nodes} nodes × {frames} frames × {features} features cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            nodes,
            frames,
            features,
            data,
        })
    }

    /// Values per frame.
    pub fn width(&self) -> usize {
        self.nodes * self.features
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.width()..(t + 1) * self.width()]
    }
}

/// STDF bytes; the payload is node-major (`[(i·T + t)·F + f]`).
pub fn encode_stdf(traj: &Trajectory) -> Result<Vec<u8>> {
    let (n, t, f) = (traj.nodes, traj.frames, traj.features);
    let mut out = Vec::with_capacity(20 + traj.data.len() * 8);
    out.extend_from_slice(STDF_MAGIC);
    out.extend_from_slice(&STDF_VERSION.to_le_bytes());
    push_u32(&mut out, n)?;
    push_u32(&mut out, t)?;
    push_u32(&mut out, f)?;
    for i in 0..n {
        for s in 0..t {
            for c in 0..f {
                out.extend_from_slice(&traj.data[(s * n + i) * f + c].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_stdf(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader { buf: bytes, pos: 0, what: "STDF" };
    if r.take(4)? != STDF_MAGIC {
        return Err(LabError::Format("not an STDF file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != STDF_VERSION {
        return Err(LabError::Format(format!("unsupported STDF version {version}")));
    }
    let (n, t, f) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if f == 0 {
        return Err(LabError::Format("STDF: feature count must be positive".into()));
    }
    let total = n.checked_mul(t).and_then(|v| v.checked_mul(f)).ok_or_else(|| LabError::Format("STDF: size overflow".into()))?;
    let payload = r.f64s(total)?;
    r.finish()?;
    let mut data = vec![0.0; total];
    for i in 0..n {
        for s in 0..t {
            for c in 0..f {
                data[(s * n + i) * f + c] = payload[(i * t + s) * f + c];
            }
        }
    }
    Trajectory::new(n, t, f, data)
}

/// Path of the JSON metadata sidecar next to an STDF file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the container and its sidecar.
pub fn save_stdf(path: &Path, traj: &Trajectory, meta: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_stdf(traj)?)?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)
}

/// Reads a container and, when present, its sidecar (`Null` otherwise).
pub fn load_stdf(path: &Path) -> Result<(Trajectory, serde_json::Value)> {
    let traj = decode_stdf(&read_file(path)?)?;
    let side = sidecar_path(path);
    let meta = match fs::read(&side) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => serde_json::Value::Null,
        Err(e) => return Err(LabError::io(&side, e)),
    };
    Ok((traj, meta))
}

/// `N F`, then `N` lines `x y z`, then `F` lines `i j k` (0-based).
pub fn format_mesh(mesh: &Mesh) -> String {
    let mut s = format!("{} {}\n", mesh.vertices().len(), mesh.faces().len());
    for v in mesh.vertices() {
        s.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        s.push_str(&format!("{} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let bad = |line: usize, msg: &str| LabError::Format(format!("mesh line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| LabError::Format("mesh file is empty".into()))?;
    let counts: Vec<usize> = header.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(hl, "expected `N F`"))?;
    let [n, f] = counts[..] else {
        return Err(bad(hl, "expected `N F`"));
    };
    let mut vertices: Vec<Point> = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = lines.next().ok_or_else(|| LabError::Format(format!("mesh: expected {n} vertex lines")))?;
        let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(ln, "expected `x y z`"))?;
        let [x, y, z] = v[..] else {
            return Err(bad(ln, "expected `x y z`"));
        };
        vertices.push([x, y, z]);
    }
    let mut faces = Vec::with_capacity(f);
    for _ in 0..f {
        let (ln, l) = lines.next().ok_or_else(|| LabError::Format(format!("mesh: expected {f} face lines")))?;
        let v: Vec<usize> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(ln, "expected `i j k`"))?;
        let [i, j, k] = v[..] else {
            return Err(bad(ln, "expected `i j k`"));
        };
        faces.push([i, j, k]);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(bad(ln, "unexpected trailing content"));
    }
    Ok(Mesh::new(vertices, faces)?)
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_mesh(&text)
}

pub fn save_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    write_atomic(path, format_mesh(mesh).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.1, f64::MIN_POSITIVE, 6.0]).unwrap());
        s.insert("b", Tensor::scalar(7.25));
        let back = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.by_name("a.weight"), s.by_name("a.weight"));
        assert_eq!(back.by_name("b").unwrap().data(), &[7.25]);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3]));
        let bytes = encode_checkpoint(&s).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn stdf_is_node_major_on_disk() {
        // 2 nodes, 3 frames, frame-major in memory
        let t = Trajectory::new(2, 3, 1, vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0]).unwrap();
        let bytes = encode_stdf(&t).unwrap();
        let payload: Vec<f64> = bytes[20..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(payload, [0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(decode_stdf(&bytes).unwrap(), t);
    }

    #[test]
    fn mesh_text_round_trip_and_errors() {
        let text = "3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 2\n";
        let m = parse_mesh(text).unwrap();
        assert_eq!(format_mesh(&m), text);
        assert!(parse_mesh("3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 5\n").is_err());
        assert!(parse_mesh("2 0\n0 0 0\n").is_err());
        assert!(parse_mesh("1 0\n0 0\n").is_err());
    }
}
