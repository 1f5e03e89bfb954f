//! B-spline kernel graph convolution and the layers built from it.
//!
//! The kernel `g_Θ(w) = Σ_p θ_p B_p(w)` is evaluated on edge
//! pseudo-coordinates `w ∈ [0,1]³`. Because the basis values depend only on
//! the (fixed) graph, they are folded into a [`SparseOp`] once per level:
//! applying it scatters each neighbor's features into its basis slots, and a
//! single dense product with `Θ` (shape `|P|·M_in × M_out`) finishes the
//! convolution.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mesh::MeshGraph;
use crate::params::{ParamId, ParamStore};
use crate::sparse::SparseOp;
use crate::tape::{Tape, Var};

/// Shape of the tensor-product spline basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub degree: usize,
    pub size: [usize; 3],
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            degree: 1,
            size: [3, 3, 3],
        }
    }
}

impl KernelSpec {
    /// `|P| = k₁·k₂·k₃`.
    pub fn basis_count(&self) -> usize {
        self.size.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.degree != 1 {
            return Err(invalid(format!("unsupported spline degree {}", self.degree)));
        }
        if self.size.iter().any(|&k| k < 2) {
            return Err(invalid(format!("kernel size {:?} needs at least 2 knots per axis", self.size)));
        }
        Ok(())
    }

    /// Flat basis index of per-axis indices.
    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.size[1] + p[1]) * self.size[2] + p[2]
    }
}

/// The `(m+1)³ = 8` tensor-product basis values touching `w`, as
/// `(p, B_p(w))`. Some values may be exactly zero when `w` sits on a knot.
pub fn bspline_basis(w: [f64; 3], kernel: &KernelSpec) -> Result<Vec<(usize, f64)>> {
    kernel.validate()?;
    if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfUnitCube(w));
    }
    // degree-1 hats on k equidistant knots: t_i = i/(k-1)
    let mut axes = [[(0usize, 0.0f64); 2]; 3];
    for d in 0..3 {
        let span = (kernel.size[d] - 1) as f64;
        let pos = w[d] * span;
        let i = (libm::floor(pos) as usize).min(kernel.size[d] - 2);
        let f = pos - i as f64;
        axes[d] = [(i, 1.0 - f), (i + 1, f)];
    }
    let mut out = Vec::with_capacity(8);
    for &(i, a) in &axes[0] {
        for &(j, b) in &axes[1] {
            for &(k, c) in &axes[2] {
                out.push((kernel.index([i, j, k]), a * b * c));
            }
        }
    }
    Ok(out)
}

/// Mean-aggregation basis operator of a graph: slot `p` of row `i` collects
/// `B_p(w(i,j))/|N(i)|` times the features of each neighbor `j`.
pub fn basis_operator(graph: &MeshGraph, kernel: &KernelSpec) -> Result<SparseOp> {
    let n = graph.node_count();
    let mut entries = Vec::with_capacity(graph.edge_count() * 8);
    for i in 0..n {
        let nb = graph.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for (k, &j) in nb.iter().enumerate() {
            for (p, b) in bspline_basis(graph.pseudo_coords(i)[k], kernel)? {
                if b != 0.0 {
                    entries.push((i, j, p, b * inv));
                }
            }
        }
    }
    Ok(SparseOp::from_entries(n, n, kernel.basis_count(), entries))
}

/// One spline convolution: `X' = mean_j(x_j·g_Θ(w(i,j))) + X·R + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: KernelSpec,
    /// `|P|·M_in × M_out`, row `p·M_in + c`.
    pub theta: ParamId,
    pub root: Option<ParamId>,
    pub bias: ParamId,
}

impl SplineConv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: KernelSpec,
        root_weight: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        kernel.validate()?;
        let p = kernel.basis_count();
        let s = 1.0 / libm::sqrt((in_channels * p) as f64);
        let theta = store.insert_uniform(&join(prefix, "theta"), &[p * in_channels, out_channels], s, rng);
        let root = root_weight.then(|| store.insert_uniform(&join(prefix, "root"), &[in_channels, out_channels], s, rng));
        let bias = store.insert(&join(prefix, "bias"), crate::Tensor::zeros(&[out_channels]));
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            theta,
            root,
            bias,
        })
    }

    /// `x` stacks any number of samples of `basis.cols()` nodes as rows of
    /// `in_channels` values.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, basis: &Arc<SparseOp>, x: Var, trainable: bool) -> Result<Var> {
        let shape = tape.try_value(x)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "spline_conv",
                lhs: shape,
                rhs: alloc::vec![basis.cols(), self.in_channels],
            });
        }
        if basis.slots() != self.kernel.basis_count() {
            return Err(invalid("basis operator does not match kernel size"));
        }
        let theta = tape.param(store, self.theta, trainable);
        let mut out = tape.sparse_kernel(basis, x, theta)?;
        if let Some(root) = self.root {
            let r = tape.param(store, root, trainable);
            let xr = tape.matmul(x, r)?;
            out = tape.add(out, xr)?;
        }
        let b = tape.param(store, self.bias, trainable);
        tape.add_row(out, b)
    }
}

/// Residual block `X' = X + ELU(SplineConv(X))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBlock {
    pub conv: SplineConv,
}

impl SpatialBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, kernel: KernelSpec, root_weight: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: SplineConv::new(store, prefix, channels, channels, kernel, root_weight, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, basis: &Arc<SparseOp>, x: Var, trainable: bool) -> Result<Var> {
        let c = self.conv.forward(tape, store, basis, x, trainable)?;
        let c = tape.elu(c)?;
        tape.add(x, c)
    }
}

/// Per-node affine layer (a kernel-size-1 convolution), optionally followed by ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: bool,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, out_channels: usize, activation: bool, rng: &mut impl Rng) -> Self {
        let s = 1.0 / libm::sqrt(in_channels as f64);
        let weight = store.insert_uniform(&join(prefix, "weight"), &[in_channels, out_channels], s, rng);
        let bias = store.insert(&join(prefix, "bias"), crate::Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = tape.param(store, self.weight, trainable);
        let b = tape.param(store, self.bias, trainable);
        let y = tape.matmul(x, w)?;
        let y = tape.add_row(y, b)?;
        if self.activation {
            tape.elu(y)
        } else {
            Ok(y)
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_graph, synth_mesh, MeshKind};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corner_is_a_single_basis() {
        let k = KernelSpec::default();
        let nz: Vec<_> = bspline_basis([0.0; 3], &k).unwrap().into_iter().filter(|e| e.1 != 0.0).collect();
        assert_eq!(nz, alloc::vec![(0, 1.0)]);
        let nz: Vec<_> = bspline_basis([1.0; 3], &k).unwrap().into_iter().filter(|e| e.1 != 0.0).collect();
        assert_eq!(nz, alloc::vec![(26, 1.0)]);
    }

    #[test]
    fn quarter_point_straddles_first_interval() {
        let k = KernelSpec::default();
        let b = bspline_basis([0.25, 0.5, 0.5], &k).unwrap();
        assert_eq!(b.len(), 8);
        assert!((b.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-15);
        let nz: Vec<_> = b.into_iter().filter(|e| e.1 != 0.0).collect();
        // axis 0 splits 0.5/0.5 between knots 0 and 1; axes 1, 2 sit on knot 1
        assert_eq!(nz, alloc::vec![(k.index([0, 1, 1]), 0.5), (k.index([1, 1, 1]), 0.5)]);
    }

    #[test]
    fn outside_unit_cube_is_error() {
        let k = KernelSpec::default();
        assert!(matches!(bspline_basis([0.5, 1.01, 0.5], &k), Err(Error::OutOfUnitCube(_))));
        let bad = KernelSpec { degree: 2, ..k };
        assert!(bspline_basis([0.5; 3], &bad).is_err());
    }

    #[test]
    fn zero_theta_identity_root_passes_input_through() {
        let g = build_graph(&synth_mesh(MeshKind::Sphere, 1).unwrap()).unwrap();
        let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = SplineConv::new(&mut store, "c", 3, 3, KernelSpec::default(), true, &mut rng).unwrap();
        store.get_mut(conv.theta).data_mut().fill(0.0);
        store.insert("c.root", Tensor::eye(3));
        let n = g.node_count();
        let x = Tensor::new(&[n, 3], (0..n * 3).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &store, &basis, xv, false).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn param_names_are_prefixed() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        SplineConv::new(&mut store, "enc.block0", 2, 4, KernelSpec::default(), false, &mut rng).unwrap();
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, ["enc.block0.theta", "enc.block0.bias"]);
        assert_eq!(store.by_name("enc.block0.theta").unwrap().shape(), &[54, 4]);
    }
}
