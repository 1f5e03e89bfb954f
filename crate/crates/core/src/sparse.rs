//! Slotted sparse linear operators.
//!
//! A [`SparseOp`] maps node features `X (cols × C)` to `Y (rows × slots·C)`
//! with `Y[r, s·C + c] = Σ w · X[col, c]` over its entries. With one slot
//! this is an ordinary sparse matrix (pooling, unpooling, graph Laplacian);
//! with `slots = |P|` it scatters neighbor features into B-spline basis
//! slots for spline convolution. Inputs may stack several samples along the
//! row axis; the operator is applied block-diagonally.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    rows: usize,
    cols: usize,
    slots: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    slot: Vec<u32>,
    weight: Vec<f64>,
    /// Entry ranges sharing one `(row, col)` pair.
    edge_start: Vec<usize>,
}

impl SparseOp {
    /// Builds from unordered `(row, col, slot, weight)` triplets.
    /// Duplicates are kept and act additively.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        slots: usize,
        mut entries: Vec<(usize, usize, usize, f64)>,
    ) -> Self {
        entries.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let mut row_ptr = vec![0; rows + 1];
        for e in &entries {
            debug_assert!(e.0 < rows && e.1 < cols && e.2 < slots);
            row_ptr[e.0 + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut edge_start = Vec::new();
        for (e, entry) in entries.iter().enumerate() {
            if e == 0 || (entries[e - 1].0, entries[e - 1].1) != (entry.0, entry.1) {
                edge_start.push(e);
            }
        }
        edge_start.push(entries.len());
        Self {
            edge_start,
            rows,
            cols,
            slots,
            row_ptr,
            col: entries.iter().map(|e| e.1 as u32).collect(),
            slot: entries.iter().map(|e| e.2 as u32).collect(),
            weight: entries.iter().map(|e| e.3).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn nnz(&self) -> usize {
        self.weight.len()
    }

    /// Entries of row `r` as `(col, slot, weight)`.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        span.map(move |e| (self.col[e] as usize, self.slot[e] as usize, self.weight[e]))
    }

    /// `x` holds `batch · cols` rows of `channels` values.
    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let batch = x.len() / (self.cols * channels).max(1);
        let width = self.slots * channels;
        let mut out = vec![0.0; batch * self.rows * width];
        for b in 0..batch {
            let xb = &x[b * self.cols * channels..(b + 1) * self.cols * channels];
            let ob = &mut out[b * self.rows * width..(b + 1) * self.rows * width];
            for r in 0..self.rows {
                let orow = &mut ob[r * width..(r + 1) * width];
                for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let c0 = self.col[e] as usize * channels;
                    let s0 = self.slot[e] as usize * channels;
                    let w = self.weight[e];
                    for c in 0..channels {
                        orow[s0 + c] += w * xb[c0 + c];
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): accumulates `Sᵀ g` into `dx`.
    pub fn apply_transpose_into(&self, g: &[f64], dx: &mut [f64], channels: usize) {
        let width = self.slots * channels;
        let batch = g.len() / (self.rows * width).max(1);
        for b in 0..batch {
            let gb = &g[b * self.rows * width..(b + 1) * self.rows * width];
            let db = &mut dx[b * self.cols * channels..(b + 1) * self.cols * channels];
            for r in 0..self.rows {
                let grow = &gb[r * width..(r + 1) * width];
                for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let c0 = self.col[e] as usize * channels;
                    let s0 = self.slot[e] as usize * channels;
                    let w = self.weight[e];
                    for c in 0..channels {
                        db[c0 + c] += w * grow[s0 + c];
                    }
                }
            }
        }
    }

    /// Number of distinct `(row, col)` pairs.
    pub fn edge_count(&self) -> usize {
        self.edge_start.len() - 1
    }

    /// Per-pair kernels `W_e = Σ w·θ_slot`, each `cin × cout`, where `theta`
    /// stacks `slots` blocks of `cin × cout`.
    fn edge_kernels(&self, theta: &[f64], cin: usize, cout: usize) -> Vec<f64> {
        let block = cin * cout;
        let mut k = vec![0.0; self.edge_count() * block];
        for e in 0..self.edge_count() {
            let ke = &mut k[e * block..(e + 1) * block];
            for n in self.edge_start[e]..self.edge_start[e + 1] {
                let s = self.slot[n] as usize;
                let w = self.weight[n];
                for (d, t) in ke.iter_mut().zip(&theta[s * block..(s + 1) * block]) {
                    *d += w * t;
                }
            }
        }
        k
    }

    fn edge_col(&self, e: usize) -> usize {
        self.col[self.edge_start[e]] as usize
    }

    /// Contracts the slotted output with per-slot weights:
    /// `Y[r] = Σ_entries w · X[col] · θ_slot`, i.e. `apply(X) · Θ` without
    /// materializing the slotted intermediate. `x` holds `batch · cols` rows of
    /// `cin` values; the result holds `batch · rows` rows of `cout`.
    pub fn kernel_apply(&self, x: &[f64], theta: &[f64], cin: usize, cout: usize) -> Vec<f64> {
        let k = self.edge_kernels(theta, cin, cout);
        let batch = x.len() / (self.cols * cin).max(1);
        let mut out = vec![0.0; batch * self.rows * cout];
        let block = cin * cout;
        for b in 0..batch {
            let xb = &x[b * self.cols * cin..(b + 1) * self.cols * cin];
            let ob = &mut out[b * self.rows * cout..(b + 1) * self.rows * cout];
            let mut e = 0;
            for r in 0..self.rows {
                let orow = &mut ob[r * cout..(r + 1) * cout];
                while e < self.edge_count() && self.edge_start[e] < self.row_ptr[r + 1] {
                    let j = self.edge_col(e);
                    let xj = &xb[j * cin..(j + 1) * cin];
                    vec_mat_acc(orow, xj, &k[e * block..(e + 1) * block]);
                    e += 1;
                }
            }
        }
        out
    }

    /// Gradients of [`kernel_apply`](Self::kernel_apply) given the output
    /// gradient `g`; accumulates into `dx` and/or `dtheta`.
    pub fn kernel_backward(
        &self,
        x: &[f64],
        theta: &[f64],
        g: &[f64],
        cin: usize,
        cout: usize,
        dx: Option<&mut [f64]>,
        dtheta: Option<&mut [f64]>,
    ) {
        let block = cin * cout;
        let batch = x.len() / (self.cols * cin).max(1);
        if let Some(dx) = dx {
            let k = self.edge_kernels(theta, cin, cout);
            // transposed per-edge kernels turn the reduction into row updates
            let mut kt = vec![0.0; k.len()];
            for (src, dst) in k.chunks_exact(block).zip(kt.chunks_exact_mut(block)) {
                for c in 0..cin {
                    for o in 0..cout {
                        dst[o * cin + c] = src[c * cout + o];
                    }
                }
            }
            for b in 0..batch {
                let gb = &g[b * self.rows * cout..(b + 1) * self.rows * cout];
                let db = &mut dx[b * self.cols * cin..(b + 1) * self.cols * cin];
                let mut e = 0;
                for r in 0..self.rows {
                    let grow = &gb[r * cout..(r + 1) * cout];
                    while e < self.edge_count() && self.edge_start[e] < self.row_ptr[r + 1] {
                        let j = self.edge_col(e);
                        vec_mat_acc(&mut db[j * cin..(j + 1) * cin], grow, &kt[e * block..(e + 1) * block]);
                        e += 1;
                    }
                }
            }
        }
        if let Some(dtheta) = dtheta {
            // G_e = Σ_b x_jᵀ g_r, then scatter to slots
            let mut ge = vec![0.0; self.edge_count() * block];
            for b in 0..batch {
                let gb = &g[b * self.rows * cout..(b + 1) * self.rows * cout];
                let xb = &x[b * self.cols * cin..(b + 1) * self.cols * cin];
                let mut e = 0;
                for r in 0..self.rows {
                    let grow = &gb[r * cout..(r + 1) * cout];
                    while e < self.edge_count() && self.edge_start[e] < self.row_ptr[r + 1] {
                        let j = self.edge_col(e);
                        outer_acc(&mut ge[e * block..(e + 1) * block], &xb[j * cin..(j + 1) * cin], grow);
                        e += 1;
                    }
                }
            }
            for e in 0..self.edge_count() {
                let acc = &ge[e * block..(e + 1) * block];
                for n in self.edge_start[e]..self.edge_start[e + 1] {
                    let s = self.slot[n] as usize;
                    let w = self.weight[n];
                    for (d, a) in dtheta[s * block..(s + 1) * block].iter_mut().zip(acc) {
                        *d += w * a;
                    }
                }
            }
        }
    }
}

/// `out += x · K` with `K` stored row-major as `x.len() × out.len()`.
fn vec_mat_acc(out: &mut [f64], x: &[f64], k: &[f64]) {
    match (x.len(), out.len()) {
        (8, 8) => vec_mat_fixed::<8, 8>(out.try_into().unwrap(), x.try_into().unwrap(), k),
        (4, 4) => vec_mat_fixed::<4, 4>(out.try_into().unwrap(), x.try_into().unwrap(), k),
        _ => {
            for (&xv, row) in x.iter().zip(k.chunks_exact(out.len())) {
                for (o, &kv) in out.iter_mut().zip(row) {
                    *o += xv * kv;
                }
            }
        }
    }
}

#[inline(always)]
fn vec_mat_fixed<const I: usize, const O: usize>(out: &mut [f64; O], x: &[f64; I], k: &[f64]) {
    let k: &[f64] = &k[..I * O];
    let mut acc = *out;
    for c in 0..I {
        let row: &[f64; O] = k[c * O..(c + 1) * O].try_into().unwrap();
        for o in 0..O {
            acc[o] += x[c] * row[o];
        }
    }
    *out = acc;
}

/// `acc += xᵀ g` for row vectors `x` and `g`, `acc` row-major `x.len() × g.len()`.
fn outer_acc(acc: &mut [f64], x: &[f64], g: &[f64]) {
    match (x.len(), g.len()) {
        (8, 8) => outer_fixed::<8, 8>(acc, x.try_into().unwrap(), g.try_into().unwrap()),
        (4, 4) => outer_fixed::<4, 4>(acc, x.try_into().unwrap(), g.try_into().unwrap()),
        _ => {
            for (&xv, row) in x.iter().zip(acc.chunks_exact_mut(g.len())) {
                for (a, &gv) in row.iter_mut().zip(g) {
                    *a += xv * gv;
                }
            }
        }
    }
}

#[inline(always)]
fn outer_fixed<const I: usize, const O: usize>(acc: &mut [f64], x: &[f64; I], g: &[f64; O]) {
    let acc: &mut [f64] = &mut acc[..I * O];
    for c in 0..I {
        let row: &mut [f64; O] = (&mut acc[c * O..(c + 1) * O]).try_into().unwrap();
        for o in 0..O {
            row[o] += x[c] * g[o];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_is_adjoint() {
        let op = SparseOp::from_entries(
            2,
            3,
            2,
            vec![(0, 1, 0, 0.5), (0, 2, 1, 2.0), (1, 0, 1, -1.0), (1, 1, 0, 3.0)],
        );
        let channels = 2;
        let x: Vec<f64> = (0..2 * 3 * channels).map(|i| (i as f64).sin()).collect();
        let y = op.apply(&x, channels);
        let g: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut dx = vec![0.0; x.len()];
        op.apply_transpose_into(&g, &mut dx, channels);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn kernel_apply_matches_slotted_product() {
        let op = SparseOp::from_entries(
            3,
            3,
            2,
            vec![(0, 1, 0, 0.5), (0, 1, 1, 0.25), (0, 2, 1, 2.0), (1, 0, 1, -1.0), (2, 2, 0, 3.0), (2, 0, 0, 1.5)],
        );
        let (cin, cout, batch) = (2, 3, 2);
        let x: Vec<f64> = (0..batch * 3 * cin).map(|i| (i as f64 * 1.3).sin()).collect();
        let theta: Vec<f64> = (0..2 * cin * cout).map(|i| (i as f64 * 0.9).cos()).collect();
        let u = op.apply(&x, cin);
        let mut expected = vec![0.0; batch * 3 * cout];
        crate::tensor::matmul_nn(&u, &theta, &mut expected, batch * 3, 2 * cin, cout);
        let y = op.kernel_apply(&x, &theta, cin, cout);
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        // adjoint identities for both gradients
        let g: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.4).sin()).collect();
        let mut dx = vec![0.0; x.len()];
        let mut dt = vec![0.0; theta.len()];
        op.kernel_backward(&x, &theta, &g, cin, cout, Some(&mut dx), Some(&mut dt));
        let gy: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let xdx: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let tdt: f64 = theta.iter().zip(&dt).map(|(a, b)| a * b).sum();
        assert!((gy - xdx).abs() < 1e-12 && (gy - tdt).abs() < 1e-12);
    }
}
