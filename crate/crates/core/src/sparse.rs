//! Block-sparse normal equations and a simplicial sparse Cholesky for the
//! damped Gauss-Newton systems `(J^T J + lambda D) delta = -J^T r`.
//!
//! Variables are grouped into 12-wide node blocks plus one trailing 6-wide
//! pose block; only block pairs touched by a common residual row are
//! stored. Nodes come out of grid construction in spatial order, which
//! keeps fill-in of the factor low, and the densely coupled pose block is
//! eliminated last.

use std::collections::HashMap;

use crate::energy::Residuals;

/// `J^T J` in upper-block-triangular form plus the gradient `J^T r`.
pub(crate) struct NormalEquations {
    node_count: usize,
    dim: usize,
    /// Upper block triangle: key (block row, block col) with row <= col,
    /// dense row-major blocks.
    blocks: HashMap<(u32, u32), Vec<f64>>,
    pub gradient: Vec<f64>,
}

impl NormalEquations {
    fn block_width(&self, b: usize) -> usize {
        if b == self.node_count {
            6
        } else {
            12
        }
    }

    fn block_offset(&self, b: usize) -> usize {
        12 * b.min(self.node_count)
    }

    pub fn from_residuals(node_count: usize, res: &Residuals) -> Self {
        let dim = 12 * node_count + 6;
        let mut ne = NormalEquations {
            node_count,
            dim,
            blocks: HashMap::new(),
            gradient: vec![0.0; dim],
        };
        for (row, &value) in res.rows.iter().zip(&res.values) {
            for a in row {
                let off = ne.block_offset(a.block);
                for i in 0..a.width {
                    ne.gradient[off + i] += a.values[i] * value;
                }
                for b in row {
                    if b.block < a.block {
                        continue;
                    }
                    if b.block == a.block && !std::ptr::eq(a, b) {
                        // blocks within a row are disjoint, so equal ids only
                        // occur for the self pair handled below
                        continue;
                    }
                    let (lo, hi, first, second) = (a.block as u32, b.block as u32, a, b);
                    let entry = ne
                        .blocks
                        .entry((lo, hi))
                        .or_insert_with(|| vec![0.0; first.width * second.width]);
                    for i in 0..first.width {
                        let vi = first.values[i];
                        if vi == 0.0 {
                            continue;
                        }
                        let base = i * second.width;
                        for j in 0..second.width {
                            entry[base + j] += vi * second.values[j];
                        }
                    }
                }
                // pairs with a.block > b.block are accumulated when the loop
                // reaches them with the roles swapped
            }
        }
        ne
    }

    /// Diagonal of `J^T J`.
    fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.dim];
        for (&(r, c), block) in &self.blocks {
            if r != c {
                continue;
            }
            let w = self.block_width(r as usize);
            let off = self.block_offset(r as usize);
            for i in 0..w {
                diag[off + i] = block[i * w + i];
            }
        }
        diag
    }

    /// Lower triangle of `J^T J + lambda * D` in compressed sparse column
    /// form, with `D = diag(max(diag(J^T J), min_diag))`.
    pub fn to_csc(&self, lambda: f64, min_diag: f64) -> Csc {
        let diag = self.diagonal();
        // block columns coupled above the diagonal, per block row
        let mut upper: Vec<Vec<u32>> = vec![Vec::new(); self.node_count + 1];
        for &(r, c) in self.blocks.keys() {
            if r != c {
                upper[r as usize].push(c);
            }
        }
        for list in &mut upper {
            list.sort_unstable();
        }
        let mut col_ptr = Vec::with_capacity(self.dim + 1);
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        col_ptr.push(0);
        for b in 0..=self.node_count {
            let w = self.block_width(b);
            let off = self.block_offset(b);
            let diag_block = self.blocks.get(&(b as u32, b as u32));
            for c in 0..w {
                if let Some(block) = diag_block {
                    for r in c..w {
                        let mut v = block[r * w + c];
                        if r == c {
                            v += lambda * diag[off + c].max(min_diag);
                        }
                        rows.push((off + r) as u32);
                        vals.push(v);
                    }
                } else {
                    // untouched block keeps a damped zero diagonal
                    rows.push((off + c) as u32);
                    vals.push(lambda * min_diag);
                }
                for &bc in &upper[b] {
                    let other = &self.blocks[&(b as u32, bc)];
                    let wj = self.block_width(bc as usize);
                    let obj = self.block_offset(bc as usize);
                    let base = c * wj;
                    for j in 0..wj {
                        rows.push((obj + j) as u32);
                        vals.push(other[base + j]);
                    }
                }
                col_ptr.push(rows.len());
            }
        }
        Csc { n: self.dim, col_ptr, rows, vals }
    }
}

/// Lower-triangular compressed sparse column matrix (the upper triangle is
/// implied by symmetry).
pub(crate) struct Csc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub rows: Vec<u32>,
    pub vals: Vec<f64>,
}

impl Csc {
    /// Symmetric matrix-vector product from the stored lower triangle.
    pub fn mul_symmetric(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let xj = x[j];
            for idx in self.col_ptr[j]..self.col_ptr[j + 1] {
                let r = self.rows[idx] as usize;
                let v = self.vals[idx];
                y[r] += v * xj;
                if r != j {
                    y[j] += v * x[r];
                }
            }
        }
        y
    }
}

pub(crate) struct CholeskyFactor {
    n: usize,
    /// Per-column entries sorted by row; the first entry is the diagonal.
    cols: Vec<Vec<(u32, f64)>>,
}

/// Left-looking simplicial Cholesky of a symmetric positive definite
/// matrix given by its lower triangle. Returns `None` when a pivot is not
/// strictly positive.
pub(crate) fn cholesky(a: &Csc) -> Option<CholeskyFactor> {
    let n = a.n;
    let mut cols: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n);
    // columns k < j with L[j, k] != 0, as (k, position of row j in column k)
    let mut row_lists: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    let mut x = vec![0.0; n];
    let mut stamp = vec![usize::MAX; n];
    let mut pattern: Vec<u32> = Vec::new();
    for j in 0..n {
        pattern.clear();
        for idx in a.col_ptr[j]..a.col_ptr[j + 1] {
            let r = a.rows[idx] as usize;
            x[r] = a.vals[idx];
            stamp[r] = j;
            pattern.push(r as u32);
        }
        if stamp[j] != j {
            x[j] = 0.0;
            stamp[j] = j;
            pattern.push(j as u32);
        }
        for &(k, pos) in &row_lists[j] {
            let col = &cols[k as usize];
            let ljk = col[pos as usize].1;
            for &(r, v) in &col[pos as usize..] {
                let r = r as usize;
                if stamp[r] != j {
                    stamp[r] = j;
                    x[r] = 0.0;
                    pattern.push(r as u32);
                }
                x[r] -= ljk * v;
            }
        }
        let pivot = x[j];
        if !(pivot > 1e-300) {
            return None;
        }
        let pivot = pivot.sqrt();
        pattern.sort_unstable();
        let mut col = Vec::with_capacity(pattern.len());
        for &r in &pattern {
            let v = if r as usize == j { pivot } else { x[r as usize] / pivot };
            col.push((r, v));
        }
        for (pos, &(r, _)) in col.iter().enumerate().skip(1) {
            row_lists[r as usize].push((j as u32, pos as u32));
        }
        cols.push(col);
    }
    Some(CholeskyFactor { n, cols })
}

impl CholeskyFactor {
    /// Solve `L L^T x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        for j in 0..self.n {
            let col = &self.cols[j];
            let yj = y[j] / col[0].1;
            y[j] = yj;
            for &(r, v) in &col[1..] {
                y[r as usize] -= v * yj;
            }
        }
        for j in (0..self.n).rev() {
            let col = &self.cols[j];
            let mut sum = y[j];
            for &(r, v) in &col[1..] {
                sum -= v * y[r as usize];
            }
            y[j] = sum / col[0].1;
        }
        y
    }
}
