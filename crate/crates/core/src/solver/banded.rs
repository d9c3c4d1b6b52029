//! Symmetric block-banded normal equations with a blocked envelope
//! Cholesky factorization and selected inversion inside the band.

use nalgebra::DMatrix;

use crate::error::SolverError;
use crate::prior::{Mat24, Vec24};

pub const BLOCK: usize = 24;
const BLOCK2: usize = BLOCK * BLOCK;

/// Lower block band. Block row `i` stores blocks `(i, i−bw..=i)` as one
/// row-major `24 × 24·(bw+1)` panel; slots left of column 0 stay zero.
#[derive(Clone, Debug)]
struct BlockBand {
    n_nodes: usize,
    bw: usize,
    width: usize,
    data: Vec<f64>,
}

impl BlockBand {
    fn zeros(n_nodes: usize, bw: usize) -> Self {
        let width = BLOCK * (bw + 1);
        BlockBand { n_nodes, bw, width, data: vec![0.0; n_nodes * BLOCK * width] }
    }

    /// Offset of the top-left entry of block `(i, j)`, `i − bw ≤ j ≤ i`.
    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * BLOCK * self.width + BLOCK * (j + self.bw - i)
    }

    fn lower_block(&self, i: usize, j: usize) -> Mat24 {
        let o = self.offset(i, j);
        Mat24::from_fn(|r, c| self.data[o + r * self.width + c])
    }

    /// Block `(i, j)` of the symmetric matrix, zero outside the band.
    fn block(&self, i: usize, j: usize) -> Mat24 {
        if i.abs_diff(j) > self.bw {
            Mat24::zeros()
        } else if i >= j {
            self.lower_block(i, j)
        } else {
            self.lower_block(j, i).transpose()
        }
    }
}

/// `c ← c − a·bᵀ`, all row-major: `a` is `m × k`, `b` is `n × k`, `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
fn sub_abt(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64], ldc: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + k && b.len() >= (n - 1) * ldb + k && c.len() >= (m - 1) * ldc + n);
    // SAFETY: the bounds above cover every access of the strided views
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, -1.0,
            a.as_ptr(), lda as isize, 1,
            b.as_ptr(), 1, ldb as isize,
            1.0,
            c.as_mut_ptr(), ldc as isize, 1,
        );
    }
}

/// `c ← a·b`, row-major: `a` is `m × k`, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn mul_ab(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + k && b.len() >= k.saturating_sub(1) * ldb + n && c.len() >= (m - 1) * ldc + n);
    // SAFETY: as in `sub_abt`
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), lda as isize, 1,
            b.as_ptr(), ldb as isize, 1,
            0.0,
            c.as_mut_ptr(), ldc as isize, 1,
        );
    }
}

/// `Σ aᵢbᵢ` with eight independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Normal equations `H·δ = g` over `n_nodes` 24-dimensional nodes whose
/// coupling spans at most `block_bandwidth` nodes back in flattened order.
#[derive(Clone, Debug)]
pub struct BlockBandedSystem {
    band: BlockBand,
    rhs: Vec<f64>,
    /// Lowest coupled node per node.
    first_block: Vec<usize>,
}

impl BlockBandedSystem {
    pub fn new(n_nodes: usize, block_bandwidth: usize) -> Self {
        BlockBandedSystem {
            band: BlockBand::zeros(n_nodes, block_bandwidth),
            rhs: vec![0.0; n_nodes * BLOCK],
            first_block: (0..n_nodes).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.band.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.band.n_nodes * BLOCK
    }

    pub fn block_bandwidth(&self) -> usize {
        self.band.bw
    }

    /// Adds `m` to block `(i, j)` (and implicitly `mᵀ` to `(j, i)`). On the
    /// diagonal only the lower triangle of `m` is used.
    ///
    /// Panics when the block lies outside the declared bandwidth.
    pub fn add_block(&mut self, i: usize, j: usize, m: &Mat24) {
        if i < j {
            return self.add_block(j, i, &m.transpose());
        }
        assert!(i - j <= self.band.bw, "block ({i}, {j}) outside bandwidth {}", self.band.bw);
        self.first_block[i] = self.first_block[i].min(j);
        let (o, w) = (self.band.offset(i, j), self.band.width);
        for r in 0..BLOCK {
            for c in 0..BLOCK {
                let v = if i == j { m[(r.max(c), r.min(c))] } else { m[(r, c)] };
                self.band.data[o + r * w + c] += v;
            }
        }
    }

    pub fn add_rhs(&mut self, i: usize, v: &Vec24) {
        for (d, s) in self.rhs[i * BLOCK..(i + 1) * BLOCK].iter_mut().zip(v.iter()) {
            *d += s;
        }
    }

    pub fn block(&self, i: usize, j: usize) -> Mat24 {
        self.band.block(i, j)
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn rhs_block(&self, i: usize) -> Vec24 {
        Vec24::from_column_slice(&self.rhs[i * BLOCK..(i + 1) * BLOCK])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..self.band.n_nodes {
            for j in i.saturating_sub(self.band.bw)..=i {
                let b = self.band.lower_block(i, j);
                out.view_mut((i * BLOCK, j * BLOCK), (BLOCK, BLOCK)).copy_from(&b);
                if i != j {
                    out.view_mut((j * BLOCK, i * BLOCK), (BLOCK, BLOCK)).copy_from(&b.transpose());
                }
            }
        }
        out
    }

    /// `H·x` using the stored band.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        let w = self.band.width;
        for i in 0..self.band.n_nodes {
            for j in i.saturating_sub(self.band.bw)..=i {
                let o = self.band.offset(i, j);
                for r in 0..BLOCK {
                    let row = &self.band.data[o + r * w..o + r * w + BLOCK];
                    y[i * BLOCK + r] += dot(row, &x[j * BLOCK..(j + 1) * BLOCK]);
                    if i != j {
                        let xi = x[i * BLOCK + r];
                        for (c, v) in row.iter().enumerate() {
                            y[j * BLOCK + c] += v * xi;
                        }
                    }
                }
            }
        }
        y
    }

    /// Clears every entry, keeping the allocation.
    pub fn reset(&mut self) {
        self.band.data.fill(0.0);
        self.rhs.fill(0.0);
        for (i, f) in self.first_block.iter_mut().enumerate() {
            *f = i;
        }
    }

    /// Blocked Cholesky `H = L·Lᵀ` restricted to the envelope, one block
    /// row at a time.
    pub fn factorize(&self) -> Result<BandCholesky, SolverError> {
        self.clone().into_cholesky().map(|(chol, _)| chol)
    }

    /// In-place variant of [`factorize`](Self::factorize); also hands back
    /// the right-hand side.
    pub fn into_cholesky(self) -> Result<(BandCholesky, Vec<f64>), SolverError> {
        let BlockBandedSystem { band: mut l, rhs, first_block } = self;
        let first = &first_block;
        let w = l.width;
        let row_len = BLOCK * w;
        let mut s = [0.0f64; BLOCK2];
        for i in 0..l.n_nodes {
            let f = first[i];
            for j in f..=i {
                let lo = f.max(first[j]);
                let oij = l.offset(i, j);
                for r in 0..BLOCK {
                    s[r * BLOCK..(r + 1) * BLOCK].copy_from_slice(&l.data[oij + r * w..oij + r * w + BLOCK]);
                }
                if j > lo {
                    let k = BLOCK * (j - lo);
                    let (a0, b0) = (l.offset(i, lo), l.offset(j, lo));
                    let a = &l.data[a0..i * row_len + row_len];
                    let b = &l.data[b0..j * row_len + row_len];
                    sub_abt(BLOCK, BLOCK, k, a, w, b, w, &mut s, BLOCK);
                }
                if j < i {
                    // row-wise forward substitution: X·L_jjᵀ = S
                    let ojj = l.offset(j, j);
                    for r in 0..BLOCK {
                        for c in 0..BLOCK {
                            let lrow = &l.data[ojj + c * w..ojj + c * w + c];
                            let v = s[r * BLOCK + c] - dot(&s[r * BLOCK..r * BLOCK + c], lrow);
                            s[r * BLOCK + c] = v / l.data[ojj + c * w + c];
                        }
                    }
                    for r in 0..BLOCK {
                        l.data[oij + r * w..oij + r * w + BLOCK].copy_from_slice(&s[r * BLOCK..(r + 1) * BLOCK]);
                    }
                } else {
                    for c in 0..BLOCK {
                        let d = s[c * BLOCK + c] - dot(&s[c * BLOCK..c * BLOCK + c], &s[c * BLOCK..c * BLOCK + c]);
                        if !(d > 0.0) || !d.is_finite() {
                            return Err(SolverError::NotPositiveDefinite { block_row: i, row: i * BLOCK + c });
                        }
                        let d = d.sqrt();
                        s[c * BLOCK + c] = d;
                        for r in c + 1..BLOCK {
                            let v = s[r * BLOCK + c] - dot(&s[r * BLOCK..r * BLOCK + c], &s[c * BLOCK..c * BLOCK + c]);
                            s[r * BLOCK + c] = v / d;
                        }
                    }
                    for r in 0..BLOCK {
                        for c in 0..BLOCK {
                            l.data[oij + r * w + c] = if c <= r { s[r * BLOCK + c] } else { 0.0 };
                        }
                    }
                }
            }
        }
        let touched_blocks = (0..l.n_nodes).map(|i| i - first[i] + 1).sum();
        Ok((BandCholesky { l, first: first_block, touched_blocks }, rhs))
    }
}

/// Lower block-band Cholesky factor.
#[derive(Clone, Debug)]
pub struct BandCholesky {
    l: BlockBand,
    first: Vec<usize>,
    touched_blocks: usize,
}

impl BandCholesky {
    /// Number of 24×24 blocks of `L` that the factorization computed.
    pub fn touched_blocks(&self) -> usize {
        self.touched_blocks
    }

    /// Reuses the factor's storage as an empty system of the same shape.
    pub fn into_system(self) -> BlockBandedSystem {
        let n = self.l.n_nodes;
        let mut sys = BlockBandedSystem { band: self.l, rhs: vec![0.0; n * BLOCK], first_block: self.first };
        sys.reset();
        sys
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let w = l.width;
        let mut x = rhs.to_vec();
        for i in 0..l.n_nodes {
            let f = self.first[i];
            let o = l.offset(i, f);
            let span = BLOCK * (i - f);
            for r in 0..BLOCK {
                let row = &l.data[o + r * w..o + r * w + span + r + 1];
                let (before, cur) = x.split_at(i * BLOCK + r);
                let v = cur[0] - dot(&row[..span + r], &before[f * BLOCK..]);
                x[i * BLOCK + r] = v / row[span + r];
            }
        }
        for i in (0..l.n_nodes).rev() {
            let f = self.first[i];
            let o = l.offset(i, f);
            let span = BLOCK * (i - f);
            for r in (0..BLOCK).rev() {
                let row = &l.data[o + r * w..o + r * w + span + r + 1];
                let xi = x[i * BLOCK + r] / row[span + r];
                x[i * BLOCK + r] = xi;
                for (k, v) in row[..span + r].iter().enumerate() {
                    x[f * BLOCK + k] -= v * xi;
                }
            }
        }
        x
    }

    /// Blocks of `H⁻¹` inside the band, by the block Takahashi recurrence
    /// `Σᵢⱼ = −(Σ_{k>j} Σᵢₖ·Lₖⱼ)·Lⱼⱼ⁻¹` and
    /// `Σⱼⱼ = Lⱼⱼ⁻ᵀ·(I + Zᵀ·C)·Lⱼⱼ⁻¹` with `C` the band column below `Lⱼⱼ`
    /// and `Z = Σ_window·C`.
    pub fn selected_inverse(&self) -> BandedInverse {
        let l = &self.l;
        let (nn, bw) = (l.n_nodes, l.bw);
        let mut sig = BlockBand::zeros(nn, bw);
        let cap = BLOCK * bw;
        let mut window = vec![0.0; cap * cap];
        let mut col = vec![0.0; cap * BLOCK];
        let mut z = vec![0.0; cap * BLOCK];
        let mut ztc = [0.0f64; BLOCK2];
        for j in (0..nn).rev() {
            let hi = (j + bw).min(nn - 1);
            let m = hi - j;
            let ld = BLOCK * m;
            let ljj = l.lower_block(j, j);
            let linv = ljj.solve_lower_triangular(&Mat24::identity()).expect("positive diagonal");
            for a in 0..m {
                let k = j + 1 + a;
                let blk = if self.first[k] <= j { l.lower_block(k, j) } else { Mat24::zeros() };
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        col[(a * BLOCK + r) * BLOCK + c] = blk[(r, c)];
                    }
                }
            }
            for a in 0..m {
                for b in 0..=a {
                    let blk = sig.lower_block(j + 1 + a, j + 1 + b);
                    for r in 0..BLOCK {
                        for c in 0..BLOCK {
                            let v = blk[(r, c)];
                            window[(a * BLOCK + r) * ld + b * BLOCK + c] = v;
                            window[(b * BLOCK + c) * ld + a * BLOCK + r] = v;
                        }
                    }
                }
            }
            mul_ab(ld, BLOCK, ld, &window, ld, &col, BLOCK, &mut z, BLOCK);
            for a in 0..m {
                let za = Mat24::from_fn(|r, c| z[(a * BLOCK + r) * BLOCK + c]);
                let v = -(za * linv);
                let o = sig.offset(j + 1 + a, j);
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        sig.data[o + r * sig.width + c] = v[(r, c)];
                    }
                }
            }
            // Zᵀ·C via dgemm on the transposed view of Z
            ztc.fill(0.0);
            if m > 0 {
                // SAFETY: z and col hold ld × 24 row-major entries
                unsafe {
                    matrixmultiply::dgemm(
                        BLOCK, ld, BLOCK, 1.0,
                        z.as_ptr(), 1, BLOCK as isize,
                        col.as_ptr(), BLOCK as isize, 1,
                        0.0,
                        ztc.as_mut_ptr(), BLOCK as isize, 1,
                    );
                }
            }
            let inner = Mat24::identity() + Mat24::from_fn(|r, c| ztc[r * BLOCK + c]);
            let mut d = linv.transpose() * inner * linv;
            d = (d + d.transpose()) * 0.5;
            let o = sig.offset(j, j);
            for r in 0..BLOCK {
                for c in 0..BLOCK {
                    sig.data[o + r * sig.width + c] = d[(r, c)];
                }
            }
        }
        BandedInverse { band: sig }
    }
}

/// `H⁻¹` restricted to the block band.
#[derive(Clone, Debug)]
pub struct BandedInverse {
    band: BlockBand,
}

impl BandedInverse {
    pub fn n_nodes(&self) -> usize {
        self.band.n_nodes
    }

    /// Block `(i, j)`; both orders are accepted.
    ///
    /// Panics when the pair is further apart than the bandwidth.
    pub fn block(&self, i: usize, j: usize) -> Mat24 {
        assert!(i.abs_diff(j) <= self.band.bw, "block ({i}, {j}) outside the stored band");
        self.band.block(i, j)
    }

    /// Dense joint covariance over `nodes`, in the given order.
    pub fn joint(&self, nodes: &[usize]) -> DMatrix<f64> {
        let m = nodes.len();
        let mut out = DMatrix::zeros(BLOCK * m, BLOCK * m);
        for (a, &i) in nodes.iter().enumerate() {
            for (c, &j) in nodes.iter().enumerate() {
                out.view_mut((BLOCK * a, BLOCK * c), (BLOCK, BLOCK)).copy_from(&self.block(i, j));
            }
        }
        out
    }
}
