//! Randomized truncated SVD of a sparse matrix and propagation over the
//! rank-k user affinity `U_k S_k U_kᵀ` it induces.

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvdConfig {
    pub rank: usize,
    pub oversampling: usize,
    pub power_iters: usize,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            rank: 5,
            oversampling: 10,
            power_iters: 4,
        }
    }
}

/// Leading singular triplets, singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Dense `U_k S_k V_kᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            us.row_mut(r)
                .iter_mut()
                .zip(&self.singular_values)
                .for_each(|(x, s)| *x *= s);
        }
        us.matmul_t(&self.v).expect("factor shapes agree")
    }

    /// `diag(S_k) · U_kᵀ`, the left half of the factored user affinity.
    pub fn scaled_ut(&self) -> DenseMatrix {
        let mut ut = self.u.transpose();
        for (r, s) in self.singular_values.iter().enumerate() {
            ut.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        ut
    }

    /// `U_k S_k U_kᵀ · x` in factored order, never forming the M×M matrix.
    pub fn affinity_apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.u.matmul(&self.scaled_ut().matmul(x)?)
    }
}

fn to_nalgebra(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.values())
}

fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.set(r, c, m[(r, c)]);
        }
    }
    out
}

/// Orthonormal basis for the column space of a tall matrix.
fn orthonormalize(m: &DenseMatrix) -> DenseMatrix {
    from_nalgebra(&to_nalgebra(m).qr().q())
}

/// Randomized range-finder SVD: `Y = (ÃÃᵀ)^q Ã Ω` with re-orthonormalization
/// between power iterations, then an exact SVD of the small projection.
pub fn truncated_svd<R: Rng + ?Sized>(a: &SparseMatrix, config: SvdConfig, rng: &mut R) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    let k = config.rank;
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidInput(format!("svd rank {k} outside 1..={}", m.min(n))));
    }
    let width = (k + config.oversampling).min(m.min(n));
    let at = a.transpose();

    let omega = DenseMatrix::random_normal(n, width, 1.0, rng);
    let mut q = orthonormalize(&a.mul_dense(&omega)?);
    for _ in 0..config.power_iters {
        let z = orthonormalize(&at.mul_dense(&q)?);
        q = orthonormalize(&a.mul_dense(&z)?);
    }

    // Bᵀ = Ãᵀ Q  (N × width); B = Qᵀ Ã has the same singular values.
    let bt = at.mul_dense(&q)?;
    let svd = to_nalgebra(&bt).svd(true, true);
    let left_bt = svd
        .u
        .ok_or_else(|| Error::NonFinite("svd failed to produce U".into()))?;
    let right_bt_t = svd
        .v_t
        .ok_or_else(|| Error::NonFinite("svd failed to produce Vᵀ".into()))?;
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    order.truncate(k);

    // B = (Bᵀ)ᵀ = V_bt Σ U_btᵀ, so B's left vectors are the rows of v_t and its
    // right vectors are the columns of u.
    let mut u = DenseMatrix::zeros(width, k);
    let mut v = DenseMatrix::zeros(n, k);
    let mut singular_values = Vec::with_capacity(k);
    for (c, &idx) in order.iter().enumerate() {
        singular_values.push(sigma[idx].max(0.0));
        for r in 0..width {
            u.set(r, c, right_bt_t[(idx, r)]);
        }
        for r in 0..n {
            v.set(r, c, left_bt[(r, idx)]);
        }
    }
    let mut u = q.matmul(&u)?;

    // Fix signs: largest-magnitude entry of each left vector is positive.
    for c in 0..k {
        let (mut best, mut sign) = (0.0, 1.0);
        for r in 0..m {
            let x = u.get(r, c);
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for r in 0..m {
                u.set(r, c, -u.get(r, c));
            }
            for r in 0..n {
                v.set(r, c, -v.get(r, c));
            }
        }
    }

    let factors = SvdFactors { u, singular_values, v };
    if !factors.u.is_finite() || !factors.v.is_finite() {
        return Err(Error::NonFinite("svd factors".into()));
    }
    Ok(factors)
}

/// Layer-averaged propagation over the reconstructed social view,
/// `E'⁽ˡ⁾ = U_k (S_k (U_kᵀ E'⁽ˡ⁻¹⁾))`. The factors are tape constants.
pub fn propagate_reconstructed(tape: &mut Tape, factors: &SvdFactors, users0: NodeId, layers: usize) -> Result<NodeId> {
    let rows = tape.value(users0).rows();
    if rows != factors.u.rows() {
        return Err(Error::shape(
            "propagate_reconstructed",
            factors.u.shape(),
            tape.value(users0).shape(),
        ));
    }
    if layers == 0 {
        return Ok(users0);
    }
    let u = tape.constant(factors.u.clone());
    let sut = tape.constant(factors.scaled_ut());
    let mut acc = users0;
    let mut prev = users0;
    for _ in 0..layers {
        let small = tape.matmul(sut, prev)?;
        prev = tape.matmul(u, small)?;
        acc = tape.add(acc, prev)?;
    }
    tape.scale(acc, 1.0 / (layers + 1) as f64)
}
