//! Optimal transport between two equally sized bags of token vectors.
//!
//! The approximate solver is the inexact proximal point method ([`ipot`]),
//! which repeatedly solves a Bregman-regularized transport problem around
//! the previous plan. For uniform marginals the exact optimum is a
//! permutation, so [`exact_ot_uniform`] doubles as a ground-truth oracle.

mod assignment;
mod ipot;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use assignment::{brute_force_assignment, exact_ot_uniform, hungarian, Assignment};
pub use ipot::{ipot, IpotConfig, IpotOutput, IterationRecord};

/// Upper bound on a cosine distance between unit vectors, plus rounding slack.
const MAX_COST: f64 = 2.0 + 1e-9;

/// Square matrix of pairwise cosine distances, entries in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows != cols {
            return Err(Error::Dimension(format!(
                "cost matrix must be square, got {rows}x{cols}"
            )));
        }
        if rows == 0 {
            return Err(Error::Empty("cost matrix has no rows".into()));
        }
        for (&v, (i, j)) in values.iter().zip(ndarray::indices((rows, cols))) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("cost[{i},{j}] = {v}")));
            }
            if !(0.0..=MAX_COST).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "cost[{i},{j}] = {v} outside [0, 2]"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Builds a cost matrix from row-major nested slices. Handy in tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut values = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                values[[i, j]] = v;
            }
        }
        Self::new(values)
    }

    pub fn side_len(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn max_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A nonnegative coupling between two mass vectors of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub mu_s: Vec<f64>,
    pub mu_t: Vec<f64>,
}

impl TransportPlan {
    pub fn side_len(&self) -> usize {
        self.values.nrows()
    }

    /// Largest absolute gap between row sums and the source marginal.
    pub fn row_residual(&self) -> f64 {
        self.values
            .rows()
            .into_iter()
            .zip(&self.mu_s)
            .map(|(row, &m)| (row.sum() - m).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute gap between column sums and the target marginal.
    pub fn col_residual(&self) -> f64 {
        self.values
            .columns()
            .into_iter()
            .zip(&self.mu_t)
            .map(|(col, &m)| (col.sum() - m).abs())
            .fold(0.0, f64::max)
    }
}

/// Uniform mass `1/len` on every position.
pub fn uniform_marginal(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

/// Frobenius inner product `<plan, C>`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    frobenius(&plan.values, cost.values())
}

pub(crate) fn frobenius(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "plan is {:?} but cost is {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

/// Generalized KL divergence `Σ a log(a/b) − Σ a + Σ b` between two plans.
///
/// Returns `+∞` when `a` puts mass where `b` has none.
pub fn bregman_divergence(a: &TransportPlan, b: &TransportPlan) -> Result<f64> {
    bregman(&a.values, &b.values)
}

pub(crate) fn bregman(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "bregman operands {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut kl = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x > 0.0 {
            if y <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += x * (x / y).ln();
        }
    }
    Ok(kl - a.sum() + b.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn plan(values: Array2<f64>) -> TransportPlan {
        let n = values.nrows();
        TransportPlan {
            values,
            mu_s: uniform_marginal(n),
            mu_t: uniform_marginal(n),
        }
    }

    fn one_minus_identity(n: usize) -> CostMatrix {
        CostMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 }))
            .unwrap()
    }

    #[test]
    fn cost_matrix_rejects_bad_input() {
        assert!(matches!(
            CostMatrix::new(Array2::zeros((2, 3))),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            CostMatrix::new(array![[0.0, f64::NAN], [0.0, 0.0]]),
            Err(Error::NonFinite(_))
        ));
        assert!(CostMatrix::new(array![[0.0, 2.5], [0.0, 0.0]]).is_err());
        assert!(CostMatrix::new(array![[-0.1]]).is_err());
    }

    #[test]
    fn transport_cost_examples() {
        let c = one_minus_identity(3);
        let diag = plan(Array2::eye(3) / 3.0);
        assert_eq!(transport_cost(&diag, &c).unwrap(), 0.0);

        let flat = plan(Array2::from_elem((3, 3), 1.0 / 9.0));
        assert_abs_diff_eq!(transport_cost(&flat, &c).unwrap(), 2.0 / 3.0, epsilon = 1e-15);

        let c = CostMatrix::new(Array2::from_elem((4, 4), 0.7)).unwrap();
        let flat = plan(Array2::from_elem((4, 4), 1.0 / 16.0));
        assert_abs_diff_eq!(transport_cost(&flat, &c).unwrap(), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn transport_cost_dimension_mismatch() {
        let c = one_minus_identity(3);
        let p = plan(Array2::eye(2) / 2.0);
        assert!(matches!(transport_cost(&p, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn bregman_examples() {
        let a = plan(Array2::eye(2) / 2.0);
        assert_eq!(bregman_divergence(&a, &a).unwrap(), 0.0);

        let b = plan(Array2::from_elem((2, 2), 0.25));
        assert_abs_diff_eq!(
            bregman_divergence(&a, &b).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );

        let b2 = plan(Array2::from_elem((2, 2), 0.5));
        assert_abs_diff_eq!(
            bregman_divergence(&b, &b2).unwrap(),
            1.0 - std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn bregman_unsupported_mass_is_infinite() {
        let a = plan(Array2::from_elem((2, 2), 0.25));
        let b = plan(Array2::eye(2) / 2.0);
        assert_eq!(bregman_divergence(&a, &b).unwrap(), f64::INFINITY);
    }
}
