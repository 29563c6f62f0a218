use ndarray::{Array1, Array2, Zip};
use serde::Serialize;

use super::{bregman, CostMatrix, TransportPlan};
use crate::error::{Error, Result};

/// Floor for the scaling denominators `Q b` and `Qᵀ a`.
const DENOM_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpotConfig {
    /// Proximal step size.
    pub beta: f64,
    /// Outer proximal iterations.
    pub outer_iters: usize,
    /// Sinkhorn sweeps per outer iteration.
    pub inner_iters: usize,
    /// Record per-iteration residuals and step divergences.
    pub diagnostics: bool,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            outer_iters: 100,
            inner_iters: 1,
            diagnostics: false,
        }
    }
}

/// Convergence record for one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    /// Bregman divergence between this plan and the previous one.
    pub step_divergence: f64,
}

#[derive(Debug, Clone)]
pub struct IpotOutput {
    pub plan: TransportPlan,
    pub diagnostics: Option<Vec<IterationRecord>>,
}

/// Inexact proximal point solver for `min <γ, C>` over couplings of
/// `mu_s` and `mu_t`.
///
/// Each outer step multiplies the current plan by the Gibbs kernel
/// `exp(−C/β)` and rescales rows then columns, so the returned plan meets
/// the target marginal up to rounding and approaches the source marginal
/// as `outer_iters` grows.
pub fn ipot(mu_s: &[f64], mu_t: &[f64], cost: &CostMatrix, cfg: &IpotConfig) -> Result<IpotOutput> {
    let n = cost.side_len();
    if mu_s.len() != n || mu_t.len() != n {
        return Err(Error::Dimension(format!(
            "marginals have lengths {} and {}, cost is {n}x{n}",
            mu_s.len(),
            mu_t.len()
        )));
    }
    if !(cfg.beta > 0.0) || !cfg.beta.is_finite() {
        return Err(Error::InvalidInput(format!("beta must be positive, got {}", cfg.beta)));
    }
    if cfg.outer_iters == 0 || cfg.inner_iters == 0 {
        return Err(Error::InvalidInput("iteration counts must be at least 1".into()));
    }
    for (name, mu) in [("mu_s", mu_s), ("mu_t", mu_t)] {
        if mu.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidInput(format!("{name} must be finite and nonnegative")));
        }
        let total: f64 = mu.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("{name} sums to {total}, expected 1")));
        }
    }

    let mu_s_arr = Array1::from(mu_s.to_vec());
    let mu_t_arr = Array1::from(mu_t.to_vec());
    let kernel = cost.values().mapv(|c| (-c / cfg.beta).exp());

    let mut b = Array1::from_elem(n, 1.0 / n as f64);
    let mut a = Array1::zeros(n);
    let mut plan = Array2::<f64>::ones((n, n));
    let mut q = Array2::<f64>::zeros((n, n));
    let mut records = cfg.diagnostics.then(|| Vec::with_capacity(cfg.outer_iters));

    for t in 1..=cfg.outer_iters {
        Zip::from(&mut q).and(&plan).and(&kernel).for_each(|q, &g, &k| *q = g * k);
        for _ in 0..cfg.inner_iters {
            let qb = q.dot(&b);
            Zip::from(&mut a)
                .and(&mu_s_arr)
                .and(&qb)
                .for_each(|a, &m, &d| *a = m / d.max(DENOM_FLOOR));
            let qta = q.t().dot(&a);
            Zip::from(&mut b)
                .and(&mu_t_arr)
                .and(&qta)
                .for_each(|b, &m, &d| *b = m / d.max(DENOM_FLOOR));
        }
        let mut next = q.clone();
        for (i, mut row) in next.rows_mut().into_iter().enumerate() {
            let ai = a[i];
            Zip::from(&mut row).and(&b).for_each(|x, &bj| *x = ai * *x * bj);
        }
        if let Some(records) = records.as_mut() {
            let step_divergence = bregman(&next, &plan)?;
            let candidate = TransportPlan {
                values: next.clone(),
                mu_s: mu_s.to_vec(),
                mu_t: mu_t.to_vec(),
            };
            records.push(IterationRecord {
                iteration: t,
                row_residual: candidate.row_residual(),
                col_residual: candidate.col_residual(),
                step_divergence,
            });
        }
        plan = next;
    }

    Ok(IpotOutput {
        plan: TransportPlan {
            values: plan,
            mu_s: mu_s.to_vec(),
            mu_t: mu_t.to_vec(),
        },
        diagnostics: records,
    })
}
