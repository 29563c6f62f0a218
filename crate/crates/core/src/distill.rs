//! Optimal-transport distillation of a student query encoder.
//!
//! For a parallel pair (student-language query, teacher-language query) the
//! student rows and frozen teacher rows define a cosine cost matrix. The
//! loss is the cost of the approximate transport plan returned by IPOT, and
//! the plan is held fixed when differentiating.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, ParamGrad, TokenMatrix};
use crate::error::{Error, Result};
use crate::ot::{frobenius, ipot, uniform_marginal, CostMatrix, IpotConfig, TransportPlan};
use crate::text::{SeqKind, TokenSequence};

/// Pairs evaluated in parallel before their gradients are folded into the batch sum.
const MICRO_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitextPair {
    /// Student-language query, prepared to `L_max`.
    pub source: TokenSequence,
    /// Teacher-language query, prepared to `L_max`.
    pub target: TokenSequence,
}

impl BitextPair {
    pub fn new(source: TokenSequence, target: TokenSequence) -> Result<Self> {
        if source.kind != SeqKind::Query || target.kind != SeqKind::Query {
            return Err(Error::InvalidInput("bitext sides must be query-prepared".into()));
        }
        if source.ids.len() != target.ids.len() || source.ids.is_empty() {
            return Err(Error::Dimension(format!(
                "bitext sides have lengths {} and {}",
                source.ids.len(),
                target.ids.len()
            )));
        }
        Ok(Self { source, target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub beta: f64,
    pub ipot_iters: usize,
    pub inner_iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            ipot_iters: 100,
            inner_iters: 1,
            lr: 2.0,
            batch: 32,
            epochs: 3,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn ipot(&self) -> IpotConfig {
        IpotConfig {
            beta: self.beta,
            outer_iters: self.ipot_iters,
            inner_iters: self.inner_iters,
            diagnostics: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.ipot_iters == 0 || self.inner_iters == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config(format!("distillation settings must be positive: {self:?}")));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `C[i, j] = 1 − student_i · teacher_j`, clamped into `[0, 2]` against rounding.
pub fn cost_matrix(student: &TokenMatrix, teacher: &TokenMatrix) -> Result<CostMatrix> {
    if student.len() != teacher.len() || student.dim() != teacher.dim() {
        return Err(Error::Dimension(format!(
            "student is {}x{}, teacher is {}x{}",
            student.len(),
            student.dim(),
            teacher.len(),
            teacher.dim()
        )));
    }
    let sims = student.rows().dot(&teacher.rows().t());
    CostMatrix::new(sims.mapv(|s| (1.0 - s).clamp(0.0, 2.0)))
}

fn solve_plan(cost: &CostMatrix, cfg: &DistillConfig) -> Result<TransportPlan> {
    let mu = uniform_marginal(cost.side_len());
    Ok(ipot(&mu, &mu, cost, &cfg.ipot())?.plan)
}

/// Transport cost `<plan, C>` with the plan computed by IPOT on the current cost.
pub fn distill_loss(
    pair: &BitextPair,
    student: &EncoderParams,
    teacher: &EncoderParams,
    cfg: &DistillConfig,
) -> Result<(f64, TransportPlan)> {
    let s = student.encode(&pair.source.ids)?;
    let t = teacher.encode(&pair.target.ids)?;
    let cost = cost_matrix(&s, &t)?;
    let plan = solve_plan(&cost, cfg)?;
    let loss = frobenius(&plan.values, cost.values())?;
    Ok((loss, plan))
}

/// `<plan, C(student)>` for a caller-supplied plan.
pub fn fixed_plan_loss(
    pair: &BitextPair,
    student: &EncoderParams,
    teacher_rows: &TokenMatrix,
    plan: &Array2<f64>,
) -> Result<f64> {
    let s = student.encode(&pair.source.ids)?;
    frobenius(plan, cost_matrix(&s, teacher_rows)?.values())
}

/// Gradient of `<plan, C(student)>` with respect to the student parameters,
/// treating `plan` and the teacher rows as constants.
pub fn fixed_plan_grad(
    pair: &BitextPair,
    student: &EncoderParams,
    teacher_rows: &TokenMatrix,
    plan: &Array2<f64>,
) -> Result<ParamGrad> {
    let (s, cache) = student.encode_with_cache(&pair.source.ids)?;
    if plan.dim() != (s.len(), teacher_rows.len()) {
        return Err(Error::Dimension(format!(
            "plan is {:?}, expected {}x{}",
            plan.dim(),
            s.len(),
            teacher_rows.len()
        )));
    }
    // d/ds_i Σ_j γ_ij (1 − s_i·t_j) = −Σ_j γ_ij t_j
    let upstream = -plan.dot(teacher_rows.rows());
    Ok(student.backward(&s, &cache, &upstream))
}

/// Loss, plan and student gradient for one pair. The teacher is never differentiated.
pub fn distill_grad(
    pair: &BitextPair,
    student: &EncoderParams,
    teacher: &EncoderParams,
    cfg: &DistillConfig,
) -> Result<(f64, TransportPlan, ParamGrad)> {
    let (s, cache) = student.encode_with_cache(&pair.source.ids)?;
    let t = teacher.encode(&pair.target.ids)?;
    let cost = cost_matrix(&s, &t)?;
    let plan = solve_plan(&cost, cfg)?;
    let loss = frobenius(&plan.values, cost.values())?;
    let upstream = -plan.values.dot(t.rows());
    let grad = student.backward(&s, &cache, &upstream);
    Ok((loss, plan, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub epochs: Vec<EpochRecord>,
}

/// Mini-batch gradient descent on the mean transport loss.
///
/// The bitext order is reshuffled every epoch from `cfg.seed`; gradients of
/// a batch are accumulated micro-batch by micro-batch in a fixed order, so
/// the result is bitwise reproducible regardless of thread count.
pub fn train_distill(
    bitext: &[BitextPair],
    mut student: EncoderParams,
    teacher: &EncoderParams,
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bitext.is_empty() {
        return Err(Error::Empty("bitext".into()));
    }
    if student.dims() != teacher.dims() {
        return Err(Error::Dimension(format!(
            "student dims {:?} differ from teacher dims {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bitext.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut grad = ParamGrad::zeros(student.dims());
            let mut batch_loss = 0.0;
            for micro in batch.chunks(MICRO_BATCH) {
                let parts = micro
                    .par_iter()
                    .map(|&i| distill_grad(&bitext[i], &student, teacher, cfg).map(|(l, _, g)| (l, g)))
                    .collect::<Result<Vec<_>>>()?;
                for (loss, g) in parts {
                    batch_loss += loss;
                    grad.add_assign(&g);
                }
            }
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite distillation loss or gradient in epoch {epoch}"
                )));
            }
            loss_sum += batch_loss;
            grad.scale(1.0 / batch.len() as f64);
            if cfg.lr != 0.0 {
                student.apply_gradient(&grad, cfg.lr);
            }
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / bitext.len() as f64,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            target: "distill",
            "{}",
            serde_json::to_string(&record).unwrap_or_default()
        );
        records.push(record);
    }
    Ok(TrainOutcome {
        params: student,
        epochs: records,
    })
}
