//! Pairwise ranking loss, L1 regression loss and their α-weighted mix.

use crate::error::ensure;
use crate::numerics::{Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 0.1 }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&alpha), Argument, "alpha must lie in [0, 1], got {alpha}");
        ensure!(beta > 0.0, Argument, "beta must be positive, got {beta}");
        Ok(Self { alpha, beta })
    }
}

/// Pair target: 0.5 within `beta`, otherwise 1 if `y_i > y_j`, else 0.
pub fn rank_target(y_i: f64, y_j: f64, beta: f64) -> f64 {
    if (y_i - y_j).abs() < beta {
        0.5
    } else if y_i > y_j {
        1.0
    } else {
        0.0
    }
}

/// Logistic cross-entropy on d = ŷ_i − ŷ_j: log(1 + e^{−d}) + (1 − M)·d.
pub fn rank_loss(pred_i: f64, pred_j: f64, m: f64) -> f64 {
    let d = pred_i - pred_j;
    crate::numerics::softplus(-d) + (1.0 - m) * d
}

pub fn reg_loss(pred: f64, actual: f64) -> f64 {
    (pred - actual).abs()
}

/// The components of one batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over ordered pairs; 0 for a single-sample batch.
    pub rank: f64,
    pub reg: f64,
}

pub fn total_loss(pred: &[f64], actual: &[f64], cfg: &LossConfig) -> Result<LossBreakdown> {
    check_batch(pred.len(), actual.len())?;
    let n = pred.len();
    let reg = pred.iter().zip(actual).map(|(&p, &a)| reg_loss(p, a)).sum::<f64>() / n as f64;
    let mut rank = 0.0;
    if n >= 2 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    rank += rank_loss(pred[i], pred[j], rank_target(actual[i], actual[j], cfg.beta));
                }
            }
        }
        rank /= (n * (n - 1)) as f64;
    }
    Ok(LossBreakdown {
        total: (1.0 - cfg.alpha) * rank + cfg.alpha * reg,
        rank,
        reg,
    })
}

fn check_batch(n_pred: usize, n_actual: usize) -> Result<()> {
    ensure!(n_pred >= 1, Argument, "loss needs a non-empty batch");
    ensure!(n_pred == n_actual, Argument, "{n_pred} predictions for {n_actual} targets");
    Ok(())
}

/// Tape handles of a batch loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rank: Var,
    pub reg: Var,
}

/// Batch loss on the tape; `pred` is an n × 1 column of predictions.
pub fn total_loss_on_tape(tape: &mut Tape, pred: Var, actual: &[f64], cfg: &LossConfig) -> Result<LossVars> {
    let (n, c) = tape.value(pred).dims2()?;
    ensure!(c == 1, Shape, "predictions must be a column, got {n}×{c}");
    check_batch(n, actual.len())?;
    let y = tape.constant(Tensor::new(&[n, 1], actual.to_vec())?);
    let diff = tape.sub(pred, y)?;
    let abs = tape.abs(diff);
    let reg = tape.mean(abs, None)?;

    let rank = if n >= 2 {
        let ones = tape.constant(Tensor::filled(&[1, n], 1.0));
        let cols = tape.matmul(pred, ones)?;
        let rows = tape.transpose(cols)?;
        let d = tape.sub(cols, rows)?;
        let mut one_minus_m = Tensor::zeros(&[n, n]);
        let mut off_diag = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    one_minus_m.set(i, j, 1.0 - rank_target(actual[i], actual[j], cfg.beta));
                    off_diag.set(i, j, 1.0);
                }
            }
        }
        let neg = tape.scale(d, -1.0);
        let sp = tape.softplus(neg);
        let w = tape.constant(one_minus_m);
        let lin = tape.mul(d, w)?;
        let per_pair = tape.add(sp, lin)?;
        let mask = tape.constant(off_diag);
        let per_pair = tape.mul(per_pair, mask)?;
        let sum = tape.mean(per_pair, None)?;
        tape.scale(sum, (n * n) as f64 / (n * (n - 1)) as f64)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let a = tape.scale(rank, 1.0 - cfg.alpha);
    let b = tape.scale(reg, cfg.alpha);
    let total = tape.add(a, b)?;
    Ok(LossVars { total, rank, reg })
}

/// Loss value and its gradient with respect to each prediction.
pub fn total_loss_grad(pred: &[f64], actual: &[f64], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(&[pred.len(), 1], pred.to_vec())?);
    let vars = total_loss_on_tape(&mut tape, p, actual, cfg)?;
    let grads = tape.backward(vars.total)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(vars.total),
        rank: tape.scalar_value(vars.rank),
        reg: tape.scalar_value(vars.reg),
    };
    Ok((breakdown, grads.get_or_zeros(p).into_data()))
}
