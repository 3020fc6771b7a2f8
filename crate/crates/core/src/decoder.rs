//! Score head: a two-layer MLP applied per row, tanh-bounded, mean-pooled
//! and mapped affinely onto (1, 5).

use rand::Rng;

use crate::error::ensure;
use crate::numerics::{xavier_uniform, Bindings, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const PREFIX: &str = "decoder.";
pub const DEFAULT_HIDDEN: usize = 128;

/// Weights of one decoder head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// in_dim × hidden
    pub w1: Tensor,
    /// 1 × hidden
    pub b1: Tensor,
    /// hidden × 1
    pub w2: Tensor,
    /// 1 × 1
    pub b2: Tensor,
}

impl DecoderParams {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[in_dim, hidden]),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1, 1]),
        }
    }

    pub fn init(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: xavier_uniform(rng, in_dim, hidden),
            b1: Tensor::zeros(&[1, hidden]),
            w2: xavier_uniform(rng, hidden, 1),
            b2: Tensor::zeros(&[1, 1]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Stores the tensors as `{prefix}l1.weight`, `{prefix}l1.bias`,
    /// `{prefix}l2.weight`, `{prefix}l2.bias`.
    pub fn to_params(&self, prefix: &str) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(format!("{prefix}l1.weight"), self.w1.clone());
        p.insert(format!("{prefix}l1.bias"), self.b1.clone());
        p.insert(format!("{prefix}l2.weight"), self.w2.clone());
        p.insert(format!("{prefix}l2.bias"), self.b2.clone());
        p
    }

    pub fn from_params(params: &ParamStore, prefix: &str) -> Result<Self> {
        let d = Self {
            w1: params.get(&format!("{prefix}l1.weight"))?.clone(),
            b1: params.get(&format!("{prefix}l1.bias"))?.clone(),
            w2: params.get(&format!("{prefix}l2.weight"))?.clone(),
            b2: params.get(&format!("{prefix}l2.bias"))?.clone(),
        };
        let h = d.hidden();
        ensure!(
            d.b1.shape() == [1, h] && d.w2.shape() == [h, 1] && d.b2.shape() == [1, 1],
            Shape,
            "decoder parameter shapes are inconsistent"
        );
        Ok(d)
    }

    /// Per-row scores in (−1, 1), before pooling.
    pub fn row_scores(&self, y: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = y.dims2()?;
        ensure!(n >= 1, Argument, "decoder needs at least one row");
        ensure!(d == self.in_dim(), Shape, "decoder expects {} features, got {d}", self.in_dim());
        let h = self.hidden();
        let (w1, b1, w2) = (self.w1.data(), self.b1.data(), self.w2.data());
        let mut hidden = vec![0.0; h];
        Ok((0..n)
            .map(|r| {
                hidden.copy_from_slice(b1);
                for (k, &x) in y.row_slice(r).iter().enumerate() {
                    let wk = &w1[k * h..(k + 1) * h];
                    for (acc, w) in hidden.iter_mut().zip(wk) {
                        *acc += x * w;
                    }
                }
                let z: f64 = hidden.iter().zip(w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>() + self.b2.data()[0];
                z.tanh()
            })
            .collect())
    }

    /// ŷ = 2·mean(row scores) + 3.
    pub fn decode(&self, y: &Tensor) -> Result<f64> {
        let s = self.row_scores(y)?;
        Ok(2.0 * s.iter().sum::<f64>() / s.len() as f64 + 3.0)
    }
}

/// Fresh `decoder.` parameters.
pub fn init_params(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> ParamStore {
    DecoderParams::init(in_dim, hidden, rng).to_params(PREFIX)
}

/// Predicted MOS from fused rows using the `decoder.` tensors of `params`.
pub fn decode(y_fusion: &Tensor, params: &ParamStore) -> Result<f64> {
    DecoderParams::from_params(params, PREFIX)?.decode(y_fusion)
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// 1 × 1 predicted MOS.
    pub mos: Var,
    /// n × 1 per-row scores mapped onto (1, 5).
    pub row_mos: Var,
}

pub fn decode_on_tape(tape: &mut Tape, y: Var, prefix: &str, b: &Bindings) -> Result<DecoderOutput> {
    let (n, _) = tape.value(y).dims2()?;
    ensure!(n >= 1, Argument, "decoder needs at least one row");
    let h = tape.matmul(y, b.get(&format!("{prefix}l1.weight"))?)?;
    let h = tape.add(h, b.get(&format!("{prefix}l1.bias"))?)?;
    let h = tape.relu(h);
    let z = tape.matmul(h, b.get(&format!("{prefix}l2.weight"))?)?;
    let z = tape.add(z, b.get(&format!("{prefix}l2.bias"))?)?;
    let s = tape.tanh(z);
    let s = tape.scale(s, 2.0);
    let row_mos = tape.shift(s, 3.0);
    let mos = tape.mean(row_mos, None)?;
    Ok(DecoderOutput { mos, row_mos })
}
