//! Joint modeling of auditory and distortion features: the auditory
//! embedding is projected to a short row sequence, prepended to the
//! distortion rows, and refined by residual cross-attention layers whose
//! keys and values come from a second embedding stream.

use std::io::Write;

use rand::Rng;

use crate::embeddings::EmbeddingSequence;
use crate::encoder::{AuditoryEmbedding, AUDITORY_DIM};
use crate::error::ensure;
use crate::numerics::{attention, xavier_uniform, Bindings, Mask, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "fusion.";
pub const PROJ_PREFIX: &str = "proj.";
/// Stores `[n_a, layers, tau, heads]` alongside the weights.
pub const META_KEY: &str = "meta.fusion";
pub const DEFAULT_N_A: usize = 8;
pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_LAYERS: usize = 2;
pub const MAX_LAYERS: usize = 6;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub n_a: usize,
    /// Width of the distortion rows and of every fused row.
    pub d_s: usize,
    /// Width of the key/value stream.
    pub d_w: usize,
    pub l_layers: usize,
    pub tau: f64,
    pub heads: usize,
}

impl FusionConfig {
    pub fn new(d_s: usize, d_w: usize) -> Self {
        Self {
            n_a: DEFAULT_N_A,
            d_s,
            d_w,
            l_layers: DEFAULT_LAYERS,
            tau: DEFAULT_TAU,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_a >= 1, Argument, "n_a must be at least 1");
        ensure!(self.d_s >= 1 && self.d_w >= 1, Argument, "feature widths must be positive");
        ensure!(
            (1..=MAX_LAYERS).contains(&self.l_layers),
            Argument,
            "layer count must lie in 1..={MAX_LAYERS}, got {}",
            self.l_layers
        );
        ensure!(self.tau >= 0.0 && self.tau.is_finite(), Argument, "tau must be non-negative");
        ensure!(
            self.heads >= 1 && self.d_s % self.heads == 0,
            Argument,
            "{} heads do not divide width {}",
            self.heads,
            self.d_s
        );
        Ok(())
    }

    pub fn meta_tensor(&self) -> Tensor {
        Tensor::row(&[self.n_a as f64, self.l_layers as f64, self.tau, self.heads as f64])
    }

    /// Recovers the configuration from stored weights and meta tensor.
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let meta = params.get(META_KEY)?.data().to_vec();
        ensure!(meta.len() == 4, Format, "`{META_KEY}` must hold 4 values");
        let wk = params.get("fusion.layer0.wk")?;
        let cfg = Self {
            n_a: meta[0] as usize,
            d_s: wk.cols(),
            d_w: wk.rows(),
            l_layers: meta[1] as usize,
            tau: meta[2],
            heads: meta[3] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stacked query rows: the first `n_a` come from the auditory projection,
/// the rest are distortion frames in order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    rows: Tensor,
    n_a: usize,
}

impl JointEmbedding {
    pub fn new(auditory: Tensor, semantic: Option<&Tensor>) -> Result<Self> {
        let (n_a, d) = auditory.dims2()?;
        let rows = match semantic {
            None => auditory,
            Some(s) => {
                let (n_s, d_s) = s.dims2()?;
                if d_s != d {
                    return Err(Error::Shape(format!("auditory rows have width {d}, semantic rows {d_s}")));
                }
                let mut data = auditory.into_data();
                data.extend_from_slice(s.data());
                Tensor::new(&[n_a + n_s, d], data)?
            }
        };
        Ok(Self { rows, n_a })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_s(&self) -> usize {
        self.rows.rows() - self.n_a
    }
}

/// Fresh `proj.` and `fusion.` parameters plus the meta tensor.
pub fn init_params(cfg: &FusionConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    p.insert("proj.weight", xavier_uniform(rng, AUDITORY_DIM, cfg.n_a * cfg.d_s));
    p.insert("proj.bias", Tensor::zeros(&[1, cfg.n_a * cfg.d_s]));
    for l in 0..cfg.l_layers {
        p.insert(format!("fusion.layer{l}.wq"), xavier_uniform(rng, cfg.d_s, cfg.d_s));
        p.insert(format!("fusion.layer{l}.wk"), xavier_uniform(rng, cfg.d_w, cfg.d_s));
        p.insert(format!("fusion.layer{l}.wv"), xavier_uniform(rng, cfg.d_w, cfg.d_s));
        p.insert(format!("fusion.layer{l}.ln_gain"), Tensor::filled(&[1, cfg.d_s], 1.0));
        p.insert(format!("fusion.layer{l}.ln_bias"), Tensor::zeros(&[1, cfg.d_s]));
    }
    p.insert(META_KEY, cfg.meta_tensor());
    Ok(p)
}

/// Linear 192 → n_a·d_s, reshaped to n_a rows.
pub fn project_on_tape(tape: &mut Tape, a: Var, n_a: usize, b: &Bindings) -> Result<Var> {
    let z = tape.matmul(a, b.get("proj.weight")?)?;
    let z = tape.add(z, b.get("proj.bias")?)?;
    let width = tape.value(z).cols();
    ensure!(width % n_a == 0, Shape, "projection width {width} not divisible by {n_a}");
    tape.reshape(z, n_a, width / n_a)
}

pub fn project_auditory(a: &AuditoryEmbedding, n_a: usize, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, PROJ_PREFIX, &[]);
    let x = tape.constant(a.to_tensor());
    let y = project_on_tape(&mut tape, x, n_a, &b)?;
    Ok(tape.value(y).clone())
}

/// Auditory rows see every key; distortion row i sees key j iff
/// |λ·(i − n_a) − j| ≤ τ with λ = n_w / n_s.
pub fn band_mask(n_a: usize, n_s: usize, n_w: usize, tau: f64) -> Mask {
    Mask::from_fn(n_a + n_s, n_w, |i, j| band_allows(i, j, n_a, n_s, n_w, tau))
}

/// The mask predicate for query row `i` and key `j`, evaluated as
/// |n_w·(i − n_a) − j·n_s| ≤ τ·n_s so that integer τ is exact.
pub fn band_allows(i: usize, j: usize, n_a: usize, n_s: usize, n_w: usize, tau: f64) -> bool {
    if i < n_a {
        return true;
    }
    let lhs = (n_w as f64 * (i - n_a) as f64 - j as f64 * n_s as f64).abs();
    lhs <= tau * n_s as f64
}

#[derive(Debug, Clone)]
pub struct FusionVars {
    pub y: Var,
    /// Per layer, head-averaged n_q × n_w attention weights.
    pub weights: Vec<Var>,
}

pub fn fuse_on_tape(
    tape: &mut Tape,
    x_uni: Var,
    n_a: usize,
    x_w2v: Var,
    cfg: &FusionConfig,
    b: &Bindings,
) -> Result<FusionVars> {
    cfg.validate()?;
    let (n_q, d) = tape.value(x_uni).dims2()?;
    let (n_w, d_w) = tape.value(x_w2v).dims2()?;
    ensure!(n_q >= n_a, Shape, "{n_q} query rows but {n_a} auditory rows");
    if d != cfg.d_s || d_w != cfg.d_w {
        return Err(Error::Shape(format!(
            "fusion built for widths ({}, {}), got queries {d} and keys {d_w}",
            cfg.d_s, cfg.d_w
        )));
    }
    let mask = band_mask(n_a, n_q - n_a, n_w, cfg.tau);
    let dh = cfg.d_s / cfg.heads;
    let mut x = x_uni;
    let mut weights = Vec::with_capacity(cfg.l_layers);
    for l in 0..cfg.l_layers {
        let q = tape.matmul(x, b.get(&format!("fusion.layer{l}.wq"))?)?;
        let k = tape.matmul(x_w2v, b.get(&format!("fusion.layer{l}.wk"))?)?;
        let v = tape.matmul(x_w2v, b.get(&format!("fusion.layer{l}.wv"))?)?;
        let (att, w) = if cfg.heads == 1 {
            attention(tape, q, k, v, &mask)?
        } else {
            let mut outs = Vec::with_capacity(cfg.heads);
            let mut ws = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = tape.slice(q, 1, s, e)?;
                let kh = tape.slice(k, 1, s, e)?;
                let vh = tape.slice(v, 1, s, e)?;
                let (o, w) = attention(tape, qh, kh, vh, &mask)?;
                outs.push(o);
                ws.push(w);
            }
            let mut w = ws[0];
            for &other in &ws[1..] {
                w = tape.add(w, other)?;
            }
            let w = tape.scale(w, 1.0 / cfg.heads as f64);
            (tape.concat(&outs, 1)?, w)
        };
        let r = tape.add(att, x)?;
        let n = tape.layer_norm(r, 1, LAYER_NORM_EPS)?;
        let n = tape.mul(n, b.get(&format!("fusion.layer{l}.ln_gain"))?)?;
        x = tape.add(n, b.get(&format!("fusion.layer{l}.ln_bias"))?)?;
        weights.push(w);
    }
    Ok(FusionVars { y: x, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub y: Tensor,
    pub weights: Vec<Tensor>,
}

pub fn fuse(
    x_uni: &JointEmbedding,
    x_w2v: &EmbeddingSequence,
    cfg: &FusionConfig,
    params: &ParamStore,
) -> Result<FusionOutput> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, PREFIX, &[]);
    let q = tape.constant(x_uni.rows().clone());
    let kv = tape.constant(x_w2v.frames().clone());
    let out = fuse_on_tape(&mut tape, q, x_uni.n_a(), kv, cfg, &b)?;
    Ok(FusionOutput {
        y: tape.value(out.y).clone(),
        weights: out.weights.iter().map(|&w| tape.value(w).clone()).collect(),
    })
}

/// The query rows kept at inference: the auditory projection only.
pub fn prune_for_inference(a: &AuditoryEmbedding, n_a: usize, params: &ParamStore) -> Result<JointEmbedding> {
    JointEmbedding::new(project_auditory(a, n_a, params)?, None)
}

/// Multiply-add count of the fusion layers for `n_q` queries and `n_w` keys.
pub fn fusion_flops(n_q: usize, n_w: usize, cfg: &FusionConfig) -> u64 {
    let (n_q, n_w, d_s, d_w) = (n_q as u64, n_w as u64, cfg.d_s as u64, cfg.d_w as u64);
    let per_layer = 2 * n_q * d_s * d_s + 4 * n_w * d_w * d_s + 4 * n_q * n_w * d_s + 8 * n_q * d_s;
    per_layer * cfg.l_layers as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionRow {
    pub layer: usize,
    pub query_index: usize,
    pub key_index: usize,
    pub weight: f64,
}

/// Dense dump of every layer's weights.
pub fn dump_attention(weights: &[Tensor]) -> Vec<AttentionRow> {
    let mut rows = Vec::new();
    for (layer, w) in weights.iter().enumerate() {
        for q in 0..w.rows() {
            for (k, &weight) in w.row_slice(q).iter().enumerate() {
                rows.push(AttentionRow {
                    layer,
                    query_index: q,
                    key_index: k,
                    weight,
                });
            }
        }
    }
    rows
}

pub fn write_attention_csv(out: impl Write, rows: &[AttentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "query_index", "key_index", "weight"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.query_index.to_string(),
            r.key_index.to_string(),
            r.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
