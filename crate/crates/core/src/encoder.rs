//! Cochleagram encoding: adaptive average pooling to 40 Hz, then a reduced
//! TDNN with attentive statistical pooling and a 192-d bottleneck.

use rand::Rng;

use crate::audio::WORKING_RATE_HZ;
use crate::cochlea::Cochleagram;
use crate::error::ensure;
use crate::numerics::{xavier_uniform, Bindings, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Dimension of the auditory embedding.
pub const AUDITORY_DIM: usize = 192;
pub const POOLED_RATE_HZ: usize = 40;
pub const TDNN_KERNEL: usize = 3;
pub const TDNN_DILATIONS: [usize; 3] = [1, 2, 3];
/// Floor on the weighted variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-6;
const BOTTLENECK_EPS: f64 = 1e-5;

pub const PREFIX: &str = "apm.";

/// Global auditory feature vector, always [`AUDITORY_DIM`] long.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditoryEmbedding(Vec<f64>);

impl AuditoryEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        ensure!(v.len() == AUDITORY_DIM, Shape, "auditory embedding has {} entries, need {AUDITORY_DIM}", v.len());
        ensure!(v.iter().all(|x| x.is_finite()), Argument, "auditory embedding is not finite");
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// As a 1 × 192 row.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApmEncoderConfig {
    pub d_f: usize,
    pub tdnn_channels: usize,
    pub attention_hidden: usize,
}

impl ApmEncoderConfig {
    pub fn new(d_f: usize) -> Self {
        Self {
            d_f,
            tdnn_channels: 128,
            attention_hidden: 64,
        }
    }

    pub fn out_dim(&self) -> usize {
        AUDITORY_DIM
    }

    /// Recovers the configuration from parameter shapes.
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let w0 = params.get("apm.tdnn0.weight")?;
        let (rows, channels) = w0.dims2()?;
        let (_, hidden) = params.get("apm.asp.w1")?.dims2()?;
        Ok(Self {
            d_f: rows / TDNN_KERNEL,
            tdnn_channels: channels,
            attention_hidden: hidden,
        })
    }
}

/// Adaptive average pooling of a 16 kHz cochleagram to 40 Hz.
pub fn pool_to_40hz(c: &Cochleagram) -> Result<Tensor> {
    ensure!(
        c.sample_rate_hz() == WORKING_RATE_HZ,
        Argument,
        "pooling expects a {WORKING_RATE_HZ} Hz cochleagram, got {} Hz",
        c.sample_rate_hz()
    );
    let n = c.n_frames();
    ensure!(n > 0, Argument, "empty cochleagram");
    let t = ((n * POOLED_RATE_HZ) as f64 / WORKING_RATE_HZ as f64).round().max(1.0) as usize;
    Ok(adaptive_average_pool(c.data(), t))
}

/// Window t covers rows floor(t·N/T) .. floor((t+1)·N/T).
pub fn pool_windows(n: usize, t: usize) -> Vec<(usize, usize)> {
    (0..t).map(|i| (i * n / t, (i + 1) * n / t)).collect()
}

pub fn adaptive_average_pool(data: &Tensor, t: usize) -> Tensor {
    let (n, d) = (data.rows(), data.cols());
    let mut out = Tensor::zeros(&[t, d]);
    for (i, (start, end)) in pool_windows(n, t).into_iter().enumerate() {
        let len = (end - start).max(1) as f64;
        for r in start..end {
            for (c, &v) in data.row_slice(r).iter().enumerate() {
                let acc = out.get(i, c) + v;
                out.set(i, c, acc);
            }
        }
        for c in 0..d {
            let v = out.get(i, c) / len;
            out.set(i, c, v);
        }
    }
    out
}

/// Fresh encoder parameters under `apm.`.
pub fn init_params(cfg: &ApmEncoderConfig, rng: &mut impl Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let mut c_in = cfg.d_f;
    for i in 0..TDNN_DILATIONS.len() {
        p.insert(format!("apm.tdnn{i}.weight"), xavier_uniform(rng, TDNN_KERNEL * c_in, cfg.tdnn_channels));
        p.insert(format!("apm.tdnn{i}.bias"), Tensor::zeros(&[1, cfg.tdnn_channels]));
        c_in = cfg.tdnn_channels;
    }
    p.insert("apm.asp.w1", xavier_uniform(rng, cfg.tdnn_channels, cfg.attention_hidden));
    p.insert("apm.asp.b1", Tensor::zeros(&[1, cfg.attention_hidden]));
    p.insert("apm.asp.w2", xavier_uniform(rng, cfg.attention_hidden, 1));
    p.insert("apm.asp.b2", Tensor::zeros(&[1, 1]));
    p.insert("apm.bottleneck.weight", xavier_uniform(rng, 2 * cfg.tdnn_channels, AUDITORY_DIM));
    p.insert("apm.bottleneck.bias", Tensor::zeros(&[1, AUDITORY_DIM]));
    p
}

/// Handles produced by [`encode_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// 1 × 192 embedding.
    pub embedding: Var,
    /// T × 1 attentive pooling weights.
    pub weights: Var,
    /// 1 × C weighted mean and std.
    pub mean: Var,
    pub std: Var,
    /// 1 × C weighted variance before the floor.
    pub variance: Var,
    /// T × C inputs of each TDNN relu.
    pub pre_activations: [Var; TDNN_DILATIONS.len()],
}

pub fn encode_on_tape(tape: &mut Tape, frames: Var, cfg: &ApmEncoderConfig, b: &Bindings) -> Result<EncoderOutput> {
    let (t, d_f) = tape.value(frames).dims2()?;
    ensure!(t >= 1, Argument, "need at least one frame");
    if d_f != cfg.d_f {
        return Err(Error::Shape(format!("encoder built for {} channels, got {d_f}", cfg.d_f)));
    }
    let mut h = frames;
    let mut pre_activations = [frames; TDNN_DILATIONS.len()];
    for (i, &dil) in TDNN_DILATIONS.iter().enumerate() {
        let u = tape.unfold(h, TDNN_KERNEL, dil)?;
        let z = tape.matmul(u, b.get(&format!("apm.tdnn{i}.weight"))?)?;
        let z = tape.add(z, b.get(&format!("apm.tdnn{i}.bias"))?)?;
        pre_activations[i] = z;
        h = tape.relu(z);
    }

    let s = tape.matmul(h, b.get("apm.asp.w1")?)?;
    let s = tape.add(s, b.get("apm.asp.b1")?)?;
    let s = tape.tanh(s);
    let s = tape.matmul(s, b.get("apm.asp.w2")?)?;
    let s = tape.add(s, b.get("apm.asp.b2")?)?;
    let weights = tape.softmax(s, 0)?;

    let (mean, variance, std) = moments(tape, h, weights)?;
    let stats = tape.concat(&[mean, std], 1)?;
    let e = tape.matmul(stats, b.get("apm.bottleneck.weight")?)?;
    let e = tape.add(e, b.get("apm.bottleneck.bias")?)?;
    let embedding = tape.layer_norm(e, 1, BOTTLENECK_EPS)?;
    Ok(EncoderOutput {
        embedding,
        weights,
        mean,
        std,
        variance,
        pre_activations,
    })
}

/// Weighted mean and standard deviation over time of `h` (T × C) under
/// `weights` (T × 1). The variance E[x²] − μ² is floored before the root.
pub fn weighted_moments(tape: &mut Tape, h: Var, weights: Var) -> Result<(Var, Var)> {
    let (mean, _, std) = moments(tape, h, weights)?;
    Ok((mean, std))
}

fn moments(tape: &mut Tape, h: Var, weights: Var) -> Result<(Var, Var, Var)> {
    let wt = tape.transpose(weights)?;
    let mean = tape.matmul(wt, h)?;
    let h2 = tape.mul(h, h)?;
    let ex2 = tape.matmul(wt, h2)?;
    let mean2 = tape.mul(mean, mean)?;
    let var = tape.sub(ex2, mean2)?;
    let floored = tape.clamp_min(var, VARIANCE_FLOOR);
    Ok((mean, var, tape.power(floored, 0.5)))
}

/// Inference-only encoding of pooled frames (T × d_f).
pub fn encode(frames: &Tensor, cfg: &ApmEncoderConfig, params: &ParamStore) -> Result<AuditoryEmbedding> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, PREFIX, &[]);
    let x = tape.constant(frames.clone());
    let out = encode_on_tape(&mut tape, x, cfg, &b)?;
    AuditoryEmbedding::new(tape.value(out.embedding).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cochlea::ErbScale;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ApmEncoderConfig {
        ApmEncoderConfig {
            d_f: 4,
            tdnn_channels: 6,
            attention_hidden: 5,
        }
    }

    fn random_frames(rng: &mut impl Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(&[t, d], (0..t * d).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn pooling_frame_counts() {
        let scale = ErbScale::for_sample_rate(2, 16_000).unwrap();
        let c = Cochleagram::new(Tensor::filled(&[16_000, 2], 0.7), 16_000, scale.clone()).unwrap();
        let p = pool_to_40hz(&c).unwrap();
        assert_eq!(p.dims2().unwrap(), (40, 2));
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let c = Cochleagram::new(Tensor::zeros(&[16_400, 2]), 16_000, scale.clone()).unwrap();
        assert_eq!(pool_to_40hz(&c).unwrap().rows(), 41);

        let c = Cochleagram::new(Tensor::zeros(&[10, 2]), 16_000, scale.clone()).unwrap();
        assert_eq!(pool_to_40hz(&c).unwrap().rows(), 1);

        let c = Cochleagram::new(Tensor::zeros(&[0, 2]), 16_000, scale).unwrap();
        assert!(matches!(pool_to_40hz(&c), Err(Error::Argument(_))));
    }

    #[test]
    fn windows_partition_rows() {
        let w = pool_windows(16_400, 41);
        let mut covered = vec![0u8; 16_400];
        for &(s, e) in &w {
            assert!((399..=401).contains(&(e - s)));
            for c in &mut covered[s..e] {
                *c += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn single_frame_hits_variance_floor() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng);
        let frames = random_frames(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, PREFIX, &[]);
        let x = tape.constant(frames.clone());
        let out = encode_on_tape(&mut tape, x, &cfg, &b).unwrap();
        for &s in tape.value(out.std).data() {
            assert!((s - VARIANCE_FLOOR.sqrt()).abs() < 1e-12);
        }
        let e = encode(&frames, &cfg, &params).unwrap();
        assert_eq!(e.as_slice().len(), AUDITORY_DIM);
    }

    #[test]
    fn uniform_weights_and_permutation_invariant_moments() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = init_params(&cfg, &mut rng);
        // zero scorer output weights give uniform attention
        params.insert("apm.asp.w2", Tensor::zeros(&[cfg.attention_hidden, 1]));
        let frames = random_frames(&mut rng, 6, 4);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, PREFIX, &[]);
        let x = tape.constant(frames.clone());
        let out = encode_on_tape(&mut tape, x, &cfg, &b).unwrap();
        let w = tape.value(out.weights);
        assert!(w.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));

        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = Tensor::from_rows(
            &perm.iter().map(|&r| frames.row_slice(r).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let uniform = Tensor::filled(&[6, 1], 1.0 / 6.0);
        let mut tape = Tape::new();
        let (h1, h2) = (tape.constant(frames), tape.constant(permuted));
        let wv = tape.constant(uniform);
        let (m1, s1) = weighted_moments(&mut tape, h1, wv).unwrap();
        let (m2, s2) = weighted_moments(&mut tape, h2, wv).unwrap();
        assert!(tape.value(m1).max_abs_diff(tape.value(m2)) < 1e-14);
        assert!(tape.value(s1).max_abs_diff(tape.value(s2)) < 1e-14);
    }

    #[test]
    fn output_is_192_for_any_length() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(&cfg, &mut rng);
        for t in [1, 2, 7, 40] {
            let e = encode(&random_frames(&mut rng, t, 4), &cfg, &params).unwrap();
            assert_eq!(e.as_slice().len(), 192);
        }
    }

    #[test]
    fn config_round_trips_through_param_shapes() {
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ApmEncoderConfig::from_params(&params).unwrap(), cfg);
    }
}
