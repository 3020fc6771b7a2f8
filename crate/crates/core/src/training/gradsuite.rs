//! Finite-difference checks of every trainable block on small random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, decode_on_tape};
use crate::encoder::{self, encode_on_tape, ApmEncoderConfig, AUDITORY_DIM, VARIANCE_FLOOR};
use crate::fusion::{self, fuse_on_tape, project_on_tape, FusionConfig};
use crate::losses::{total_loss_on_tape, LossConfig};
use crate::numerics::{check_gradients, Bindings, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const FD_STEP: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    /// Largest per-input relative error over all instances.
    pub max_relative_error: f64,
}

fn random(rng: &mut impl Rng, r: usize, c: usize, s: f64) -> Tensor {
    Tensor::new(&[r, c], (0..r * c).map(|_| rng.random_range(-s..s)).collect()).expect("dims")
}

/// Splits a store into checkable inputs; the names keep the order.
fn flatten(p: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    p.iter().map(|(k, v)| (k.to_owned(), v.clone())).unzip()
}

fn bindings(names: &[String], vars: &[Var]) -> Bindings {
    let mut b = Bindings::default();
    for (n, &v) in names.iter().zip(vars) {
        b.insert(n.clone(), v);
    }
    b
}

/// Reduces a matrix to a scalar with fixed random weights.
fn contract(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.mean(p, None)
}

/// Smallest distance of a relu input to zero and smallest relative distance
/// of a pooled variance to the floor.
fn encoder_kink_distance(inputs: &[Tensor], names: &[String], cfg: &ApmEncoderConfig) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let (frames, params) = vars.split_last().expect("inputs");
    let out = encode_on_tape(&mut tape, *frames, cfg, &bindings(names, params))?;
    let relu = out
        .pre_activations
        .iter()
        .flat_map(|&z| tape.value(z).data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min);
    let floor = tape
        .value(out.variance)
        .data()
        .iter()
        .map(|v| (v / VARIANCE_FLOOR - 1.0).abs())
        .fold(f64::INFINITY, f64::min);
    Ok((relu, floor))
}

/// Instances with a relu input within `KINK_MARGIN` of zero, or a pooled
/// variance within 10% of the floor, are redrawn: central differences that
/// straddle a kink match neither one-sided derivative.
fn encoder_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let cfg = ApmEncoderConfig {
            d_f: rng.random_range(2..5),
            tdnn_channels: rng.random_range(3..6),
            attention_hidden: rng.random_range(2..5),
        };
        let t = rng.random_range(4..9);
        let (names, mut inputs) = flatten(&encoder::init_params(&cfg, rng));
        for x in inputs.iter_mut().filter(|x| x.rows() == 1) {
            *x = random(rng, 1, x.cols(), 0.3);
        }
        inputs.push(Tensor::new(&[t, cfg.d_f], (0..t * cfg.d_f).map(|_| rng.random_range(0.0..2.0)).collect())?);
        let w = random(rng, 1, AUDITORY_DIM, 1.0);
        let (relu, floor) = encoder_kink_distance(&inputs, &names, &cfg)?;
        if relu < KINK_MARGIN || floor < 0.1 {
            continue;
        }
        let check = check_gradients(&inputs, FD_STEP, |tape, vars| {
            let (frames, params) = vars.split_last().expect("inputs");
            let b = bindings(&names, params);
            let out = encode_on_tape(tape, *frames, &cfg, &b)?;
            contract(tape, out.embedding, &w)
        })?;
        return Ok(check.max_relative_error());
    }
}

fn projection_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n_a = rng.random_range(1..9);
    let d_s = rng.random_range(2..5);
    let inputs = vec![
        random(rng, 1, AUDITORY_DIM, 1.0),
        random(rng, AUDITORY_DIM, n_a * d_s, 0.2),
        random(rng, 1, n_a * d_s, 0.2),
    ];
    let w = random(rng, n_a, d_s, 1.0);
    let names = ["proj.weight".to_owned(), "proj.bias".to_owned()];
    let check = check_gradients(&inputs, FD_STEP, |tape, vars| {
        let b = bindings(&names, &vars[1..]);
        let y = project_on_tape(tape, vars[0], n_a, &b)?;
        contract(tape, y, &w)
    })?;
    Ok(check.max_relative_error())
}

fn perturbed_fusion(rng: &mut ChaCha8Rng, cfg: &FusionConfig) -> Result<(Vec<String>, Vec<Tensor>)> {
    let mut p = fusion::init_params(cfg, rng)?;
    for l in 0..cfg.l_layers {
        p.insert(format!("fusion.layer{l}.ln_gain"), random(rng, 1, cfg.d_s, 0.5).map(|v| v + 1.0));
        p.insert(format!("fusion.layer{l}.ln_bias"), random(rng, 1, cfg.d_s, 0.5));
    }
    let p = p.subset(fusion::PREFIX);
    Ok(flatten(&p))
}

fn fusion_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut cfg = FusionConfig::new(rng.random_range(3..6), rng.random_range(2..5));
    cfg.n_a = rng.random_range(1..4);
    cfg.tau = rng.random_range(0.5..3.0);
    cfg.l_layers = 2;
    let n_s = rng.random_range(1..6);
    let n_w = rng.random_range(2..8);
    let (names, mut inputs) = perturbed_fusion(rng, &cfg)?;
    inputs.push(random(rng, cfg.n_a + n_s, cfg.d_s, 1.0));
    inputs.push(random(rng, n_w, cfg.d_w, 1.0));
    let w = random(rng, cfg.n_a + n_s, cfg.d_s, 1.0);
    let k = names.len();
    let check = check_gradients(&inputs, FD_STEP, |tape, vars| {
        let b = bindings(&names, &vars[..k]);
        let out = fuse_on_tape(tape, vars[k], cfg.n_a, vars[k + 1], &cfg, &b)?;
        contract(tape, out.y, &w)
    })?;
    Ok(check.max_relative_error())
}

fn decoder_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.random_range(2..6);
    let hidden = rng.random_range(2..8);
    let n = rng.random_range(1..6);
    let (names, mut inputs) = flatten(&decoder::init_params(d, hidden, rng));
    for x in inputs.iter_mut().filter(|x| x.rows() == 1) {
        *x = random(rng, 1, x.cols(), 0.3);
    }
    inputs.push(random(rng, n, d, 1.5));
    let check = check_gradients(&inputs, FD_STEP, |tape, vars| {
        let (y, params) = vars.split_last().expect("inputs");
        let b = bindings(&names, params);
        Ok(decode_on_tape(tape, *y, decoder::PREFIX, &b)?.mos)
    })?;
    Ok(check.max_relative_error())
}

/// Projection, two fusion layers, decoder and the mixed loss over a batch.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut cfg = FusionConfig::new(3, 2);
    cfg.n_a = 2;
    cfg.tau = 1.0;
    let batch = rng.random_range(2..4);
    let loss = LossConfig::new(rng.random_range(0.0..1.0), 0.1)?;
    let actual: Vec<f64> = (0..batch).map(|_| rng.random_range(1.0..5.0)).collect();

    let (mut names, mut inputs) = perturbed_fusion(rng, &cfg)?;
    let mut extra = decoder::init_params(cfg.d_s, 4, rng);
    extra.insert("proj.weight", random(rng, AUDITORY_DIM, cfg.n_a * cfg.d_s, 0.1));
    extra.insert("proj.bias", random(rng, 1, cfg.n_a * cfg.d_s, 0.1));
    let (n2, i2) = flatten(&extra);
    names.extend(n2);
    inputs.extend(i2);
    let k = names.len();
    for _ in 0..batch {
        let n_s = rng.random_range(1..4);
        let n_w = rng.random_range(2..5);
        inputs.push(random(rng, 1, AUDITORY_DIM, 1.0));
        inputs.push(random(rng, n_s, cfg.d_s, 1.0));
        inputs.push(random(rng, n_w, cfg.d_w, 1.0));
    }
    let check = check_gradients(&inputs, FD_STEP, |tape, vars| {
        let b = bindings(&names, &vars[..k]);
        let mut preds = Vec::with_capacity(batch);
        for s in 0..batch {
            let (a, sem, kv) = (vars[k + 3 * s], vars[k + 3 * s + 1], vars[k + 3 * s + 2]);
            let proj = project_on_tape(tape, a, cfg.n_a, &b)?;
            let x = tape.concat(&[proj, sem], 0)?;
            let f = fuse_on_tape(tape, x, cfg.n_a, kv, &cfg, &b)?;
            preds.push(decode_on_tape(tape, f.y, decoder::PREFIX, &b)?.mos);
        }
        let col = tape.concat(&preds, 0)?;
        Ok(total_loss_on_tape(tape, col, &actual, &loss)?.total)
    })?;
    Ok(check.max_relative_error())
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Runs `instances` random cases of every block, seeded by `seed`.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<SuiteResult>> {
    let cases: [(&'static str, Case); 5] = [
        ("encoder", encoder_case),
        ("projection", projection_case),
        ("fusion", fusion_case),
        ("decoder", decoder_case),
        ("end_to_end_loss", end_to_end_case),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(k, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 0x9E37_79B9));
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(case(&mut rng)?);
            }
            Ok(SuiteResult {
                name,
                instances,
                max_relative_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes_a_few_instances() {
        for r in gradient_suite(11, 3).unwrap() {
            assert!(r.max_relative_error < 1e-4, "{}: {}", r.name, r.max_relative_error);
        }
    }
}
