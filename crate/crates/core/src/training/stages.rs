use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{PipelineConfig, RvqPool, TrainConfig};
use super::data::{Frontend, PreparedSample, Split};
use super::{sgd_step, SgdState, Stage, StagePlan};
use crate::audio::Waveform;
use crate::decoder::{self, decode_on_tape, DecoderParams};
use crate::embeddings::{derive_seed, EmbeddingSequence, EMBEDDING_RATE_HZ};
use crate::encoder::{self, encode_on_tape, ApmEncoderConfig, AUDITORY_DIM};
use crate::error::ensure;
use crate::fusion::{self, fuse_on_tape, fusion_flops, project_on_tape, FusionConfig, META_KEY};
use crate::losses::{total_loss, total_loss_grad, LossConfig};
use crate::metrics::{srcc, system_level, PredictionRecord};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::rvq::{semantic_distortion, train_rvq, RvqCodebook};
use crate::{Error, Result};

/// Decoder head trained with the auditory branch.
pub const APM_HEAD_PREFIX: &str = "apm.head.";
const EPOCH_KEY: &str = "meta.epoch";

/// Loss components averaged over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub rank: f64,
    pub reg: f64,
    pub alpha: f64,
    /// System-level SRCC on the validation split, when defined.
    pub val_srcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub logs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_srcc: Option<f64>,
    /// Digest of the frozen tensors, identical before and after the stage.
    pub frozen_digest: [u8; 32],
}

/// Parameters, optimizer buffers and epoch counter of a running stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub params: ParamStore,
    pub sgd: SgdState,
    pub epoch: usize,
}

impl StageState {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            sgd: SgdState::new(),
            epoch: 0,
        }
    }

    pub fn to_checkpoint(&self) -> ParamStore {
        let mut p = self.params.clone();
        p.merge(&self.sgd.to_params());
        p.insert(EPOCH_KEY, Tensor::scalar(self.epoch as f64));
        p
    }

    pub fn from_checkpoint(ck: &ParamStore) -> Self {
        let epoch = ck.get(EPOCH_KEY).map(|t| t.data()[0] as usize).unwrap_or(0);
        let mut params = ParamStore::new();
        for (k, v) in ck.iter() {
            if !k.starts_with(super::VELOCITY_PREFIX) && k != EPOCH_KEY {
                params.insert(k, v.clone());
            }
        }
        Self {
            params,
            sgd: SgdState::from_params(ck),
            epoch,
        }
    }
}

#[derive(Debug, Clone)]
struct FusionInputs {
    aud: Tensor,
    sem: Tensor,
    w2v: Tensor,
}

enum Kind {
    Apm(ApmEncoderConfig),
    Fusion(FusionConfig, Vec<FusionInputs>),
}

/// Gradient training of one stage over prepared samples.
pub struct Trainer<'a> {
    data: &'a [PreparedSample],
    plan: StagePlan,
    tc: TrainConfig,
    frame_level: bool,
    head_hidden: usize,
    kind: Kind,
}

struct Forward {
    mos: Var,
    rows: Var,
}

impl<'a> Trainer<'a> {
    pub fn apm(data: &'a [PreparedSample], cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            data,
            plan: StagePlan::for_stage(Stage::Apm),
            tc: cfg.apm_train(),
            frame_level: false,
            head_hidden: cfg.apm_head_hidden,
            kind: Kind::Apm(cfg.encoder()),
        })
    }

    /// Caches the frozen auditory embeddings and distortion rows.
    pub fn fusion(data: &'a [PreparedSample], cfg: &PipelineConfig, frozen: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        ensure!(frozen.has_prefix("apm."), State, "fusion training needs a trained `apm.` checkpoint");
        ensure!(frozen.has_prefix("rvq."), State, "fusion training needs trained `rvq.` codebooks");
        ensure!(!data.is_empty(), Argument, "empty dataset");
        let enc = ApmEncoderConfig::from_params(frozen)?;
        let rvq = RvqCodebook::from_params(frozen)?;
        let mut cache = Vec::with_capacity(data.len());
        for s in data {
            let x_h = s
                .x_h
                .as_ref()
                .ok_or_else(|| Error::Argument(format!("`{}` has no x_h features", s.utterance_id)))?;
            let sem = semantic_distortion(&rvq, &EmbeddingSequence::new(x_h.clone(), EMBEDDING_RATE_HZ)?)?;
            cache.push(FusionInputs {
                aud: encoder::encode(&s.frames, &enc, frozen)?.to_tensor(),
                sem: sem.frames().clone(),
                w2v: s.x_w2v.clone(),
            });
        }
        let fcfg = cfg.fusion_config(cache[0].sem.cols(), cache[0].w2v.cols());
        fcfg.validate()?;
        Ok(Self {
            data,
            plan: StagePlan::for_stage(Stage::Fusion),
            tc: cfg.fusion_train(),
            frame_level: cfg.frame_level,
            head_hidden: cfg.decoder_hidden,
            kind: Kind::Fusion(fcfg, cache),
        })
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.tc
    }

    pub fn fusion_config(&self) -> Option<&FusionConfig> {
        match &self.kind {
            Kind::Fusion(f, _) => Some(f),
            Kind::Apm(_) => None,
        }
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, i: usize) -> Result<Forward> {
        match &self.kind {
            Kind::Apm(enc) => {
                let x = tape.constant(self.data[i].frames.clone());
                let e = encode_on_tape(tape, x, enc, b)?;
                let d = decode_on_tape(tape, e.embedding, APM_HEAD_PREFIX, b)?;
                Ok(Forward {
                    mos: d.mos,
                    rows: d.row_mos,
                })
            }
            Kind::Fusion(fcfg, cache) => {
                let c = &cache[i];
                let a = tape.constant(c.aud.clone());
                let proj = project_on_tape(tape, a, fcfg.n_a, b)?;
                let sem = tape.constant(c.sem.clone());
                let x_uni = tape.concat(&[proj, sem], 0)?;
                let kv = tape.constant(c.w2v.clone());
                let f = fuse_on_tape(tape, x_uni, fcfg.n_a, kv, fcfg, b)?;
                let d = decode_on_tape(tape, f.y, decoder::PREFIX, b)?;
                Ok(Forward {
                    mos: d.mos,
                    rows: d.row_mos,
                })
            }
        }
    }

    fn bind(&self, tape: &mut Tape, params: &ParamStore, trainable: &[&str]) -> Bindings {
        let mut b = Bindings::default();
        for p in &self.plan.trainable {
            b.extend(params.bind(tape, p, trainable));
        }
        b
    }

    /// Prediction for sample `i` with the stage's own head.
    pub fn predict(&self, params: &ParamStore, i: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params, &[]);
        let f = self.forward(&mut tape, &b, i)?;
        Ok(tape.scalar_value(f.mos))
    }

    pub fn predictions(&self, params: &ParamStore, idx: &[usize]) -> Result<Vec<PredictionRecord>> {
        idx.iter()
            .map(|&i| {
                Ok(PredictionRecord {
                    system_id: self.data[i].system_id.clone(),
                    utterance_id: self.data[i].utterance_id.clone(),
                    predicted: self.predict(params, i)?,
                    actual: self.data[i].true_mos,
                })
            })
            .collect()
    }

    /// System-level SRCC over `idx`, or `None` when undefined.
    pub fn validate(&self, params: &ParamStore, idx: &[usize]) -> Result<Option<f64>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let sys = system_level(&self.predictions(params, idx)?)?;
        if sys.systems.len() < 2 {
            return Ok(None);
        }
        Ok(srcc(&sys.predicted, &sys.actual).ok())
    }

    /// Fresh parameters for this stage, merged with `frozen`.
    pub fn init_state(&self, frozen: &ParamStore) -> Result<StageState> {
        let tag = match self.plan.stage {
            Stage::Apm => 1,
            Stage::Rvq => 2,
            Stage::Fusion => 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.tc.seed, tag, u64::MAX));
        let mut params = ParamStore::new();
        for f in &self.plan.frozen {
            params.merge(&frozen.subset(f));
        }
        match &self.kind {
            Kind::Apm(enc) => {
                params.merge(&encoder::init_params(enc, &mut rng));
                params.merge(&DecoderParams::init(AUDITORY_DIM, self.head_hidden, &mut rng).to_params(APM_HEAD_PREFIX));
            }
            Kind::Fusion(fcfg, _) => {
                params.merge(&fusion::init_params(fcfg, &mut rng)?);
                params.merge(&decoder::init_params(fcfg.d_s, self.head_hidden, &mut rng));
            }
        }
        Ok(StageState::new(params))
    }

    /// Continues from a checkpoint holding this stage's tensors, or from
    /// fresh ones merged with `frozen` when it holds none.
    pub fn resume_state(&self, frozen: &ParamStore, ck: Option<&ParamStore>) -> Result<StageState> {
        let Some(ck) = ck.filter(|c| self.plan.trainable.iter().any(|p| c.has_prefix(p))) else {
            return self.init_state(frozen);
        };
        let fresh = self.init_state(frozen)?;
        let state = StageState::from_checkpoint(ck);
        for (k, v) in fresh.params.iter() {
            match state.params.get(k) {
                Ok(t) if t.shape() == v.shape() => {}
                Ok(_) => return Err(Error::Shape(format!("checkpoint tensor `{k}` does not match the config"))),
                Err(_) => return Err(Error::State(format!("checkpoint lacks `{k}`"))),
            }
        }
        Ok(state)
    }

    /// One pass over `train` in a shuffled order fixed by (seed, epoch).
    pub fn epoch(&self, state: &mut StageState, train: &[usize]) -> Result<EpochLog> {
        ensure!(!train.is_empty(), Argument, "empty training split");
        let mut order = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.tc.seed, state.epoch as u64, self.plan.stage as u64));
        order.shuffle(&mut rng);
        let alpha = self.tc.loss.alpha;
        let rank_cfg = LossConfig { alpha: 0.0, ..self.tc.loss };
        let (mut sum_rank, mut sum_reg, mut batches) = (0.0, 0.0, 0usize);

        for batch in order.chunks(self.tc.batch_size) {
            let n = batch.len();
            let mut runs = Vec::with_capacity(n);
            for &i in batch {
                let mut tape = Tape::new();
                let b = self.bind(&mut tape, &state.params, &self.plan.trainable);
                let f = self.forward(&mut tape, &b, i)?;
                runs.push((tape, b, f));
            }
            let preds: Vec<f64> = runs.iter().map(|(t, _, f)| t.scalar_value(f.mos)).collect();
            let actual: Vec<f64> = batch.iter().map(|&i| self.data[i].true_mos).collect();
            let (rank, rank_grad) = if alpha < 1.0 {
                let (bd, g) = total_loss_grad(&preds, &actual, &rank_cfg)?;
                (bd.rank, g)
            } else {
                (total_loss(&preds, &actual, &rank_cfg)?.rank, vec![0.0; n])
            };

            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut reg = 0.0;
            for (k, (tape, b, f)) in runs.iter_mut().enumerate() {
                let target = tape.constant(Tensor::scalar(actual[k]));
                let err = if self.frame_level {
                    let d = tape.sub(f.rows, target)?;
                    let d = tape.abs(d);
                    tape.mean(d, None)?
                } else {
                    let d = tape.sub(f.mos, target)?;
                    tape.abs(d)
                };
                reg += tape.scalar_value(err) / n as f64;
                let a = tape.scale(f.mos, (1.0 - alpha) * rank_grad[k]);
                let r = tape.scale(err, alpha / n as f64);
                let root = tape.add(a, r)?;
                let g = tape.backward(root)?;
                for (name, var) in b.iter() {
                    if !self.plan.is_trainable(name) {
                        continue;
                    }
                    if let Some(gv) = g.get(var) {
                        match grads.get_mut(name) {
                            Some(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(name.to_owned(), gv);
                            }
                        }
                    }
                }
            }
            sgd_step(&mut state.params, &grads, &mut state.sgd, &self.tc)?;
            sum_rank += rank;
            sum_reg += reg;
            batches += 1;
        }
        state.epoch += 1;
        let (rank, reg) = (sum_rank / batches as f64, sum_reg / batches as f64);
        Ok(EpochLog {
            epoch: state.epoch,
            total: (1.0 - alpha) * rank + alpha * reg,
            rank,
            reg,
            alpha,
            val_srcc: None,
        })
    }

    /// Runs up to the configured epoch count with early stopping on the
    /// validation SRCC; returns the best parameters seen.
    pub fn run(&self, mut state: StageState, split: &Split) -> Result<(ParamStore, StageReport)> {
        let digest = self.plan.frozen_digest(&state.params);
        let mut logs = Vec::new();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut since_best = 0;
        while state.epoch < self.tc.epochs {
            let mut log = self.epoch(&mut state, &split.train)?;
            log.val_srcc = self.validate(&state.params, &split.val)?;
            logs.push(log);
            match log.val_srcc {
                Some(v) if best.as_ref().is_none_or(|b| v > b.0) => {
                    best = Some((v, log.epoch, state.params.clone()));
                    since_best = 0;
                }
                _ => since_best += 1,
            }
            if best.is_some() && since_best >= self.tc.patience {
                break;
            }
        }
        let (params, best_epoch, best_val) = match best {
            Some((v, e, p)) => (p, Some(e), Some(v)),
            None => (state.params, None, None),
        };
        if self.plan.frozen_digest(&params) != digest {
            return Err(Error::State("frozen parameters changed during training".into()));
        }
        Ok((
            params,
            StageReport {
                stage: self.plan.stage,
                logs,
                best_epoch,
                best_val_srcc: best_val,
                frozen_digest: digest,
            },
        ))
    }
}

/// Trains the auditory encoder and its private head with L1 loss.
pub fn train_stage_apm(data: &[PreparedSample], split: &Split, cfg: &PipelineConfig) -> Result<(ParamStore, StageReport)> {
    ensure!(!data.is_empty() && !split.train.is_empty(), Argument, "empty dataset");
    let t = Trainer::apm(data, cfg)?;
    let state = t.init_state(&ParamStore::new())?;
    t.run(state, split)
}

/// Frames used to fit the codebooks.
pub fn rvq_pool(data: &[PreparedSample], idx: &[usize], pool: RvqPool) -> Result<Vec<Tensor>> {
    idx.iter()
        .map(|&i| {
            let s = &data[i];
            let t = match pool {
                RvqPool::Clean => s.clean_x_h.as_ref().or(s.x_h.as_ref()),
                RvqPool::Train => s.x_h.as_ref(),
            };
            t.cloned()
                .ok_or_else(|| Error::Argument(format!("`{}` has no x_h features", s.utterance_id)))
        })
        .collect()
}

/// k-means codebooks over the stacked frames of `pool`, as `rvq.` tensors.
pub fn train_stage_rvq(pool: &[Tensor], cfg: &PipelineConfig) -> Result<ParamStore> {
    ensure!(!pool.is_empty(), Argument, "empty codebook pool");
    let d = pool[0].cols();
    let mut data = Vec::new();
    let mut n = 0;
    for t in pool {
        ensure!(t.cols() == d, Shape, "pool frames have widths {d} and {}", t.cols());
        data.extend_from_slice(t.data());
        n += t.rows();
    }
    let stacked = Tensor::new(&[n, d], data)?;
    let seed = derive_seed(cfg.seed, 2, u64::MAX);
    Ok(train_rvq(&stacked, cfg.rvq_codebook_size, cfg.rvq_stages, cfg.rvq_iterations, seed)?.to_params())
}

/// Trains projection, fusion layers and decoder on top of frozen `apm.` and
/// `rvq.` tensors; the result holds all of them.
pub fn train_stage_fusion(
    data: &[PreparedSample],
    split: &Split,
    frozen: &ParamStore,
    cfg: &PipelineConfig,
) -> Result<(ParamStore, StageReport)> {
    let t = Trainer::fusion(data, cfg, frozen)?;
    let state = t.init_state(frozen)?;
    t.run(state, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Auditory and distortion rows query the key stream.
    Full,
    /// Only the projected auditory rows are kept.
    Pruned,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "pruned" => Ok(Self::Pruned),
            _ => Err(Error::Argument(format!("mode must be `full` or `pruned`, got `{s}`"))),
        }
    }
}

/// Inference over a merged checkpoint.
#[derive(Debug, Clone)]
pub struct Predictor {
    encoder: ApmEncoderConfig,
    fusion: Option<FusionConfig>,
    rvq: Option<RvqCodebook>,
    params: ParamStore,
    frontend: Frontend,
}

impl Predictor {
    pub fn new(params: ParamStore) -> Result<Self> {
        ensure!(params.has_prefix("apm."), State, "checkpoint has no `apm.` tensors");
        let encoder = ApmEncoderConfig::from_params(&params)?;
        let fusion = if params.contains(META_KEY) {
            Some(FusionConfig::from_params(&params)?)
        } else {
            None
        };
        let rvq = if params.has_prefix("rvq.") {
            Some(RvqCodebook::from_params(&params)?)
        } else {
            None
        };
        Ok(Self {
            frontend: Frontend::new(encoder.d_f)?,
            encoder,
            fusion,
            rvq,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn frontend(&self) -> &Frontend {
        &self.frontend
    }

    pub fn fusion_config(&self) -> Option<&FusionConfig> {
        self.fusion.as_ref()
    }

    pub fn has_apm_head(&self) -> bool {
        self.params.has_prefix(APM_HEAD_PREFIX)
    }

    fn fusion_or_err(&self) -> Result<&FusionConfig> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::State("checkpoint has no fusion tensors".into()))
    }

    /// Query rows for the chosen mode.
    pub fn joint(&self, frames: &Tensor, x_h: Option<&Tensor>, mode: Mode) -> Result<fusion::JointEmbedding> {
        let fcfg = self.fusion_or_err()?;
        let a = encoder::encode(frames, &self.encoder, &self.params)?;
        match mode {
            Mode::Pruned => fusion::prune_for_inference(&a, fcfg.n_a, &self.params),
            Mode::Full => {
                let x_h = x_h.ok_or_else(|| Error::Argument("full mode needs x_h features".into()))?;
                let rvq = self
                    .rvq
                    .as_ref()
                    .ok_or_else(|| Error::State("full mode needs `rvq.` codebooks".into()))?;
                let sem = semantic_distortion(rvq, &EmbeddingSequence::new(x_h.clone(), EMBEDDING_RATE_HZ)?)?;
                let proj = fusion::project_auditory(&a, fcfg.n_a, &self.params)?;
                fusion::JointEmbedding::new(proj, Some(sem.frames()))
            }
        }
    }

    pub fn fused(&self, frames: &Tensor, x_w2v: &Tensor, x_h: Option<&Tensor>, mode: Mode) -> Result<fusion::FusionOutput> {
        let fcfg = self.fusion_or_err()?;
        let joint = self.joint(frames, x_h, mode)?;
        fusion::fuse(
            &joint,
            &EmbeddingSequence::new(x_w2v.clone(), EMBEDDING_RATE_HZ)?,
            fcfg,
            &self.params,
        )
    }

    /// MOS from pooled cochleagram frames.
    pub fn predict_frames(&self, frames: &Tensor, x_w2v: &Tensor, x_h: Option<&Tensor>, mode: Mode) -> Result<f64> {
        let out = self.fused(frames, x_w2v, x_h, mode)?;
        decoder::decode(&out.y, &self.params)
    }

    pub fn predict(&self, w: &Waveform, x_w2v: &Tensor, x_h: Option<&Tensor>, mode: Mode) -> Result<f64> {
        self.predict_frames(&self.frontend.pooled(w)?, x_w2v, x_h, mode)
    }

    /// MOS from the auditory branch and its private head alone.
    pub fn predict_apm_frames(&self, frames: &Tensor) -> Result<f64> {
        ensure!(self.has_apm_head(), State, "checkpoint has no `{APM_HEAD_PREFIX}` tensors");
        let a = encoder::encode(frames, &self.encoder, &self.params)?;
        DecoderParams::from_params(&self.params, APM_HEAD_PREFIX)?.decode(&a.to_tensor())
    }

    /// Multiply-adds of fusion plus decoder for `n_s` distortion rows and
    /// `n_w` key frames.
    pub fn flops(&self, n_s: usize, n_w: usize, mode: Mode) -> Result<u64> {
        let fcfg = self.fusion_or_err()?;
        let n_q = match mode {
            Mode::Full => fcfg.n_a + n_s,
            Mode::Pruned => fcfg.n_a,
        };
        let dec = DecoderParams::from_params(&self.params, decoder::PREFIX)?;
        let decode = 2 * (n_q * (dec.in_dim() * dec.hidden() + dec.hidden())) as u64;
        Ok(fusion_flops(n_q, n_w, fcfg) + decode)
    }
}

pub fn predict(w: &Waveform, x_w2v: &Tensor, x_h: Option<&Tensor>, params: &ParamStore, mode: Mode) -> Result<f64> {
    Predictor::new(params.clone())?.predict(w, x_w2v, x_h, mode)
}

pub fn predict_apm(w: &Waveform, params: &ParamStore) -> Result<f64> {
    let p = Predictor::new(params.clone())?;
    p.predict_apm_frames(&p.frontend.pooled(w)?)
}
