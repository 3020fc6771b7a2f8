//! Stage-wise training: the auditory branch first, then the codebooks, then
//! the fusion network on top of both frozen branches.

mod config;
mod data;
mod gradsuite;
mod stages;

use std::collections::BTreeMap;

use crate::error::ensure;
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

pub use config::{parse_kv, PipelineConfig, RvqPool, SplitMode, TrainConfig};
pub use data::{load_h_pool, prepare_manifest, prepare_synthetic, split_dataset, Frontend, PreparedSample, Split};
pub use gradsuite::{gradient_suite, SuiteResult};
pub use stages::{
    predict, predict_apm, rvq_pool, train_stage_apm, train_stage_fusion, train_stage_rvq, EpochLog, Mode, Predictor,
    StageReport, StageState, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Apm,
    Rvq,
    Fusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Apm => "apm",
            Stage::Rvq => "rvq",
            Stage::Fusion => "fusion",
        }
    }
}

/// Which parameter prefixes a stage may change and which it must not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<&'static str>,
    pub frozen: Vec<&'static str>,
}

impl StagePlan {
    pub fn for_stage(stage: Stage) -> Self {
        let (trainable, frozen) = match stage {
            Stage::Apm => (vec!["apm."], vec![]),
            Stage::Rvq => (vec!["rvq."], vec!["apm."]),
            Stage::Fusion => (vec!["fusion.", "proj.", "decoder."], vec!["apm.", "rvq."]),
        };
        let plan = Self {
            stage,
            trainable,
            frozen,
        };
        debug_assert!(plan.validate().is_ok());
        plan
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trainable {
            for f in &self.frozen {
                ensure!(
                    !t.starts_with(f) && !f.starts_with(t),
                    State,
                    "prefix `{t}` is both trainable and frozen"
                );
            }
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p))
    }

    /// Digest of every tensor under a frozen prefix.
    pub fn frozen_digest(&self, params: &ParamStore) -> [u8; 32] {
        params.digest(&self.frozen)
    }
}

/// Heavy-ball momentum buffers, one per updated parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, Tensor>,
}

pub const VELOCITY_PREFIX: &str = "sgd.";

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn to_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (k, v) in &self.velocity {
            p.insert(format!("{VELOCITY_PREFIX}{k}"), v.clone());
        }
        p
    }

    pub fn from_params(params: &ParamStore) -> Self {
        Self {
            velocity: params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(VELOCITY_PREFIX).map(|n| (n.to_owned(), v.clone())))
                .collect(),
        }
    }
}

/// v ← momentum·v + g; p ← p − lr·v for every named gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "`{name}`: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if v.shape() != g.shape() {
            return Err(Error::Shape(format!("`{name}`: stale velocity shape {:?}", v.shape())));
        }
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = cfg.momentum * *vv + gv;
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}
