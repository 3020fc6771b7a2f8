use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::SplitMode;
use crate::audio::{load_wav, resample, Waveform, WORKING_RATE_HZ};
use crate::cochlea::{cochleagram_with, ErbScale, GammatoneFilterbank};
use crate::embeddings::{derive_seed, load_embedding, ManifestRow, SyntheticSample};
use crate::encoder::pool_to_40hz;
use crate::numerics::Tensor;
use crate::Result;

/// Cochlear front-end fixed at the working rate.
#[derive(Debug, Clone)]
pub struct Frontend {
    fb: GammatoneFilterbank,
}

impl Frontend {
    pub fn new(channels: usize) -> Result<Self> {
        let scale = ErbScale::for_sample_rate(channels, WORKING_RATE_HZ)?;
        Ok(Self {
            fb: GammatoneFilterbank::new(scale, WORKING_RATE_HZ)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fb.scale().d_f()
    }

    /// Pooled 40 Hz cochleagram frames of a waveform at any rate.
    pub fn pooled(&self, w: &Waveform) -> Result<Tensor> {
        let resampled;
        let w = if w.sample_rate_hz() == WORKING_RATE_HZ {
            w
        } else {
            resampled = resample(w, WORKING_RATE_HZ)?;
            &resampled
        };
        pool_to_40hz(&cochleagram_with(w, &self.fb)?)
    }
}

/// One utterance with everything the trainers consume.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub system_id: String,
    pub utterance_id: String,
    pub true_mos: f64,
    /// Pooled cochleagram, T × channels.
    pub frames: Tensor,
    pub x_h: Option<Tensor>,
    pub x_w2v: Tensor,
    /// Clean-signal counterpart of `x_h`, when known.
    pub clean_x_h: Option<Tensor>,
}

pub fn prepare_synthetic(samples: &[SyntheticSample], frontend: &Frontend) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                system_id: s.system_id.clone(),
                utterance_id: s.utterance_id.clone(),
                true_mos: s.true_mos,
                frames: frontend.pooled(&s.waveform)?,
                x_h: Some(s.x_h.frames().clone()),
                x_w2v: s.x_w2v.frames().clone(),
                clean_x_h: Some(s.clean_x_h.frames().clone()),
            })
        })
        .collect()
}

/// Loads manifest rows; a missing `h_path` file leaves `x_h` empty.
pub fn prepare_manifest(rows: &[ManifestRow], frontend: &Frontend) -> Result<Vec<PreparedSample>> {
    rows.iter()
        .map(|r| {
            let x_h = if r.h_path.is_file() {
                Some(load_embedding(&r.h_path)?.frames().clone())
            } else {
                None
            };
            Ok(PreparedSample {
                system_id: r.system_id.clone(),
                utterance_id: r.utterance_id.clone(),
                true_mos: r.true_mos,
                frames: frontend.pooled(&load_wav(&r.wav_path)?)?,
                x_h,
                x_w2v: load_embedding(&r.w2v_path)?.frames().clone(),
                clean_x_h: None,
            })
        })
        .collect()
}

/// Loads the `h_path` features of a manifest, e.g. a clean pool.
pub fn load_h_pool(rows: &[ManifestRow]) -> Result<Vec<Tensor>> {
    rows.iter()
        .map(|r| Ok(load_embedding(&r.h_path)?.frames().clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sizes of an 80/10/10 partition of `n` items.
fn partition_sizes(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n.min(1), 0, n.saturating_sub(1));
    }
    let val = ((n as f64) * 0.1).round().max(1.0) as usize;
    let test = val;
    (n - val - test, val, test)
}

/// Deterministic 80/10/10 split. In utterance mode each system's
/// utterances are shuffled and partitioned separately.
pub fn split_dataset(system_ids: &[&str], seed: u64, mode: SplitMode) -> Split {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in system_ids.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut split = Split::default();
    match mode {
        SplitMode::Utterance => {
            for (g, (_, mut idx)) in groups.into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, g as u64, 0x5117));
                idx.shuffle(&mut rng);
                let (tr, va, _) = partition_sizes(idx.len());
                split.train.extend_from_slice(&idx[..tr]);
                split.val.extend_from_slice(&idx[tr..tr + va]);
                split.test.extend_from_slice(&idx[tr + va..]);
            }
        }
        SplitMode::System => {
            let mut systems: Vec<Vec<usize>> = groups.into_values().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 0));
            systems.shuffle(&mut rng);
            let (tr, va, _) = partition_sizes(systems.len());
            for (k, idx) in systems.into_iter().enumerate() {
                let dst = if k < tr {
                    &mut split.train
                } else if k < tr + va {
                    &mut split.val
                } else {
                    &mut split.test
                };
                dst.extend(idx);
            }
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n_sys: usize, per: usize) -> Vec<String> {
        (0..n_sys * per).map(|i| format!("s{}", i / per)).collect()
    }

    #[test]
    fn utterance_split_covers_every_system() {
        let owned = ids(24, 15);
        let ids: Vec<&str> = owned.iter().map(String::as_str).collect();
        let s = split_dataset(&ids, 7, SplitMode::Utterance);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24 * 11, 48, 48));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..360).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(&ids, 7, SplitMode::Utterance));
        assert_ne!(s, split_dataset(&ids, 8, SplitMode::Utterance));
    }

    #[test]
    fn system_split_holds_out_systems() {
        let owned = ids(20, 3);
        let ids: Vec<&str> = owned.iter().map(String::as_str).collect();
        let s = split_dataset(&ids, 1, SplitMode::System);
        let systems = |v: &[usize]| v.iter().map(|&i| ids[i]).collect::<std::collections::BTreeSet<_>>();
        assert_eq!(systems(&s.test).len(), 2);
        assert!(systems(&s.train).is_disjoint(&systems(&s.test)));
    }
}
