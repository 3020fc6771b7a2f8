//! Residual vector quantization over embedding sequences.
//!
//! Stage i quantizes the residual left by stage i−1 (r₀ is the input); the
//! first-stage residual `x − VQ₁(x)` is the semantic-distortion signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::EmbeddingSequence;
use crate::error::ensure;
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

pub const DEFAULT_CODEBOOK_SIZE: usize = 256;
pub const DEFAULT_STAGES: usize = 2;

/// One Euclidean codebook: K centroids of dimension D.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Tensor,
}

impl Codebook {
    pub fn new(centroids: Tensor) -> Result<Self> {
        centroids.dims2()?;
        ensure!(centroids.is_finite(), Argument, "centroids must be finite");
        Ok(Self { centroids })
    }

    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d = sq_dist(self.centroids.row_slice(k), v);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stacked codebooks sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodebook {
    stages: Vec<Codebook>,
}

impl RvqCodebook {
    pub fn new(stages: Vec<Codebook>) -> Result<Self> {
        if let Some(first) = stages.first() {
            ensure!(
                stages.iter().all(|s| s.dim() == first.dim()),
                Shape,
                "codebook stages disagree on dimension"
            );
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Codebook] {
        &self.stages
    }

    pub fn dim(&self) -> Option<usize> {
        self.stages.first().map(Codebook::dim)
    }

    /// Stored as `rvq.stage<i>` tensors.
    pub fn to_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (i, s) in self.stages.iter().enumerate() {
            p.insert(format!("rvq.stage{i}"), s.centroids.clone());
        }
        p
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let mut stages = Vec::new();
        while let Ok(t) = params.get(&format!("rvq.stage{}", stages.len())) {
            stages.push(Codebook::new(t.clone())?);
        }
        ensure!(!stages.is_empty(), State, "no rvq.stage0 tensor in checkpoint");
        Self::new(stages)
    }
}

/// Nearest-centroid quantization of every row of `r`.
pub fn vq_quantize(stage: &Codebook, r: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    ensure!(stage.size() > 0, State, "codebook is empty");
    let (n, d) = r.dims2()?;
    ensure!(d == stage.dim(), Shape, "rows have {d} columns, codebook has {}", stage.dim());
    let mut q = Vec::with_capacity(n * d);
    let mut idx = Vec::with_capacity(n);
    for i in 0..n {
        let k = stage.nearest(r.row_slice(i));
        q.extend_from_slice(stage.centroids.row_slice(k));
        idx.push(k);
    }
    Ok((Tensor::new(&[n, d], q)?, idx))
}

/// Per-stage quantized matrices and residuals.
#[derive(Debug, Clone)]
pub struct RvqOutput {
    pub quantized: Vec<Tensor>,
    pub residuals: Vec<Tensor>,
    pub indices: Vec<Vec<usize>>,
}

pub fn rvq_forward(cb: &RvqCodebook, x: &EmbeddingSequence) -> Result<RvqOutput> {
    rvq_forward_matrix(cb, x.frames())
}

pub fn rvq_forward_matrix(cb: &RvqCodebook, x: &Tensor) -> Result<RvqOutput> {
    let mut out = RvqOutput {
        quantized: Vec::new(),
        residuals: Vec::new(),
        indices: Vec::new(),
    };
    let mut r = x.clone();
    for stage in &cb.stages {
        let (q, idx) = vq_quantize(stage, &r)?;
        let next = Tensor::new(
            r.shape(),
            r.data().iter().zip(q.data()).map(|(a, b)| a - b).collect(),
        )?;
        out.quantized.push(q);
        out.indices.push(idx);
        out.residuals.push(next.clone());
        r = next;
    }
    Ok(out)
}

/// X_sem = x_h − VQ₁(x_h), same shape and frame rate as the input.
pub fn semantic_distortion(cb: &RvqCodebook, x_h: &EmbeddingSequence) -> Result<EmbeddingSequence> {
    let first = cb.stages.first().ok_or_else(|| Error::State("RVQ has no stages".into()))?;
    let (q, _) = vq_quantize(first, x_h.frames())?;
    let r = Tensor::new(
        x_h.frames().shape(),
        x_h.frames().data().iter().zip(q.data()).map(|(a, b)| a - b).collect(),
    )?;
    EmbeddingSequence::new(r, x_h.frame_rate_hz())
}

/// k-means training report.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Total squared quantization error after each assignment step.
    pub errors: Vec<f64>,
    pub iterations: usize,
}

/// k-means with k-means++ seeding. Empty clusters are re-seeded from the
/// point farthest from its centroid. Stops after `iters` iterations or when
/// assignments stop changing.
pub fn train_codebook(data: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let (n, d) = data.dims2()?;
    ensure!(k >= 1, Argument, "codebook size must be at least 1");
    ensure!(n >= k, Argument, "{n} rows cannot seed {k} centroids");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<&[f64]> = (0..n).map(|i| data.row_slice(i)).collect();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(rows[rng.random_range(0..n)].to_vec());
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(rows[pick].to_vec());
        for (i, r) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, &centroids[centroids.len() - 1]));
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        let mut a = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        for r in &rows {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let dd = sq_dist(r, c);
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            a.push(best);
            dists.push(best_d);
        }
        (a, dists)
    };

    let (mut labels, mut dists) = assign(&centroids);
    let mut errors = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        // update step
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(rows[i]) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // farthest point not already used for another empty cluster
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .unwrap_or(0);
                taken[far] = true;
                centroids[j] = rows[far].to_vec();
                dists[far] = 0.0;
            }
        }
        let (new_labels, new_dists) = assign(&centroids);
        errors.push(new_dists.iter().sum());
        let stable = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if stable {
            break;
        }
    }
    let codebook = Codebook::new(Tensor::from_rows(&centroids)?)?;
    Ok(KMeansFit {
        codebook,
        errors,
        iterations,
    })
}

/// Trains `stages` codebooks, each on the residuals left by the previous.
pub fn train_rvq(data: &Tensor, k: usize, stages: usize, iters: usize, seed: u64) -> Result<RvqCodebook> {
    ensure!(stages >= 1, Argument, "need at least one stage");
    let mut residual = data.clone();
    let mut books = Vec::with_capacity(stages);
    for s in 0..stages {
        let fit = train_codebook(&residual, k, iters, seed.wrapping_add(s as u64))?;
        let (q, _) = vq_quantize(&fit.codebook, &residual)?;
        residual = Tensor::new(
            residual.shape(),
            residual.data().iter().zip(q.data()).map(|(a, b)| a - b).collect(),
        )?;
        books.push(fit.codebook);
    }
    RvqCodebook::new(books)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(rows: &[Vec<f64>]) -> EmbeddingSequence {
        EmbeddingSequence::new(Tensor::from_rows(rows).unwrap(), 50.0).unwrap()
    }

    #[test]
    fn single_centroid_maps_everything() {
        let cb = Codebook::new(Tensor::row(&[1.0, -1.0])).unwrap();
        let r = Tensor::from_rows(&[vec![5.0, 5.0], vec![-3.0, 0.0]]).unwrap();
        let (q, idx) = vq_quantize(&cb, &r).unwrap();
        assert_eq!(idx, vec![0, 0]);
        assert_eq!(q.data(), &[1.0, -1.0, 1.0, -1.0]);

        let rvq = RvqCodebook::new(vec![cb]).unwrap();
        let x = seq(&[vec![5.0, 5.0], vec![-3.0, 0.0]]);
        let sem = semantic_distortion(&rvq, &x).unwrap();
        assert_eq!(sem.frames().data(), &[4.0, 6.0, -4.0, 1.0]);
        assert_eq!(sem.frame_rate_hz(), 50.0);
    }

    #[test]
    fn rows_on_centroids_have_zero_residual() {
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let rvq = RvqCodebook::new(vec![Codebook::new(c.clone()).unwrap()]).unwrap();
        let x = seq(&[vec![2.0, 2.0], vec![-1.0, 0.5], vec![0.0, 1.0]]);
        let out = rvq_forward(&rvq, &x).unwrap();
        assert_eq!(out.residuals.len(), 1);
        assert!(out.residuals[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(out.quantized[0], *x.frames());
        assert!(semantic_distortion(&rvq, &x).unwrap().frames().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let cb = Codebook::new(c).unwrap();
        assert_eq!(cb.nearest(&[0.0]), 0);
    }

    #[test]
    fn empty_codebook_and_dim_mismatch() {
        let cb = Codebook::new(Tensor::zeros(&[0, 3])).unwrap();
        assert!(matches!(vq_quantize(&cb, &Tensor::zeros(&[2, 3])), Err(Error::State(_))));
        let cb = Codebook::new(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(vq_quantize(&cb, &Tensor::zeros(&[2, 4])), Err(Error::Shape(_))));
        assert!(train_codebook(&Tensor::zeros(&[3, 2]), 4, 10, 0).is_err());
        assert!(RvqCodebook::new(vec![]).unwrap().dim().is_none());
    }

    #[test]
    fn k_equals_rows_is_lossless() {
        let data = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 5.0], vec![-2.0, 3.0], vec![7.0, 7.0]]).unwrap();
        let fit = train_codebook(&data, 4, 20, 9).unwrap();
        assert_eq!(*fit.errors.last().unwrap(), 0.0);
    }

    #[test]
    fn separated_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = [[-5.0, 2.0], [4.0, -3.0]];
        let mut rows = Vec::new();
        for i in 0..400 {
            let c = centers[i % 2];
            rows.push(vec![c[0] + rng.random_range(-0.5..0.5), c[1] + rng.random_range(-0.5..0.5)]);
        }
        let data = Tensor::from_rows(&rows).unwrap();
        let sample_means: Vec<Vec<f64>> = (0..2)
            .map(|b| {
                let pts: Vec<&Vec<f64>> = rows.iter().skip(b).step_by(2).collect();
                (0..2).map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / pts.len() as f64).collect()
            })
            .collect();
        let fit = train_codebook(&data, 2, 50, 4).unwrap();
        for m in &sample_means {
            let k = fit.codebook.nearest(m);
            assert!(sq_dist(fit.codebook.centroids().row_slice(k), m).sqrt() < 0.1);
        }
        assert!(fit.errors.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn checkpoint_names() {
        let rvq = RvqCodebook::new(vec![
            Codebook::new(Tensor::zeros(&[2, 3])).unwrap(),
            Codebook::new(Tensor::filled(&[4, 3], 1.0)).unwrap(),
        ])
        .unwrap();
        let p = rvq.to_params();
        assert!(p.contains("rvq.stage0") && p.contains("rvq.stage1"));
        assert_eq!(RvqCodebook::from_params(&p).unwrap(), rvq);
        assert!(matches!(RvqCodebook::from_params(&ParamStore::new()), Err(Error::State(_))));
    }

    proptest! {
        #[test]
        fn telescoping_and_translation(
            seed in 0u64..1000,
            shift in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng, n: usize| {
                Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
            };
            let stages: Vec<Codebook> = (0..3).map(|_| Codebook::new(mk(&mut rng, 5)).unwrap()).collect();
            let rvq = RvqCodebook::new(stages).unwrap();
            let x = mk(&mut rng, 9);
            let out = rvq_forward_matrix(&rvq, &x).unwrap();
            for i in 0..x.len() {
                let rebuilt: f64 = out.quantized.iter().map(|q| q.data()[i]).sum::<f64>()
                    + out.residuals.last().unwrap().data()[i];
                prop_assert!((rebuilt - x.data()[i]).abs() <= 1e-12);
            }

            let shifted = |t: &Tensor| {
                let cols = t.cols();
                Tensor::new(t.shape(), t.data().iter().enumerate().map(|(i, v)| v + shift[i % cols]).collect()).unwrap()
            };
            let moved = RvqCodebook::new(rvq.stages().iter().take(1)
                .map(|s| Codebook::new(shifted(s.centroids())).unwrap()).collect()).unwrap();
            let a = semantic_distortion(&rvq, &EmbeddingSequence::new(x.clone(), 50.0).unwrap()).unwrap();
            let b = semantic_distortion(&moved, &EmbeddingSequence::new(shifted(&x), 50.0).unwrap()).unwrap();
            prop_assert!(a.frames().max_abs_diff(b.frames()) < 1e-12);
        }
    }
}
