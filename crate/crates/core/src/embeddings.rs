//! Embedding sequences: the "APGE" file format, log-energy filterbank
//! features, and the seeded synthetic MOS corpus used for desk-scale
//! training.
//!
//! Synthetic utterances are harmonic tone complexes degraded by spectral
//! smearing and additive white noise. Every system has a latent quality
//! g ∈ [1.2, 4.8]; degradation strength is `(5 − g) / 4`, so both the
//! waveform and its features get worse as quality drops.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{Waveform, WORKING_RATE_HZ};
use crate::binio::{dim_u32, put_f32, put_f32_slice, put_u32, Reader};
use crate::error::ensure;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Frame rate of both synthetic embedding streams.
pub const EMBEDDING_RATE_HZ: f64 = 50.0;

/// Frame-rate feature matrix (N × D).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    frames: Tensor,
    frame_rate_hz: f64,
}

impl EmbeddingSequence {
    pub fn new(frames: Tensor, frame_rate_hz: f64) -> Result<Self> {
        let (n, _) = frames.dims2()?;
        ensure!(n >= 1, Argument, "embedding sequence needs at least one frame");
        ensure!(frames.is_finite(), Argument, "embedding frames must be finite");
        ensure!(
            frame_rate_hz > 0.0 && frame_rate_hz.is_finite(),
            Argument,
            "frame rate must be positive"
        );
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    /// "APGE" container: magic, u32 version = 1, u32 n_frames, u32 dim,
    /// f32 frame rate, then row-major little-endian f32 payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + 4 * self.frames.len());
        out.extend_from_slice(APGE_MAGIC);
        put_u32(&mut out, 1);
        put_u32(&mut out, dim_u32(self.n_frames(), "n_frames")?);
        put_u32(&mut out, dim_u32(self.dim(), "dim")?);
        put_f32(&mut out, self.frame_rate_hz as f32);
        put_f32_slice(&mut out, self.frames.data());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "APGE embedding");
        r.magic(APGE_MAGIC)?;
        let version = r.u32()?;
        ensure!(version == 1, Format, "APGE version {version} not supported");
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let rate = r.f32()? as f64;
        let payload = r.f32_vec(n.checked_mul(dim).ok_or_else(|| Error::Format("APGE size overflows".into()))?)?;
        r.finish()?;
        Self::new(Tensor::new(&[n, dim], payload)?, rate)
            .map_err(|e| Error::Format(format!("APGE content invalid: {e}")))
    }
}

const APGE_MAGIC: &[u8; 4] = b"APGE";

pub fn load_embedding(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    EmbeddingSequence::from_bytes(&std::fs::read(path)?)
}

pub fn save_embedding(path: impl AsRef<Path>, e: &EmbeddingSequence) -> Result<()> {
    std::fs::write(path, e.to_bytes()?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandSpacing {
    Mel,
    Linear,
}

/// Framed log-energy filterbank settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub n_bands: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub spacing: BandSpacing,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
}

impl FeatureConfig {
    /// 32 mel bands, 25 ms frames: the stand-in for the quantized stream.
    pub fn semantic() -> Self {
        Self {
            n_bands: 32,
            frame_len: 400,
            hop: 320,
            fft_size: 512,
            spacing: BandSpacing::Mel,
            f_lo_hz: 60.0,
            f_hi_hz: 7600.0,
        }
    }

    /// 24 linear bands, 30 ms frames: the stand-in for the key/value stream.
    pub fn contextual() -> Self {
        Self {
            n_bands: 24,
            frame_len: 480,
            hop: 320,
            fft_size: 512,
            spacing: BandSpacing::Linear,
            f_lo_hz: 60.0,
            f_hi_hz: 7600.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular band weights over the rfft bins, one row per band.
fn band_weights(cfg: &FeatureConfig, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let edges: Vec<f64> = match cfg.spacing {
        BandSpacing::Mel => {
            let (lo, hi) = (hz_to_mel(cfg.f_lo_hz), hz_to_mel(cfg.f_hi_hz));
            (0..cfg.n_bands + 2)
                .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_bands + 1) as f64))
                .collect()
        }
        BandSpacing::Linear => (0..cfg.n_bands + 2)
            .map(|i| cfg.f_lo_hz + (cfg.f_hi_hz - cfg.f_lo_hz) * i as f64 / (cfg.n_bands + 1) as f64)
            .collect(),
    };
    let bin_hz = sample_rate / cfg.fft_size as f64;
    (0..cfg.n_bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            let mut w: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect();
            if w.iter().all(|&v| v == 0.0) {
                // narrow band between bins: use the nearest bin
                let k = ((c / bin_hz).round() as usize).min(n_bins - 1);
                w[k] = 1.0;
            }
            w
        })
        .collect()
}

/// Natural-log band energies (plus 1e-6), one row per hop; frames start at
/// multiples of the hop and are zero-padded past the end of the signal.
pub fn log_filterbank(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor> {
    ensure!(cfg.frame_len <= cfg.fft_size, Argument, "frame longer than FFT");
    ensure!(cfg.hop > 0 && cfg.n_bands > 0, Argument, "hop and band count must be positive");
    let n_frames = (w.len() / cfg.hop).max(1);
    let weights = band_weights(cfg, w.sample_rate_hz() as f64);
    let window: Vec<f64> = (0..cfg.frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.frame_len as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let n_bins = cfg.fft_size / 2 + 1;
    let mut out = Vec::with_capacity(n_frames * cfg.n_bands);
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < cfg.frame_len {
                w.samples().get(start + i).copied().unwrap_or(0.0) * window[i]
            } else {
                0.0
            };
            *slot = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for bw in &weights {
            let total: f64 = bw.iter().sum();
            let e: f64 = bw.iter().zip(&power).map(|(a, p)| a * p).sum::<f64>() / total;
            out.push((e + 1e-6).ln());
        }
    }
    Tensor::new(&[n_frames, cfg.n_bands], out)
}

/// One synthetic corpus row.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub system_id: String,
    pub utterance_id: String,
    pub waveform: Waveform,
    pub x_h: EmbeddingSequence,
    pub x_w2v: EmbeddingSequence,
    /// Features of the undegraded signal, the clean pool for codebooks.
    pub clean_x_h: EmbeddingSequence,
    pub true_mos: f64,
    /// Latent system quality g.
    pub system_quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_systems: usize,
    pub utts_per_system: usize,
    pub seed: u64,
    pub duration_s: f64,
}

impl SynthConfig {
    pub fn new(n_systems: usize, utts_per_system: usize, seed: u64) -> Self {
        Self {
            n_systems,
            utts_per_system,
            seed,
            duration_s: 1.0,
        }
    }
}

/// Degradation strength for latent quality g; strictly decreasing in g.
pub fn degradation_strength(g: f64) -> f64 {
    (5.0 - g) / 4.0
}

/// White-noise standard deviation at latent quality g.
pub fn noise_std(g: f64) -> f64 {
    0.002 + 0.06 * degradation_strength(g)
}

/// Spectral-smearing Gaussian width in Hz at latent quality g.
pub fn smear_width_hz(g: f64) -> f64 {
    1.0 + 40.0 * degradation_strength(g)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-(seed, system, utterance) stream seed; `utt = u64::MAX` seeds the
/// system itself.
pub fn derive_seed(seed: u64, system: u64, utt: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ system) ^ utt)
}

pub fn system_quality(seed: u64, system: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, system as u64, u64::MAX));
    rng.random_range(1.2..4.8)
}

fn clean_signal(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let f0 = rng.random_range(100.0..220.0);
    let rate = rng.random_range(3.0..5.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let tilt = rng.random_range(0.6..1.2);
    let mut harmonics = Vec::new();
    let mut k = 1;
    while k as f64 * f0 < 5000.0 {
        let amp = (k as f64).powf(-tilt) * rng.random_range(0.5..1.0);
        harmonics.push((k as f64 * f0, amp, rng.random_range(0.0..2.0 * PI)));
        k += 1;
    }
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.6 + 0.4 * (2.0 * PI * rate * t + env_phase).sin();
            env * harmonics
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.4 / peak);
    }
    x
}

/// Blurs the magnitude spectrum with a Gaussian of `width_hz`, keeping phase.
fn smear(x: &[f64], fs: f64, width_hz: f64) -> Vec<f64> {
    let size = x.len().next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    spec.resize(size, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(size).process(&mut spec);

    let half = size / 2;
    let sigma = width_hz / (fs / size as f64);
    let reach = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-reach..=reach).map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let mags: Vec<f64> = spec[..=half].iter().map(|c| c.norm()).collect();
    let mut out = vec![Complex64::new(0.0, 0.0); size];
    for k in 0..=half {
        let mut acc = 0.0;
        for (j, &kv) in kernel.iter().enumerate() {
            let idx = k as isize + j as isize - reach;
            // reflect at DC and Nyquist
            let idx = if idx < 0 { -idx } else if idx > half as isize { 2 * half as isize - idx } else { idx };
            acc += kv * mags[idx as usize];
        }
        let m = acc / ksum;
        let phase = spec[k].arg();
        out[k] = Complex64::from_polar(m, phase);
        if k > 0 && k < half {
            out[size - k] = out[k].conj();
        }
    }
    planner.plan_fft_inverse(size).process(&mut out);
    out[..x.len()].iter().map(|c| c.re / size as f64).collect()
}

/// Synthesizes one degraded utterance at latent quality `g`.
pub fn synth_utterance(g: f64, duration_s: f64, rng: &mut ChaCha8Rng) -> Result<(Waveform, Waveform)> {
    let fs = WORKING_RATE_HZ as f64;
    let n = (duration_s * fs).round() as usize;
    ensure!(n > 0, Argument, "duration too short");
    let clean = clean_signal(rng, n, fs);
    let mut degraded = smear(&clean, fs, smear_width_hz(g));
    let noise = Normal::new(0.0, noise_std(g)).map_err(|e| Error::Argument(e.to_string()))?;
    for v in &mut degraded {
        *v += noise.sample(rng);
    }
    Ok((
        Waveform::new(clean, WORKING_RATE_HZ)?,
        Waveform::new(degraded, WORKING_RATE_HZ)?,
    ))
}

/// Seeded synthetic corpus; bit-identical for identical arguments.
pub fn synth_dataset(n_systems: usize, utts_per_system: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    synth_dataset_with(&SynthConfig::new(n_systems, utts_per_system, seed))
}

pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    ensure!(cfg.n_systems >= 2, Argument, "need at least 2 systems");
    ensure!(cfg.utts_per_system >= 1, Argument, "need at least 1 utterance per system");
    let sem = FeatureConfig::semantic();
    let ctx = FeatureConfig::contextual();
    let mut out = Vec::with_capacity(cfg.n_systems * cfg.utts_per_system);
    for s in 0..cfg.n_systems {
        let g = system_quality(cfg.seed, s);
        for u in 0..cfg.utts_per_system {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, s as u64, u as u64));
            let (clean, degraded) = synth_utterance(g, cfg.duration_s, &mut rng)?;
            let true_mos = (g + rng.random_range(-0.15..0.15)).clamp(1.0, 5.0);
            out.push(SyntheticSample {
                system_id: format!("sys{s:03}"),
                utterance_id: format!("sys{s:03}_utt{u:03}"),
                x_h: EmbeddingSequence::new(log_filterbank(&degraded, &sem)?, EMBEDDING_RATE_HZ)?,
                x_w2v: EmbeddingSequence::new(log_filterbank(&degraded, &ctx)?, EMBEDDING_RATE_HZ)?,
                clean_x_h: EmbeddingSequence::new(log_filterbank(&clean, &sem)?, EMBEDDING_RATE_HZ)?,
                waveform: degraded,
                true_mos,
                system_quality: g,
            });
        }
    }
    Ok(out)
}

/// One row of the dataset manifest CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub system_id: String,
    pub utterance_id: String,
    pub wav_path: PathBuf,
    pub h_path: PathBuf,
    pub w2v_path: PathBuf,
    pub true_mos: f64,
}

pub const MANIFEST_HEADER: [&str; 6] = ["system_id", "utterance_id", "wav_path", "h_path", "w2v_path", "true_mos"];

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([
            r.system_id.as_str(),
            r.utterance_id.as_str(),
            &r.wav_path.to_string_lossy(),
            &r.h_path.to_string_lossy(),
            &r.w2v_path.to_string_lossy(),
            &r.true_mos.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    ensure!(
        header.iter().eq(MANIFEST_HEADER.iter().copied()),
        Format,
        "manifest header must be {}",
        MANIFEST_HEADER.join(",")
    );
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let true_mos: f64 = rec[5]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad true_mos `{}`", &rec[5])))?;
        rows.push(ManifestRow {
            system_id: rec[0].to_owned(),
            utterance_id: rec[1].to_owned(),
            wav_path: resolve(&rec[2]),
            h_path: resolve(&rec[3]),
            w2v_path: resolve(&rec[4]),
            true_mos,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apge_two_by_three() {
        let e = EmbeddingSequence::new(
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.5]]).unwrap(),
            50.0,
        )
        .unwrap();
        let bytes = e.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20 + 24);
        let back = EmbeddingSequence::from_bytes(&bytes).unwrap();
        assert_eq!(back.frames().dims2().unwrap(), (2, 3));
        assert_eq!(back, e);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn apge_errors() {
        let e = EmbeddingSequence::new(Tensor::zeros(&[2, 3]), 50.0).unwrap();
        let bytes = e.to_bytes().unwrap();
        assert!(matches!(EmbeddingSequence::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"APGX");
        assert!(matches!(EmbeddingSequence::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(EmbeddingSequence::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(EmbeddingSequence::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = synth_dataset(2, 2, 5).unwrap();
        let b = synth_dataset(2, 2, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.waveform, y.waveform);
            assert_eq!(x.x_h, y.x_h);
            assert_eq!(x.x_w2v, y.x_w2v);
            assert_eq!(x.true_mos.to_bits(), y.true_mos.to_bits());
        }
        let c = synth_dataset(2, 2, 6).unwrap();
        assert_ne!(a[0].waveform, c[0].waveform);
    }

    #[test]
    fn mos_tracks_latent_quality() {
        let data = synth_dataset(3, 4, 1).unwrap();
        for s in &data {
            assert!((1.0..=5.0).contains(&s.true_mos));
            assert!((s.true_mos - s.system_quality).abs() <= 0.15);
        }
        assert_eq!(data[0].x_h.n_frames(), 50);
        assert_eq!(data[0].x_h.dim(), 32);
        assert_eq!(data[0].x_w2v.dim(), 24);
    }

    #[test]
    fn degradation_decreases_with_quality() {
        let gs: Vec<f64> = (0..=36).map(|i| 1.2 + 0.1 * i as f64).collect();
        for w in gs.windows(2) {
            assert!(noise_std(w[1]) < noise_std(w[0]));
            assert!(smear_width_hz(w[1]) < smear_width_hz(w[0]));
        }
    }

    #[test]
    fn invalid_sizes() {
        assert!(synth_dataset(1, 3, 0).is_err());
        assert!(synth_dataset(2, 0, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ManifestRow {
            system_id: "sysA".into(),
            utterance_id: "u1".into(),
            wav_path: dir.path().join("a.wav"),
            h_path: dir.path().join("a.h.apge"),
            w2v_path: dir.path().join("a.w.apge"),
            true_mos: 3.25,
        }];
        let p = dir.path().join("m.csv");
        write_manifest(&p, &rows).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }
}
