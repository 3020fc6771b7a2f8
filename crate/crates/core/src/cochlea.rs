//! Cochlear transduction: ERB-spaced gammatone filtering, half-wave
//! rectification and gain-compensated cube-root compression.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::binio::{dim_u32, put_f32_slice, put_u32, Reader};
use crate::error::ensure;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Bandwidth scaling factor of the gammatone envelope.
pub const GAMMATONE_B: f64 = 1.019;
/// Default FIR truncation length (64 ms at 16 kHz).
pub const DEFAULT_KERNEL_LEN: usize = 1024;
pub const DEFAULT_CHANNELS: usize = 64;
pub const DEFAULT_F_MIN_HZ: f64 = 20.0;

const ERB_Q: f64 = 9.264_49;
const ERB_MIN: f64 = 24.7;

/// Equivalent rectangular bandwidth in Hz: 24.7 + f / 9.26449.
pub fn erb_bandwidth(f_hz: f64) -> Result<f64> {
    ensure!(f_hz >= 0.0, Argument, "frequency must be non-negative, got {f_hz}");
    Ok(ERB_MIN + f_hz / ERB_Q)
}

/// ERB-rate, the integral of 1/ERB(f): 9.26449·ln(1 + f/(24.7·9.26449)).
pub fn erb_rate(f_hz: f64) -> f64 {
    ERB_Q * (1.0 + f_hz / (ERB_MIN * ERB_Q)).ln()
}

pub fn erb_rate_inverse(e: f64) -> f64 {
    ERB_MIN * ERB_Q * ((e / ERB_Q).exp() - 1.0)
}

/// Channel center frequencies, uniformly spaced in ERB-rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ErbScale {
    f_min_hz: f64,
    f_max_hz: f64,
    centers: Vec<f64>,
}

impl ErbScale {
    /// Default bounds for a sample rate: 20 Hz to min(20 kHz, 0.45·fs).
    pub fn for_sample_rate(d_f: usize, sample_rate_hz: u32) -> Result<Self> {
        let f_max = (0.45 * sample_rate_hz as f64).min(20_000.0);
        make_erb_scale(d_f, DEFAULT_F_MIN_HZ, f_max)
    }

    pub fn d_f(&self) -> usize {
        self.centers.len()
    }

    pub fn f_min_hz(&self) -> f64 {
        self.f_min_hz
    }

    pub fn f_max_hz(&self) -> f64 {
        self.f_max_hz
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
}

pub fn make_erb_scale(d_f: usize, f_min_hz: f64, f_max_hz: f64) -> Result<ErbScale> {
    ensure!(d_f >= 2, Argument, "need at least 2 channels, got {d_f}");
    ensure!(
        f_min_hz > 0.0 && f_min_hz < f_max_hz && f_max_hz.is_finite(),
        Argument,
        "need 0 < f_min < f_max, got {f_min_hz}..{f_max_hz}"
    );
    let (lo, hi) = (erb_rate(f_min_hz), erb_rate(f_max_hz));
    let step = (hi - lo) / (d_f - 1) as f64;
    let mut centers: Vec<f64> = (0..d_f).map(|i| erb_rate_inverse(lo + step * i as f64)).collect();
    // pin the endpoints exactly
    centers[0] = f_min_hz;
    centers[d_f - 1] = f_max_hz;
    Ok(ErbScale {
        f_min_hz,
        f_max_hz,
        centers,
    })
}

/// Unnormalized gammatone impulse response
/// t³·exp(−2π·b·ERB(f)·t)·cos(2π·f·t).
pub fn gammatone_response(f_hz: f64, b: f64, t_s: f64) -> Result<f64> {
    ensure!(t_s >= 0.0, Argument, "time must be non-negative, got {t_s}");
    let erb = erb_bandwidth(f_hz)?;
    Ok(t_s.powi(3) * (-2.0 * PI * b * erb * t_s).exp() * (2.0 * PI * f_hz * t_s).cos())
}

/// Truncated-FIR gammatone filters, one per ERB channel, each scaled to unit
/// gain at its center frequency.
#[derive(Debug, Clone)]
pub struct GammatoneFilterbank {
    scale: ErbScale,
    sample_rate_hz: u32,
    b: f64,
    kernels: Vec<Vec<f64>>,
}

impl GammatoneFilterbank {
    pub fn new(scale: ErbScale, sample_rate_hz: u32) -> Result<Self> {
        Self::with_kernel_len(scale, sample_rate_hz, DEFAULT_KERNEL_LEN)
    }

    pub fn with_kernel_len(scale: ErbScale, sample_rate_hz: u32, kernel_len: usize) -> Result<Self> {
        ensure!(sample_rate_hz > 0, Argument, "sample rate must be positive");
        ensure!(kernel_len >= 2, Argument, "kernel length must be at least 2");
        let fs = sample_rate_hz as f64;
        let kernels = scale
            .centers
            .iter()
            .map(|&fc| {
                let raw: Vec<f64> = (0..kernel_len)
                    .map(|n| gammatone_response(fc, GAMMATONE_B, n as f64 / fs))
                    .collect::<Result<_>>()?;
                let gain = dtft_magnitude(&raw, fc / fs);
                Ok(raw.into_iter().map(|v| v / gain).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scale,
            sample_rate_hz,
            b: GAMMATONE_B,
            kernels,
        })
    }

    pub fn scale(&self) -> &ErbScale {
        &self.scale
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn kernel_len(&self) -> usize {
        self.kernels[0].len()
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    /// Offset of the "same"-mode output window into the full convolution.
    pub fn same_offset(&self) -> usize {
        (self.kernel_len() - 1) / 2
    }
}

/// |Σ h[n]·e^{−i2πνn}| at normalized frequency ν (cycles/sample).
fn dtft_magnitude(h: &[f64], nu: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in h.iter().enumerate() {
        let ph = 2.0 * PI * nu * n as f64;
        re += v * ph.cos();
        im -= v * ph.sin();
    }
    re.hypot(im)
}

/// Filters `w` through every channel: column c is the "same"-aligned linear
/// convolution of the signal with kernel c (zero-padded edges), giving an
/// (N × d_f) matrix.
pub fn apply_filterbank(w: &Waveform, fb: &GammatoneFilterbank) -> Result<Tensor> {
    ensure!(
        w.sample_rate_hz() == fb.sample_rate_hz,
        Argument,
        "waveform at {} Hz, filterbank built for {} Hz",
        w.sample_rate_hz(),
        fb.sample_rate_hz
    );
    let n = w.len();
    let d_f = fb.kernels.len();
    let mut out = vec![0.0; n * d_f];
    if n == 0 {
        return Tensor::new(&[0, d_f], out);
    }
    let len = fb.kernel_len();
    let offset = fb.same_offset();
    let size = (n + len - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(size);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(size);

    let mut signal: Vec<Complex64> = w.samples().iter().map(|&s| Complex64::new(s, 0.0)).collect();
    signal.resize(size, Complex64::new(0.0, 0.0));
    fwd.process(&mut signal);

    // Two real kernels share one complex transform: (h1 + i·h2) * x gives
    // h1*x in the real part and h2*x in the imaginary part.
    let norm = 1.0 / size as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    for pair in (0..d_f).step_by(2) {
        let second = (pair + 1 < d_f).then_some(pair + 1);
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (k, &v) in fb.kernels[pair].iter().enumerate() {
            buf[k].re = v;
        }
        if let Some(s) = second {
            for (k, &v) in fb.kernels[s].iter().enumerate() {
                buf[k].im = v;
            }
        }
        fwd.process(&mut buf);
        for (b, x) in buf.iter_mut().zip(&signal) {
            *b *= x;
        }
        inv.process(&mut buf);
        for t in 0..n {
            let v = buf[t + offset];
            out[t * d_f + pair] = v.re * norm;
            if let Some(s) = second {
                out[t * d_f + s] = v.im * norm;
            }
        }
    }
    Tensor::new(&[n, d_f], out)
}

/// Half-wave rectification max(0, x).
pub fn rectify(x_gamma: &Tensor) -> Tensor {
    x_gamma.map(|v| v.max(0.0))
}

/// Cube-root compression with gain 3: 3·x^(1/3). Entries must be ≥ 0.
pub fn compress(x_rec: &Tensor) -> Result<Tensor> {
    if let Some(v) = x_rec.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Argument(format!(
            "compression input must be rectified, found {v}"
        )));
    }
    Ok(x_rec.map(|v| 3.0 * v.cbrt()))
}

/// Non-negative (N × d_f) inner-hair-cell response matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cochleagram {
    data: Tensor,
    sample_rate_hz: u32,
    scale: ErbScale,
}

impl Cochleagram {
    pub fn new(data: Tensor, sample_rate_hz: u32, scale: ErbScale) -> Result<Self> {
        let (_, d_f) = data.dims2()?;
        ensure!(d_f == scale.d_f(), Shape, "{d_f} columns for {} channels", scale.d_f());
        ensure!(
            data.data().iter().all(|v| v.is_finite() && *v >= 0.0),
            Argument,
            "cochleagram entries must be finite and non-negative"
        );
        Ok(Self {
            data,
            sample_rate_hz,
            scale,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn n_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn d_f(&self) -> usize {
        self.scale.d_f()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn scale(&self) -> &ErbScale {
        &self.scale
    }

    /// "APGC" container: magic, u32 version = 1, u32 n_frames, u32 d_f,
    /// then row-major little-endian f32 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_apgc(&self.data)
    }
}

const APGC_MAGIC: &[u8; 4] = b"APGC";

pub fn encode_apgc(data: &Tensor) -> Result<Vec<u8>> {
    let (n, d_f) = data.dims2()?;
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(APGC_MAGIC);
    put_u32(&mut out, 1);
    put_u32(&mut out, dim_u32(n, "n_frames")?);
    put_u32(&mut out, dim_u32(d_f, "d_f")?);
    put_f32_slice(&mut out, data.data());
    Ok(out)
}

/// Reads an "APGC" container back as an (n_frames × d_f) matrix.
pub fn decode_apgc(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "APGC cochleagram");
    r.magic(APGC_MAGIC)?;
    let version = r.u32()?;
    ensure!(version == 1, Format, "APGC version {version} not supported");
    let n = r.u32()? as usize;
    let d_f = r.u32()? as usize;
    let data = r.f32_vec(n * d_f)?;
    r.finish()?;
    Tensor::new(&[n, d_f], data)
}

pub fn write_apgc(path: impl AsRef<Path>, c: &Cochleagram) -> Result<()> {
    std::fs::write(path, c.to_bytes()?)?;
    Ok(())
}

/// Filterbank → rectify → compress.
pub fn cochleagram(w: &Waveform, scale: &ErbScale) -> Result<Cochleagram> {
    let fb = GammatoneFilterbank::new(scale.clone(), w.sample_rate_hz())?;
    cochleagram_with(w, &fb)
}

/// [`cochleagram`] with a prebuilt filterbank.
pub fn cochleagram_with(w: &Waveform, fb: &GammatoneFilterbank) -> Result<Cochleagram> {
    let x_gamma = apply_filterbank(w, fb)?;
    let x_ele = compress(&rectify(&x_gamma))?;
    Cochleagram::new(x_ele, w.sample_rate_hz(), fb.scale.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(N·L) "same" convolution.
    fn convolve_same_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
        let off = (h.len() - 1) / 2;
        (0..x.len())
            .map(|t| {
                let full = t + off;
                (0..x.len())
                    .filter(|&m| full >= m && full - m < h.len())
                    .map(|m| x[m] * h[full - m])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn erb_values() {
        assert_eq!(erb_bandwidth(0.0).unwrap(), 24.7);
        assert!((erb_bandwidth(1000.0).unwrap() - 132.639_023_087).abs() < 1e-9);
        assert!((erb_bandwidth(9264.49).unwrap() - 1024.7).abs() < 1e-9);
        assert!(matches!(erb_bandwidth(-1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn erb_rate_is_integral_of_inverse_bandwidth() {
        // midpoint-rule quadrature of 1/ERB from 0 to f
        let f = 3000.0;
        let steps = 200_000;
        let df = f / steps as f64;
        let quad: f64 = (0..steps)
            .map(|i| df / erb_bandwidth((i as f64 + 0.5) * df).unwrap())
            .sum();
        assert!((quad - erb_rate(f)).abs() < 1e-8);
        assert!((erb_rate_inverse(erb_rate(f)) - f).abs() < 1e-9);
    }

    #[test]
    fn scale_endpoints_and_errors() {
        let s = make_erb_scale(2, 20.0, 20_000.0).unwrap();
        assert_eq!(s.centers(), &[20.0, 20_000.0]);
        assert!(make_erb_scale(1, 20.0, 20_000.0).is_err());
        assert!(make_erb_scale(4, 0.0, 100.0).is_err());
        assert!(make_erb_scale(4, 200.0, 100.0).is_err());
    }

    #[test]
    fn middle_center_matches_bisection() {
        let s = make_erb_scale(3, 20.0, 7200.0).unwrap();
        let target = 0.5 * (erb_rate(20.0) + erb_rate(7200.0));
        let (mut lo, mut hi) = (20.0, 7200.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if erb_rate(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((s.centers()[1] - 0.5 * (lo + hi)).abs() < 1e-6);
    }

    #[test]
    fn default_scale_caps_at_0_45_fs() {
        let s = ErbScale::for_sample_rate(64, 16_000).unwrap();
        assert_eq!(s.f_max_hz(), 7200.0);
        assert!(s.centers().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn gammatone_onset_and_decay() {
        assert_eq!(gammatone_response(1000.0, GAMMATONE_B, 0.0).unwrap(), 0.0);
        assert!(gammatone_response(1000.0, GAMMATONE_B, -1e-3).is_err());
        let rate = 2.0 * PI * GAMMATONE_B * erb_bandwidth(1000.0).unwrap();
        // envelope t³e^{−rate·t} peaks at t = 3/rate
        let env = |t: f64| t.powi(3) * (-rate * t).exp();
        let peak = env(3.0 / rate);
        let late = gammatone_response(1000.0, GAMMATONE_B, 20.0 / rate).unwrap();
        assert!(late.abs() < 1e-3 * peak);
    }

    #[test]
    fn kernel_spectrum_peaks_at_center() {
        let scale = make_erb_scale(2, 1000.0, 4000.0).unwrap();
        let fb = GammatoneFilterbank::new(scale, 16_000).unwrap();
        let h = &fb.kernels()[0];
        assert_eq!(h[0], 0.0);
        let n = h.len();
        let bin_hz = 16_000.0 / n as f64;
        let best = (0..n / 2)
            .max_by(|&a, &b| {
                dtft_magnitude(h, a as f64 / n as f64)
                    .total_cmp(&dtft_magnitude(h, b as f64 / n as f64))
            })
            .unwrap();
        assert!((best as f64 * bin_hz - 1000.0).abs() <= bin_hz);
        assert!((dtft_magnitude(h, 1000.0 / 16_000.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let scale = make_erb_scale(5, 100.0, 6000.0).unwrap();
        let fb = GammatoneFilterbank::with_kernel_len(scale, 16_000, 64).unwrap();
        let x: Vec<f64> = (0..300).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.5).collect();
        let w = Waveform::new(x.clone(), 16_000).unwrap();
        let y = apply_filterbank(&w, &fb).unwrap();
        for (c, k) in fb.kernels().iter().enumerate() {
            let direct = convolve_same_direct(&x, k);
            for t in 0..x.len() {
                assert!((y.get(t, c) - direct[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_reproduces_kernels() {
        let scale = make_erb_scale(3, 100.0, 4000.0).unwrap();
        let fb = GammatoneFilterbank::with_kernel_len(scale, 16_000, 128).unwrap();
        let mut x = vec![0.0; 400];
        x[fb.same_offset()] = 1.0;
        let y = apply_filterbank(&Waveform::new(x, 16_000).unwrap(), &fb).unwrap();
        for (c, k) in fb.kernels().iter().enumerate() {
            for (t, &kv) in k.iter().enumerate() {
                assert!((y.get(t, c) - kv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let fb = GammatoneFilterbank::new(ErbScale::for_sample_rate(4, 16_000).unwrap(), 16_000).unwrap();
        let w = Waveform::new(vec![0.0; 10], 8_000).unwrap();
        assert!(matches!(apply_filterbank(&w, &fb), Err(Error::Argument(_))));
    }

    #[test]
    fn rectify_and_compress_values() {
        let x = Tensor::from_rows(&[vec![-1.0, 0.5], vec![0.0, -0.2]]).unwrap();
        let r = rectify(&x);
        assert_eq!(r.data(), &[0.0, 0.5, 0.0, 0.0]);
        let pos: f64 = x.data().iter().filter(|v| **v > 0.0).sum();
        assert_eq!(r.sum(), pos);

        let c = compress(&Tensor::row(&[0.0, 1.0, 0.008])).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert_eq!(c.data()[1], 3.0);
        assert!((c.data()[2] - 0.6).abs() < 1e-12);
        assert!(matches!(compress(&Tensor::row(&[-1e-9])), Err(Error::Argument(_))));
    }

    #[test]
    fn silence_gives_zero_cochleagram() {
        let scale = ErbScale::for_sample_rate(8, 16_000).unwrap();
        let c = cochleagram(&Waveform::new(vec![0.0; 777], 16_000).unwrap(), &scale).unwrap();
        assert_eq!(c.data().dims2().unwrap(), (777, 8));
        assert!(c.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apgc_round_trip_layout() {
        let t = Tensor::from_rows(&[vec![0.0, 1.5], vec![2.0, 0.25]]).unwrap();
        let bytes = encode_apgc(&t).unwrap();
        assert_eq!(&bytes[..4], b"APGC");
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(decode_apgc(&bytes).unwrap(), t);
        assert!(decode_apgc(&bytes[..20]).is_err());
    }
}
