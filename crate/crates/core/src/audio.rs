//! PCM ingest and band-limited resampling to the 16 kHz working rate.

use std::f64::consts::PI;
use std::io::{Cursor, Read, Seek};
use std::path::Path;

use crate::error::ensure;
use crate::{Error, Result};

/// Working sample rate of the whole pipeline.
pub const WORKING_RATE_HZ: u32 = 16_000;

/// Half the kernel length, in samples of the lower of the two rates.
pub const RESAMPLE_HALF_TAPS: usize = 32;

/// Passband edge as a fraction of the lower Nyquist frequency.
const RESAMPLE_ROLLOFF: f64 = 0.94;

/// Mono audio with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    /// Builds a waveform, clamping amplitudes into [-1, 1].
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        ensure!(sample_rate_hz > 0, Argument, "sample rate must be positive");
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Argument(format!("sample {i} is not finite")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Reads a RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit). Multichannel
/// frames are averaged to mono; integer PCM is scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    parse_wav(&bytes)
}

/// Same as [`load_wav`] on an in-memory buffer.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    decode(reader)
}

fn decode<R: Read + Seek>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    ensure!(channels > 0, Format, "zero channels");
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} samples (only 16-bit PCM and 32-bit float are read)"
            )))
        }
    };
    ensure!(
        interleaved.len() % channels == 0,
        Format,
        "data chunk holds a partial frame"
    );
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        // hound reports a short read as `Other` with this message
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof || io.to_string().contains("enough bytes") =>
        {
            Error::Format(format!("truncated WAV data: {io}"))
        }
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("WAV codec not supported".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav_f32(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// Windowed-sinc sample-rate conversion.
///
/// Each output sample is a Blackman-windowed sinc interpolation over
/// `2 * RESAMPLE_HALF_TAPS` taps measured at the lower of the two rates
/// (64 taps when upsampling, `64 * src / dst` input taps when downsampling),
/// with the cutoff at 0.94 of the lower Nyquist frequency. Taps are
/// renormalized to unit DC gain for every phase. Output length is
/// `round(n * dst / src)`; edges are zero-padded and the result is clamped
/// to [-1, 1].
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    ensure!(target_hz > 0, Argument, "target rate must be positive");
    let src = w.sample_rate_hz as u64;
    let dst = target_hz as u64;
    if src == dst {
        return Ok(w.clone());
    }
    let n_in = w.samples.len();
    let n_out = ((n_in as u64 * dst + src / 2) / src) as usize;

    let ratio = dst as f64 / src as f64;
    let scale = ratio.min(1.0);
    let cutoff = 0.5 * scale * RESAMPLE_ROLLOFF;
    let half_width = RESAMPLE_HALF_TAPS as f64 / scale;
    let reach = half_width.ceil() as i64;

    let mut out = Vec::with_capacity(n_out);
    let mut taps = Vec::with_capacity(2 * reach as usize + 1);
    for n in 0..n_out as u64 {
        // exact input position n * src / dst as integer part + fraction
        let num = n * src;
        let base = (num / dst) as i64;
        let frac = (num % dst) as f64 / dst as f64;

        taps.clear();
        let mut gain = 0.0;
        for k in (base - reach + 1)..=(base + reach) {
            let x = (k - base) as f64 - frac;
            let h = if x.abs() >= half_width {
                0.0
            } else {
                2.0 * cutoff * sinc(2.0 * cutoff * x) * blackman(x / half_width)
            };
            gain += h;
            taps.push((k, h));
        }
        let acc: f64 = taps
            .iter()
            .filter(|(k, _)| *k >= 0 && (*k as usize) < n_in)
            .map(|&(k, h)| w.samples[k as usize] * h)
            .sum();
        out.push(acc / gain);
    }
    Waveform::new(out, target_hz)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on u in [-1, 1].
fn blackman(u: f64) -> f64 {
    let phase = PI * (u + 1.0);
    0.42 - 0.5 * phase.cos() + 0.08 * (2.0 * phase).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes_i16(channels: u16, samples: &[i16]) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        buf.into_inner()
    }

    fn wav_bytes_f32(channels: u16, samples: &[f32]) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 22_050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        buf.into_inner()
    }

    #[test]
    fn pcm16_scaling() {
        let w = parse_wav(&wav_bytes_i16(1, &[0, 16384, -32768])).unwrap();
        assert_eq!(w.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate_hz(), 16_000);
    }

    #[test]
    fn stereo_is_averaged() {
        let w = parse_wav(&wav_bytes_f32(2, &[1.0, 0.0])).unwrap();
        assert_eq!(w.samples(), &[0.5]);
        assert_eq!(w.sample_rate_hz(), 22_050);
    }

    #[test]
    fn truncated_data_chunk_is_format_error() {
        let mut bytes = wav_bytes_i16(1, &[1, 2, 3, 4, 5, 6]);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(parse_wav(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        assert!(matches!(parse_wav(b"RIFX....WAVEjunk"), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_bit_depth() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        w.write_sample(12i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            parse_wav(&buf.into_inner()),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn load_is_deterministic() {
        let bytes = wav_bytes_i16(2, &[100, -200, 3000, 4000, -32768, 32767]);
        assert_eq!(parse_wav(&bytes).unwrap(), parse_wav(&bytes).unwrap());
    }

    #[test]
    fn resample_identity_and_zero_rate() {
        let w = Waveform::new(vec![0.1, -0.2, 0.3], 16_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap(), w);
        assert!(matches!(resample(&w, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn resample_length() {
        let w = Waveform::new(vec![0.0; 48_000], 48_000).unwrap();
        let r = resample(&w, 16_000).unwrap();
        assert!((r.len() as i64 - 16_000).abs() <= 1);
        let w = Waveform::new(vec![0.0; 1001], 44_100).unwrap();
        let r = resample(&w, 16_000).unwrap();
        let expected = 1001.0 * 16_000.0 / 44_100.0;
        assert!((r.len() as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn resample_dc_is_preserved_in_the_interior() {
        let w = Waveform::new(vec![0.25; 3000], 48_000).unwrap();
        let r = resample(&w, 16_000).unwrap();
        for &s in &r.samples()[100..900] {
            assert!((s - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn downsampled_sine_keeps_a_clean_spectrum() {
        use rustfft::num_complex::Complex64;
        let tone: Vec<f64> = (0..48_000)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 48_000.0).sin())
            .collect();
        let r = resample(&Waveform::new(tone, 48_000).unwrap(), 16_000).unwrap();
        let seg = &r.samples()[4000..12_000];
        let n = seg.len();
        let mut buf: Vec<Complex64> = seg
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
                Complex64::new(s * hann, 0.0)
            })
            .collect();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let peak = (0..mag.len()).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
        assert_eq!(peak as f64 * 16_000.0 / n as f64, 1000.0);
        let side = mag
            .iter()
            .enumerate()
            .filter(|(k, _)| k.abs_diff(peak) > 4)
            .map(|(_, &m)| m)
            .fold(0.0, f64::max);
        assert!(20.0 * (mag[peak] / side).log10() >= 40.0);
    }

    #[test]
    fn non_finite_samples_rejected() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        let w = Waveform::new(vec![2.0, -3.0], 8000).unwrap();
        assert_eq!(w.samples(), &[1.0, -1.0]);
    }
}
