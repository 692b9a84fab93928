//! Waveform → log-mel front end.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const FFT_BINS: usize = FFT_SIZE / 2 + 1;
pub const MEL_BINS: usize = 128;
pub const MEL_FMAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;
const SPEC_MAGIC: &[u8; 7] = b"ATSPEC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Rejects anything other than 16 kHz.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "sample rate {sample_rate} Hz; resample to {SAMPLE_RATE} Hz first"
            )));
        }
        if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample {v}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One-sided STFT magnitudes `[frames × 257]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    pub magnitudes: Tensor<f64>,
    /// The input was shorter than one window and was zero-padded to fit.
    pub padded_short_input: bool,
}

/// Log-mel energies `[frames × 128]` with a per-frame padding flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor<f64>,
    pub frame_hop: f64,
    pub pad_mask: Vec<bool>,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `1 + ⌊(L − 400)/160⌋` for `L ≥ 400`.
pub fn frame_count(len: usize) -> usize {
    1 + len.saturating_sub(WINDOW) / HOP
}

pub fn stft_magnitude(w: &Waveform) -> Result<Stft> {
    if w.samples.is_empty() {
        return Err(Error::Data("empty waveform".into()));
    }
    let padded_short_input = w.samples.len() < WINDOW;
    let mut x = w.samples.clone();
    if padded_short_input {
        x.resize(WINDOW, 0.0);
    }
    let frames = frame_count(x.len());
    let win = hann(WINDOW);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut mags = Tensor::zeros(frames, FFT_BINS);
    for f in 0..frames {
        let start = f * HOP;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WINDOW {
                Complex::new(x[start + i] * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (m, c) in mags.row_mut(f).iter_mut().zip(&buf[..FFT_BINS]) {
            *m = c.norm();
        }
    }
    Ok(Stft {
        magnitudes: mags,
        padded_short_input,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the 128 filters.
pub fn mel_centers() -> Vec<f64> {
    mel_edges()[1..=MEL_BINS].to_vec()
}

fn mel_edges() -> Vec<f64> {
    let top = hz_to_mel(MEL_FMAX);
    (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64))
        .collect()
}

fn triangle(f: f64, l: f64, c: f64, r: f64) -> f64 {
    if f <= l || f >= r {
        0.0
    } else if f <= c {
        (f - l) / (c - l)
    } else {
        (r - f) / (r - c)
    }
}

/// Mean of the triangle over `[a, b]`; exact, since it is piecewise linear.
fn triangle_mean(a: f64, b: f64, l: f64, c: f64, r: f64) -> f64 {
    let mut pts = vec![a, b];
    pts.extend([l, c, r].into_iter().filter(|&p| p > a && p < b));
    pts.sort_by(f64::total_cmp);
    let area: f64 = pts
        .windows(2)
        .map(|s| 0.5 * (s[1] - s[0]) * (triangle(s[0], l, c, r) + triangle(s[1], l, c, r)))
        .sum();
    area / (b - a)
}

/// `[128 × 257]` HTK triangular filters; each weight is the filter's mean
/// over the bin's frequency cell, so filters narrower than a bin still
/// receive energy.
pub fn mel_filterbank() -> Tensor<f64> {
    let edges = mel_edges();
    let df = SAMPLE_RATE as f64 / FFT_SIZE as f64;
    let mut fb = Tensor::zeros(MEL_BINS, FFT_BINS);
    for m in 0..MEL_BINS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..FFT_BINS {
            let (lo, hi) = ((b as f64 - 0.5) * df, (b as f64 + 0.5) * df);
            if hi <= l || lo >= r {
                continue;
            }
            fb.set(m, b, triangle_mean(lo, hi, l, c, r));
        }
    }
    fb
}

/// `ln(max(Σ_b w_mb·|X_b|², 1e-10))` per frame and filter.
pub fn log_mel(mag: &Tensor<f64>) -> Result<Tensor<f64>> {
    if mag.cols() != FFT_BINS {
        return Err(Error::Shape(format!("expected {FFT_BINS} FFT bins, got {}", mag.cols())));
    }
    if mag.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("magnitudes must be finite and non-negative".into()));
    }
    let power = mag.map(|v| v * v);
    let energy = power.matmul(&mel_filterbank().transpose())?;
    Ok(energy.map(|e| e.max(LOG_FLOOR).ln()))
}

/// Full pipeline: waveform → `[frames × 128]` log-mel, no padding.
pub fn spectrogram(w: &Waveform) -> Result<Spectrogram> {
    let stft = stft_magnitude(w)?;
    if stft.padded_short_input {
        log::warn!("waveform of {} samples padded to one window", w.samples.len());
    }
    let values = log_mel(&stft.magnitudes)?;
    Ok(Spectrogram {
        pad_mask: vec![false; values.rows()],
        values,
        frame_hop: HOP as f64 / SAMPLE_RATE as f64,
    })
}

/// Pads at the end with `ln(1e-10)` or truncates to `target` frames.
pub fn pad_or_trim(spec: &Spectrogram, target: usize) -> Result<Spectrogram> {
    if target == 0 {
        return Err(Error::Domain("target frame count must be positive".into()));
    }
    let bins = spec.bins();
    let keep = spec.frames().min(target);
    let mut values = Tensor::full(target, bins, LOG_FLOOR.ln());
    values.data_mut()[..keep * bins].copy_from_slice(&spec.values.data()[..keep * bins]);
    let mut pad_mask = spec.pad_mask[..keep].to_vec();
    pad_mask.resize(target, true);
    Ok(Spectrogram {
        values,
        frame_hop: spec.frame_hop,
        pad_mask,
    })
}

/// `[frames × 128]` → `[bins × frames]` model image, averaging groups of
/// `128 / bins` adjacent mel bands.
pub fn model_image<T: Scalar>(spec: &Spectrogram, bins: usize) -> Result<Tensor<T>> {
    if bins == 0 || spec.bins() % bins != 0 {
        return Err(Error::Shape(format!("{} mel bins cannot pool to {bins}", spec.bins())));
    }
    let group = spec.bins() / bins;
    let frames = spec.frames();
    let mut out = Tensor::zeros(bins, frames);
    let inv = 1.0 / group as f64;
    for t in 0..frames {
        let row = spec.values.row(t);
        for b in 0..bins {
            let s: f64 = row[b * group..(b + 1) * group].iter().sum();
            out.set(b, t, T::of(s * inv));
        }
    }
    Ok(out)
}

/// Reads a mono 16 kHz WAV (16-bit PCM or 32-bit float).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => fmt(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fmt(format!("{} channels; only mono is supported", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(fmt(format!(
            "sample rate {} Hz; resample to {SAMPLE_RATE} Hz first",
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (f, b) => return Err(fmt(format!("unsupported sample format {f:?}/{b}-bit"))),
    }
    .map_err(|e| fmt(e.to_string()))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| fmt(e.to_string()))
}

/// Writes a mono 16 kHz 32-bit float WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Cached spectrogram: `ATSPEC1`, frames u32, bins u32 (LE), row-major f32.
pub fn write_spec_cache(path: &Path, values: &Tensor<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(15 + values.len() * 4);
    bytes.extend_from_slice(SPEC_MAGIC);
    bytes.extend_from_slice(&(values.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(values.cols() as u32).to_le_bytes());
    for &v in values.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_spec_cache(path: &Path) -> Result<Tensor<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    if bytes.len() < 15 || &bytes[..7] != SPEC_MAGIC {
        return Err(fmt("missing ATSPEC1 header"));
    }
    let frames = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
    let bins = u32::from_le_bytes(bytes[11..15].try_into().expect("4 bytes")) as usize;
    let body = &bytes[15..];
    if body.len() != frames * bins * 4 {
        return Err(fmt("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::from_vec(frames, bins, data)
}
