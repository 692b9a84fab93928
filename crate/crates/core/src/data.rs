//! Manifests, dataset loading and the synthetic tone corpus.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::dsp::{self, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::Example;

pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MAX_SYNTH_CLASSES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

/// Clip list plus class vocabulary (`vocabulary[id]` is the class name).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub vocabulary: Vec<String>,
}

impl Manifest {
    pub fn classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multi-hot target vector of entry `i`.
    pub fn targets<T: Scalar>(&self, i: usize) -> Vec<T> {
        let mut t = vec![T::zero(); self.classes()];
        for &l in &self.entries[i].labels {
            t[l] = T::one();
        }
        t
    }

    /// Reads a JSON-lines manifest and the `vocab.json` next to it.
    /// Relative clip paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::load_with_vocab(path, &dir.join(VOCAB_FILE))
    }

    pub fn load_with_vocab(path: &Path, vocab_path: &Path) -> Result<Self> {
        let fmt = |p: &Path, msg: String| Error::Format {
            path: p.to_path_buf(),
            msg,
        };
        let vocab_text = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocabulary: Vec<String> =
            serde_json::from_str(&vocab_text).map_err(|e| fmt(vocab_path, e.to_string()))?;
        if vocabulary.is_empty() {
            return Err(fmt(vocab_path, "empty vocabulary".into()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry =
                serde_json::from_str(line).map_err(|err| fmt(path, format!("line {}: {err}", n + 1)))?;
            if let Some(&bad) = e.labels.iter().find(|&&l| l >= vocabulary.len()) {
                return Err(fmt(
                    path,
                    format!("line {}: label {bad} outside vocabulary of {}", n + 1, vocabulary.len()),
                ));
            }
            if e.path.is_relative() {
                e.path = dir.join(&e.path);
            }
            if !e.path.is_file() {
                return Err(Error::io(
                    &e.path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "clip listed in manifest not found"),
                ));
            }
            entries.push(e);
        }
        Ok(Manifest { entries, vocabulary })
    }

    /// Writes `manifest.jsonl` and `vocab.json` into `dir`, storing paths
    /// relative to `dir` where possible.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = serde_json::to_string(&self.vocabulary).expect("strings serialize");
        std::fs::write(&vocab_path, vocab + "\n").map_err(|e| Error::io(&vocab_path, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for e in &self.entries {
            let rel = ManifestEntry {
                path: e.path.strip_prefix(dir).unwrap_or(&e.path).to_path_buf(),
                labels: e.labels.clone(),
            };
            serde_json::to_writer(&mut out, &rel).expect("entry serializes");
            out.push(b'\n');
        }
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Waveform → padded log-mel → pooled `[bins × frames]` model image.
pub fn image_from_waveform<T: Scalar>(w: &Waveform, model: &ModelConfig, train: &TrainConfig) -> Result<crate::tensor::Tensor<T>> {
    if train.target_frames != model.input_frames {
        return Err(Error::config(
            "train.target_frames",
            format!("{} frames do not match model.input_frames = {}", train.target_frames, model.input_frames),
        ));
    }
    let spec = dsp::pad_or_trim(&dsp::spectrogram(w)?, train.target_frames)?;
    dsp::model_image(&spec, model.input_bins)
}

/// Decodes every clip in manifest order (in parallel).
pub fn load_examples<T: Scalar>(manifest: &Manifest, model: &ModelConfig, train: &TrainConfig) -> Result<Vec<Example<T>>> {
    if manifest.classes() != model.classes {
        return Err(Error::config(
            "model.classes",
            format!("{} classes but the vocabulary has {}", model.classes, manifest.classes()),
        ));
    }
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let w = dsp::read_wav(&manifest.entries[i].path)?;
            Ok(Example {
                image: image_from_waveform(&w, model, train)?,
                targets: manifest.targets(i),
            })
        })
        .collect()
}

/// Tone frequency of class `c` among `classes`: geometric from 300 Hz with
/// ratio 1.3, compressed when needed to keep the top class below 7 kHz.
pub fn class_frequency(c: usize, classes: usize) -> f64 {
    let ratio = if classes > 1 {
        1.3f64.min((7000.0f64 / 300.0).powf(1.0 / (classes - 1) as f64))
    } else {
        1.3
    };
    300.0 * ratio.powi(c as i32)
}

/// Amplitude-modulation rate of class `c` in Hz.
pub fn class_am_rate(c: usize) -> f64 {
    2.0 + 1.5 * (c % 6) as f64 + 0.25 * (c / 6) as f64
}

/// One synthetic clip: labelled record plus samples (already rounded to f32
/// so the in-memory and on-disk forms agree).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub labels: Vec<usize>,
    pub waveform: Waveform,
}

fn check_synth(classes: usize, count: usize) -> Result<()> {
    if classes == 0 || classes > MAX_SYNTH_CLASSES {
        return Err(Error::config("classes", format!("must lie in 1..={MAX_SYNTH_CLASSES}")));
    }
    if count < classes {
        return Err(Error::config("count", format!("{count} clips cannot cover {classes} classes")));
    }
    Ok(())
}

/// Clip `index` of the corpus `(classes, seed)`; the first `classes` clips
/// are single-label, one per class.
pub fn synth_clip(classes: usize, index: usize, seed: u64, secs: f64) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let labels = if index < classes {
        vec![index]
    } else {
        let k = rng.random_range(1..=3usize.min(classes));
        let mut l = rand::seq::index::sample(&mut rng, classes, k).into_vec();
        l.sort_unstable();
        l
    };
    let n = (secs * SAMPLE_RATE as f64).round() as usize;
    let sr = SAMPLE_RATE as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let mut signal = vec![0.0; n];
    for &c in &labels {
        let (f, am) = (class_frequency(c, classes), class_am_rate(c));
        let amp = rng.random_range(0.5..1.0);
        let (p0, p1) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
        for (i, s) in signal.iter_mut().enumerate() {
            let t = i as f64 / sr;
            *s += amp * (1.0 + 0.5 * (tau * am * t + p1).sin()) * (tau * f * t + p0).sin();
        }
    }
    let power = signal.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let snr_db = rng.random_range(10.0..30.0);
    let noise = Normal::new(0.0, (power / 10f64.powf(snr_db / 10.0)).sqrt()).expect("finite std");
    for s in signal.iter_mut() {
        *s += noise.sample(&mut rng);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let samples = signal.iter().map(|v| (v * gain) as f32 as f64).collect();
    SynthClip {
        labels,
        waveform: Waveform::new(samples, SAMPLE_RATE).expect("16 kHz"),
    }
}

/// The whole corpus in memory (1 s clips).
pub fn synthetic_clips(classes: usize, count: usize, seed: u64) -> Result<Vec<SynthClip>> {
    check_synth(classes, count)?;
    Ok((0..count).into_par_iter().map(|i| synth_clip(classes, i, seed, 1.0)).collect())
}

/// Model-ready synthetic examples.
pub fn synthetic_examples<T: Scalar>(
    count: usize,
    seed: u64,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<Vec<Example<T>>> {
    let classes = model.classes;
    synthetic_clips(classes, count, seed)?
        .into_par_iter()
        .map(|clip| {
            let mut targets = vec![T::zero(); classes];
            for &l in &clip.labels {
                targets[l] = T::one();
            }
            Ok(Example {
                image: image_from_waveform(&clip.waveform, model, train)?,
                targets,
            })
        })
        .collect()
}

/// Writes `clip_NNNNN.wav` files, `manifest.jsonl` and `vocab.json` to `out`.
pub fn generate_synthetic(classes: usize, count: usize, seed: u64, out: &Path) -> Result<Manifest> {
    let clips = synthetic_clips(classes, count, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let path = out.join(format!("clip_{i:05}.wav"));
            dsp::write_wav(&path, &clip.waveform)?;
            Ok(ManifestEntry {
                path,
                labels: clip.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        entries,
        vocabulary: (0..classes)
            .map(|c| format!("tone_{:.0}hz", class_frequency(c, classes)))
            .collect(),
    };
    manifest.save(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use sha2::{Digest, Sha256};

    use super::*;

    fn digest_dir(dir: &Path) -> Vec<(String, String)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| {
                let h = Sha256::digest(std::fs::read(p).unwrap());
                (p.file_name().unwrap().to_string_lossy().into_owned(), format!("{h:x}"))
            })
            .collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(4, 16, 7, a.path()).unwrap();
        generate_synthetic(4, 16, 7, b.path()).unwrap();
        let (da, db) = (digest_dir(a.path()), digest_dir(b.path()));
        assert_eq!(da.len(), 18);
        assert_eq!(da, db);
        let c = tempfile::tempdir().unwrap();
        generate_synthetic(4, 16, 8, c.path()).unwrap();
        assert_ne!(digest_dir(c.path()), da);
    }

    #[test]
    fn labels_are_one_to_three_and_cover_classes() {
        let clips = synthetic_clips(8, 60, 3).unwrap();
        for (i, c) in clips.iter().enumerate() {
            assert!((1..=3).contains(&c.labels.len()));
            assert!(c.labels.windows(2).all(|w| w[0] < w[1]));
            if i < 8 {
                assert_eq!(c.labels, vec![i]);
            }
            assert_eq!(c.waveform.samples().len(), 16_000);
            assert!(c.waveform.samples().iter().all(|v| v.abs() <= 0.9 + 1e-6));
        }
        assert!(clips.iter().any(|c| c.labels.len() > 1));
        assert!(synthetic_clips(33, 40, 0).is_err());
        assert!(synthetic_clips(8, 7, 0).is_err());
    }

    #[test]
    fn frequencies_stay_in_band() {
        assert_eq!(class_frequency(0, 8), 300.0);
        assert!((class_frequency(3, 8) - 300.0 * 1.3f64.powi(3)).abs() < 1e-9);
        assert!((class_frequency(31, 32) - 7000.0).abs() < 1e-6);
        for s in 1..=32 {
            let f: Vec<f64> = (0..s).map(|c| class_frequency(c, s)).collect();
            assert!(f.windows(2).all(|w| w[1] > w[0]) && f[s - 1] <= 7000.0 + 1e-6);
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(3, 5, 1, dir.path()).unwrap();
        let back = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.targets::<f64>(0), vec![1.0, 0.0, 0.0]);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with("{\"path\":\"clip_00000.wav\",\"labels\":[0]}"));

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"path\":\"clip_00000.wav\",\"labels\":[5]}\n").unwrap();
        assert!(Manifest::load(&bad).unwrap_err().to_string().contains("label 5"));
        std::fs::write(&bad, "{\"path\":\"nope.wav\",\"labels\":[0]}\n").unwrap();
        assert!(matches!(Manifest::load(&bad), Err(Error::Io { .. })));
        std::fs::write(&bad, "not json\n").unwrap();
        assert!(matches!(Manifest::load(&bad), Err(Error::Format { .. })));
        assert!(matches!(
            Manifest::load(&dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn disk_and_memory_examples_agree() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelConfig { classes: 4, ..ModelConfig::tiny() };
        let train = TrainConfig::tiny();
        let m = generate_synthetic(4, 6, 2, dir.path()).unwrap();
        let disk: Vec<Example<f64>> = load_examples(&m, &model, &train).unwrap();
        let mem: Vec<Example<f64>> = synthetic_examples(6, 2, &model, &train).unwrap();
        assert_eq!(disk, mem);
        assert_eq!(disk[0].image.shape(), (64, 64));
        let wrong = ModelConfig { classes: 5, ..model.clone() };
        assert!(load_examples::<f64>(&m, &wrong, &train).is_err());
        let frames = TrainConfig { target_frames: 80, ..train };
        assert!(load_examples::<f64>(&m, &model, &frames).is_err());
    }

    /// Perceptron on time-averaged log-mel features of single-label clips.
    #[test]
    fn classes_zero_and_three_are_linearly_separable() {
        let clips = synthetic_clips(4, 80, 11).unwrap();
        let feats: Vec<(Vec<f64>, f64)> = clips
            .iter()
            .filter(|c| c.labels == [0] || c.labels == [3])
            .map(|c| {
                let s = dsp::spectrogram(&c.waveform).unwrap();
                let mut f = vec![0.0; s.bins() + 1];
                for t in 0..s.frames() {
                    for (b, v) in s.values.row(t).iter().enumerate() {
                        f[b] += v / s.frames() as f64;
                    }
                }
                f[s.bins()] = 1.0;
                (f, if c.labels == [0] { 1.0 } else { -1.0 })
            })
            .collect();
        assert!(feats.iter().any(|f| f.1 > 0.0) && feats.iter().any(|f| f.1 < 0.0));
        let mut w = vec![0.0; feats[0].0.len()];
        let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        for _ in 0..1000 {
            let mut errors = 0;
            for (x, y) in &feats {
                if y * dot(&w, x) <= 0.0 {
                    errors += 1;
                    for (wi, xi) in w.iter_mut().zip(x) {
                        *wi += y * xi;
                    }
                }
            }
            if errors == 0 {
                break;
            }
        }
        assert!(feats.iter().all(|(x, y)| y * dot(&w, x) > 0.0));
    }
}
