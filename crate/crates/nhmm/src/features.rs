//! Acoustic front end: WAV input, log Mel features, normalization, and the
//! LMF1 feature-file format.
//!
//! Pipeline: 25 ms Hann-windowed frames at a 10 ms shift, magnitude
//! spectrum over a power-of-two FFT, 40 triangular Mel filters from 0 Hz
//! to Nyquist, natural log with a 1e-10 floor. No pre-emphasis.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Mono 16-bit PCM audio at 16 kHz.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

/// A T x d matrix of feature vectors, one row per frame.
///
/// Entries are stored as f32 to match the on-disk LMF1 layout; all model
/// math converts to f64 on use.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: Array2<f32>,
    pub frame_shift_ms: u32,
    pub frame_length_ms: u32,
}

impl FrameMatrix {
    pub fn new(frames: Array2<f32>) -> Self {
        FrameMatrix {
            frames,
            frame_shift_ms: 10,
            frame_length_ms: 25,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Row t as f64, for the lattice and model math.
    pub fn row_f64(&self, t: usize) -> Vec<f64> {
        self.frames.row(t).iter().map(|v| *v as f64).collect()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.frames.mapv(|v| v as f64)
    }
}

/// Per-dimension mean and standard deviation pooled over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MelConfig {
    pub num_filters: usize,
    pub frame_length_ms: u32,
    pub frame_shift_ms: u32,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            num_filters: 40,
            frame_length_ms: 25,
            frame_shift_ms: 10,
            log_floor: 1e-10,
        }
    }
}

/// Parse a canonical RIFF/WAVE file: PCM, 16-bit, mono, 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(ctx("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(ctx("truncated chunk"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(ctx("fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((audio_format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let (audio_format, channels, rate, bits) = fmt.ok_or_else(|| ctx("missing fmt chunk"))?;
    if audio_format != 1 {
        return Err(ctx(&format!("unsupported encoding {audio_format}, want PCM")));
    }
    if channels != 1 {
        return Err(ctx(&format!("{channels} channels, want mono")));
    }
    if rate != 16_000 {
        return Err(ctx(&format!("sample rate {rate}, want 16000")));
    }
    if bits != 16 {
        return Err(ctx(&format!("{bits}-bit samples, want 16")));
    }
    let data = data.ok_or_else(|| ctx("missing data chunk"))?;
    let samples: Vec<i16> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Write a PCM16 mono WAV; fixture generation for tests and examples.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &w.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mel scale: m = 2595 * log10(1 + f / 700).
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filterbank over FFT magnitude bins [0, nfft/2].
/// Filter centers are spaced evenly on the Mel scale from 0 Hz to Nyquist.
pub fn mel_filterbank(num_filters: usize, nfft: usize, sample_rate: u32) -> Array2<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let num_bins = nfft / 2 + 1;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (num_filters + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((num_filters, num_bins));
    for f in 0..num_filters {
        let (lo, center, hi) = (points[f], points[f + 1], points[f + 2]);
        for bin in 0..num_bins {
            let freq = bin as f64 * sample_rate as f64 / nfft as f64;
            let w = if freq >= lo && freq <= center {
                (freq - lo) / (center - lo)
            } else if freq > center && freq <= hi {
                (hi - freq) / (hi - center)
            } else {
                0.0
            };
            bank[(f, bin)] = w;
        }
    }
    bank
}

/// 40-dimensional log Mel features with 25 ms windows at a 10 ms shift.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<FrameMatrix> {
    let window = (w.sample_rate as usize * cfg.frame_length_ms as usize) / 1000;
    let shift = (w.sample_rate as usize * cfg.frame_shift_ms as usize) / 1000;
    if w.samples.len() < window {
        return Err(Error::validation(format!(
            "waveform too short: {} samples, window is {window}",
            w.samples.len()
        )));
    }
    let num_frames = 1 + (w.samples.len() - window) / shift;
    let nfft = window.next_power_of_two();
    let bank = mel_filterbank(cfg.num_filters, nfft, w.sample_rate);
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / (window - 1) as f64).cos())
        .collect();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut frames = Array2::zeros((num_frames, cfg.num_filters));
    let mut buf = vec![Complex::new(0.0f64, 0.0); nfft];
    for t in 0..num_frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        let start = t * shift;
        for n in 0..window {
            buf[n] = Complex::new(w.samples[start + n] as f64 * hann[n], 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect();
        for f in 0..cfg.num_filters {
            let energy: f64 = bank
                .row(f)
                .iter()
                .zip(mags.iter())
                .map(|(w, m)| w * m)
                .sum();
            frames[(t, f)] = energy.max(cfg.log_floor).ln() as f32;
        }
    }
    Ok(FrameMatrix {
        frames,
        frame_shift_ms: cfg.frame_shift_ms,
        frame_length_ms: cfg.frame_length_ms,
    })
}

/// Per-dimension mean and std pooled over all frames of all utterances.
pub fn compute_norm_stats(dataset: &[FrameMatrix]) -> Result<NormStats> {
    let total: usize = dataset.iter().map(|f| f.num_frames()).sum();
    if total == 0 {
        return Err(Error::validation("no frames in dataset"));
    }
    let d = dataset[0].dim();
    let mut mean = vec![0.0f64; d];
    for f in dataset {
        if f.dim() != d {
            return Err(Error::validation("mixed feature dimensions in dataset"));
        }
        for row in f.frames.rows() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += *v as f64;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= total as f64;
    }
    let mut var = vec![0.0f64; d];
    for f in dataset {
        for row in f.frames.rows() {
            for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let diff = *v as f64 - m;
                *s += diff * diff;
            }
        }
    }
    let std = var
        .iter()
        .map(|s| (s / total as f64).sqrt().max(1e-8))
        .collect();
    Ok(NormStats { mean, std })
}

/// (x - mean) / std elementwise per dimension.
pub fn normalize(f: &FrameMatrix, s: &NormStats) -> Result<FrameMatrix> {
    if f.dim() != s.mean.len() {
        return Err(Error::validation(format!(
            "dimension mismatch: features are {}-dim, stats are {}-dim",
            f.dim(),
            s.mean.len()
        )));
    }
    let mut out = f.clone();
    for mut row in out.frames.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - s.mean[j]) / s.std[j]) as f32;
        }
    }
    Ok(out)
}

const LMF1_MAGIC: &[u8; 4] = b"LMF1";

/// Write a feature matrix in LMF1: magic, u32 T, u32 d, f32 row-major,
/// all little-endian.
pub fn write_features(path: impl AsRef<Path>, f: &FrameMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(12 + 4 * f.num_frames() * f.dim());
    out.extend_from_slice(LMF1_MAGIC);
    out.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for v in f.frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::data(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..4] != LMF1_MAGIC {
        return Err(Error::data(format!("{}: bad magic", path.display())));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = 12 + 4 * t * d;
    if bytes.len() != want {
        return Err(Error::data(format!(
            "{}: truncated payload ({} bytes, want {want})",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((t, d), values)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(FrameMatrix::new(frames))
}

/// One labeled segment: frame indices at the 10 ms rate, end exclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Read a plain-text label file: `start_frame end_frame label` per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut segments = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::data(format!(
                "{}:{}: expected `start end label`",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::data(format!(
                    "{}:{}: bad frame index {s:?}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        segments.push(Segment {
            start: parse(parts[0])?,
            end: parse(parts[1])?,
            label: parts[2].to_string(),
        });
    }
    Ok(segments)
}

pub fn write_labels(path: impl AsRef<Path>, segments: &[Segment]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in segments {
        writeln!(file, "{} {} {}", s.start, s.end, s.label).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Expand segments to one label index per frame; labels are interned in
/// first-appearance order and the mapping is returned alongside.
pub fn segments_to_frame_labels(segments: &[Segment]) -> Result<(Vec<usize>, Vec<String>)> {
    let mut names: Vec<String> = Vec::new();
    let total = segments.iter().map(|s| s.end).max().unwrap_or(0);
    let mut labels = vec![usize::MAX; total];
    for s in segments {
        if s.end <= s.start {
            return Err(Error::data(format!(
                "empty or reversed segment {}..{}",
                s.start, s.end
            )));
        }
        let idx = match names.iter().position(|n| *n == s.label) {
            Some(i) => i,
            None => {
                names.push(s.label.clone());
                names.len() - 1
            }
        };
        for f in s.start..s.end {
            if labels[f] != usize::MAX {
                return Err(Error::data(format!("overlapping segments at frame {f}")));
            }
            labels[f] = idx;
        }
    }
    if labels.iter().any(|l| *l == usize::MAX) {
        return Err(Error::data("segments do not cover a contiguous range"));
    }
    Ok((labels, names))
}

/// One utterance in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub label_path: Option<PathBuf>,
}

/// Read a manifest: `utterance_id<TAB>feature_path[<TAB>label_path]`.
/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(Error::data(format!(
                "{}:{}: expected 2 or 3 tab-separated fields",
                path.display(),
                lineno + 1
            )));
        }
        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        entries.push(ManifestEntry {
            id: parts[0].to_string(),
            feature_path: resolve(parts[1]),
            label_path: parts.get(2).map(|p| resolve(p)),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        match &e.label_path {
            Some(lp) => writeln!(
                file,
                "{}\t{}\t{}",
                e.id,
                e.feature_path.display(),
                lp.display()
            ),
            None => writeln!(file, "{}\t{}", e.id, e.feature_path.display()),
        }
        .map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sine_wave(freq: f64, seconds: f64) -> Waveform {
        let n = (16000.0 * seconds) as usize;
        let samples = (0..n)
            .map(|i| {
                (8000.0 * (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin()) as i16
            })
            .collect();
        Waveform {
            samples,
            sample_rate: 16000,
        }
    }

    #[test]
    fn wav_round_trip_one_second() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let w = sine_wave(440.0, 1.0);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.samples.len(), 16000);
        assert_eq!(r.samples, w.samples);
    }

    #[test]
    fn wav_zero_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let w = Waveform {
            samples: vec![0; 800],
            sample_rate: 16000,
        };
        write_wav(&path, &w).unwrap();
        assert!(read_wav(&path).unwrap().samples.iter().all(|s| *s == 0));
    }

    #[test]
    fn wav_hand_built_bytes() {
        // 8-sample fixture assembled byte by byte.
        let samples: [i16; 8] = [0, 1, -1, 32767, -32768, 100, -100, 5];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 16).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        for s in samples {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.wav");
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(read_wav(&path).unwrap().samples, samples);
    }

    #[test]
    fn wav_rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let w = Waveform {
            samples: vec![0; 100],
            sample_rate: 16000,
        };
        write_wav(&path, &w).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // channel count
        std::fs::write(&path, bytes).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn log_mel_frame_count() {
        let w = sine_wave(440.0, 1.0);
        let f = log_mel(&w, &MelConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 40);
    }

    #[test]
    fn log_mel_silence_hits_floor() {
        let w = Waveform {
            samples: vec![0; 1600],
            sample_rate: 16000,
        };
        let cfg = MelConfig::default();
        let f = log_mel(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln() as f32;
        assert!(f.frames.iter().all(|v| *v == floor));
    }

    #[test]
    fn log_mel_tone_peaks_in_matching_filter() {
        // Independently recomputed filterbank: the filter with the largest
        // response must have 1 kHz inside its triangular support.
        let w = sine_wave(1000.0, 0.5);
        let f = log_mel(&w, &MelConfig::default()).unwrap();
        let mel_max = hz_to_mel(8000.0);
        let points: Vec<f64> = (0..42)
            .map(|i| mel_to_hz(mel_max * i as f64 / 41.0))
            .collect();
        for t in 0..f.num_frames() {
            let row = f.frames.row(t);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let lo = points[best];
            let hi = points[best + 2];
            assert!(
                lo <= 1000.0 && 1000.0 <= hi,
                "frame {t}: argmax filter {best} spans {lo:.0}..{hi:.0} Hz"
            );
        }
    }

    #[test]
    fn log_mel_monotone_in_amplitude() {
        let mut rng = Rng::new(4);
        let samples: Vec<i16> = (0..1200)
            .map(|_| (rng.standard_normal() * 1000.0) as i16)
            .collect();
        let quiet = Waveform {
            samples: samples.clone(),
            sample_rate: 16000,
        };
        let loud = Waveform {
            samples: samples.iter().map(|s| s * 4).collect(),
            sample_rate: 16000,
        };
        let cfg = MelConfig::default();
        let a = log_mel(&quiet, &cfg).unwrap();
        let b = log_mel(&loud, &cfg).unwrap();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            assert!(y >= x, "scaling up decreased a bin: {x} -> {y}");
        }
    }

    #[test]
    fn log_mel_too_short_is_error() {
        let w = Waveform {
            samples: vec![0; 100],
            sample_rate: 16000,
        };
        assert!(log_mel(&w, &MelConfig::default()).is_err());
    }

    #[test]
    fn norm_stats_constant_utterance() {
        let frames = Array2::from_shape_fn((5, 3), |(_, j)| j as f32 + 1.0);
        let s = compute_norm_stats(&[FrameMatrix::new(frames)]).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0, 3.0]);
        assert!(s.std.iter().all(|v| *v == 1e-8));
    }

    #[test]
    fn norm_stats_pooling_identity() {
        let mut rng = Rng::new(17);
        let a = Array2::from_shape_fn((4, 2), |_| rng.standard_normal() as f32);
        let b = Array2::from_shape_fn((7, 2), |_| rng.standard_normal() as f32);
        let concat = ndarray::concatenate(
            ndarray::Axis(0),
            &[a.view(), b.view()],
        )
        .unwrap();
        let s1 = compute_norm_stats(&[FrameMatrix::new(a), FrameMatrix::new(b)]).unwrap();
        let s2 = compute_norm_stats(&[FrameMatrix::new(concat)]).unwrap();
        for (x, y) in s1.mean.iter().zip(s2.mean.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in s1.std.iter().zip(s2.std.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_stats_match_two_pass_oracle() {
        let mut rng = Rng::new(23);
        let a = Array2::from_shape_fn((50, 4), |_| rng.standard_normal() as f32);
        let s = compute_norm_stats(&[FrameMatrix::new(a.clone())]).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = a.column(j).iter().map(|v| *v as f64).collect();
            let mean: f64 = col.iter().sum::<f64>() / 50.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!((s.mean[j] - mean).abs() < 1e-12);
            assert!((s.std[j] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_by_own_stats_standardizes() {
        let mut rng = Rng::new(31);
        let a = Array2::from_shape_fn((100, 3), |_| (rng.standard_normal() * 3.0 + 1.0) as f32);
        let f = FrameMatrix::new(a);
        let s = compute_norm_stats(std::slice::from_ref(&f)).unwrap();
        let n = normalize(&f, &s).unwrap();
        let s2 = compute_norm_stats(&[n]).unwrap();
        for j in 0..3 {
            assert!(s2.mean[j].abs() < 1e-6);
            assert!((s2.std[j] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_identity_stats() {
        let f = FrameMatrix::new(Array2::from_elem((2, 2), 3.5f32));
        let s = NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        assert_eq!(normalize(&f, &s).unwrap(), f);
    }

    #[test]
    fn normalize_dim_mismatch() {
        let f = FrameMatrix::new(Array2::zeros((2, 2)));
        let s = NormStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert!(normalize(&f, &s).is_err());
    }

    #[test]
    fn lmf1_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lmf");
        let mut rng = Rng::new(2);
        let f = FrameMatrix::new(Array2::from_shape_fn((2, 3), |_| {
            rng.standard_normal() as f32
        }));
        write_features(&path, &f).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 + 2 * 3 * 4);
        let r = read_features(&path).unwrap();
        assert_eq!(r.frames, f.frames);
    }

    #[test]
    fn lmf1_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lmf");
        let f = FrameMatrix::new(Array2::zeros((1, 1)));
        write_features(&path, &f).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(read_features(&path)
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
    }

    #[test]
    fn lmf1_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lmf");
        let f = FrameMatrix::new(Array2::zeros((3, 2)));
        write_features(&path, &f).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_features(&path)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn labels_round_trip_and_expansion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.labels");
        let segs = vec![
            Segment {
                start: 0,
                end: 3,
                label: "aa".into(),
            },
            Segment {
                start: 3,
                end: 5,
                label: "iy".into(),
            },
        ];
        write_labels(&path, &segs).unwrap();
        let r = read_labels(&path).unwrap();
        assert_eq!(r, segs);
        let (frames, names) = segments_to_frame_labels(&r).unwrap();
        assert_eq!(frames, vec![0, 0, 0, 1, 1]);
        assert_eq!(names, vec!["aa", "iy"]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let entries = vec![
            ManifestEntry {
                id: "utt1".into(),
                feature_path: dir.path().join("utt1.lmf"),
                label_path: Some(dir.path().join("utt1.labels")),
            },
            ManifestEntry {
                id: "utt2".into(),
                feature_path: dir.path().join("utt2.lmf"),
                label_path: None,
            },
        ];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }
}
