//! Adam optimization over a manifest of utterances, checkpoint
//! persistence, and synthetic-dataset generation.
//!
//! The trainer is deliberately single-threaded and consumes utterances in
//! a seed-shuffled order, so a (seed, manifest, config) triple fully
//! determines the loss log and the final checkpoint bits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::features::{
    read_features, write_features, write_labels, write_manifest, FrameMatrix, ManifestEntry,
    Segment,
};
use crate::model::{param_init, total_loss_grad, ModelConfig, ModelParams};
use crate::numerics::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Utterances per optimizer step; no padding, losses and gradients
    /// are summed over whole utterances and divided by modeled frames.
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate must be > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// First and second Adam moments, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(params: &ModelParams) -> Self {
        AdamMoments {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One elementwise Adam update over a flat tensor with precomputed clip
/// scale and bias-correction step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_flat(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    clip_scale: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i] * clip_scale;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Bias-corrected Adam step with global-norm gradient clipping.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    moments: &mut AdamMoments,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut sq_norm = 0.0;
    for (name, g) in grads.tensors() {
        for v in g {
            if !v.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite gradient in {name}"
                )));
            }
            sq_norm += v * v;
        }
    }
    let norm = sq_norm.sqrt();
    let clip_scale = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    moments.step += 1;
    let step = moments.step;
    let grad_tensors = grads.tensors();
    let mut m_tensors = moments.m.tensors_mut();
    let mut v_tensors = moments.v.tensors_mut();
    for (i, (name, p)) in params.tensors_mut().into_iter().enumerate() {
        let (gn, g) = &grad_tensors[i];
        if gn != &name || g.len() != p.len() {
            return Err(Error::validation(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        adam_update_flat(
            p,
            g,
            m_tensors[i].1,
            v_tensors[i].1,
            step,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
            clip_scale,
        );
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"NHMM";

/// Full training state: parameters, optimizer moments, epoch counter and
/// generator state. A save/load round trip resumes training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub params: ModelParams,
    pub moments: AdamMoments,
    pub epochs_done: usize,
    pub rng_state: (u64, Option<f64>),
}

fn cfg_to_tensor(cfg: &ModelConfig) -> Vec<f64> {
    use crate::model::{CellType, Variant};
    vec![
        cfg.n_states as f64,
        cfg.time_shift as f64,
        cfg.hop as f64,
        cfg.feat_dim as f64,
        cfg.hidden_dim as f64,
        cfg.num_layers as f64,
        match cfg.cell {
            CellType::Elman => 0.0,
            CellType::Lstm => 1.0,
        },
        match cfg.variant {
            Variant::NeuralHmm => 0.0,
            Variant::VqApc => 1.0,
        },
        cfg.tap_layer.map(|t| t as f64).unwrap_or(-1.0),
    ]
}

fn cfg_from_tensor(t: &[f64]) -> Result<ModelConfig> {
    use crate::model::{CellType, Variant};
    if t.len() != 9 {
        return Err(Error::data("bad config record in checkpoint"));
    }
    Ok(ModelConfig {
        n_states: t[0] as usize,
        time_shift: t[1] as usize,
        hop: t[2] as usize,
        feat_dim: t[3] as usize,
        hidden_dim: t[4] as usize,
        num_layers: t[5] as usize,
        cell: if t[6] == 0.0 {
            CellType::Elman
        } else {
            CellType::Lstm
        },
        variant: if t[7] == 0.0 {
            Variant::NeuralHmm
        } else {
            Variant::VqApc
        },
        tap_layer: if t[8] < 0.0 {
            None
        } else {
            Some(t[8] as usize)
        },
    })
}

/// Binary layout: magic "NHMM", u32 version, u32 entry count, then per
/// entry a length-prefixed name and a length-prefixed float64 payload,
/// all little-endian.
pub fn save_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    entries.push(("cfg".into(), cfg_to_tensor(&c.model_cfg)));
    entries.push(("epochs_done".into(), vec![c.epochs_done as f64]));
    entries.push(("adam_step".into(), vec![c.moments.step as f64]));
    let (state, spare) = c.rng_state;
    entries.push((
        "rng".into(),
        vec![
            f64::from_bits(state),
            if spare.is_some() { 1.0 } else { 0.0 },
            spare.unwrap_or(0.0),
        ],
    ));
    for (name, t) in c.params.tensors() {
        entries.push((format!("param.{name}"), t.to_vec()));
    }
    for (name, t) in c.moments.m.tensors() {
        entries.push((format!("adam_m.{name}"), t.to_vec()));
    }
    for (name, t) in c.moments.v.tensors() {
        entries.push((format!("adam_v.{name}"), t.to_vec()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, values) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(ctx("truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(ctx("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ctx(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        if pos + 4 > bytes.len() {
            return Err(ctx("truncated entry"));
        }
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + name_len + 8 > bytes.len() {
            return Err(ctx("truncated entry"));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| ctx("bad tensor name"))?;
        pos += name_len;
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + 8 * len > bytes.len() {
            return Err(ctx("truncated tensor payload"));
        }
        let values: Vec<f64> = bytes[pos..pos + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * len;
        entries.push((name, values));
    }
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| ctx(&format!("missing entry {name}")))
    };
    let model_cfg = cfg_from_tensor(&get("cfg")?)?;
    let epochs_done = get("epochs_done")?[0] as usize;
    let adam_step_count = get("adam_step")?[0] as u64;
    let rng_raw = get("rng")?;
    let rng_state = (
        rng_raw[0].to_bits(),
        if rng_raw[1] != 0.0 {
            Some(rng_raw[2])
        } else {
            None
        },
    );

    // Rebuild tensor shapes from the config, then fill from the entries.
    let mut params = param_init(&model_cfg, &mut Rng::new(0))?;
    let mut moments = AdamMoments::new(&params);
    moments.step = adam_step_count;
    let fill = |prefix: &str, target: &mut ModelParams| -> Result<()> {
        for (name, t) in target.tensors_mut() {
            let values = get(&format!("{prefix}.{name}"))?;
            if values.len() != t.len() {
                return Err(ctx(&format!("size mismatch for {prefix}.{name}")));
            }
            t.copy_from_slice(&values);
        }
        Ok(())
    };
    fill("param", &mut params)?;
    fill("adam_m", &mut moments.m)?;
    fill("adam_v", &mut moments.v)?;
    Ok(Checkpoint {
        model_cfg,
        params,
        moments,
        epochs_done,
        rng_state,
    })
}

/// Training output: final state, the loss log (one line per step,
/// `epoch step frames loss`), and any skipped-utterance warnings.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<String>,
    pub warnings: Vec<String>,
    /// Mean per-frame loss of each epoch.
    pub epoch_mean_losses: Vec<f64>,
}

pub struct TrainOptions<'a> {
    /// Write per-epoch checkpoints and the loss log here when set.
    pub out_dir: Option<&'a Path>,
    /// Continue from a previous checkpoint instead of initializing.
    pub resume: Option<Checkpoint>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            out_dir: None,
            resume: None,
        }
    }
}

/// Run the Adam loop over a manifest of feature files.
pub fn train(
    manifest: &[ManifestEntry],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::validation("manifest is empty"));
    }
    let mut warnings = Vec::new();
    let mut utterances: Vec<(String, FrameMatrix)> = Vec::new();
    let min_len = model_cfg.time_shift + model_cfg.hop + 1;
    for entry in manifest {
        let frames = read_features(&entry.feature_path)?;
        if frames.num_frames() < min_len {
            warnings.push(format!(
                "skipping {}: {} frames, need at least {min_len}",
                entry.id,
                frames.num_frames()
            ));
            continue;
        }
        utterances.push((entry.id.clone(), frames));
    }
    if utterances.is_empty() {
        return Err(Error::validation(
            "no utterance in the manifest is long enough to train on",
        ));
    }

    let (mut params, mut moments, mut rng, start_epoch) = match options.resume {
        Some(c) => {
            let rng = Rng::from_state(c.rng_state.0, c.rng_state.1);
            (c.params, c.moments, rng, c.epochs_done)
        }
        None => {
            let mut rng = Rng::new(train_cfg.seed);
            let params = param_init(model_cfg, &mut rng)?;
            let moments = AdamMoments::new(&params);
            (params, moments, rng, 0)
        }
    };

    let mut loss_log = Vec::new();
    let mut epoch_mean_losses = Vec::new();
    for epoch in start_epoch..train_cfg.epochs {
        let mut order: Vec<usize> = (0..utterances.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            let mut loss_sum = 0.0;
            let mut frame_sum = 0usize;
            for &u in batch {
                let (_, frames) = &utterances[u];
                let (loss, g) = total_loss_grad(&params, frames, model_cfg)?;
                loss_sum += loss;
                frame_sum += frames.num_frames() - model_cfg.time_shift;
                let mut acc = grads.tensors_mut();
                for (i, (_, src)) in g.tensors().iter().enumerate() {
                    for (a, b) in acc[i].1.iter_mut().zip(src.iter()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / frame_sum as f64;
            for (_, t) in grads.tensors_mut() {
                for v in t {
                    *v *= scale;
                }
            }
            let loss = loss_sum * scale;
            adam_step(&mut params, &grads, &mut moments, train_cfg)?;
            loss_log.push(format!("{} {} {} {}", epoch + 1, step + 1, frame_sum, loss));
            epoch_loss_sum += loss;
            steps += 1;
        }
        epoch_mean_losses.push(epoch_loss_sum / steps as f64);
        if let Some(dir) = options.out_dir {
            let checkpoint = Checkpoint {
                model_cfg: model_cfg.clone(),
                params: params.clone(),
                moments: moments.clone(),
                epochs_done: epoch + 1,
                rng_state: rng.state(),
            };
            save_checkpoint(dir.join(format!("epoch_{:03}.nhmm", epoch + 1)), &checkpoint)?;
        }
    }

    let checkpoint = Checkpoint {
        model_cfg: model_cfg.clone(),
        params,
        moments,
        epochs_done: train_cfg.epochs,
        rng_state: rng.state(),
    };
    if let Some(dir) = options.out_dir {
        save_checkpoint(dir.join("final.nhmm"), &checkpoint)?;
        let log_path = dir.join("loss.log");
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for line in &loss_log {
            writeln!(f, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
        warnings,
        epoch_mean_losses,
    })
}

/// Ground-truth generator spec for recovery tests: a Markov chain with a
/// uniform prior, `stay_prob` on the diagonal and the remaining mass
/// uniform, emitting unit-covariance Gaussians around per-state means.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_states: usize,
    pub dim: usize,
    /// One row per state.
    pub means: Array2<f64>,
    pub stay_prob: f64,
    pub utt_len: usize,
    pub utt_count: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stay_prob <= 0.0 || self.stay_prob > 1.0 {
            return Err(Error::validation("stay_prob must be in (0, 1]"));
        }
        if self.means.dim() != (self.n_states, self.dim) {
            return Err(Error::validation("means must be n_states x dim"));
        }
        for a in 0..self.n_states {
            for b in a + 1..self.n_states {
                if self.means.row(a) == self.means.row(b) {
                    return Err(Error::validation(format!(
                        "states {a} and {b} have identical means"
                    )));
                }
            }
        }
        if self.utt_len < 1 || self.utt_count < 1 {
            return Err(Error::validation("utt_len and utt_count must be >= 1"));
        }
        Ok(())
    }
}

/// Sample one utterance: the true state path and the emitted frames.
pub fn synth_utterance(spec: &SynthSpec, rng: &mut Rng) -> (Vec<usize>, FrameMatrix) {
    let n = spec.n_states;
    let mut states = Vec::with_capacity(spec.utt_len);
    states.push(rng.below(n));
    for _ in 1..spec.utt_len {
        let prev = *states.last().unwrap();
        let next = if n == 1 {
            prev
        } else {
            let u = rng.next_f64();
            if u < spec.stay_prob {
                prev
            } else {
                // uniform over the other states
                let r = rng.below(n - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            }
        };
        states.push(next);
    }
    let mut frames = Array2::zeros((spec.utt_len, spec.dim));
    for (t, &s) in states.iter().enumerate() {
        for d in 0..spec.dim {
            frames[(t, d)] = (spec.means[(s, d)] + rng.standard_normal()) as f32;
        }
    }
    (states, FrameMatrix::new(frames))
}

fn states_to_segments(states: &[usize]) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    for t in 1..=states.len() {
        if t == states.len() || states[t] != states[t - 1] {
            segments.push(Segment {
                start,
                end: t,
                label: format!("s{}", states[t - 1]),
            });
            start = t;
        }
    }
    segments
}

/// Generate a synthetic dataset on disk: LMF1 features, frame-level
/// label files and a manifest. Returns the manifest path.
pub fn synth_generate(spec: &SynthSpec, rng: &mut Rng, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(spec.utt_count);
    for i in 0..spec.utt_count {
        let (states, frames) = synth_utterance(spec, rng);
        let id = format!("synth_{i:04}");
        let feat_path = out_dir.join(format!("{id}.lmf"));
        let label_path = out_dir.join(format!("{id}.labels"));
        write_features(&feat_path, &frames)?;
        write_labels(&label_path, &states_to_segments(&states))?;
        entries.push(ManifestEntry {
            id,
            feature_path: feat_path,
            label_path: Some(label_path),
        });
    }
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Convenience three-state spec used by examples and acceptance tests:
/// d = 8, pairwise mean distance 6, stay probability 0.9.
pub fn default_synth_spec(utt_count: usize, utt_len: usize) -> SynthSpec {
    let mut means = Array2::zeros((3, 8));
    means[(0, 0)] = 3.0;
    means[(0, 1)] = 3.0;
    means[(1, 0)] = 3.0;
    means[(1, 1)] = -3.0;
    means[(2, 0)] = -3.0;
    means[(2, 1)] = 3.0;
    SynthSpec {
        n_states: 3,
        dim: 8,
        means,
        stay_prob: 0.9,
        utt_len,
        utt_count,
    }
}

/// Read back the true state sequence from a label file's segments.
pub fn segments_to_states(segments: &[Segment]) -> Result<Vec<usize>> {
    let (frames, names) = crate::features::segments_to_frame_labels(segments)?;
    // labels are "s<index>"; map back to the generator's state numbers
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let name = &names[f];
        let idx: usize = name
            .strip_prefix('s')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(format!("not a synthetic state label: {name}")))?;
        out.push(idx);
    }
    Ok(out)
}
