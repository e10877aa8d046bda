//! Probing evaluations: Viterbi code decoding, normalized mutual
//! information against reference labels, code-change segmentation scored
//! with a time tolerance, and a linear classifier on frozen
//! representations.
//!
//! Frames before the time shift k never receive a state, so every metric
//! here works on the frame range k..T-1 (0-based).

use ndarray::{Array1, Array2};

use crate::features::FrameMatrix;
use crate::lattice::viterbi;
use crate::model::{build_chain_lattices, encode_all, ModelConfig, ModelParams};
use crate::numerics::{log_softmax, Rng};
use crate::training::adam_update_flat;
use crate::{Error, Result};

/// Per-frame discrete code assignment for frames k..T-1.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
    pub frame_shift_ms: u32,
}

/// Boundary detection counts and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SegScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits: usize,
    pub hyp_total: usize,
    pub ref_total: usize,
}

/// Viterbi-decode every chain and interleave the node states back onto
/// the frames each node emits.
pub fn decode_codes(
    params: &ModelParams,
    frames: &FrameMatrix,
    cfg: &ModelConfig,
) -> Result<CodeSequence> {
    let k = cfg.time_shift;
    let t_len = frames.num_frames();
    let mut codes = vec![usize::MAX; t_len - k];
    for (ci, lattice) in build_chain_lattices(params, frames, cfg)? {
        let path = viterbi(&lattice)?;
        for (node, &t) in ci.node_times.iter().enumerate() {
            codes[t - k] = path.states[node];
        }
    }
    debug_assert!(codes.iter().all(|c| *c != usize::MAX));
    Ok(CodeSequence {
        codes,
        frame_shift_ms: frames.frame_shift_ms,
    })
}

/// How NMI is normalized. The default divides mutual information by the
/// arithmetic mean of the two entropies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmiNorm {
    Arithmetic,
    Max,
    Sqrt,
}

/// Normalized mutual information between two equal-length discrete
/// sequences, natural log, with the 0 * log 0 = 0 convention. Returns 0
/// when either marginal entropy is 0.
pub fn nmi(codes: &[usize], labels: &[usize]) -> Result<f64> {
    nmi_with(codes, labels, NmiNorm::Arithmetic)
}

pub fn nmi_with(codes: &[usize], labels: &[usize], norm: NmiNorm) -> Result<f64> {
    if codes.len() != labels.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} codes vs {} labels",
            codes.len(),
            labels.len()
        )));
    }
    if codes.is_empty() {
        return Err(Error::validation("empty reduction"));
    }
    let nc = codes.iter().max().unwrap() + 1;
    let nl = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0f64; nc * nl];
    for (&c, &l) in codes.iter().zip(labels.iter()) {
        joint[c * nl + l] += 1.0;
    }
    let total = codes.len() as f64;
    let mut pc = vec![0f64; nc];
    let mut pl = vec![0f64; nl];
    for c in 0..nc {
        for l in 0..nl {
            let p = joint[c * nl + l] / total;
            pc[c] += p;
            pl[l] += p;
        }
    }
    let entropy = |ps: &[f64]| -> f64 {
        -ps.iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    };
    let hc = entropy(&pc);
    let hl = entropy(&pl);
    if hc == 0.0 || hl == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for c in 0..nc {
        for l in 0..nl {
            let p = joint[c * nl + l] / total;
            if p > 0.0 {
                mi += p * (p / (pc[c] * pl[l])).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Arithmetic => 0.5 * (hc + hl),
        NmiNorm::Max => hc.max(hl),
        NmiNorm::Sqrt => (hc * hl).sqrt(),
    };
    Ok(mi / denom)
}

/// Hypothesize a boundary wherever the code changes; endpoints are not
/// boundaries. Returned indices are positions into `codes`.
pub fn boundaries_from_codes(codes: &[usize]) -> Vec<usize> {
    (1..codes.len())
        .filter(|&t| codes[t] != codes[t - 1])
        .collect()
}

/// Boundary precision/recall/F1 with an inclusive time tolerance.
///
/// Matching is one-to-one: each reference boundary, in time order,
/// claims the nearest still-unmatched hypothesis boundary within the
/// tolerance (ties toward the earlier hypothesis).
pub fn seg_prf(
    hyp: &[usize],
    reference: &[usize],
    tol_ms: u32,
    frame_shift_ms: u32,
) -> Result<SegScore> {
    for seq in [hyp, reference] {
        if seq.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("boundary indices must be strictly sorted"));
        }
    }
    let tol = tol_ms as f64;
    let shift = frame_shift_ms as f64;
    let mut used = vec![false; hyp.len()];
    let mut hits = 0usize;
    for &r in reference {
        let mut best: Option<(f64, usize)> = None;
        for (i, &h) in hyp.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist = (h as f64 - r as f64).abs() * shift;
            if dist <= tol {
                match best {
                    Some((d, _)) if d <= dist => {}
                    _ => best = Some((dist, i)),
                }
            }
        }
        if let Some((_, i)) = best {
            used[i] = true;
            hits += 1;
        }
    }
    let (hyp_total, ref_total) = (hyp.len(), reference.len());
    if hyp_total == 0 && ref_total == 0 {
        return Ok(SegScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            hits: 0,
            hyp_total,
            ref_total,
        });
    }
    let precision = if hyp_total == 0 {
        0.0
    } else {
        hits as f64 / hyp_total as f64
    };
    let recall = if ref_total == 0 {
        0.0
    } else {
        hits as f64 / ref_total as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SegScore {
        precision,
        recall,
        f1,
        hits,
        hyp_total,
        ref_total,
    })
}

/// Frozen-encoder representations from the configured tap layer, one row
/// per frame.
pub fn tap_representations(
    params: &ModelParams,
    frames: &FrameMatrix,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let layers = encode_all(params, frames)?;
    let tap = cfg.tap_layer.unwrap_or(layers.len() - 1);
    layers
        .into_iter()
        .nth(tap)
        .ok_or_else(|| Error::validation(format!("tap layer {tap} out of range")))
}

/// Multinomial logistic regression on frozen representations.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// classes x dim
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl LinearProbe {
    pub fn predict(&self, rep: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.w.nrows() {
            let score: f64 = self.b[c]
                + self
                    .w
                    .row(c)
                    .iter()
                    .zip(rep.iter())
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    }
}

/// Train the probe with minibatch Adam and cross-entropy.
pub fn probe_train(
    reps: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if reps.nrows() != labels.len() {
        return Err(Error::validation(format!(
            "label/frame mismatch: {} rows vs {} labels",
            reps.nrows(),
            labels.len()
        )));
    }
    if reps.nrows() == 0 {
        return Err(Error::validation("empty reduction"));
    }
    if labels.iter().any(|l| *l >= num_classes) {
        return Err(Error::validation("label outside class range"));
    }
    let dim = reps.ncols();
    let n_params = num_classes * (dim + 1);
    let mut params = vec![0.0f64; n_params];
    let mut m = vec![0.0f64; n_params];
    let mut v = vec![0.0f64; n_params];
    let mut step = 0u64;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..reps.nrows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vec![0.0f64; n_params];
            for &i in batch {
                let rep = reps.row(i);
                let scores: Vec<f64> = (0..num_classes)
                    .map(|c| {
                        params[c * (dim + 1) + dim]
                            + (0..dim)
                                .map(|d| params[c * (dim + 1) + d] * rep[d])
                                .sum::<f64>()
                    })
                    .collect();
                let log_probs = log_softmax(&scores);
                for c in 0..num_classes {
                    let err = log_probs[c].exp() - if c == labels[i] { 1.0 } else { 0.0 };
                    for d in 0..dim {
                        grads[c * (dim + 1) + d] += err * rep[d];
                    }
                    grads[c * (dim + 1) + dim] += err;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                *g *= scale;
            }
            step += 1;
            adam_update_flat(
                &mut params,
                &grads,
                &mut m,
                &mut v,
                step,
                cfg.learning_rate,
                0.9,
                0.999,
                1e-8,
                1.0,
            );
        }
    }
    let mut w = Array2::zeros((num_classes, dim));
    let mut b = Array1::zeros(num_classes);
    for c in 0..num_classes {
        for d in 0..dim {
            w[(c, d)] = params[c * (dim + 1) + d];
        }
        b[c] = params[c * (dim + 1) + dim];
    }
    Ok(LinearProbe { w, b })
}

/// Fraction of misclassified frames.
pub fn probe_eval(probe: &LinearProbe, reps: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if reps.nrows() != labels.len() {
        return Err(Error::validation(format!(
            "label/frame mismatch: {} rows vs {} labels",
            reps.nrows(),
            labels.len()
        )));
    }
    if reps.nrows() == 0 {
        return Err(Error::validation("empty reduction"));
    }
    let wrong = reps
        .rows()
        .into_iter()
        .zip(labels.iter())
        .filter(|(row, l)| probe.predict(row.as_slice().unwrap()) != **l)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}
