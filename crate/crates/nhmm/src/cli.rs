//! Command implementations behind the `nhmm` binary. Each command
//! returns `Result<()>`; the binary maps errors to exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};

use crate::config::RunConfig;
use crate::features::{
    compute_norm_stats, log_mel, normalize, read_features, read_manifest, read_wav,
    segments_to_frame_labels, write_features, write_manifest, FrameMatrix, ManifestEntry,
    MelConfig, NormStats,
};
use crate::lattice::{
    brute_force_best_path, brute_force_loglik, forward, posteriors, random_lattice, viterbi,
};
use crate::model::{
    param_init, total_loss, total_loss_grad, CellType, ModelConfig, Variant,
};
use crate::numerics::Rng;
use crate::probing::{
    boundaries_from_codes, decode_codes, nmi, probe_eval, probe_train, seg_prf,
    tap_representations, ProbeConfig,
};
use crate::training::{
    load_checkpoint, synth_generate, train, SynthSpec, TrainOptions,
};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn banner() {
    println!("nhmm {VERSION}");
}

// ---------------------------------------------------------------- extract

pub fn write_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let mut text = String::from("mean");
    for v in &stats.mean {
        text.push_str(&format!(" {v}"));
    }
    text.push_str("\nstd");
    for v in &stats.std {
        text.push_str(&format!(" {v}"));
    }
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_stats(path: &Path) -> Result<NormStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let tag = match parts.next() {
            Some(t) => t,
            None => continue,
        };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let values =
            values.map_err(|_| Error::data(format!("bad number in stats file {}", path.display())))?;
        match tag {
            "mean" => mean = Some(values),
            "std" => std = Some(values),
            _ => return Err(Error::data(format!("unknown stats row `{tag}`"))),
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) if mean.len() == std.len() => Ok(NormStats { mean, std }),
        _ => Err(Error::data(format!(
            "stats file {} must have matching mean and std rows",
            path.display()
        ))),
    }
}

pub fn cmd_extract(
    wav_dir: &Path,
    out_dir: &Path,
    stats_out: Option<&Path>,
    stats_in: Option<&Path>,
) -> Result<()> {
    banner();
    let mut wavs: Vec<PathBuf> = fs::read_dir(wav_dir)
        .map_err(|e| Error::io(wav_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::validation("no input files"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mel = MelConfig::default();
    let mut ok: Vec<(PathBuf, FrameMatrix)> = Vec::new();
    let mut failed = 0usize;
    for path in &wavs {
        match read_wav(path).and_then(|w| log_mel(&w, &mel)) {
            Ok(frames) => ok.push((path.clone(), frames)),
            Err(e) => {
                eprintln!("extract: {}: {e}", path.display());
                failed += 1;
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::data("all input files failed"));
    }

    let stats = match stats_in {
        Some(p) => read_stats(p)?,
        None => compute_norm_stats(&ok.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>())?,
    };
    if let Some(p) = stats_out {
        write_stats(p, &stats)?;
    }

    let mut entries = Vec::with_capacity(ok.len());
    for (path, frames) in &ok {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("utt")
            .to_string();
        let norm = normalize(frames, &stats)?;
        let feat_path = out_dir.join(format!("{id}.lmf"));
        write_features(&feat_path, &norm)?;
        let label_sibling = path.with_extension("labels");
        entries.push(ManifestEntry {
            id,
            feature_path: feat_path,
            label_path: label_sibling.exists().then_some(label_sibling),
        });
    }
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} feature files, manifest {}", entries.len(), manifest.display());
    if failed > 0 {
        return Err(Error::data(format!("{failed} input file(s) failed")));
    }
    Ok(())
}

// ------------------------------------------------------------------ synth

/// Parse a synthetic-data spec in the flat key=value format. `means`
/// uses `;` between states and `,` between coordinates.
pub fn read_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec = crate::training::default_synth_spec(20, 100);
    let mut means_text: Option<String> = None;
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || Error::validation(format!("bad value {value:?} for key `{key}`"));
        match key {
            "n_states" => spec.n_states = value.parse().map_err(|_| bad())?,
            "dim" => spec.dim = value.parse().map_err(|_| bad())?,
            "stay_prob" => spec.stay_prob = value.parse().map_err(|_| bad())?,
            "utt_len" => spec.utt_len = value.parse().map_err(|_| bad())?,
            "utt_count" => spec.utt_count = value.parse().map_err(|_| bad())?,
            "means" => means_text = Some(value.to_string()),
            _ => return Err(Error::validation(format!("unknown spec key `{key}`"))),
        }
    }
    if let Some(text) = means_text {
        let rows: Vec<Vec<f64>> = text
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<f64>, _>>()
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::validation("bad number in `means`"))?;
        if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::validation("`means` rows must have equal length"));
        }
        let mut means = Array2::zeros((rows.len(), rows[0].len()));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                means[(i, j)] = v;
            }
        }
        spec.means = means;
    } else {
        // keep the default means only if the shape still matches
        if spec.means.nrows() != spec.n_states || spec.means.ncols() != spec.dim {
            return Err(Error::validation(
                "`means` is required when n_states or dim differs from the default spec",
            ));
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_synth(spec_path: Option<&Path>, out_dir: &Path, seed: u64) -> Result<()> {
    banner();
    let spec = match spec_path {
        Some(p) => read_synth_spec(p)?,
        None => crate::training::default_synth_spec(20, 100),
    };
    let mut rng = Rng::new(seed);
    let manifest = synth_generate(&spec, &mut rng, out_dir)?;
    println!(
        "generated {} utterances of {} frames, manifest {}",
        spec.utt_count,
        spec.utt_len,
        manifest.display()
    );
    Ok(())
}

// --------------------------------------------------------------- pretrain

pub fn cmd_pretrain(
    config_path: Option<&Path>,
    overrides: &[(String, String)],
    manifest_path: &Path,
    out_dir: &Path,
    force: bool,
    resume: Option<&Path>,
) -> Result<()> {
    banner();
    let mut cfg = match config_path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;

    let final_path = out_dir.join("final.nhmm");
    if final_path.exists() && !force {
        return Err(Error::validation(format!(
            "refusing to overwrite {}; pass --force",
            final_path.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let echoed = out_dir.join("run.conf");
    fs::write(&echoed, cfg.render()).map_err(|e| Error::io(&echoed, e))?;

    let resume_ckpt = resume.map(load_checkpoint).transpose()?;
    let manifest = read_manifest(manifest_path)?;
    let outcome = train(
        &manifest,
        &cfg.model,
        &cfg.train,
        TrainOptions {
            out_dir: Some(out_dir),
            resume: resume_ckpt,
        },
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "parameter count: {}",
        outcome.checkpoint.params.param_count()
    );
    if let Some(loss) = outcome.epoch_mean_losses.last() {
        println!("final mean loss: {loss}");
    }
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

// ----------------------------------------------------------------- decode

pub fn cmd_decode(checkpoint: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    banner();
    let ckpt = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(manifest_path)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut text = String::new();
    for entry in &manifest {
        let frames = read_features(&entry.feature_path)?;
        let seq = decode_codes(&ckpt.params, &frames, &ckpt.model_cfg)?;
        text.push_str(&entry.id);
        for c in &seq.codes {
            text.push_str(&format!(" {c}"));
        }
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!("decoded {} utterances to {}", manifest.len(), out.display());
    Ok(())
}

pub fn read_codes_file(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::data("empty codes line"))?
            .to_string();
        let codes: std::result::Result<Vec<usize>, _> = parts.map(str::parse).collect();
        let codes = codes.map_err(|_| Error::data(format!("bad code value for {id}")))?;
        out.insert(id, codes);
    }
    Ok(out)
}

// ------------------------------------------------------------------- eval

struct Interner {
    map: BTreeMap<String, usize>,
}

impl Interner {
    fn new() -> Self {
        Interner {
            map: BTreeMap::new(),
        }
    }
    fn get(&mut self, name: &str) -> usize {
        let next = self.map.len();
        *self.map.entry(name.to_string()).or_insert(next)
    }
    fn len(&self) -> usize {
        self.map.len()
    }
}

fn frame_labels(entry: &ManifestEntry, interner: &mut Interner) -> Result<Vec<usize>> {
    let path = entry.label_path.as_ref().ok_or_else(|| {
        Error::data(format!("utterance {} has no label file", entry.id))
    })?;
    let segments = crate::features::read_labels(path)?;
    let (frames, names) = segments_to_frame_labels(&segments)?;
    Ok(frames.into_iter().map(|f| interner.get(&names[f])).collect())
}

fn report(rows: &[(&str, f64)], csv: Option<&Path>) -> Result<()> {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, value) in rows {
        println!("{name:width$}  {value:.6}");
    }
    if let Some(path) = csv {
        let mut text = String::new();
        for (name, value) in rows {
            text.push_str(&format!("{name},{value}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn cmd_eval(
    codes_path: Option<&Path>,
    manifest_path: &Path,
    metric: &str,
    checkpoint: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    banner();
    let manifest = read_manifest(manifest_path)?;
    let mut interner = Interner::new();
    match metric {
        "nmi" | "seg" => {
            let codes_path = codes_path
                .ok_or_else(|| Error::validation("--codes is required for nmi and seg"))?;
            let codes = read_codes_file(codes_path)?;
            let mut pooled_codes = Vec::new();
            let mut pooled_labels = Vec::new();
            let mut hits = 0usize;
            let mut hyp_total = 0usize;
            let mut ref_total = 0usize;
            for entry in &manifest {
                let labels = frame_labels(entry, &mut interner)?;
                let utt_codes = codes.get(&entry.id).ok_or_else(|| {
                    Error::data(format!("no codes for utterance {}", entry.id))
                })?;
                if utt_codes.len() > labels.len() {
                    return Err(Error::data(format!(
                        "utterance {}: {} codes but only {} labeled frames",
                        entry.id,
                        utt_codes.len(),
                        labels.len()
                    )));
                }
                // codes cover frames k..T; align labels by dropping the
                // unmodeled prefix
                let k = labels.len() - utt_codes.len();
                let labels = &labels[k..];
                if metric == "nmi" {
                    pooled_codes.extend_from_slice(utt_codes);
                    pooled_labels.extend_from_slice(labels);
                } else {
                    let hyp = boundaries_from_codes(utt_codes);
                    let reference = boundaries_from_codes(labels);
                    let s = seg_prf(&hyp, &reference, 20, 10)?;
                    hits += s.hits;
                    hyp_total += s.hyp_total;
                    ref_total += s.ref_total;
                }
            }
            if metric == "nmi" {
                let value = nmi(&pooled_codes, &pooled_labels)?;
                report(&[("nmi", value)], csv)?;
            } else {
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
                report(
                    &[("seg_precision", precision), ("seg_recall", recall), ("seg_f1", f1)],
                    csv,
                )?;
            }
        }
        "probe" => {
            let checkpoint = checkpoint
                .ok_or_else(|| Error::validation("--checkpoint is required for probe"))?;
            let ckpt = load_checkpoint(checkpoint)?;
            let k = ckpt.model_cfg.time_shift;
            let mut rep_rows: Vec<Array2<f64>> = Vec::new();
            let mut all_labels = Vec::new();
            for entry in &manifest {
                let labels = frame_labels(entry, &mut interner)?;
                let frames = read_features(&entry.feature_path)?;
                if labels.len() != frames.num_frames() {
                    return Err(Error::data(format!(
                        "utterance {}: {} labels for {} frames",
                        entry.id,
                        labels.len(),
                        frames.num_frames()
                    )));
                }
                let reps = tap_representations(&ckpt.params, &frames, &ckpt.model_cfg)?;
                rep_rows.push(reps.slice(ndarray::s![k.., ..]).to_owned());
                all_labels.extend_from_slice(&labels[k..]);
            }
            let views: Vec<_> = rep_rows.iter().map(|r| r.view()).collect();
            let reps = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::data(format!("representation stacking failed: {e}")))?;
            let probe = probe_train(&reps, &all_labels, interner.len(), &ProbeConfig::default())?;
            let err = probe_eval(&probe, &reps, &all_labels)?;
            report(&[("probe_error", err), ("probe_accuracy", 1.0 - err)], csv)?;
        }
        _ => {
            return Err(Error::validation(format!(
                "unknown metric `{metric}` (expected nmi, seg, or probe)"
            )))
        }
    }
    Ok(())
}

// -------------------------------------------------------------- selfcheck

/// One verification suite: name, worst observed error, pinned bound.
pub struct SuiteResult {
    pub name: &'static str,
    pub max_err: f64,
    pub bound: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= self.bound
    }
}

fn lattice_suite() -> SuiteResult {
    let mut rng = Rng::new(7);
    let mut max_err = 0.0f64;
    for _ in 0..25 {
        let m = 2 + rng.below(4) as usize;
        let n = 2 + rng.below(3) as usize;
        let l = random_lattice(m, n, &mut rng);
        let (_, loglik) = forward(&l).unwrap();
        let brute = brute_force_loglik(&l).unwrap();
        max_err = max_err.max((loglik - brute).abs());
        let vit = viterbi(&l).unwrap();
        let best = brute_force_best_path(&l).unwrap();
        max_err = max_err.max((vit.score - best.score).abs());
        if vit.states != best.states {
            max_err = f64::INFINITY;
        }
    }
    SuiteResult {
        name: "lattice vs brute force",
        max_err,
        bound: 1e-9,
    }
}

fn posterior_suite(flip_xi: bool) -> SuiteResult {
    let mut rng = Rng::new(11);
    let mut max_err = 0.0f64;
    for _ in 0..25 {
        let m = 2 + rng.below(5) as usize;
        let n = 2 + rng.below(4) as usize;
        let l = random_lattice(m, n, &mut rng);
        let post = posteriors(&l).unwrap();
        let sign = if flip_xi { -1.0 } else { 1.0 };
        for t in 0..m {
            let s: f64 = post.gamma.row(t).sum();
            max_err = max_err.max((s - 1.0).abs());
        }
        for t in 0..m - 1 {
            for i in 0..n {
                let row: f64 = (0..n).map(|j| sign * post.xi[(t, i, j)]).sum();
                max_err = max_err.max((row - post.gamma[(t, i)]).abs());
            }
            for j in 0..n {
                let col: f64 = (0..n).map(|i| sign * post.xi[(t, i, j)]).sum();
                max_err = max_err.max((col - post.gamma[(t + 1, j)]).abs());
            }
        }
    }
    SuiteResult {
        name: "posterior marginals",
        max_err,
        bound: 1e-9,
    }
}

fn gradient_suite() -> SuiteResult {
    let mut max_err = 0.0f64;
    for &variant in &[Variant::NeuralHmm, Variant::VqApc] {
        for &hop in &[1usize, 2] {
            let cfg = ModelConfig {
                n_states: 3,
                time_shift: 2,
                hop,
                feat_dim: 4,
                hidden_dim: 6,
                num_layers: 1,
                cell: CellType::Elman,
                variant,
                tap_layer: None,
            };
            let mut rng = Rng::new(31);
            let mut params = param_init(&cfg, &mut rng).unwrap();
            let data: Vec<f32> = rng
                .standard_normal_vec(12 * cfg.feat_dim)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let frames = FrameMatrix::new(
                Array2::from_shape_vec((12, cfg.feat_dim), data).unwrap(),
            );
            let (_, grad) = total_loss_grad(&params, &frames, &cfg).unwrap();
            let grads: Vec<(String, Vec<f64>)> = grad
                .tensors()
                .into_iter()
                .map(|(n, s)| (n, s.to_vec()))
                .collect();
            let eps = 1e-5;
            for (name, analytic) in &grads {
                for idx in 0..analytic.len() {
                    let mut eval = |delta: f64| -> f64 {
                        for (n, slice) in params.tensors_mut() {
                            if &n == name {
                                slice[idx] += delta;
                            }
                        }
                        let loss = total_loss(&params, &frames, &cfg).unwrap();
                        for (n, slice) in params.tensors_mut() {
                            if &n == name {
                                slice[idx] -= delta;
                            }
                        }
                        loss
                    };
                    let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let diff = (analytic[idx] - numeric).abs();
                    // ignore differences below the FD noise floor
                    if diff >= 1e-8 {
                        let denom = analytic[idx].abs().max(numeric.abs()).max(1e-8);
                        max_err = max_err.max(diff / denom);
                    }
                }
            }
        }
    }
    SuiteResult {
        name: "finite-difference gradients",
        max_err,
        bound: 1e-4,
    }
}

/// Run the oracle suites and print per-suite maximum error. `flip_xi`
/// is a mutation hook that negates the pairwise posteriors inside the
/// marginal check; it exists to prove the suite can fail.
pub fn selfcheck(flip_xi: bool) -> Result<()> {
    banner();
    let suites = vec![lattice_suite(), posterior_suite(flip_xi), gradient_suite()];
    let mut all_ok = true;
    for s in &suites {
        let verdict = if s.passed() { "pass" } else { "FAIL" };
        println!(
            "{}: max error {:.3e} (bound {:.0e}) {}",
            s.name, s.max_err, s.bound, verdict
        );
        all_ok &= s.passed();
    }
    if all_ok {
        println!("selfcheck: all suites passed");
        Ok(())
    } else {
        Err(Error::data("selfcheck failed"))
    }
}

pub fn cmd_selfcheck(flip_xi: bool) -> Result<()> {
    selfcheck(flip_xi)
}
