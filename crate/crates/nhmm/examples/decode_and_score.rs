//! Full pipeline on synthetic data: train, Viterbi-decode with a hop
//! chain, then score codes with NMI, boundary F1 at a 20 ms tolerance,
//! and a linear probe on the frozen encoder.

use nhmm::features::{read_features, read_labels, read_manifest};
use nhmm::model::{CellType, ModelConfig, Variant};
use nhmm::numerics::Rng;
use nhmm::probing::{
    boundaries_from_codes, decode_codes, nmi, probe_eval, probe_train, seg_prf,
    tap_representations, ProbeConfig,
};
use nhmm::training::{
    default_synth_spec, segments_to_states, synth_generate, train, TrainConfig, TrainOptions,
};

fn main() -> nhmm::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = default_synth_spec(30, 100);
    let mut rng = Rng::new(3);
    let manifest_path = synth_generate(&spec, &mut rng, dir.path())?;
    let manifest = read_manifest(&manifest_path)?;

    let cfg = ModelConfig {
        n_states: 3,
        time_shift: 2,
        hop: 2, // decode runs one lattice per chain and interleaves
        feat_dim: 8,
        hidden_dim: 32,
        num_layers: 1,
        cell: CellType::Elman,
        variant: Variant::NeuralHmm,
        tap_layer: None,
    };
    let train_cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train(&manifest, &cfg, &train_cfg, TrainOptions::default())?;
    let params = &outcome.checkpoint.params;

    let mut all_codes = Vec::new();
    let mut all_truth = Vec::new();
    let mut hits = 0;
    let mut hyp_total = 0;
    let mut ref_total = 0;
    let mut reps_rows = Vec::new();
    for entry in &manifest {
        let frames = read_features(&entry.feature_path)?;
        let states = segments_to_states(&read_labels(entry.label_path.as_ref().unwrap())?)?;
        let seq = decode_codes(params, &frames, &cfg)?;
        let k = states.len() - seq.codes.len();

        let s = seg_prf(
            &boundaries_from_codes(&seq.codes),
            &boundaries_from_codes(&states[k..]),
            20,
            frames.frame_shift_ms,
        )?;
        hits += s.hits;
        hyp_total += s.hyp_total;
        ref_total += s.ref_total;

        let reps = tap_representations(params, &frames, &cfg)?;
        reps_rows.push(reps.slice(ndarray::s![k.., ..]).to_owned());
        all_codes.extend_from_slice(&seq.codes);
        all_truth.extend_from_slice(&states[k..]);
    }

    println!("NMI: {:.4}", nmi(&all_codes, &all_truth)?);
    let p = hits as f64 / hyp_total as f64;
    let r = hits as f64 / ref_total as f64;
    println!("segmentation: P {:.3} R {:.3} F1 {:.3}", p, r, 2.0 * p * r / (p + r));

    let views: Vec<_> = reps_rows.iter().map(|r| r.view()).collect();
    let reps = ndarray::concatenate(ndarray::Axis(0), &views).expect("stack");
    let probe = probe_train(&reps, &all_truth, 3, &ProbeConfig::default())?;
    println!("probe frame error rate: {:.4}", probe_eval(&probe, &reps, &all_truth)?);
    Ok(())
}
