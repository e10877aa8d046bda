//! Generate data from a known 3-state HMM, train a small model on it,
//! and measure how well Viterbi codes recover the true states.

use nhmm::features::{read_features, read_manifest};
use nhmm::model::{CellType, ModelConfig, Variant};
use nhmm::numerics::Rng;
use nhmm::probing::{decode_codes, nmi};
use nhmm::training::{
    default_synth_spec, segments_to_states, synth_generate, train, TrainConfig, TrainOptions,
};

fn main() -> nhmm::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = default_synth_spec(40, 100);
    let mut rng = Rng::new(0);
    let manifest_path = synth_generate(&spec, &mut rng, dir.path())?;
    let manifest = read_manifest(&manifest_path)?;

    let model_cfg = ModelConfig {
        n_states: 3,
        time_shift: 2,
        hop: 1,
        feat_dim: 8,
        hidden_dim: 32,
        num_layers: 1,
        cell: CellType::Elman,
        variant: Variant::NeuralHmm,
        tap_layer: None,
    };
    let train_cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 5,
        seed: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&manifest, &model_cfg, &train_cfg, TrainOptions::default())?;
    for (i, loss) in outcome.epoch_mean_losses.iter().enumerate() {
        println!("epoch {}: mean loss {loss:.4}", i + 1);
    }

    let mut codes = Vec::new();
    let mut truth = Vec::new();
    for entry in &manifest {
        let frames = read_features(&entry.feature_path)?;
        let seq = decode_codes(&outcome.checkpoint.params, &frames, &model_cfg)?;
        let segments = nhmm::features::read_labels(entry.label_path.as_ref().unwrap())?;
        let states = segments_to_states(&segments)?;
        let k = states.len() - seq.codes.len();
        codes.extend_from_slice(&seq.codes);
        truth.extend_from_slice(&states[k..]);
    }
    println!("NMI against true states: {:.4}", nmi(&codes, &truth)?);
    Ok(())
}
