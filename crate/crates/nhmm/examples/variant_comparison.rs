//! Train the full-transition model and the frame-independent baseline
//! on identical data with the same seed. They share the parameter
//! count; only the transition structure differs.

use nhmm::features::read_manifest;
use nhmm::model::{CellType, ModelConfig, Variant};
use nhmm::numerics::Rng;
use nhmm::training::{default_synth_spec, synth_generate, train, TrainConfig, TrainOptions};

fn main() -> nhmm::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = default_synth_spec(20, 80);
    let mut rng = Rng::new(0);
    let manifest_path = synth_generate(&spec, &mut rng, dir.path())?;
    let manifest = read_manifest(&manifest_path)?;

    for variant in [Variant::NeuralHmm, Variant::VqApc] {
        let cfg = ModelConfig {
            n_states: 3,
            time_shift: 2,
            hop: 1,
            feat_dim: 8,
            hidden_dim: 16,
            num_layers: 1,
            cell: CellType::Elman,
            variant,
            tap_layer: None,
        };
        let train_cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 3,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome = train(&manifest, &cfg, &train_cfg, TrainOptions::default())?;
        println!(
            "{variant:?}: {} parameters, epoch losses {:?}",
            outcome.checkpoint.params.param_count(),
            outcome
                .epoch_mean_losses
                .iter()
                .map(|l| (l * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
