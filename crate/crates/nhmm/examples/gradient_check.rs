//! Finite-difference verification of the analytic loss gradient for a
//! small model, run for both the full transition variant and the
//! frame-independent baseline.

use ndarray::Array2;
use nhmm::features::FrameMatrix;
use nhmm::model::{
    param_init, total_loss, total_loss_grad, CellType, ModelConfig, Variant,
};
use nhmm::numerics::Rng;

fn max_rel_err(cfg: &ModelConfig, seed: u64, t_len: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = param_init(cfg, &mut rng).unwrap();
    let data: Vec<f32> = rng
        .standard_normal_vec(t_len * cfg.feat_dim)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let frames = FrameMatrix::new(Array2::from_shape_vec((t_len, cfg.feat_dim), data).unwrap());

    let (_, grad) = total_loss_grad(&params, &frames, cfg).unwrap();
    let grads: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|(n, s)| (n, s.to_vec()))
        .collect();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (name, analytic) in &grads {
        for idx in 0..analytic.len() {
            let mut eval = |delta: f64| {
                for (n, slice) in params.tensors_mut() {
                    if &n == name {
                        slice[idx] += delta;
                    }
                }
                let loss = total_loss(&params, &frames, cfg).unwrap();
                for (n, slice) in params.tensors_mut() {
                    if &n == name {
                        slice[idx] -= delta;
                    }
                }
                loss
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let diff = (analytic[idx] - fd).abs();
            if diff >= 1e-8 {
                worst = worst.max(diff / analytic[idx].abs().max(fd.abs()).max(1e-8));
            }
        }
    }
    worst
}

fn main() {
    for variant in [Variant::NeuralHmm, Variant::VqApc] {
        for hop in [1usize, 3] {
            let cfg = ModelConfig {
                n_states: 4,
                time_shift: 3,
                hop,
                feat_dim: 6,
                hidden_dim: 8,
                num_layers: 1,
                cell: CellType::Elman,
                variant,
                tap_layer: None,
            };
            let err = max_rel_err(&cfg, 42, 20);
            println!("{variant:?} hop={hop}: max relative gradient error {err:.3e}");
        }
    }
}
