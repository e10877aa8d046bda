//! Neural parametrization: causal recurrent encoder, codebooks `U` and
//! `V`, hop-chain lattice construction, the marginalized VQ-APC variant,
//! and exact gradients chained by hand from lattice posteriors back to
//! every parameter.
//!
//! State scores come from a time-shifted encoder hidden vector,
//! `s_t = h_{t-k}^T U`. Transition scores between consecutive chain nodes
//! are the outer product of the two node scores, row-softmaxed; the prior
//! is the softmax of the chain's first node score; emissions are unit
//! covariance Gaussians with means in the columns of `V`. Removing the
//! dependence of a transition row on the previous state (the broadcast
//! form below) collapses the model onto VQ-APC with marginalized codes.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::features::FrameMatrix;
use crate::lattice::{forward, posteriors, LatticePotentials};
use crate::numerics::{log_softmax, log_sum_exp, softmax, softmax_rows, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellType {
    Elman,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    NeuralHmm,
    VqApc,
}

/// How the transition score matrix between two chain nodes is formed.
///
/// `OuterProduct` is the full model. `Broadcast` drops the dependence on
/// the previous state by repeating the destination score in every row,
/// which makes each node independent and is exactly the VQ-APC limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionForm {
    OuterProduct,
    Broadcast,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Number of discrete states / codes.
    pub n_states: usize,
    /// Time shift k: the score of the state at frame t reads h_{t-k}.
    pub time_shift: usize,
    /// Hop length H: spacing between consecutive nodes of one chain.
    pub hop: usize,
    /// Feature dimension d.
    pub feat_dim: usize,
    /// Encoder hidden width per layer.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub cell: CellType,
    pub variant: Variant,
    /// Encoder layer feeding the probing representations (0-based);
    /// `None` taps the top layer.
    pub tap_layer: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_shift < 1 {
            return Err(Error::validation("time_shift must be >= 1"));
        }
        if self.hop < 1 {
            return Err(Error::validation("hop must be >= 1"));
        }
        let min_states = match self.variant {
            Variant::VqApc => 2,
            Variant::NeuralHmm => 1,
        };
        if self.n_states < min_states {
            return Err(Error::validation(format!(
                "n_states must be >= {min_states} for this variant"
            )));
        }
        if self.feat_dim < 1 || self.hidden_dim < 1 || self.num_layers < 1 {
            return Err(Error::validation("dims and layer count must be >= 1"));
        }
        if let Some(tap) = self.tap_layer {
            if tap >= self.num_layers {
                return Err(Error::validation(format!(
                    "tap_layer {tap} out of range for {} layers",
                    self.num_layers
                )));
            }
        }
        Ok(())
    }
}

/// One recurrent layer's weights. LSTM gate rows stack as [i, f, g, o].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Elman {
        wx: Array2<f64>,
        wh: Array2<f64>,
        b: Array1<f64>,
    },
    Lstm {
        wx: Array2<f64>,
        wh: Array2<f64>,
        b: Array1<f64>,
    },
}

impl LayerParams {
    fn hidden_dim(&self) -> usize {
        match self {
            LayerParams::Elman { wh, .. } => wh.nrows(),
            LayerParams::Lstm { wh, .. } => wh.nrows() / 4,
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            LayerParams::Elman { wx, .. } | LayerParams::Lstm { wx, .. } => wx.ncols(),
        }
    }

    fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::Elman { wx, wh, b } => LayerParams::Elman {
                wx: Array2::zeros(wx.raw_dim()),
                wh: Array2::zeros(wh.raw_dim()),
                b: Array1::zeros(b.raw_dim()),
            },
            LayerParams::Lstm { wx, wh, b } => LayerParams::Lstm {
                wx: Array2::zeros(wx.raw_dim()),
                wh: Array2::zeros(wh.raw_dim()),
                b: Array1::zeros(b.raw_dim()),
            },
        }
    }
}

/// All learnable parameters: encoder layers plus codebooks U (hidden_dim
/// x N state scores) and V (feat_dim x N emission means).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            u: Array2::zeros(self.u.raw_dim()),
            v: Array2::zeros(self.v.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named flat views over every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Elman { wx, wh, b } | LayerParams::Lstm { wx, wh, b } => {
                    out.push((format!("enc{l}.wx"), wx.as_slice().unwrap()));
                    out.push((format!("enc{l}.wh"), wh.as_slice().unwrap()));
                    out.push((format!("enc{l}.b"), b.as_slice().unwrap()));
                }
            }
        }
        out.push(("u".to_string(), self.u.as_slice().unwrap()));
        out.push(("v".to_string(), self.v.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::Elman { wx, wh, b } | LayerParams::Lstm { wx, wh, b } => {
                    out.push((format!("enc{l}.wx"), wx.as_slice_mut().unwrap()));
                    out.push((format!("enc{l}.wh"), wh.as_slice_mut().unwrap()));
                    out.push((format!("enc{l}.b"), b.as_slice_mut().unwrap()));
                }
            }
        }
        out.push(("u".to_string(), self.u.as_slice_mut().unwrap()));
        out.push(("v".to_string(), self.v.as_slice_mut().unwrap()));
        out
    }
}

/// Encoder weights uniform in +-1/sqrt(fan_in), biases zero, U likewise,
/// V columns 0.1-scaled standard normal.
pub fn param_init(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let dh = cfg.hidden_dim;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let din = if l == 0 { cfg.feat_dim } else { dh };
        let rows = match cfg.cell {
            CellType::Elman => dh,
            CellType::Lstm => 4 * dh,
        };
        let bx = 1.0 / (din as f64).sqrt();
        let bh = 1.0 / (dh as f64).sqrt();
        let wx = Array2::from_shape_fn((rows, din), |_| rng.uniform(-bx, bx));
        let wh = Array2::from_shape_fn((rows, dh), |_| rng.uniform(-bh, bh));
        let b = Array1::zeros(rows);
        layers.push(match cfg.cell {
            CellType::Elman => LayerParams::Elman { wx, wh, b },
            CellType::Lstm => LayerParams::Lstm { wx, wh, b },
        });
    }
    let bu = 1.0 / (dh as f64).sqrt();
    let u = Array2::from_shape_fn((dh, cfg.n_states), |_| rng.uniform(-bu, bu));
    let v = Array2::from_shape_fn((cfg.feat_dim, cfg.n_states), |_| {
        0.1 * rng.standard_normal()
    });
    Ok(ModelParams { layers, u, v })
}

/// Encoder hidden vectors, one row per frame; causal by construction.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub h: Array2<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    h: Array2<f64>,
    // LSTM-only activations, one row per time step.
    gates: Option<LstmCache>,
}

struct LstmCache {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
}

struct EncoderCache {
    layers: Vec<LayerCache>,
}

fn layer_forward(params: &LayerParams, input: &Array2<f64>) -> LayerCache {
    let t_len = input.nrows();
    let dh = params.hidden_dim();
    match params {
        LayerParams::Elman { wx, wh, b } => {
            let mut h = Array2::zeros((t_len, dh));
            let mut h_prev = Array1::zeros(dh);
            for t in 0..t_len {
                let a = wx.dot(&input.row(t)) + wh.dot(&h_prev) + b;
                let ht = a.mapv(f64::tanh);
                h.row_mut(t).assign(&ht);
                h_prev = ht;
            }
            LayerCache {
                input: input.clone(),
                h,
                gates: None,
            }
        }
        LayerParams::Lstm { wx, wh, b } => {
            let mut h = Array2::zeros((t_len, dh));
            let mut cache = LstmCache {
                i: Array2::zeros((t_len, dh)),
                f: Array2::zeros((t_len, dh)),
                g: Array2::zeros((t_len, dh)),
                o: Array2::zeros((t_len, dh)),
                c: Array2::zeros((t_len, dh)),
            };
            let mut h_prev = Array1::zeros(dh);
            let mut c_prev = Array1::<f64>::zeros(dh);
            let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
            for t in 0..t_len {
                let a = wx.dot(&input.row(t)) + wh.dot(&h_prev) + b;
                let mut c_t = Array1::zeros(dh);
                let mut h_t = Array1::zeros(dh);
                for j in 0..dh {
                    let i_g = sigmoid(a[j]);
                    let f_g = sigmoid(a[dh + j]);
                    let g_g = a[2 * dh + j].tanh();
                    let o_g = sigmoid(a[3 * dh + j]);
                    let c = f_g * c_prev[j] + i_g * g_g;
                    cache.i[(t, j)] = i_g;
                    cache.f[(t, j)] = f_g;
                    cache.g[(t, j)] = g_g;
                    cache.o[(t, j)] = o_g;
                    cache.c[(t, j)] = c;
                    c_t[j] = c;
                    h_t[j] = o_g * c.tanh();
                }
                h.row_mut(t).assign(&h_t);
                h_prev = h_t;
                c_prev = c_t;
            }
            LayerCache {
                input: input.clone(),
                h,
                gates: Some(cache),
            }
        }
    }
}

/// Backward through one layer given dL/dh for every time step.
/// Returns (parameter gradients, dL/dinput).
fn layer_backward(
    params: &LayerParams,
    cache: &LayerCache,
    d_h: &Array2<f64>,
) -> (LayerParams, Array2<f64>) {
    let t_len = cache.input.nrows();
    let dh = params.hidden_dim();
    let din = params.input_dim();
    match params {
        LayerParams::Elman { wx, wh, .. } => {
            let mut d_wx = Array2::zeros((dh, din));
            let mut d_wh = Array2::zeros((dh, dh));
            let mut d_b = Array1::zeros(dh);
            let mut d_input = Array2::zeros((t_len, din));
            let mut carry = Array1::<f64>::zeros(dh);
            for t in (0..t_len).rev() {
                let h_t = cache.h.row(t);
                let total = &d_h.row(t) + &carry;
                let da: Array1<f64> = total
                    .iter()
                    .zip(h_t.iter())
                    .map(|(d, h)| d * (1.0 - h * h))
                    .collect();
                for r in 0..dh {
                    let g = da[r];
                    for c in 0..din {
                        d_wx[(r, c)] += g * cache.input[(t, c)];
                    }
                    if t > 0 {
                        for c in 0..dh {
                            d_wh[(r, c)] += g * cache.h[(t - 1, c)];
                        }
                    }
                    d_b[r] += g;
                }
                d_input.row_mut(t).assign(&wx.t().dot(&da));
                carry = wh.t().dot(&da);
            }
            (
                LayerParams::Elman {
                    wx: d_wx,
                    wh: d_wh,
                    b: d_b,
                },
                d_input,
            )
        }
        LayerParams::Lstm { wx, wh, .. } => {
            let gates = cache.gates.as_ref().expect("LSTM cache");
            let mut d_wx = Array2::zeros((4 * dh, din));
            let mut d_wh = Array2::zeros((4 * dh, dh));
            let mut d_b = Array1::zeros(4 * dh);
            let mut d_input = Array2::zeros((t_len, din));
            let mut h_carry = Array1::<f64>::zeros(dh);
            let mut c_carry = Array1::<f64>::zeros(dh);
            for t in (0..t_len).rev() {
                let mut da = Array1::zeros(4 * dh);
                let mut next_c_carry = Array1::zeros(dh);
                for j in 0..dh {
                    let dh_total = d_h[(t, j)] + h_carry[j];
                    let (i_g, f_g, g_g, o_g, c) = (
                        gates.i[(t, j)],
                        gates.f[(t, j)],
                        gates.g[(t, j)],
                        gates.o[(t, j)],
                        gates.c[(t, j)],
                    );
                    let tc = c.tanh();
                    let d_o = dh_total * tc;
                    let d_c = c_carry[j] + dh_total * o_g * (1.0 - tc * tc);
                    let c_prev = if t > 0 { gates.c[(t - 1, j)] } else { 0.0 };
                    let d_i = d_c * g_g;
                    let d_f = d_c * c_prev;
                    let d_g = d_c * i_g;
                    next_c_carry[j] = d_c * f_g;
                    da[j] = d_i * i_g * (1.0 - i_g);
                    da[dh + j] = d_f * f_g * (1.0 - f_g);
                    da[2 * dh + j] = d_g * (1.0 - g_g * g_g);
                    da[3 * dh + j] = d_o * o_g * (1.0 - o_g);
                }
                for r in 0..4 * dh {
                    let g = da[r];
                    for c in 0..din {
                        d_wx[(r, c)] += g * cache.input[(t, c)];
                    }
                    if t > 0 {
                        for c in 0..dh {
                            d_wh[(r, c)] += g * cache.h[(t - 1, c)];
                        }
                    }
                    d_b[r] += g;
                }
                d_input.row_mut(t).assign(&wx.t().dot(&da));
                h_carry = wh.t().dot(&da);
                c_carry = next_c_carry;
            }
            (
                LayerParams::Lstm {
                    wx: d_wx,
                    wh: d_wh,
                    b: d_b,
                },
                d_input,
            )
        }
    }
}

fn encoder_forward(params: &ModelParams, x: &Array2<f64>) -> Result<EncoderCache> {
    if params.layers[0].input_dim() != x.ncols() {
        return Err(Error::validation(format!(
            "feature dim {} does not match encoder input dim {}",
            x.ncols(),
            params.layers[0].input_dim()
        )));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut input = x.clone();
    for layer in &params.layers {
        let cache = layer_forward(layer, &input);
        input = cache.h.clone();
        layers.push(cache);
    }
    Ok(EncoderCache { layers })
}

fn encoder_backward(
    params: &ModelParams,
    cache: &EncoderCache,
    d_top: Array2<f64>,
) -> Vec<LayerParams> {
    let mut grads: Vec<Option<LayerParams>> = vec![None; params.layers.len()];
    let mut d_h = d_top;
    for l in (0..params.layers.len()).rev() {
        let (g, d_input) = layer_backward(&params.layers[l], &cache.layers[l], &d_h);
        grads[l] = Some(g);
        d_h = d_input;
    }
    grads.into_iter().map(Option::unwrap).collect()
}

/// Top-layer hidden vectors for every frame.
pub fn encode(params: &ModelParams, frames: &FrameMatrix) -> Result<HiddenStates> {
    let cache = encoder_forward(params, &frames.to_f64())?;
    Ok(HiddenStates {
        h: cache.layers.last().unwrap().h.clone(),
    })
}

/// Hidden vectors of every encoder layer, bottom to top.
pub fn encode_all(params: &ModelParams, frames: &FrameMatrix) -> Result<Vec<Array2<f64>>> {
    let cache = encoder_forward(params, &frames.to_f64())?;
    Ok(cache.layers.into_iter().map(|c| c.h).collect())
}

/// State scores `s_t = h_{t-k}^T U` for frames t = k..T-1 (0-based).
/// Row r of the result is the score of frame k + r.
pub fn state_scores(h: &HiddenStates, u: &Array2<f64>, time_shift: usize) -> Result<Array2<f64>> {
    let t_len = h.h.nrows();
    if t_len <= time_shift {
        return Err(Error::validation(format!(
            "sequence shorter than time shift: T={t_len}, k={time_shift}"
        )));
    }
    Ok(h.h.slice(ndarray::s![..t_len - time_shift, ..]).dot(u))
}

/// Log density of a unit-covariance Gaussian at `x` for every column
/// mean of `v`: entry j = -(d/2) ln(2 pi) - 0.5 ||x - v_j||^2.
pub fn emission_logprob(x: &[f64], v: &Array2<f64>) -> Result<Vec<f64>> {
    let d = v.nrows();
    if x.len() != d {
        return Err(Error::validation(format!(
            "dimension mismatch: x is {}-dim, V codewords are {d}-dim",
            x.len()
        )));
    }
    let norm = -(d as f64 / 2.0) * std::f64::consts::TAU.ln();
    Ok((0..v.ncols())
        .map(|j| {
            let sq: f64 = x
                .iter()
                .zip(v.column(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            norm - 0.5 * sq
        })
        .collect())
}

/// Node times of one hop chain: 0-based frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainIndex {
    pub offset: usize,
    pub node_times: Vec<usize>,
}

/// Node times of every chain: chain c covers frames k+c, k+c+H, ...
/// The union over chains is exactly {k, ..., T-1}, pairwise disjoint.
pub fn chain_node_times(t_len: usize, time_shift: usize, hop: usize) -> Vec<ChainIndex> {
    (0..hop)
        .map(|c| ChainIndex {
            offset: c,
            node_times: (time_shift + c..t_len).step_by(hop).collect(),
        })
        .filter(|ci| !ci.node_times.is_empty())
        .collect()
}

fn check_length(t_len: usize, cfg: &ModelConfig) -> Result<()> {
    if t_len <= cfg.time_shift + cfg.hop {
        return Err(Error::validation(format!(
            "sequence too short: T={t_len} needs T > k + H = {}",
            cfg.time_shift + cfg.hop
        )));
    }
    Ok(())
}

/// Build one chain's lattice from precomputed scores and frames.
/// `scores` row r is the score of frame k + r.
fn chain_lattice(
    scores: &Array2<f64>,
    x: &Array2<f64>,
    v: &Array2<f64>,
    node_times: &[usize],
    time_shift: usize,
    form: TransitionForm,
) -> Result<LatticePotentials> {
    let n = scores.ncols();
    let m = node_times.len();
    let s_row = |t: usize| scores.row(t - time_shift);
    let prior = Array1::from_vec(log_softmax(s_row(node_times[0]).as_slice().unwrap()));
    let mut trans = Array3::zeros((m - 1, n, n));
    for e in 0..m - 1 {
        let s_prev = s_row(node_times[e]);
        let s_next = s_row(node_times[e + 1]);
        let phi = match form {
            TransitionForm::OuterProduct => {
                Array2::from_shape_fn((n, n), |(i, j)| s_prev[i] * s_next[j])
            }
            TransitionForm::Broadcast => Array2::from_shape_fn((n, n), |(_, j)| s_next[j]),
        };
        let log_rows = crate::numerics::log_softmax_rows(&phi);
        trans.index_axis_mut(Axis(0), e).assign(&log_rows);
    }
    let mut emit = Array2::zeros((m, n));
    for (node, &t) in node_times.iter().enumerate() {
        let e = emission_logprob(x.row(t).as_slice().unwrap(), v)?;
        for j in 0..n {
            emit[(node, j)] = e[j];
        }
    }
    Ok(LatticePotentials { prior, trans, emit })
}

/// Build the H chain lattices for one utterance.
pub fn build_chain_lattices(
    params: &ModelParams,
    frames: &FrameMatrix,
    cfg: &ModelConfig,
) -> Result<Vec<(ChainIndex, LatticePotentials)>> {
    build_chain_lattices_with(params, frames, cfg, TransitionForm::OuterProduct)
}

/// Same, with an explicit transition form (the broadcast form is the
/// VQ-APC limit and is exercised by tests).
pub fn build_chain_lattices_with(
    params: &ModelParams,
    frames: &FrameMatrix,
    cfg: &ModelConfig,
    form: TransitionForm,
) -> Result<Vec<(ChainIndex, LatticePotentials)>> {
    cfg.validate()?;
    let t_len = frames.num_frames();
    check_length(t_len, cfg)?;
    let x = frames.to_f64();
    let h = encode(params, frames)?;
    let scores = state_scores(&h, &params.u, cfg.time_shift)?;
    chain_node_times(t_len, cfg.time_shift, cfg.hop)
        .into_iter()
        .map(|ci| {
            let l = chain_lattice(&scores, &x, &params.v, &ci.node_times, cfg.time_shift, form)?;
            Ok((ci, l))
        })
        .collect()
}

/// Negative log-likelihood of one utterance (sum over chains; per-frame
/// mixture likelihood for the VQ-APC variant). Not normalized by length.
pub fn total_loss(params: &ModelParams, frames: &FrameMatrix, cfg: &ModelConfig) -> Result<f64> {
    cfg.validate()?;
    let t_len = frames.num_frames();
    check_length(t_len, cfg)?;
    let x = frames.to_f64();
    let h = encode(params, frames)?;
    let scores = state_scores(&h, &params.u, cfg.time_shift)?;
    match cfg.variant {
        Variant::NeuralHmm => {
            let mut total = 0.0;
            for ci in chain_node_times(t_len, cfg.time_shift, cfg.hop) {
                let l = chain_lattice(
                    &scores,
                    &x,
                    &params.v,
                    &ci.node_times,
                    cfg.time_shift,
                    TransitionForm::OuterProduct,
                )?;
                let (_, ll) = forward(&l)?;
                total += ll;
            }
            Ok(-total)
        }
        Variant::VqApc => {
            let mut total = 0.0;
            for t in cfg.time_shift..t_len {
                let ls = log_softmax(scores.row(t - cfg.time_shift).as_slice().unwrap());
                let emit = emission_logprob(x.row(t).as_slice().unwrap(), &params.v)?;
                let mixed: Vec<f64> = ls.iter().zip(emit.iter()).map(|(a, b)| a + b).collect();
                total += log_sum_exp(&mixed)?;
            }
            Ok(-total)
        }
    }
}

/// Per-frame code posteriors of the VQ-APC variant, one row per modeled
/// frame (k..T-1).
pub fn vq_frame_posteriors(
    params: &ModelParams,
    frames: &FrameMatrix,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let t_len = frames.num_frames();
    let x = frames.to_f64();
    let h = encode(params, frames)?;
    let scores = state_scores(&h, &params.u, cfg.time_shift)?;
    let n = cfg.n_states;
    let mut out = Array2::zeros((t_len - cfg.time_shift, n));
    for t in cfg.time_shift..t_len {
        let ls = log_softmax(scores.row(t - cfg.time_shift).as_slice().unwrap());
        let emit = emission_logprob(x.row(t).as_slice().unwrap(), &params.v)?;
        let mixed: Vec<f64> = ls.iter().zip(emit.iter()).map(|(a, b)| a + b).collect();
        let ll = log_sum_exp(&mixed)?;
        for j in 0..n {
            out[(t - cfg.time_shift, j)] = (mixed[j] - ll).exp();
        }
    }
    Ok(out)
}

/// Loss and its exact gradient with respect to every parameter.
///
/// Lattice posteriors give the gradient with respect to the normalized
/// log potentials; the softmax Jacobians for the prior and the transition
/// rows, the outer-product factors, the Gaussian emission, the codebook
/// projection and backpropagation through time are chained by hand.
pub fn total_loss_grad(
    params: &ModelParams,
    frames: &FrameMatrix,
    cfg: &ModelConfig,
) -> Result<(f64, ModelParams)> {
    cfg.validate()?;
    let t_len = frames.num_frames();
    check_length(t_len, cfg)?;
    let x = frames.to_f64();
    let cache = encoder_forward(params, &x)?;
    let h_top = HiddenStates {
        h: cache.layers.last().unwrap().h.clone(),
    };
    let scores = state_scores(&h_top, &params.u, cfg.time_shift)?;
    let k = cfg.time_shift;
    let n = cfg.n_states;
    let modeled = t_len - k;

    // Log-likelihood gradients; negated into loss gradients at the end.
    let mut d_scores = Array2::<f64>::zeros((modeled, n));
    let mut d_v = Array2::<f64>::zeros(params.v.raw_dim());
    let mut loglik_total = 0.0;

    match cfg.variant {
        Variant::NeuralHmm => {
            for ci in chain_node_times(t_len, k, cfg.hop) {
                let l = chain_lattice(
                    &scores,
                    &x,
                    &params.v,
                    &ci.node_times,
                    k,
                    TransitionForm::OuterProduct,
                )?;
                let post = posteriors(&l)?;
                loglik_total += post.loglik;
                let times = &ci.node_times;

                // Prior softmax Jacobian: gamma_first - softmax(s_first).
                let first = times[0] - k;
                let sm = softmax(scores.row(first).as_slice().unwrap());
                for j in 0..n {
                    d_scores[(first, j)] += post.gamma[(0, j)] - sm[j];
                }

                // Transition: dPhi[i,j] = xi(i,j) - gamma_prev(i) * softmax_row(Phi)[j],
                // then through the outer product Phi = s_prev s_next^T.
                for e in 0..times.len() - 1 {
                    let rp = times[e] - k;
                    let rn = times[e + 1] - k;
                    let s_prev = scores.row(rp);
                    let s_next = scores.row(rn);
                    let phi =
                        Array2::from_shape_fn((n, n), |(i, j)| s_prev[i] * s_next[j]);
                    let p = softmax_rows(&phi);
                    for i in 0..n {
                        for j in 0..n {
                            let d_phi = post.xi[(e, i, j)] - post.gamma[(e, i)] * p[(i, j)];
                            d_scores[(rp, i)] += d_phi * s_next[j];
                            d_scores[(rn, j)] += d_phi * s_prev[i];
                        }
                    }
                }

                // Emission: d/dv_j += gamma(j) * (x - v_j).
                for (node, &t) in times.iter().enumerate() {
                    for j in 0..n {
                        let g = post.gamma[(node, j)];
                        for dd in 0..params.v.nrows() {
                            d_v[(dd, j)] += g * (x[(t, dd)] - params.v[(dd, j)]);
                        }
                    }
                }
            }
        }
        Variant::VqApc => {
            for t in k..t_len {
                let r = t - k;
                let ls = log_softmax(scores.row(r).as_slice().unwrap());
                let emit = emission_logprob(x.row(t).as_slice().unwrap(), &params.v)?;
                let mixed: Vec<f64> = ls.iter().zip(emit.iter()).map(|(a, b)| a + b).collect();
                let ll = log_sum_exp(&mixed)?;
                loglik_total += ll;
                let sm = softmax(scores.row(r).as_slice().unwrap());
                for j in 0..n {
                    let resp = (mixed[j] - ll).exp();
                    d_scores[(r, j)] += resp - sm[j];
                    for dd in 0..params.v.nrows() {
                        d_v[(dd, j)] += resp * (x[(t, dd)] - params.v[(dd, j)]);
                    }
                }
            }
        }
    }

    // Loss = -loglik: flip signs, then chain through U and the encoder.
    let d_scores_loss = d_scores.mapv(|v| -v);
    let h_used = h_top.h.slice(ndarray::s![..modeled, ..]);
    let d_u = h_used.t().dot(&d_scores_loss);
    let mut d_h_top = Array2::zeros(h_top.h.raw_dim());
    d_h_top
        .slice_mut(ndarray::s![..modeled, ..])
        .assign(&d_scores_loss.dot(&params.u.t()));
    let layer_grads = encoder_backward(params, &cache, d_h_top);

    let grads = ModelParams {
        layers: layer_grads,
        u: d_u,
        v: d_v.mapv(|v| -v),
    };
    Ok((-loglik_total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_states: 3,
            time_shift: 2,
            hop: 1,
            feat_dim: 4,
            hidden_dim: 5,
            num_layers: 1,
            cell: CellType::Elman,
            variant,
            tap_layer: None,
        }
    }

    fn random_frames(t_len: usize, d: usize, rng: &mut Rng) -> FrameMatrix {
        FrameMatrix::new(Array2::from_shape_fn((t_len, d), |_| {
            rng.standard_normal() as f32
        }))
    }

    #[test]
    fn encode_zero_weights_constant() {
        let cfg = small_cfg(Variant::NeuralHmm);
        let mut params = param_init(&cfg, &mut Rng::new(1)).unwrap();
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = 0.0;
            }
        }
        let mut rng = Rng::new(2);
        let frames = random_frames(6, 4, &mut rng);
        let h = encode(&params, &frames).unwrap();
        assert!(h.h.iter().all(|v| *v == 0.0)); // tanh(0) everywhere
    }

    #[test]
    fn encode_hand_computed_elman() {
        let wx = array![[0.5, -0.3], [0.2, 0.1]];
        let wh = array![[0.1, 0.0], [-0.2, 0.3]];
        let b = array![0.05, -0.1];
        let params = ModelParams {
            layers: vec![LayerParams::Elman {
                wx: wx.clone(),
                wh: wh.clone(),
                b: b.clone(),
            }],
            u: Array2::zeros((2, 2)),
            v: Array2::zeros((2, 2)),
        };
        let x = array![[1.0f32, 2.0], [-1.0, 0.5]];
        let frames = FrameMatrix::new(x);
        let h = encode(&params, &frames).unwrap();
        let h1 = [
            (0.5 * 1.0 - 0.3 * 2.0 + 0.05f64).tanh(),
            (0.2 * 1.0 + 0.1 * 2.0 - 0.1f64).tanh(),
        ];
        let h2 = [
            (0.5 * -1.0 - 0.3 * 0.5 + 0.1 * h1[0] + 0.0 * h1[1] + 0.05f64).tanh(),
            (0.2 * -1.0 + 0.1 * 0.5 - 0.2 * h1[0] + 0.3 * h1[1] - 0.1f64).tanh(),
        ];
        for j in 0..2 {
            assert!((h.h[(0, j)] - h1[j]).abs() < 1e-15);
            assert!((h.h[(1, j)] - h2[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_is_causal() {
        for cell in [CellType::Elman, CellType::Lstm] {
            let cfg = ModelConfig {
                cell,
                num_layers: 2,
                ..small_cfg(Variant::NeuralHmm)
            };
            let params = param_init(&cfg, &mut Rng::new(3)).unwrap();
            let mut rng = Rng::new(4);
            let frames = random_frames(8, 4, &mut rng);
            let h0 = encode(&params, &frames).unwrap();
            let mut bumped = frames.clone();
            bumped.frames[(5, 1)] += 10.0;
            let h1 = encode(&params, &bumped).unwrap();
            for t in 0..5 {
                for j in 0..cfg.hidden_dim {
                    assert_eq!(h0.h[(t, j)], h1.h[(t, j)], "t={t} leaked future");
                }
            }
            assert!((0..cfg.hidden_dim).any(|j| h0.h[(5, j)] != h1.h[(5, j)]));
        }
    }

    #[test]
    fn state_scores_use_shifted_hidden() {
        // k=1, one-hot hidden rows and identity-like U copy row t-1.
        let h = HiddenStates {
            h: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
        };
        let u = Array2::eye(2);
        let s = state_scores(&h, &u, 1).unwrap();
        assert_eq!(s.nrows(), 2);
        assert_eq!(s.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(s.row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn state_scores_zero_u() {
        let h = HiddenStates {
            h: Array2::from_elem((4, 3), 0.7),
        };
        let s = state_scores(&h, &Array2::zeros((3, 2)), 2).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn state_scores_short_sequence() {
        let h = HiddenStates {
            h: Array2::zeros((3, 2)),
        };
        let err = state_scores(&h, &Array2::zeros((2, 2)), 3).unwrap_err();
        assert!(err.to_string().contains("shorter than time shift"));
    }

    #[test]
    fn emission_zero_distance() {
        let v = array![[1.0, 0.0], [2.0, 0.0]];
        let e = emission_logprob(&[1.0, 2.0], &v).unwrap();
        assert!((e[0] - -(2.0 / 2.0) * std::f64::consts::TAU.ln()).abs() < 1e-15);
    }

    #[test]
    fn emission_unit_distance_1d() {
        let v = array![[1.0]];
        let e = emission_logprob(&[0.0], &v).unwrap();
        let expect = -0.5 * std::f64::consts::TAU.ln() - 0.5;
        assert!((e[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn emission_matches_direct_evaluation() {
        let mut rng = Rng::new(5);
        let v = Array2::from_shape_fn((3, 4), |_| rng.standard_normal());
        let x: Vec<f64> = rng.standard_normal_vec(3);
        let e = emission_logprob(&x, &v).unwrap();
        for j in 0..4 {
            let sq: f64 = (0..3).map(|d| (x[d] - v[(d, j)]).powi(2)).sum();
            let direct = (1.0 / (std::f64::consts::TAU).powf(1.5) * (-0.5 * sq).exp()).ln();
            assert!((e[j] - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_times_single_hop() {
        // T=10, k=5, H=1: one chain over the last five frames.
        let chains = chain_node_times(10, 5, 1);
        assert_eq!(chains.len(), 1);
        assert_eq!(chains[0].node_times, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn chain_times_hop_seven_partition() {
        // T=30, k=5, H=7 (0-based times).
        let chains = chain_node_times(30, 5, 7);
        assert_eq!(chains[0].node_times, vec![5, 12, 19, 26]);
        assert_eq!(chains[1].node_times, vec![6, 13, 20, 27]);
        let mut all: Vec<usize> = chains
            .iter()
            .flat_map(|c| c.node_times.iter().cloned())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (5..30).collect::<Vec<_>>());
    }

    #[test]
    fn single_chain_matches_brute_force_joint() {
        let cfg = ModelConfig {
            n_states: 2,
            time_shift: 1,
            hop: 1,
            feat_dim: 2,
            hidden_dim: 3,
            ..small_cfg(Variant::NeuralHmm)
        };
        let params = param_init(&cfg, &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(7);
        let frames = random_frames(5, 2, &mut rng);
        let lattices = build_chain_lattices(&params, &frames, &cfg).unwrap();
        assert_eq!(lattices.len(), 1);
        let (_, l) = &lattices[0];
        let (_, ll) = forward(l).unwrap();
        let bf = crate::lattice::brute_force_loglik(l).unwrap();
        assert!((ll - bf).abs() < 1e-9);
    }

    #[test]
    fn loss_sums_over_chains() {
        let cfg = ModelConfig {
            hop: 3,
            ..small_cfg(Variant::NeuralHmm)
        };
        let params = param_init(&cfg, &mut Rng::new(8)).unwrap();
        let mut rng = Rng::new(9);
        let frames = random_frames(14, 4, &mut rng);
        let loss = total_loss(&params, &frames, &cfg).unwrap();
        let mut sum = 0.0;
        for (_, l) in build_chain_lattices(&params, &frames, &cfg).unwrap() {
            sum -= forward(&l).unwrap().1;
        }
        assert!((loss - sum).abs() < 1e-10);
    }

    #[test]
    fn single_state_loss_is_emission_sum() {
        let cfg = ModelConfig {
            n_states: 1,
            ..small_cfg(Variant::NeuralHmm)
        };
        let params = param_init(&cfg, &mut Rng::new(10)).unwrap();
        let mut rng = Rng::new(11);
        let frames = random_frames(7, 4, &mut rng);
        let loss = total_loss(&params, &frames, &cfg).unwrap();
        let x = frames.to_f64();
        let mut direct = 0.0;
        for t in cfg.time_shift..7 {
            direct -= emission_logprob(x.row(t).as_slice().unwrap(), &params.v).unwrap()[0];
        }
        assert!((loss - direct).abs() < 1e-10);
    }

    #[test]
    fn vq_apc_matches_mixture_oracle() {
        let cfg = small_cfg(Variant::VqApc);
        let params = param_init(&cfg, &mut Rng::new(12)).unwrap();
        let mut rng = Rng::new(13);
        let frames = random_frames(6, 4, &mut rng);
        let loss = total_loss(&params, &frames, &cfg).unwrap();

        let x = frames.to_f64();
        let h = encode(&params, &frames).unwrap();
        let s = state_scores(&h, &params.u, cfg.time_shift).unwrap();
        let mut direct = 0.0;
        for t in cfg.time_shift..6 {
            let probs = softmax(s.row(t - cfg.time_shift).as_slice().unwrap());
            let emit = emission_logprob(x.row(t).as_slice().unwrap(), &params.v).unwrap();
            let mix: f64 = probs
                .iter()
                .zip(emit.iter())
                .map(|(p, e)| p * e.exp())
                .sum();
            direct -= mix.ln();
        }
        assert!((loss - direct).abs() < 1e-9);
    }

    #[test]
    fn broadcast_transitions_reduce_to_vq_posteriors() {
        for hop in [1usize, 3] {
            let cfg = ModelConfig {
                hop,
                ..small_cfg(Variant::NeuralHmm)
            };
            let params = param_init(&cfg, &mut Rng::new(14)).unwrap();
            let mut rng = Rng::new(15);
            let frames = random_frames(12, 4, &mut rng);
            let vq_cfg = ModelConfig {
                variant: Variant::VqApc,
                ..cfg.clone()
            };
            let vq = vq_frame_posteriors(&params, &frames, &vq_cfg).unwrap();
            let lattices =
                build_chain_lattices_with(&params, &frames, &cfg, TransitionForm::Broadcast)
                    .unwrap();
            for (ci, l) in lattices {
                let post = posteriors(&l).unwrap();
                for (node, &t) in ci.node_times.iter().enumerate() {
                    for j in 0..cfg.n_states {
                        let diff =
                            (post.gamma[(node, j)] - vq[(t - cfg.time_shift, j)]).abs();
                        assert!(diff < 1e-9, "hop {hop} t {t} j {j}: {diff}");
                    }
                }
            }
        }
    }

    fn finite_difference_check(cfg: &ModelConfig, seed: u64, t_len: usize, tol: f64) {
        let mut params = param_init(cfg, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed + 1);
        let frames = random_frames(t_len, cfg.feat_dim, &mut rng);
        let (_, grads) = total_loss_grad(&params, &frames, cfg).unwrap();
        let flat_grads: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().cloned())
            .collect();
        let eps = 1e-5;
        let mut idx = 0;
        let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let len = params
                .tensors()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .len();
            for i in 0..len {
                let bump = |params: &mut ModelParams, delta: f64| {
                    for (n, t) in params.tensors_mut() {
                        if n == name {
                            t[i] += delta;
                        }
                    }
                };
                bump(&mut params, eps);
                let up = total_loss(&params, &frames, cfg).unwrap();
                bump(&mut params, -2.0 * eps);
                let down = total_loss(&params, &frames, cfg).unwrap();
                bump(&mut params, eps);
                let fd = (up - down) / (2.0 * eps);
                let analytic = flat_grads[idx];
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                // central differences bottom out near 1e-10 absolute, so
                // tiny gradients get an absolute escape hatch
                assert!(
                    (analytic - fd).abs() < 1e-8 || ((analytic - fd) / denom).abs() < tol,
                    "{name}[{i}]: analytic {analytic} vs fd {fd}"
                );
                idx += 1;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_elman() {
        for variant in [Variant::NeuralHmm, Variant::VqApc] {
            let cfg = ModelConfig {
                n_states: 3,
                time_shift: 2,
                hop: 2,
                feat_dim: 3,
                hidden_dim: 4,
                num_layers: 1,
                cell: CellType::Elman,
                variant,
                tap_layer: None,
            };
            finite_difference_check(&cfg, 20, 10, 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences_lstm_two_layers() {
        let cfg = ModelConfig {
            n_states: 3,
            time_shift: 2,
            hop: 1,
            feat_dim: 3,
            hidden_dim: 3,
            num_layers: 2,
            cell: CellType::Lstm,
            variant: Variant::NeuralHmm,
            tap_layer: None,
        };
        finite_difference_check(&cfg, 22, 8, 1e-4);
    }

    #[test]
    fn single_state_u_gradient_is_zero() {
        let cfg = ModelConfig {
            n_states: 1,
            ..small_cfg(Variant::NeuralHmm)
        };
        let params = param_init(&cfg, &mut Rng::new(30)).unwrap();
        let mut rng = Rng::new(31);
        let frames = random_frames(8, 4, &mut rng);
        let (_, grads) = total_loss_grad(&params, &frames, &cfg).unwrap();
        assert!(grads.u.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn variants_have_equal_param_counts() {
        for (layers, cell) in [(1, CellType::Elman), (2, CellType::Lstm)] {
            let base = ModelConfig {
                num_layers: layers,
                cell,
                ..small_cfg(Variant::NeuralHmm)
            };
            let a = param_init(&base, &mut Rng::new(1)).unwrap();
            let vq = ModelConfig {
                variant: Variant::VqApc,
                ..base
            };
            let b = param_init(&vq, &mut Rng::new(1)).unwrap();
            assert_eq!(a.param_count(), b.param_count());
        }
    }

    #[test]
    fn param_init_respects_fan_in_bound() {
        let cfg = small_cfg(Variant::NeuralHmm);
        let params = param_init(&cfg, &mut Rng::new(40)).unwrap();
        match &params.layers[0] {
            LayerParams::Elman { wx, wh, b } => {
                let bx = 1.0 / (cfg.feat_dim as f64).sqrt();
                let bh = 1.0 / (cfg.hidden_dim as f64).sqrt();
                assert!(wx.iter().all(|v| v.abs() <= bx));
                assert!(wh.iter().all(|v| v.abs() <= bh));
                assert!(b.iter().all(|v| *v == 0.0));
            }
            _ => unreachable!(),
        }
        assert!(param_init(&cfg, &mut Rng::new(40)).unwrap() == params);
        assert!(param_init(&cfg, &mut Rng::new(41)).unwrap() != params);
    }

    #[test]
    fn too_short_sequence_is_error() {
        let cfg = ModelConfig {
            hop: 4,
            ..small_cfg(Variant::NeuralHmm)
        };
        let params = param_init(&cfg, &mut Rng::new(50)).unwrap();
        let mut rng = Rng::new(51);
        let frames = random_frames(6, 4, &mut rng); // T = k + H = 6
        let err = total_loss(&params, &frames, &cfg).unwrap_err();
        assert!(err.to_string().contains("too short"));
    }
}
