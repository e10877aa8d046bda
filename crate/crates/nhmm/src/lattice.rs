//! Exact log-space inference over one linear chain.
//!
//! A chain of M nodes over N states is described by normalized log
//! potentials: a prior over the first node, per-edge transition matrices
//! and per-node emission scores. Everything here stays in log space; the
//! gradient of the log-likelihood with respect to a log potential is the
//! posterior probability that the potential participates in the latent
//! path, which is what makes end-to-end training cheap.
//!
//! Brute-force enumeration oracles live here too so that the dynamic
//! programs can be checked against an independent route.

use ndarray::{Array1, Array2, Array3};

use crate::numerics::{log_sum_exp_view, Rng};
use crate::{Error, Result};

/// Normalized log potentials for one chain of `M` nodes over `N` states.
///
/// - `prior`: N, log p(first state)
/// - `trans`: (M-1, N, N), `trans[(m, i, j)]` = log p(state j at node m+1 | state i at node m)
/// - `emit`: (M, N), log density of the observation at node m under state j.
///   Emission entries are unconstrained finite values; Gaussian densities
///   may exceed 1.
#[derive(Debug, Clone)]
pub struct LatticePotentials {
    pub prior: Array1<f64>,
    pub trans: Array3<f64>,
    pub emit: Array2<f64>,
}

/// Validation tolerance for normalization of prior and transition rows.
const NORM_TOL: f64 = 1e-6;

impl LatticePotentials {
    pub fn new(prior: Array1<f64>, trans: Array3<f64>, emit: Array2<f64>) -> Result<Self> {
        let l = LatticePotentials { prior, trans, emit };
        l.validate()?;
        Ok(l)
    }

    pub fn num_nodes(&self) -> usize {
        self.emit.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.emit.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_nodes();
        let n = self.num_states();
        if m < 1 || n < 1 {
            return Err(Error::validation("lattice needs M >= 1 and N >= 1"));
        }
        if self.prior.len() != n {
            return Err(Error::validation(format!(
                "prior length {} != N {}",
                self.prior.len(),
                n
            )));
        }
        if self.trans.dim() != (m - 1, n, n) {
            return Err(Error::validation(format!(
                "transition shape {:?} != ({}, {}, {})",
                self.trans.dim(),
                m - 1,
                n,
                n
            )));
        }
        if self.emit.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::validation("emission entries must be finite or -inf"));
        }
        let p = log_sum_exp_view(self.prior.view())?;
        if p.abs() > NORM_TOL {
            return Err(Error::validation(format!(
                "prior not normalized: log mass {p:.3e}"
            )));
        }
        for em in 0..m.saturating_sub(1) {
            for i in 0..n {
                let row = self.trans.index_axis(ndarray::Axis(0), em);
                let s = log_sum_exp_view(row.index_axis(ndarray::Axis(0), i))?;
                if s.abs() > NORM_TOL {
                    return Err(Error::validation(format!(
                        "transition row ({em}, {i}) not normalized: log mass {s:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-node and per-edge posterior marginals of a chain.
#[derive(Debug, Clone)]
pub struct PosteriorSet {
    /// (M, N): gamma[(m, j)] = p(state j at node m | all observations).
    pub gamma: Array2<f64>,
    /// (M-1, N, N): xi[(m, i, j)] = p(states (i, j) at nodes (m, m+1) | all observations).
    pub xi: Array3<f64>,
    pub loglik: f64,
}

/// A single latent path with its log joint score.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub states: Vec<usize>,
    pub score: f64,
}

/// Forward pass: alpha matrix and the log-likelihood, O(MN^2).
pub fn forward(l: &LatticePotentials) -> Result<(Array2<f64>, f64)> {
    l.validate()?;
    let m = l.num_nodes();
    let n = l.num_states();
    let mut alpha = Array2::zeros((m, n));
    for j in 0..n {
        alpha[(0, j)] = l.prior[j] + l.emit[(0, j)];
    }
    let mut scratch = vec![0.0; n];
    for t in 1..m {
        for j in 0..n {
            for i in 0..n {
                scratch[i] = alpha[(t - 1, i)] + l.trans[(t - 1, i, j)];
            }
            let lse = log_sum_exp_slice(&scratch);
            alpha[(t, j)] = lse + l.emit[(t, j)];
        }
    }
    let loglik = log_sum_exp_view(alpha.row(m - 1))?;
    Ok((alpha, loglik))
}

/// Backward pass: beta matrix with beta[M-1] = 0.
pub fn backward(l: &LatticePotentials) -> Result<Array2<f64>> {
    l.validate()?;
    let m = l.num_nodes();
    let n = l.num_states();
    let mut beta = Array2::zeros((m, n));
    let mut scratch = vec![0.0; n];
    for t in (0..m - 1).rev() {
        for i in 0..n {
            for j in 0..n {
                scratch[j] = l.trans[(t, i, j)] + l.emit[(t + 1, j)] + beta[(t + 1, j)];
            }
            beta[(t, i)] = log_sum_exp_slice(&scratch);
        }
    }
    Ok(beta)
}

/// Unary and pairwise posterior marginals plus the log-likelihood.
pub fn posteriors(l: &LatticePotentials) -> Result<PosteriorSet> {
    let (alpha, loglik) = forward(l)?;
    let beta = backward(l)?;
    let m = l.num_nodes();
    let n = l.num_states();
    let mut gamma = Array2::zeros((m, n));
    for t in 0..m {
        for j in 0..n {
            gamma[(t, j)] = (alpha[(t, j)] + beta[(t, j)] - loglik).exp();
        }
    }
    let mut xi = Array3::zeros((m.saturating_sub(1), n, n));
    for t in 0..m.saturating_sub(1) {
        for i in 0..n {
            for j in 0..n {
                xi[(t, i, j)] = (alpha[(t, i)]
                    + l.trans[(t, i, j)]
                    + l.emit[(t + 1, j)]
                    + beta[(t + 1, j)]
                    - loglik)
                    .exp();
            }
        }
    }
    Ok(PosteriorSet { gamma, xi, loglik })
}

/// Gradient of the log-likelihood with respect to every log potential.
///
/// Each potential's gradient is the posterior probability that it lies on
/// the latent path: prior -> gamma at the first node, transitions -> xi,
/// emissions -> gamma.
pub fn loglik_grad_potentials(
    l: &LatticePotentials,
) -> Result<(Array1<f64>, Array3<f64>, Array2<f64>)> {
    let post = posteriors(l)?;
    let d_prior = post.gamma.row(0).to_owned();
    Ok((d_prior, post.xi, post.gamma))
}

/// Max-probability path. Ties break toward the smallest state index.
pub fn viterbi(l: &LatticePotentials) -> Result<StatePath> {
    l.validate()?;
    let m = l.num_nodes();
    let n = l.num_states();
    let mut score = Array2::zeros((m, n));
    let mut back = Array2::<usize>::zeros((m, n));
    for j in 0..n {
        score[(0, j)] = l.prior[j] + l.emit[(0, j)];
    }
    for t in 1..m {
        for j in 0..n {
            let mut best_i = 0;
            let mut best = score[(t - 1, 0)] + l.trans[(t - 1, 0, j)];
            for i in 1..n {
                let cand = score[(t - 1, i)] + l.trans[(t - 1, i, j)];
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            score[(t, j)] = best + l.emit[(t, j)];
            back[(t, j)] = best_i;
        }
    }
    let mut last = 0;
    let mut best = score[(m - 1, 0)];
    for j in 1..n {
        if score[(m - 1, j)] > best {
            best = score[(m - 1, j)];
            last = j;
        }
    }
    let mut states = vec![0; m];
    states[m - 1] = last;
    for t in (1..m).rev() {
        states[t - 1] = back[(t, states[t])];
    }
    Ok(StatePath {
        states,
        score: best,
    })
}

/// Log joint score of a given path, accumulated in the same order as the
/// dynamic programs so the result is bit-identical to their scores.
pub fn path_score(l: &LatticePotentials, states: &[usize]) -> f64 {
    let mut s = l.prior[states[0]] + l.emit[(0, states[0])];
    for t in 1..states.len() {
        s = s + l.trans[(t - 1, states[t - 1], states[t])];
        s = s + l.emit[(t, states[t])];
    }
    s
}

/// Ancestor-sample a path from prior and transitions, ignoring emissions.
/// The returned score still includes the emission potentials of the
/// sampled path, matching the `StatePath` contract.
pub fn sample_path(l: &LatticePotentials, rng: &mut Rng) -> Result<StatePath> {
    l.validate()?;
    let m = l.num_nodes();
    let prior_probs: Vec<f64> = l.prior.iter().map(|v| v.exp()).collect();
    let mut states = Vec::with_capacity(m);
    states.push(rng.sample_categorical(&prior_probs));
    for t in 1..m {
        let row: Vec<f64> = l
            .trans
            .index_axis(ndarray::Axis(0), t - 1)
            .row(states[t - 1])
            .iter()
            .map(|v| v.exp())
            .collect();
        states.push(rng.sample_categorical(&row));
    }
    let score = path_score(l, &states);
    Ok(StatePath { states, score })
}

/// Exhaustive enumeration of all N^M paths; test oracle for `forward`.
pub fn brute_force_loglik(l: &LatticePotentials) -> Result<f64> {
    let scores = enumerate_path_scores(l)?;
    crate::numerics::log_sum_exp(&scores)
}

/// Exhaustive argmax over all N^M paths; test oracle for `viterbi`.
/// Enumeration is lexicographic with a strict improvement rule, so ties
/// resolve to the lexicographically smallest path.
pub fn brute_force_best_path(l: &LatticePotentials) -> Result<StatePath> {
    l.validate()?;
    let m = l.num_nodes();
    let n = l.num_states();
    check_enumerable(m, n)?;
    let mut best: Option<StatePath> = None;
    let mut states = vec![0usize; m];
    loop {
        let score = path_score(l, &states);
        match &best {
            Some(b) if score <= b.score => {}
            _ => {
                best = Some(StatePath {
                    states: states.clone(),
                    score,
                })
            }
        }
        if !advance(&mut states, n) {
            break;
        }
    }
    Ok(best.unwrap())
}

fn enumerate_path_scores(l: &LatticePotentials) -> Result<Vec<f64>> {
    l.validate()?;
    let m = l.num_nodes();
    let n = l.num_states();
    check_enumerable(m, n)?;
    let total = (n as u64).pow(m as u32) as usize;
    let mut scores = Vec::with_capacity(total);
    let mut states = vec![0usize; m];
    loop {
        scores.push(path_score(l, &states));
        if !advance(&mut states, n) {
            break;
        }
    }
    Ok(scores)
}

fn check_enumerable(m: usize, n: usize) -> Result<()> {
    let paths = (n as f64).powi(m as i32);
    if paths > 1e6 {
        return Err(Error::validation(format!(
            "instance too large to enumerate: {n}^{m} paths"
        )));
    }
    Ok(())
}

/// Odometer increment over state assignments; false when wrapped.
fn advance(states: &mut [usize], n: usize) -> bool {
    for s in states.iter_mut().rev() {
        *s += 1;
        if *s < n {
            return true;
        }
        *s = 0;
    }
    false
}

#[inline]
fn log_sum_exp_slice(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Random normalized lattice for tests and self-checks.
pub fn random_lattice(m: usize, n: usize, rng: &mut Rng) -> LatticePotentials {
    let prior_scores = rng.standard_normal_vec(n);
    let prior = Array1::from_vec(crate::numerics::log_softmax(&prior_scores));
    let mut trans = Array3::zeros((m.saturating_sub(1), n, n));
    for t in 0..m.saturating_sub(1) {
        for i in 0..n {
            let row = crate::numerics::log_softmax(&rng.standard_normal_vec(n));
            for j in 0..n {
                trans[(t, i, j)] = row[j];
            }
        }
    }
    let mut emit = Array2::zeros((m, n));
    for t in 0..m {
        for j in 0..n {
            emit[(t, j)] = rng.standard_normal() * 2.0;
        }
    }
    LatticePotentials { prior, trans, emit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_sum_exp;
    use ndarray::array;

    fn single_state_lattice(m: usize) -> LatticePotentials {
        let mut emit = Array2::zeros((m, 1));
        for t in 0..m {
            emit[(t, 0)] = -(t as f64) - 0.5;
        }
        LatticePotentials {
            prior: array![0.0],
            trans: Array3::zeros((m - 1, 1, 1)),
            emit,
        }
    }

    #[test]
    fn forward_single_node() {
        let l = LatticePotentials {
            prior: Array1::from_vec(crate::numerics::log_softmax(&[0.3, -0.4, 1.1])),
            trans: Array3::zeros((0, 3, 3)),
            emit: array![[-1.0, 0.5, 2.0]],
        };
        let (_, ll) = forward(&l).unwrap();
        let direct: Vec<f64> = (0..3).map(|j| l.prior[j] + l.emit[(0, j)]).collect();
        assert!((ll - log_sum_exp(&direct).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn forward_single_state() {
        let l = single_state_lattice(5);
        let (_, ll) = forward(&l).unwrap();
        let expect: f64 = (0..5).map(|t| l.emit[(t, 0)]).sum::<f64>() + l.prior[0];
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_brute_force() {
        let mut rng = Rng::new(11);
        let l = random_lattice(4, 3, &mut rng);
        let (_, ll) = forward(&l).unwrap();
        assert!((ll - brute_force_loglik(&l).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn backward_single_node_is_zero() {
        let l = LatticePotentials {
            prior: array![0.0],
            trans: Array3::zeros((0, 1, 1)),
            emit: array![[-2.0]],
        };
        let beta = backward(&l).unwrap();
        assert_eq!(beta[(0, 0)], 0.0);
    }

    #[test]
    fn backward_single_state_suffix_sums() {
        let l = single_state_lattice(4);
        let beta = backward(&l).unwrap();
        for t in 0..4 {
            let expect: f64 = (t + 1..4).map(|u| l.emit[(u, 0)]).sum();
            assert!((beta[(t, 0)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_beta_consistency() {
        let mut rng = Rng::new(3);
        let l = random_lattice(6, 4, &mut rng);
        let (alpha, ll) = forward(&l).unwrap();
        let beta = backward(&l).unwrap();
        for t in 0..6 {
            let v: Vec<f64> = (0..4).map(|j| alpha[(t, j)] + beta[(t, j)]).collect();
            assert!((log_sum_exp(&v).unwrap() - ll).abs() < 1e-9);
        }
    }

    #[test]
    fn posteriors_single_state_all_ones() {
        let l = single_state_lattice(3);
        let p = posteriors(&l).unwrap();
        assert!(p.gamma.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(p.xi.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn posteriors_match_enumeration_2x2() {
        // Hand lattice: M=2, N=2, enumerate the 4 paths directly.
        let prior = Array1::from_vec(crate::numerics::log_softmax(&[0.2, -0.7]));
        let mut trans = Array3::zeros((1, 2, 2));
        for i in 0..2 {
            let row = crate::numerics::log_softmax(&[0.5 * i as f64, -0.3]);
            trans[(1 - 1, i, 0)] = row[0];
            trans[(0, i, 1)] = row[1];
        }
        let emit = array![[-0.5, 0.8], [1.2, -0.1]];
        let l = LatticePotentials { prior, trans, emit };
        let p = posteriors(&l).unwrap();

        let mut joint = [[0.0f64; 2]; 2];
        let mut z = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let w = (l.prior[a] + l.emit[(0, a)] + l.trans[(0, a, b)] + l.emit[(1, b)]).exp();
                joint[a][b] = w;
                z += w;
            }
        }
        for a in 0..2 {
            let g0 = (joint[a][0] + joint[a][1]) / z;
            let g1 = (joint[0][a] + joint[1][a]) / z;
            assert!((p.gamma[(0, a)] - g0).abs() < 1e-12);
            assert!((p.gamma[(1, a)] - g1).abs() < 1e-12);
            for b in 0..2 {
                assert!((p.xi[(0, a, b)] - joint[a][b] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posteriors_near_delta_lattice() {
        // Potentials concentrating all mass on one path: gamma one-hot.
        let big = 40.0;
        let prior = Array1::from_vec(crate::numerics::log_softmax(&[big, 0.0, 0.0]));
        let mut trans = Array3::zeros((2, 3, 3));
        let path = [0usize, 2, 1];
        for t in 0..2 {
            for i in 0..3 {
                let mut scores = [0.0; 3];
                scores[path[t + 1]] = big;
                let row = crate::numerics::log_softmax(&scores);
                for j in 0..3 {
                    trans[(t, i, j)] = row[j];
                }
            }
        }
        let emit = Array2::zeros((3, 3));
        let l = LatticePotentials { prior, trans, emit };
        let p = posteriors(&l).unwrap();
        for (t, &s) in path.iter().enumerate() {
            assert!((p.gamma[(t, s)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_is_posterior_and_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let l = random_lattice(5, 3, &mut rng);
        let (d_prior, d_trans, d_emit) = loglik_grad_potentials(&l).unwrap();

        // gamma rows sum to 1, so emission gradient rows do too.
        for row in d_emit.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }

        // Finite differences on the raw potentials (bypassing validation,
        // since a perturbed potential is no longer normalized).
        let eps = 1e-6;
        let raw_ll = |l: &LatticePotentials| {
            let scores = {
                let m = l.num_nodes();
                let n = l.num_states();
                let mut states = vec![0usize; m];
                let mut out = Vec::new();
                loop {
                    out.push(path_score(l, &states));
                    if !super::advance(&mut states, n) {
                        break;
                    }
                }
                out
            };
            log_sum_exp(&scores).unwrap()
        };
        let check = |analytic: f64, bump: &mut dyn FnMut(&mut LatticePotentials, f64)| {
            let mut lp = l.clone();
            bump(&mut lp, eps);
            let up = raw_ll(&lp);
            let mut lm = l.clone();
            bump(&mut lm, -eps);
            let down = raw_ll(&lm);
            let fd = (up - down) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-5,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for j in 0..3 {
            check(d_prior[j], &mut |lp, e| lp.prior[j] += e);
        }
        for t in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    check(d_trans[(t, i, j)], &mut |lp, e| lp.trans[(t, i, j)] += e);
                }
            }
        }
        for t in 0..5 {
            for j in 0..3 {
                check(d_emit[(t, j)], &mut |lp, e| lp.emit[(t, j)] += e);
            }
        }
    }

    #[test]
    fn grad_single_state_all_ones() {
        let l = single_state_lattice(4);
        let (d_prior, d_trans, d_emit) = loglik_grad_potentials(&l).unwrap();
        assert!(d_prior.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(d_trans.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(d_emit.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn viterbi_matches_brute_force() {
        let mut rng = Rng::new(5);
        let l = random_lattice(5, 3, &mut rng);
        let vp = viterbi(&l).unwrap();
        let bp = brute_force_best_path(&l).unwrap();
        assert_eq!(vp.states, bp.states);
        assert_eq!(vp.score, bp.score);
        assert_eq!(vp.score, path_score(&l, &vp.states));
        let (_, ll) = forward(&l).unwrap();
        assert!(vp.score <= ll + 1e-12);
    }

    #[test]
    fn viterbi_tie_break_smallest_index() {
        let n = 3;
        let m = 4;
        let prior = Array1::from_vec(crate::numerics::log_softmax(&vec![0.0; n]));
        let mut trans = Array3::zeros((m - 1, n, n));
        let row = crate::numerics::log_softmax(&vec![0.0; n]);
        for t in 0..m - 1 {
            for i in 0..n {
                for j in 0..n {
                    trans[(t, i, j)] = row[j];
                }
            }
        }
        let emit = Array2::zeros((m, n));
        let l = LatticePotentials { prior, trans, emit };
        let vp = viterbi(&l).unwrap();
        assert_eq!(vp.states, vec![0; m]);
    }

    #[test]
    fn sample_path_deterministic_transitions() {
        let big = 60.0;
        let prior = Array1::from_vec(crate::numerics::log_softmax(&[big, 0.0]));
        let mut trans = Array3::zeros((3, 2, 2));
        for t in 0..3 {
            for i in 0..2 {
                // always jump to the other state
                let mut scores = [0.0; 2];
                scores[1 - i] = big;
                let row = crate::numerics::log_softmax(&scores);
                trans[(t, i, 0)] = row[0];
                trans[(t, i, 1)] = row[1];
            }
        }
        let emit = Array2::zeros((4, 2));
        let l = LatticePotentials { prior, trans, emit };
        let mut rng = Rng::new(1);
        let p = sample_path(&l, &mut rng).unwrap();
        assert_eq!(p.states, vec![0, 1, 0, 1]);
    }

    #[test]
    fn sample_path_prior_frequencies() {
        let prior = array![0.3f64.ln(), 0.7f64.ln()];
        let l = LatticePotentials {
            prior,
            trans: Array3::zeros((0, 2, 2)),
            emit: Array2::zeros((1, 2)),
        };
        let mut rng = Rng::new(123);
        let n = 100_000;
        let mut count0 = 0usize;
        for _ in 0..n {
            if sample_path(&l, &mut rng).unwrap().states[0] == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let mut rng = Rng::new(2);
        let l = random_lattice(30, 4, &mut rng);
        assert!(brute_force_loglik(&l).is_err());
    }

    #[test]
    fn validation_rejects_unnormalized_rows() {
        let l = LatticePotentials {
            prior: array![0.0, 0.0],
            trans: Array3::zeros((0, 2, 2)),
            emit: Array2::zeros((1, 2)),
        };
        assert!(forward(&l).is_err());
    }

    #[test]
    fn posterior_marginalization_identities() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let m = 2 + rng.below(5);
            let n = 1 + rng.below(4);
            let l = random_lattice(m, n, &mut rng);
            let p = posteriors(&l).unwrap();
            for t in 0..m {
                assert!((p.gamma.row(t).sum() - 1.0).abs() < 1e-10);
            }
            for t in 0..m - 1 {
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| p.xi[(t, i, j)]).sum();
                    assert!((s - p.gamma[(t, i)]).abs() < 1e-9);
                }
                for j in 0..n {
                    let s: f64 = (0..n).map(|i| p.xi[(t, i, j)]).sum();
                    assert!((s - p.gamma[(t + 1, j)]).abs() < 1e-9);
                }
            }
        }
    }
}
