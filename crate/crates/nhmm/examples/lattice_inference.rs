//! Exact inference on a small chain lattice: forward log-likelihood,
//! posteriors, Viterbi, and a brute-force cross-check.

use nhmm::lattice::{
    brute_force_loglik, forward, posteriors, random_lattice, viterbi,
};
use nhmm::numerics::Rng;

fn main() -> nhmm::Result<()> {
    let mut rng = Rng::new(17);
    let lattice = random_lattice(6, 3, &mut rng);

    let (_, loglik) = forward(&lattice)?;
    let brute = brute_force_loglik(&lattice)?;
    println!("forward  log-likelihood: {loglik:.12}");
    println!("brute    log-likelihood: {brute:.12}");
    println!("difference: {:.3e}", (loglik - brute).abs());

    let post = posteriors(&lattice)?;
    println!("\nstate posteriors (rows sum to 1):");
    for t in 0..post.gamma.nrows() {
        let row: Vec<String> = post
            .gamma
            .row(t)
            .iter()
            .map(|p| format!("{p:.4}"))
            .collect();
        println!("  t={t}: [{}]  sum={:.12}", row.join(", "), post.gamma.row(t).sum());
    }

    let path = viterbi(&lattice)?;
    println!("\nviterbi path: {:?}", path.states);
    println!("viterbi score: {:.12}", path.score);
    Ok(())
}
