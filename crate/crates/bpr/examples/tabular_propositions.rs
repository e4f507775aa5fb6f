//! Machine-check the tabular analysis on random MDPs: the exact
//! performance-difference identity, occupancy mass and bounds, the
//! implicit preference value Q̃ = Q + (1/λ)·log π_β, and the perfect- and
//! noisy-preference statements.
//!
//! ```bash
//! cargo run --release --example tabular_propositions
//! ```

use bpr::envs::TabularMdp;
use bpr::oracle;
use bpr::trainer::derive_rng;
use rand::Rng;

fn main() {
    // the packaged suite
    for report in oracle::run_suite(100, 7) {
        println!(
            "{} {$check}: {instances} instances, {violations} violations, worst slack {slack:.3e}",
            if report.passed() { "PASS" } else { "FAIL" },
            check = report.check,
            instances = report.instances,
            violations = report.violations,
            slack = report.worst_slack,
        );
    }

    // one instance in detail
    let mut rng = derive_rng(11, "example-oracle");
    let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
    let q_star = oracle::value_iteration(&mdp);
    println!("\na 5-state example:");
    println!("  Bellman residual of Q*: {:.2e}", oracle::bellman_residual(&mdp, &q_star));

    let behavior = oracle::softmax_policy(&q_star, 3.0);
    let q_tilde = oracle::implicit_q(&q_star, &behavior, 1.0);
    let violations = oracle::assumption1_check(&q_tilde, &behavior);
    println!("  likelihood-vs-preference violations at λ = 1: {}", violations.len());

    let p1 = oracle::prop1_check(&mdp, &behavior, 1.0).expect("valid instance");
    println!(
        "  perfect preference: surrogate {:+.4} (≥ 0: {}), exact return gap {:+.4}",
        p1.surrogate, p1.surrogate_nonneg, p1.eta_gap
    );

    let noise = oracle::NoiseSpec { eps_behavior: 0.1, eps_learned: 0.1, seed: rng.random() };
    let p2 = oracle::prop2_check(&mdp, &behavior, 1.0, &noise).expect("valid instance");
    println!(
        "  noisy preference: slack {:+.4} (holds: {}), occupancy mismatch {:.4}, ρ_max {:.3}",
        p2.slack, p2.holds, p2.occupancy_mismatch, p2.rho_max
    );
}
