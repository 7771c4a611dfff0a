//! The seeded self-check suite behind `pfedac verify`: runs the per-sample
//! identities, bound suites, oracle cross-checks, and round-loop invariants
//! on small fixtures and reports per-family check counts.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::actor::SoftmaxPolicy;
use crate::critic::{project_ball, sample_critic_block, td_feature_decomposition, td_l_error, CriticChain};
use crate::env::{companion_kernel, make_lumpable_federation, make_random_federation, FeatureMap};
use crate::oracle::{
    discounted_visitation, exact_value_and_gradient, stationary_distribution, td_system,
};
use crate::seeding::{stream, StreamKind};
use crate::server::{initial_subspace, run_pfedac, Hyperparams, RunOptions, ServerError};

#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub name: &'static str,
    pub checks: usize,
    pub failures: usize,
    /// Worst observed residual or slack, family-specific.
    pub worst: f64,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub seed: u64,
    pub families: Vec<FamilyResult>,
}

impl VerificationReport {
    pub fn total_checks(&self) -> usize {
        self.families.iter().map(|f| f.checks).sum()
    }

    pub fn total_failures(&self) -> usize {
        self.families.iter().map(|f| f.failures).sum()
    }

    pub fn passed(&self) -> bool {
        self.total_failures() == 0
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verification (seed {}):", self.seed)?;
        for fam in &self.families {
            let status = if fam.failures == 0 { "pass" } else { "FAIL" };
            write!(
                f,
                "  {status} {:<38} checks={:<6} failures={}",
                fam.name, fam.checks, fam.failures
            )?;
            if fam.worst.is_finite() {
                write!(f, " worst={:.3e}", fam.worst)?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "total: {} checks, {} failures",
            self.total_checks(),
            self.total_failures()
        )
    }
}

/// Run every identity and invariant family on seeded fixtures.
pub fn run_verification(seed: u64) -> Result<VerificationReport, ServerError> {
    let mut families = Vec::new();

    families.push(td_identity_and_bounds(seed)?);
    families.push(gradient_fd(seed)?);
    families.push(fixed_point(seed)?);
    families.push(visitation_companion(seed)?);
    families.extend(round_loop_invariants(seed)?);

    Ok(VerificationReport { seed, families })
}

fn td_identity_and_bounds(seed: u64) -> Result<FamilyResult, ServerError> {
    let mut checks = 0;
    let mut failures = 0;
    let mut worst = 0f64;
    let feds = [
        make_random_federation(5, 2, 2, 3, 0.9, 1.0, seed ^ 0xA1)?,
        make_lumpable_federation(2, 2, 2, 2, 0.9, 1.0, seed ^ 0xA2)?,
    ];
    let u_omega = 2.0;
    for (i, fed) in feds.iter().enumerate() {
        let l = 1 + 2 * i;
        let mut rng = stream(seed ^ 0xB0, StreamKind::EnvAgent(i));
        let d = fed.feature_dim();
        let b = initial_subspace(d, 2.min(d), seed ^ 0xB1);
        for (k, mdp) in fed.agents.iter().enumerate() {
            let logits = DMatrix::from_fn(fed.num_states(), fed.num_actions(), |s, a| {
                0.3 * ((s + 2 * a + k) as f64).sin()
            });
            let policy = SoftmaxPolicy::from_logits(logits);
            let sys = td_system(mdp, &policy.table(), &fed.features, l)?;
            let mut chain =
                CriticChain::init(&fed.initial_dist, stream(seed ^ 0xB2, StreamKind::Critic(k)));
            let u_delta = fed.reward_bound() + 2.0 * u_omega;
            let gamma = fed.discount();
            for _ in 0..500 {
                let (omega, _) = project_ball(
                    DVector::from_fn(b.ncols(), |_, _| rng.random_range(-3.0..3.0)),
                    u_omega,
                );
                let traj = sample_critic_block(&mut chain, mdp, &policy, l);
                let sample = td_l_error(&traj, &fed.features, &b, &omega, gamma);
                let dec = td_feature_decomposition(&traj, &fed.features, &b, &omega, &sys, gamma);
                checks += 1;
                let residual = dec.outer_residual.max(dec.noise_residual);
                worst = worst.max(residual);
                let bound_ok = sample.delta.abs() <= u_delta / (1.0 - gamma) + 1e-12
                    && dec.b_sample.norm() <= u_delta / (1.0 - gamma) + 1e-12
                    && dec.a_tilde.norm() <= 2.0 + 1e-12;
                if residual > 1e-12 || !bound_ok {
                    failures += 1;
                }
            }
        }
    }
    Ok(FamilyResult {
        name: "td_feature_identity_and_bounds",
        checks,
        failures,
        worst,
    })
}

fn gradient_fd(seed: u64) -> Result<FamilyResult, ServerError> {
    let mut checks = 0;
    let mut failures = 0;
    let mut worst = 0f64;
    let h = 1e-5;
    for i in 0..10u64 {
        let fed = make_random_federation(4, 2, 1, 2, 0.9, 1.0, seed ^ (0xC0 + i))?;
        let mdp = &fed.agents[0];
        let logits = DMatrix::from_fn(4, 2, |s, a| 0.4 * ((s * 2 + a) as f64 + i as f64).cos());
        let table = SoftmaxPolicy::from_logits(logits.clone()).table();
        let sq = exact_value_and_gradient(mdp, &table, &fed.initial_dist)?;
        for s in 0..4 {
            for a in 0..2 {
                let mut lp = logits.clone();
                let mut lm = logits.clone();
                lp[(s, a)] += h;
                lm[(s, a)] -= h;
                let jp = exact_value_and_gradient(
                    mdp,
                    &SoftmaxPolicy::from_logits(lp).table(),
                    &fed.initial_dist,
                )?
                .j;
                let jm = exact_value_and_gradient(
                    mdp,
                    &SoftmaxPolicy::from_logits(lm).table(),
                    &fed.initial_dist,
                )?
                .j;
                let diff = (sq.grad_j[(s, a)] - (jp - jm) / (2.0 * h)).abs();
                checks += 1;
                worst = worst.max(diff);
                if diff > 1e-6 {
                    failures += 1;
                }
            }
        }
    }
    Ok(FamilyResult {
        name: "gradient_finite_differences",
        checks,
        failures,
        worst,
    })
}

fn fixed_point(seed: u64) -> Result<FamilyResult, ServerError> {
    let mut checks = 0;
    let mut failures = 0;
    let mut worst = 0f64;
    for (i, l) in [1usize, 2, 4].iter().enumerate() {
        let fed = make_random_federation(5, 2, 2, 5, 0.9, 1.0, seed ^ (0xD0 + i as u64))?;
        let identity = FeatureMap::identity(5);
        for mdp in &fed.agents {
            let table = crate::env::uniform_policy(5, 2);
            let sys = td_system(mdp, &table, &identity, *l)?;
            let sq = exact_value_and_gradient(mdp, &table, &fed.initial_dist)?;
            let residual = (&sys.a_l * &sys.z_star + &sys.b_bar).norm();
            let value_gap = (&sys.z_star - &sq.v).amax();
            checks += 2;
            worst = worst.max(residual).max(value_gap);
            if residual > 1e-10 {
                failures += 1;
            }
            if value_gap > 1e-9 {
                failures += 1;
            }
        }
    }
    Ok(FamilyResult {
        name: "td_fixed_point",
        checks,
        failures,
        worst,
    })
}

fn visitation_companion(seed: u64) -> Result<FamilyResult, ServerError> {
    let mut checks = 0;
    let mut failures = 0;
    let mut worst = 0f64;
    for i in 0..10u64 {
        let fed = make_random_federation(6, 2, 1, 3, 0.85, 1.0, seed ^ (0xE0 + i))?;
        let mdp = &fed.agents[0];
        let table = crate::env::uniform_policy(6, 2);
        let nu = discounted_visitation(mdp, &table, &fed.initial_dist);
        let comp = companion_kernel(mdp, &fed.initial_dist)?;
        let mu = stationary_distribution(&comp, &table)?;
        let gap = (nu - mu).amax();
        checks += 1;
        worst = worst.max(gap);
        if gap > 1e-10 {
            failures += 1;
        }
    }
    Ok(FamilyResult {
        name: "visitation_equals_companion_stationary",
        checks,
        failures,
        worst,
    })
}

fn round_loop_invariants(seed: u64) -> Result<Vec<FamilyResult>, ServerError> {
    let fed = make_lumpable_federation(2, 2, 2, 4, 0.9, 1.0, seed ^ 0xF0)?;
    let hp = Hyperparams {
        rank: 2,
        l: 2,
        zeta: 1e-3,
        beta: 1e-2,
        alpha: 1e-2,
        u_omega: 2.0,
    };
    let opts = RunOptions {
        rounds: 200,
        seed,
        workers: 1,
        metrics_stride: 1,
        burn_in: 0,
        debug_invariants: true,
        timing: false,
    };
    let out = run_pfedac(&fed, &hp, &opts)?;
    let t = &out.invariants;
    Ok(vec![
        FamilyResult {
            name: "qr_perturbation_bounds",
            checks: t.rounds_checked * 4,
            failures: t.q_bound + t.r_bound + t.r_inv_norm_bound + t.r_inv_bound,
            worst: f64::NAN,
        },
        FamilyResult {
            name: "subspace_orthonormality",
            checks: t.rounds_checked,
            failures: t.orthonormality,
            worst: f64::NAN,
        },
        FamilyResult {
            name: "head_error_lower_bound",
            checks: t.rounds_checked,
            failures: t.lemma_lower_bound,
            worst: f64::NAN,
        },
        FamilyResult {
            name: "round_loop_sample_bounds",
            checks: t.samples_checked,
            failures: t.critic_delta_bound
                + t.actor_delta_bound
                + t.b_sample_bound
                + t.a_tilde_bound
                + t.td_identity,
            worst: f64::NAN,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verification_passes_on_default_seed() {
        let report = run_verification(0).unwrap();
        assert!(report.passed(), "failures: {report}");
        assert!(report.total_checks() > 1_000);
    }
}
