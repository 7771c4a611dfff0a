//! The federation round loop: broadcast, parallel agent rounds, averaging of
//! local subspace proposals, QR re-orthonormalization, oracle-backed metric
//! computation, comparison baselines, and the speedup sweep.
//!
//! Concurrency contract: rounds are a barrier-synchronized loop. Within a
//! round each agent worker exclusively owns its agent's state and reads the
//! broadcast subspace and federation immutably; aggregation and QR run
//! single-threaded at the barrier in fixed agent-index order. Identical
//! configs therefore produce identical output with 1 worker or N workers.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actor::{
    actor_step, actor_td_errors, policy_gradient_estimate, sample_actor_block, ActorChain,
    SoftmaxPolicy,
};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::critic::{
    head_update, local_subspace_update, sample_critic_block, td_feature_decomposition,
    td_l_error, CriticChain, CriticParams,
};
use crate::env::{EnvError, Federation};
use crate::oracle::{exact_value_and_gradient, head_spread, td_system, OracleError, TdSystem};
use crate::seeding::{stream, StreamKind};

#[derive(Debug, Error)]
pub enum ServerError {
    /// The averaged subspace lost rank; the round loop assumes an invertible
    /// R factor, so this aborts the run with diagnostics.
    #[error("rank-deficient aggregate: {0}")]
    RankDeficientAggregate(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Resolved algorithmic knobs of one run.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    /// Subspace rank r.
    pub rank: usize,
    /// Block length L.
    pub l: usize,
    /// Subspace stepsize.
    pub zeta: f64,
    /// Head stepsize.
    pub beta: f64,
    /// Actor stepsize.
    pub alpha: f64,
    /// Head projection radius.
    pub u_omega: f64,
}

/// Execution knobs of one run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Total rounds T.
    pub rounds: usize,
    pub seed: u64,
    pub workers: usize,
    /// Metric rows are recorded every this many rounds, plus a final row.
    pub metrics_stride: usize,
    /// Rounds excluded from the time averages.
    pub burn_in: usize,
    /// Check every runtime invariant every round and tally violations.
    pub debug_invariants: bool,
    /// Measure per-round wallclock. Off by default so metrics files are
    /// byte-identical across repeated runs; when off the column reads 0.
    pub timing: bool,
}

/// One recorded metrics row. Rows at stride rounds carry the state entering
/// the round plus that round's aggregation statistics; the final row (at
/// round T) carries the terminal state only.
#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// (1/K) sum_k ||B omega^k - z^{k,*}||^2 at the round start.
    pub x_bar: f64,
    /// ||B*_perp' B||_F^2 when the ground-truth subspace is known.
    pub pad_frob_sq: Option<f64>,
    /// (1/K) sum_k ||grad J^k(theta^k)||^2 at the round start.
    pub g_bar: f64,
    /// Frobenius norm of the mean subspace increment Q_t.
    pub q_frob: Option<f64>,
    /// Spectral norm of R - I from the round's QR step.
    pub r_dev: Option<f64>,
    /// Head projections that clamped this round.
    pub clamp_count: Option<usize>,
    pub wallclock_ms: u64,
}

/// Violation counts from the debug invariant checks. All zeros on a correct
/// implementation; any nonzero count is a bug or a genuinely violated
/// assumption, never noise.
#[derive(Debug, Clone, Default, Serialize)]
pub struct InvariantTally {
    pub rounds_checked: usize,
    pub samples_checked: usize,
    /// |delta_{t,L}| <= U_delta / (1 - gamma).
    pub critic_delta_bound: usize,
    /// |delta^act| <= U_delta.
    pub actor_delta_bound: usize,
    /// ||b_{t,L}|| <= U_delta / (1 - gamma).
    pub b_sample_bound: usize,
    /// ||A~|| <= 2.
    pub a_tilde_bound: usize,
    /// Per-sample TD-feature rewrites exact to 1e-12.
    pub td_identity: usize,
    /// ||Q_t||_F <= zeta U_delta U_omega / (L (1 - gamma)).
    pub q_bound: usize,
    /// ||R - I|| <= 2 ||Q||_F^2 (1e-9 slack).
    pub r_bound: usize,
    /// ||R^{-1}|| <= 1 / (1 - 2 ||Q||_F^2) (1e-9 slack).
    pub r_inv_norm_bound: usize,
    /// ||R^{-1} - I|| <= 4 ||Q||_F^2 (1e-9 slack).
    pub r_inv_bound: usize,
    /// B'B = I to 1e-10 after the round.
    pub orthonormality: usize,
    /// Head-error lower bound: x_bar >= lambda+_min ||m||_F^2 / (r K) - 1e-9.
    pub lemma_lower_bound: usize,
}

impl InvariantTally {
    pub fn total_violations(&self) -> usize {
        self.critic_delta_bound
            + self.actor_delta_bound
            + self.b_sample_bound
            + self.a_tilde_bound
            + self.td_identity
            + self.q_bound
            + self.r_bound
            + self.r_inv_norm_bound
            + self.r_inv_bound
            + self.orthonormality
            + self.lemma_lower_bound
    }

    fn absorb(&mut self, other: &InvariantTally) {
        self.samples_checked += other.samples_checked;
        self.critic_delta_bound += other.critic_delta_bound;
        self.actor_delta_bound += other.actor_delta_bound;
        self.b_sample_bound += other.b_sample_bound;
        self.a_tilde_bound += other.a_tilde_bound;
        self.td_identity += other.td_identity;
    }
}

/// Time-averaged metrics over recorded rounds in `[burn_in, T)`.
#[derive(Debug, Clone, Serialize)]
pub struct TimeAverages {
    pub x_bar: f64,
    pub g_bar: f64,
    pub pad_frob_sq: Option<f64>,
    pub rows: usize,
}

/// Result of one complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub invariants: InvariantTally,
    pub averages: TimeAverages,
    /// Final shared subspace (pfedac mode only).
    pub final_subspace: Option<DMatrix<f64>>,
}

/// Shared-subspace server state.
#[derive(Debug, Clone)]
pub struct ServerState {
    /// Current orthonormal subspace estimate.
    pub b: DMatrix<f64>,
    pub round: usize,
    pub metrics_history: Vec<RoundMetrics>,
}

/// QR of a seeded standard-Gaussian `d x r` matrix with the positive-diagonal
/// sign convention.
pub fn initial_subspace(d: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, StreamKind::ServerInit);
    let gauss = DMatrix::from_fn(d, rank, |_, _| StandardNormal.sample(&mut rng));
    let (b, _r) = qr_positive_diag(gauss).expect("gaussian matrix is full rank");
    b
}

/// Thin QR with the sign convention `diag(R) > 0`, which pins the otherwise
/// sign-ambiguous factorization and makes runs reproducible across backends.
fn qr_positive_diag(m: DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), ServerError> {
    let rank = m.ncols();
    let qr = m.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..rank {
        if r[(j, j)].abs() < 1e-10 {
            return Err(ServerError::RankDeficientAggregate(format!(
                "R[{j},{j}] = {} below 1e-10",
                r[(j, j)]
            )));
        }
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
            for k in 0..rank {
                r[(j, k)] = -r[(j, k)];
            }
        }
    }
    Ok((q, r))
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Result of averaging the local proposals and re-orthonormalizing.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub b_next: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `||Q_t||_F` where `Q_t = mean(proposals) - B_t`.
    pub q_frob: f64,
}

/// Average the K local proposals `B_t + dB^k` in agent-index order and take
/// the sign-fixed thin QR of the mean.
pub fn aggregate_and_qr(
    b_t: &DMatrix<f64>,
    proposals: &[DMatrix<f64>],
) -> Result<Aggregate, ServerError> {
    if proposals.is_empty() {
        return Err(ServerError::DimensionMismatch("no proposals".into()));
    }
    for (k, p) in proposals.iter().enumerate() {
        if p.shape() != b_t.shape() {
            return Err(ServerError::DimensionMismatch(format!(
                "proposal {k} has shape {:?}, expected {:?}",
                p.shape(),
                b_t.shape()
            )));
        }
    }
    let mut mean = DMatrix::zeros(b_t.nrows(), b_t.ncols());
    for p in proposals {
        mean += p;
    }
    mean /= proposals.len() as f64;
    let q_frob = (&mean - b_t).norm();
    if q_frob == 0.0 {
        // The positive-diagonal QR of an orthonormal matrix is exactly
        // (B, I); skipping the factorization keeps zero-increment rounds
        // bitwise frozen.
        return Ok(Aggregate {
            b_next: mean,
            r: DMatrix::identity(b_t.ncols(), b_t.ncols()),
            q_frob,
        });
    }
    let (b_next, r) = qr_positive_diag(mean)?;
    Ok(Aggregate { b_next, r, q_frob })
}

/// Principal-angle distance of `b` from `b_star`: returns
/// `(||B*_perp' B||_F^2, ||B*_perp' B||_2)`. Both inputs must be orthonormal
/// with matching row dimension; the values lie in `[0, r]` and `[0, 1]`.
pub fn principal_angle_distance(
    b: &DMatrix<f64>,
    b_star: &DMatrix<f64>,
) -> Result<(f64, f64), ServerError> {
    if b.nrows() != b_star.nrows() {
        return Err(ServerError::DimensionMismatch(format!(
            "subspaces live in different ambient dimensions: {} vs {}",
            b.nrows(),
            b_star.nrows()
        )));
    }
    // (I - B* B*') B has the same singular values as B*_perp' B.
    let overlap = b_star.transpose() * b;
    let residual = b - b_star * overlap;
    Ok((residual.norm_squared(), spectral_norm(&residual)))
}

struct AgentRuntime {
    params: CriticParams,
    policy: SoftmaxPolicy,
    critic_chain: CriticChain,
    actor_chain: ActorChain,
}

fn init_agents(fed: &Federation, hp: &Hyperparams, seed: u64) -> Vec<AgentRuntime> {
    (0..fed.num_agents())
        .map(|k| AgentRuntime {
            params: CriticParams::zero(hp.rank, hp.u_omega, hp.beta, hp.zeta),
            policy: SoftmaxPolicy::uniform(fed.num_states(), fed.num_actions()),
            critic_chain: CriticChain::init(&fed.initial_dist, stream(seed, StreamKind::Critic(k))),
            actor_chain: ActorChain::init(&fed.initial_dist, stream(seed, StreamKind::Actor(k))),
        })
        .collect()
}

/// Map over agents, in parallel when a pool is present. Results come back in
/// agent-index order either way.
fn map_agents<T: Send>(
    pool: Option<&rayon::ThreadPool>,
    agents: &mut [AgentRuntime],
    f: impl Fn(usize, &mut AgentRuntime) -> T + Sync,
) -> Vec<T> {
    match pool {
        Some(pool) => pool.install(|| {
            agents
                .par_iter_mut()
                .enumerate()
                .map(|(k, a)| f(k, a))
                .collect()
        }),
        None => agents
            .iter_mut()
            .enumerate()
            .map(|(k, a)| f(k, a))
            .collect(),
    }
}

fn build_pool(workers: usize) -> Option<rayon::ThreadPool> {
    (workers > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool")
    })
}

struct OracleSnapshot {
    sys: TdSystem,
    x_norm_sq: f64,
    grad_norm_sq: f64,
}

/// One pfedac experiment in progress.
pub struct PfedacRun<'a> {
    fed: &'a Federation,
    hp: Hyperparams,
    opts: RunOptions,
    pub server: ServerState,
    agents: Vec<AgentRuntime>,
    pool: Option<rayon::ThreadPool>,
    tally: InvariantTally,
}

impl<'a> PfedacRun<'a> {
    pub fn new(fed: &'a Federation, hp: Hyperparams, opts: RunOptions) -> Self {
        let b0 = initial_subspace(fed.feature_dim(), hp.rank, opts.seed);
        let agents = init_agents(fed, &hp, opts.seed);
        let pool = build_pool(opts.workers);
        PfedacRun {
            fed,
            hp,
            opts,
            server: ServerState {
                b: b0,
                round: 0,
                metrics_history: Vec::new(),
            },
            agents,
            pool,
            tally: InvariantTally::default(),
        }
    }

    fn oracle_pass(&mut self) -> Result<Vec<OracleSnapshot>, ServerError> {
        let fed = self.fed;
        let hp = &self.hp;
        let b = &self.server.b;
        let snapshots: Vec<Result<OracleSnapshot, ServerError>> =
            map_agents(self.pool.as_ref(), &mut self.agents, |k, agent| {
                let table = agent.policy.table();
                let sys = td_system(&fed.agents[k], &table, &fed.features, hp.l)?;
                let sq = exact_value_and_gradient(&fed.agents[k], &table, &fed.initial_dist)?;
                let x = b * &agent.params.omega - &sys.z_star;
                Ok(OracleSnapshot {
                    x_norm_sq: x.norm_squared(),
                    grad_norm_sq: sq.grad_j.norm_squared(),
                    sys,
                })
            });
        snapshots.into_iter().collect()
    }

    /// Execute one full round: agent updates, aggregation, QR, broadcast.
    /// Records a metrics row when the round index is on the stride.
    pub fn round(&mut self) -> Result<(), ServerError> {
        let t = self.server.round;
        let started = self.opts.timing.then(Instant::now);
        let record = t % self.opts.metrics_stride == 0;
        let debug = self.opts.debug_invariants;
        let gamma = self.fed.discount();
        let u_delta = self.fed.reward_bound() + 2.0 * self.hp.u_omega;

        let oracle = if record || debug {
            Some(self.oracle_pass()?)
        } else {
            None
        };

        // Pre-update metrics for round t.
        let (x_bar, g_bar) = oracle
            .as_ref()
            .map(|snaps| {
                let k = snaps.len() as f64;
                (
                    snaps.iter().map(|s| s.x_norm_sq).sum::<f64>() / k,
                    snaps.iter().map(|s| s.grad_norm_sq).sum::<f64>() / k,
                )
            })
            .unwrap_or((0.0, 0.0));
        let pad = match (&self.fed.b_star, record || debug) {
            (Some(b_star), true) => Some(principal_angle_distance(&self.server.b, b_star)?),
            _ => None,
        };

        if debug {
            self.tally.rounds_checked += 1;
            // Head-error lower bound, checked when the truth is known and
            // the ambient dimension leaves room for the complement.
            if let (Some(snaps), Some((pad_frob_sq, _))) = (oracle.as_ref(), pad) {
                let d = self.fed.feature_dim();
                if d >= 2 * self.hp.rank {
                    let mut z_stack = DMatrix::zeros(d, snaps.len());
                    for (k, s) in snaps.iter().enumerate() {
                        z_stack.set_column(k, &s.sys.z_star);
                    }
                    let (nu_hat, _, degenerate) = head_spread(&z_stack);
                    if !degenerate {
                        let rhs = nu_hat * pad_frob_sq / self.hp.rank as f64;
                        if x_bar < rhs - 1e-9 {
                            self.tally.lemma_lower_bound += 1;
                        }
                    }
                }
            }
        }

        // Agent phase: everything in round t uses (B_t, omega_t, theta_t).
        struct AgentOutput {
            proposal: DMatrix<f64>,
            new_omega: DVector<f64>,
            clamped: bool,
            checks: InvariantTally,
        }
        let fed = self.fed;
        let hp = &self.hp;
        let b = &self.server.b;
        let oracle_ref = oracle.as_ref();
        let outputs: Vec<AgentOutput> =
            map_agents(self.pool.as_ref(), &mut self.agents, |k, agent| {
                let mut checks = InvariantTally::default();
                let traj =
                    sample_critic_block(&mut agent.critic_chain, &fed.agents[k], &agent.policy, hp.l);
                let sample = td_l_error(&traj, &fed.features, b, &agent.params.omega, gamma);

                if debug {
                    checks.samples_checked += 1;
                    if sample.delta.abs() > u_delta / (1.0 - gamma) + 1e-12 {
                        checks.critic_delta_bound += 1;
                    }
                    if let Some(snaps) = oracle_ref {
                        let dec = td_feature_decomposition(
                            &traj,
                            &fed.features,
                            b,
                            &agent.params.omega,
                            &snaps[k].sys,
                            gamma,
                        );
                        if dec.outer_residual > 1e-12 || dec.noise_residual > 1e-12 {
                            checks.td_identity += 1;
                        }
                        if dec.b_sample.norm() > u_delta / (1.0 - gamma) + 1e-12 {
                            checks.b_sample_bound += 1;
                        }
                        if spectral_norm(&dec.a_tilde) > 2.0 + 1e-12 {
                            checks.a_tilde_bound += 1;
                        }
                    }
                }

                let (new_omega, clamped) = head_update(&agent.params, &sample, b, hp.l);
                // The subspace increment uses the pre-update head.
                let delta_b =
                    local_subspace_update(b, &sample, &agent.params.omega, hp.zeta, hp.l);

                let actor_traj = sample_actor_block(
                    &mut agent.actor_chain,
                    &fed.agents[k],
                    &fed.initial_dist,
                    &agent.policy,
                    hp.l,
                );
                let deltas =
                    actor_td_errors(&actor_traj, &fed.features, b, &agent.params.omega, gamma);
                if debug {
                    for dl in &deltas {
                        if dl.abs() > u_delta + 1e-12 {
                            checks.actor_delta_bound += 1;
                        }
                    }
                }
                let g = policy_gradient_estimate(&deltas, &actor_traj, &agent.policy);
                actor_step(&mut agent.policy, &g, hp.alpha);

                AgentOutput {
                    proposal: b + delta_b,
                    new_omega,
                    clamped,
                    checks,
                }
            });

        let mut clamp_count = 0;
        let mut proposals = Vec::with_capacity(outputs.len());
        for (agent, out) in self.agents.iter_mut().zip(outputs.into_iter()) {
            agent.params.omega = out.new_omega;
            clamp_count += out.clamped as usize;
            self.tally.absorb(&out.checks);
            proposals.push(out.proposal);
        }

        let agg = aggregate_and_qr(&self.server.b, &proposals)?;

        if debug {
            let q_sq = agg.q_frob * agg.q_frob;
            let q_limit = hp.zeta * u_delta * hp.u_omega / (hp.l as f64 * (1.0 - gamma));
            if agg.q_frob > q_limit + 1e-12 {
                self.tally.q_bound += 1;
            }
            let rank = hp.rank;
            let r_dev = spectral_norm(&(&agg.r - DMatrix::identity(rank, rank)));
            if r_dev > 2.0 * q_sq + 1e-9 {
                self.tally.r_bound += 1;
            }
            let r_inv = agg
                .r
                .clone()
                .solve_upper_triangular(&DMatrix::identity(rank, rank))
                .expect("R is invertible past the rank check");
            if spectral_norm(&r_inv) > 1.0 / (1.0 - 2.0 * q_sq) + 1e-9 {
                self.tally.r_inv_norm_bound += 1;
            }
            if spectral_norm(&(&r_inv - DMatrix::identity(rank, rank))) > 4.0 * q_sq + 1e-9 {
                self.tally.r_inv_bound += 1;
            }
            let gram_dev = (agg.b_next.transpose() * &agg.b_next
                - DMatrix::identity(rank, rank))
            .norm();
            if gram_dev > 1e-10 {
                self.tally.orthonormality += 1;
            }
        }

        if record {
            let r_dev = spectral_norm(&(&agg.r - DMatrix::identity(self.hp.rank, self.hp.rank)));
            self.server.metrics_history.push(RoundMetrics {
                round: t,
                x_bar,
                pad_frob_sq: pad.map(|(f, _)| f),
                g_bar,
                q_frob: Some(agg.q_frob),
                r_dev: Some(r_dev),
                clamp_count: Some(clamp_count),
                wallclock_ms: started.map_or(0, |s| s.elapsed().as_millis() as u64),
            });
        }

        self.server.b = agg.b_next;
        self.server.round += 1;
        Ok(())
    }

    /// Run all remaining rounds, append the terminal state row, and return
    /// the run output.
    pub fn finish(mut self) -> Result<RunOutput, ServerError> {
        while self.server.round < self.opts.rounds {
            self.round()?;
        }
        let snaps = self.oracle_pass()?;
        let k = snaps.len() as f64;
        let pad = match &self.fed.b_star {
            Some(b_star) => Some(principal_angle_distance(&self.server.b, b_star)?.0),
            None => None,
        };
        self.server.metrics_history.push(RoundMetrics {
            round: self.server.round,
            x_bar: snaps.iter().map(|s| s.x_norm_sq).sum::<f64>() / k,
            pad_frob_sq: pad,
            g_bar: snaps.iter().map(|s| s.grad_norm_sq).sum::<f64>() / k,
            q_frob: None,
            r_dev: None,
            clamp_count: None,
            wallclock_ms: 0,
        });
        let averages = time_averages(
            &self.server.metrics_history,
            self.opts.burn_in,
            self.opts.rounds,
        );
        Ok(RunOutput {
            metrics: self.server.metrics_history,
            invariants: self.tally,
            averages,
            final_subspace: Some(self.server.b),
        })
    }
}

/// Run the personalized federated actor-critic loop to completion.
pub fn run_pfedac(
    fed: &Federation,
    hp: &Hyperparams,
    opts: &RunOptions,
) -> Result<RunOutput, ServerError> {
    PfedacRun::new(fed, hp.clone(), opts.clone()).finish()
}

/// Average the recorded rows with `burn_in <= round < rounds`.
pub fn time_averages(metrics: &[RoundMetrics], burn_in: usize, rounds: usize) -> TimeAverages {
    let window: Vec<&RoundMetrics> = metrics
        .iter()
        .filter(|m| m.round >= burn_in && m.round < rounds)
        .collect();
    let n = window.len().max(1) as f64;
    let pad_rows = window.iter().filter(|m| m.pad_frob_sq.is_some()).count();
    TimeAverages {
        x_bar: window.iter().map(|m| m.x_bar).sum::<f64>() / n,
        g_bar: window.iter().map(|m| m.g_bar).sum::<f64>() / n,
        pad_frob_sq: (pad_rows == window.len() && !window.is_empty()).then(|| {
            window.iter().map(|m| m.pad_frob_sq.unwrap()).sum::<f64>() / n
        }),
        rows: window.len(),
    }
}

/// Single-agent and full-averaging comparison arms. Both run a full
/// d-dimensional critic per agent with no subspace and no projection:
/// `z' = z + (beta/L) delta phi(s_0)`. `FedavgFull` additionally averages
/// the critic weights across agents at the end of every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    LocalOnly,
    FedavgFull,
}

/// Run a baseline arm. Metrics reuse the same definitions with
/// `x^k = z^k - z^{k,*}`; the subspace columns stay empty.
pub fn run_baseline(
    fed: &Federation,
    mode: BaselineMode,
    hp: &Hyperparams,
    opts: &RunOptions,
) -> Result<RunOutput, ServerError> {
    let d = fed.feature_dim();
    let gamma = fed.discount();
    let identity = DMatrix::<f64>::identity(d, d);
    let pool = build_pool(opts.workers);
    let mut agents = init_agents(fed, hp, opts.seed);
    let mut weights: Vec<DVector<f64>> = vec![DVector::zeros(d); fed.num_agents()];
    let mut metrics = Vec::new();

    let record_row = |agents: &mut Vec<AgentRuntime>,
                      weights: &[DVector<f64>],
                      pool: Option<&rayon::ThreadPool>,
                      t: usize,
                      terminal: bool|
     -> Result<RoundMetrics, ServerError> {
        let snaps: Vec<Result<(f64, f64), ServerError>> = {
            let weights = &weights;
            map_agents(pool, agents, |k, agent| {
                let table = agent.policy.table();
                let sys = td_system(&fed.agents[k], &table, &fed.features, hp.l)?;
                let sq = exact_value_and_gradient(&fed.agents[k], &table, &fed.initial_dist)?;
                Ok((
                    (&weights[k] - &sys.z_star).norm_squared(),
                    sq.grad_j.norm_squared(),
                ))
            })
        };
        let snaps: Vec<(f64, f64)> = snaps.into_iter().collect::<Result<_, _>>()?;
        let k = snaps.len() as f64;
        Ok(RoundMetrics {
            round: t,
            x_bar: snaps.iter().map(|s| s.0).sum::<f64>() / k,
            pad_frob_sq: None,
            g_bar: snaps.iter().map(|s| s.1).sum::<f64>() / k,
            q_frob: None,
            r_dev: None,
            clamp_count: (!terminal).then_some(0),
            wallclock_ms: 0,
        })
    };

    for t in 0..opts.rounds {
        if t % opts.metrics_stride == 0 {
            metrics.push(record_row(&mut agents, &weights, pool.as_ref(), t, false)?);
        }
        let new_weights: Vec<DVector<f64>> = {
            let weights = &weights;
            let identity = &identity;
            map_agents(pool.as_ref(), &mut agents, |k, agent| {
                let traj =
                    sample_critic_block(&mut agent.critic_chain, &fed.agents[k], &agent.policy, hp.l);
                let sample = td_l_error(&traj, &fed.features, identity, &weights[k], gamma);
                let z_next = &weights[k] + &sample.td_feature * (hp.beta / hp.l as f64);

                let actor_traj = sample_actor_block(
                    &mut agent.actor_chain,
                    &fed.agents[k],
                    &fed.initial_dist,
                    &agent.policy,
                    hp.l,
                );
                let deltas =
                    actor_td_errors(&actor_traj, &fed.features, identity, &weights[k], gamma);
                let g = policy_gradient_estimate(&deltas, &actor_traj, &agent.policy);
                actor_step(&mut agent.policy, &g, hp.alpha);
                z_next
            })
        };
        weights = new_weights;
        if mode == BaselineMode::FedavgFull {
            let mut mean = DVector::zeros(d);
            for z in &weights {
                mean += z;
            }
            mean /= weights.len() as f64;
            for z in weights.iter_mut() {
                *z = mean.clone();
            }
        }
    }
    metrics.push(record_row(
        &mut agents,
        &weights,
        pool.as_ref(),
        opts.rounds,
        true,
    )?);

    let averages = time_averages(&metrics, opts.burn_in, opts.rounds);
    Ok(RunOutput {
        metrics,
        invariants: InvariantTally::default(),
        averages,
        final_subspace: None,
    })
}

// --- output files -------------------------------------------------------

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render the metrics history in the fixed CSV schema.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(
        "round,x_bar,pad_frob_sq,g_bar,q_frob,r_dev,clamp_count,wallclock_ms\n",
    );
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.round,
            m.x_bar,
            fmt_opt_f64(m.pad_frob_sq),
            m.g_bar,
            fmt_opt_f64(m.q_frob),
            fmt_opt_f64(m.r_dev),
            m.clamp_count.map(|c| c.to_string()).unwrap_or_default(),
            m.wallclock_ms
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(metrics).as_bytes())
}

/// Git-blob style content hash of the federation document.
pub fn federation_hash(fed: &Federation) -> String {
    let body = fed.to_json();
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", body.len()).as_bytes());
    hasher.update(body.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolve the head radius: the configured value, or
/// `2 max_k ||z^{k,*}(theta_0)||` from the oracle at the uniform policy.
pub fn resolve_u_omega(cfg: &RunConfig, fed: &Federation) -> Result<f64, ServerError> {
    if let Some(u) = cfg.u_omega {
        return Ok(u);
    }
    let uniform = crate::env::uniform_policy(fed.num_states(), fed.num_actions());
    let mut max_norm = 0f64;
    for mdp in &fed.agents {
        let sys = td_system(mdp, &uniform, &fed.features, cfg.l)?;
        max_norm = max_norm.max(sys.z_star.norm());
    }
    if max_norm == 0.0 {
        // Degenerate zero-reward federation; any positive radius works.
        max_norm = 0.5;
    }
    Ok(2.0 * max_norm)
}

/// Everything `execute` wrote, for the caller to report.
#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub output_dir: PathBuf,
    pub metrics_rows: usize,
    pub invariant_violations: usize,
    pub summary: serde_json::Value,
}

/// Run one config end to end: build the federation, resolve the radius,
/// validate stepsizes, run the requested mode, and write every output file
/// under the config's output directory.
pub fn execute(cfg: &RunConfig, source_text: Option<&str>) -> Result<ExecutionReport, ServerError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    if let Some(text) = source_text {
        std::fs::write(cfg.output_dir.join("config.echo"), text)?;
    }

    let fed = cfg.build_federation(cfg.num_agents)?;
    let u_omega = resolve_u_omega(cfg, &fed)?;
    cfg.validate_stepsizes(u_omega)?;

    let mut resolved = cfg.clone();
    resolved.u_omega = Some(u_omega);
    resolved.metrics_stride = Some(cfg.resolved_metrics_stride());
    resolved.burn_in = Some(cfg.resolved_burn_in());
    std::fs::write(cfg.output_dir.join("config.resolved"), resolved.render())?;

    let hp = Hyperparams {
        rank: cfg.rank,
        l: cfg.l,
        zeta: cfg.zeta,
        beta: cfg.beta(),
        alpha: cfg.alpha(),
        u_omega,
    };
    let opts = RunOptions {
        rounds: cfg.rounds,
        seed: cfg.seed,
        workers: cfg.workers,
        metrics_stride: cfg.resolved_metrics_stride(),
        burn_in: cfg.resolved_burn_in(),
        debug_invariants: cfg.debug_invariants,
        timing: std::env::var("PFEDAC_TIMING").is_ok_and(|v| v == "1"),
    };

    match cfg.mode {
        Mode::Sweep => {
            let mut entries = Vec::new();
            for &k in &cfg.k_list {
                let fed_k = cfg.build_federation(k)?;
                let out = run_pfedac(&fed_k, &hp, &opts)?;
                write_metrics_csv(
                    &cfg.output_dir.join(format!("metrics_k{k}.csv")),
                    &out.metrics,
                )?;
                entries.push(serde_json::json!({
                    "k": k,
                    "x_bar_avg": out.averages.x_bar,
                    "g_bar_avg": out.averages.g_bar,
                    "pad_avg": out.averages.pad_frob_sq,
                    "federation_hash": federation_hash(&fed_k),
                    "invariant_violations": out.invariants.total_violations(),
                }));
            }
            let xs: Vec<f64> = entries
                .iter()
                .map(|e| e["x_bar_avg"].as_f64().unwrap())
                .collect();
            let gs: Vec<f64> = entries
                .iter()
                .map(|e| e["g_bar_avg"].as_f64().unwrap())
                .collect();
            let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
            let summary = serde_json::json!({
                "mode": "sweep",
                "entries": entries,
                "monotone_x": monotone(&xs),
                "monotone_g": monotone(&gs),
                "burn_in": opts.burn_in,
                "config": resolved.render(),
            });
            std::fs::write(
                cfg.output_dir.join("summary.json"),
                serde_json::to_string_pretty(&summary).expect("json"),
            )?;
            Ok(ExecutionReport {
                output_dir: cfg.output_dir.clone(),
                metrics_rows: 0,
                invariant_violations: 0,
                summary,
            })
        }
        mode => {
            let out = match mode {
                Mode::Pfedac => run_pfedac(&fed, &hp, &opts)?,
                Mode::LocalOnly => run_baseline(&fed, BaselineMode::LocalOnly, &hp, &opts)?,
                Mode::FedavgFull => run_baseline(&fed, BaselineMode::FedavgFull, &hp, &opts)?,
                Mode::Sweep => unreachable!(),
            };
            write_metrics_csv(&cfg.output_dir.join("metrics.csv"), &out.metrics)?;
            std::fs::write(cfg.output_dir.join("federation.json"), fed.to_json())?;
            let summary = serde_json::json!({
                "mode": mode.as_str(),
                "rounds": cfg.rounds,
                "averages": {
                    "x_bar": out.averages.x_bar,
                    "g_bar": out.averages.g_bar,
                    "pad": out.averages.pad_frob_sq,
                    "window_rows": out.averages.rows,
                },
                "invariants": out.invariants,
                "federation_hash": federation_hash(&fed),
            });
            std::fs::write(
                cfg.output_dir.join("run_summary.json"),
                serde_json::to_string_pretty(&summary).expect("json"),
            )?;
            Ok(ExecutionReport {
                output_dir: cfg.output_dir.clone(),
                metrics_rows: out.metrics.len(),
                invariant_violations: out.invariants.total_violations(),
                summary,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_lumpable_federation;
    use approx::assert_abs_diff_eq;

    fn small_fed() -> Federation {
        make_lumpable_federation(2, 2, 2, 4, 0.9, 1.0, 3).unwrap()
    }

    fn small_hp(u_omega: f64) -> Hyperparams {
        Hyperparams {
            rank: 2,
            l: 2,
            zeta: 1e-3,
            beta: 1e-2,
            alpha: 1e-2,
            u_omega,
        }
    }

    fn small_opts(rounds: usize) -> RunOptions {
        RunOptions {
            rounds,
            seed: 0,
            workers: 1,
            metrics_stride: 1,
            burn_in: 0,
            debug_invariants: true,
            timing: false,
        }
    }

    #[test]
    fn zero_increments_leave_subspace_and_r_identity() {
        let b = initial_subspace(4, 2, 1);
        let proposals = vec![b.clone(), b.clone(), b.clone(), b.clone()];
        let agg = aggregate_and_qr(&b, &proposals).unwrap();
        assert_eq!(agg.b_next, b);
        assert_eq!(agg.r, DMatrix::identity(2, 2));
        assert_eq!(agg.q_frob, 0.0);
    }

    #[test]
    fn qr_reconstructs_the_mean_and_pins_signs() {
        let b = initial_subspace(5, 2, 2);
        let mut rng = stream(9, StreamKind::ServerInit);
        let perturbed: Vec<DMatrix<f64>> = (0..3)
            .map(|_| {
                &b + DMatrix::from_fn(5, 2, |_, _| {
                    0.01 * <StandardNormal as Distribution<f64>>::sample(
                        &StandardNormal,
                        &mut rng,
                    )
                })
            })
            .collect();
        let mut mean = DMatrix::zeros(5, 2);
        for p in &perturbed {
            mean += p;
        }
        mean /= 3.0;
        let agg = aggregate_and_qr(&b, &perturbed).unwrap();
        assert!((&agg.b_next * &agg.r - mean).amax() <= 1e-12);
        assert!(
            (agg.b_next.transpose() * &agg.b_next - DMatrix::identity(2, 2)).norm() <= 1e-12
        );
        assert!((0..2).all(|j| agg.r[(j, j)] > 0.0));
    }

    #[test]
    fn rank_deficient_aggregate_is_an_error() {
        let b = initial_subspace(4, 2, 3);
        // Proposals collapse the second column to a multiple of the first.
        let mut degenerate = DMatrix::zeros(4, 2);
        let col = b.column(0).into_owned();
        degenerate.set_column(0, &col);
        degenerate.set_column(1, &(2.0 * col));
        match aggregate_and_qr(&b, &[degenerate]) {
            Err(ServerError::RankDeficientAggregate(_)) => {}
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn pad_is_zero_iff_same_column_space() {
        let b = initial_subspace(6, 2, 4);
        let (f, s) = principal_angle_distance(&b, &b).unwrap();
        assert!(f <= 1e-24 && s <= 1e-12);
        // Rotations of the columns do not change the column space.
        let angle: f64 = 0.7;
        let rot =
            DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let (f, s) = principal_angle_distance(&(&b * rot), &b).unwrap();
        assert!(f <= 1e-24 && s <= 1e-12);
    }

    #[test]
    fn pad_is_maximal_for_orthogonal_spaces() {
        let mut b1 = DMatrix::zeros(4, 2);
        b1[(0, 0)] = 1.0;
        b1[(1, 1)] = 1.0;
        let mut b2 = DMatrix::zeros(4, 2);
        b2[(2, 0)] = 1.0;
        b2[(3, 1)] = 1.0;
        let (f, s) = principal_angle_distance(&b1, &b2).unwrap();
        assert_abs_diff_eq!(f, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pad_frobenius_matches_trace_identity() {
        // ||B*perp' B||_F^2 = r - ||B*' B||_F^2 for orthonormal inputs.
        let b = initial_subspace(6, 2, 5);
        let b_star = initial_subspace(6, 2, 6);
        let (f, _) = principal_angle_distance(&b, &b_star).unwrap();
        let overlap_sq = (b_star.transpose() * &b).norm_squared();
        assert_abs_diff_eq!(f, 2.0 - overlap_sq, epsilon = 1e-12);
    }

    #[test]
    fn frozen_hyperparams_freeze_the_state() {
        let fed = small_fed();
        let hp = Hyperparams {
            rank: 2,
            l: 2,
            zeta: 0.0,
            beta: 0.0,
            alpha: 0.0,
            u_omega: 1.0,
        };
        let out = run_pfedac(&fed, &hp, &small_opts(5)).unwrap();
        let first = &out.metrics[0];
        for m in &out.metrics {
            assert_eq!(m.x_bar, first.x_bar);
            assert_eq!(m.g_bar, first.g_bar);
            assert_eq!(m.pad_frob_sq, first.pad_frob_sq);
        }
        assert_eq!(out.invariants.total_violations(), 0);
    }

    #[test]
    fn identical_agents_stay_identical() {
        // One agent replicated: personalized states coincide every round.
        let one = make_lumpable_federation(2, 2, 2, 1, 0.9, 1.0, 7).unwrap();
        let copies = Federation::new(
            vec![one.agents[0].clone(), one.agents[0].clone()],
            one.features.clone(),
            one.initial_dist.clone(),
            one.b_star.clone(),
            7,
            "copies".into(),
        )
        .unwrap();
        let hp = small_hp(2.0);
        // Same stream for both agents: replace per-agent chains by hand.
        let mut run = PfedacRun::new(&copies, hp, small_opts(10));
        run.agents[1].critic_chain = run.agents[0].critic_chain.clone();
        run.agents[1].actor_chain = run.agents[0].actor_chain.clone();
        for _ in 0..10 {
            run.round().unwrap();
        }
        assert!((&run.agents[0].params.omega - &run.agents[1].params.omega).amax() <= 1e-15);
        assert!(
            (run.agents[0].policy.logits() - run.agents[1].policy.logits()).amax() <= 1e-15
        );
    }

    #[test]
    fn runs_are_deterministic_across_workers() {
        let fed = small_fed();
        let hp = small_hp(2.0);
        let mut o1 = small_opts(20);
        o1.workers = 1;
        let mut o2 = small_opts(20);
        o2.workers = 4;
        let a = run_pfedac(&fed, &hp, &o1).unwrap();
        let b = run_pfedac(&fed, &hp, &o2).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }

    #[test]
    fn row_count_matches_stride_contract() {
        let fed = small_fed();
        let hp = small_hp(2.0);
        let mut opts = small_opts(20);
        opts.metrics_stride = 5;
        opts.debug_invariants = false;
        let out = run_pfedac(&fed, &hp, &opts).unwrap();
        // Rows at 0, 5, 10, 15 plus the terminal row at 20.
        assert_eq!(out.metrics.len(), 20 / 5 + 1);
        assert_eq!(out.metrics.last().unwrap().round, 20);
        assert!(out.metrics.last().unwrap().q_frob.is_none());
    }

    #[test]
    fn debug_run_has_zero_violations() {
        let fed = small_fed();
        let hp = small_hp(2.0);
        let out = run_pfedac(&fed, &hp, &small_opts(50)).unwrap();
        assert_eq!(out.invariants.total_violations(), 0);
        assert_eq!(out.invariants.rounds_checked, 50);
        assert!(out.invariants.samples_checked >= 200);
    }

    #[test]
    fn baselines_run_and_record() {
        let fed = small_fed();
        let hp = small_hp(2.0);
        let mut opts = small_opts(10);
        opts.debug_invariants = false;
        for mode in [BaselineMode::LocalOnly, BaselineMode::FedavgFull] {
            let out = run_baseline(&fed, mode, &hp, &opts).unwrap();
            assert_eq!(out.metrics.len(), 11);
            assert!(out.metrics.iter().all(|m| m.pad_frob_sq.is_none()));
        }
    }

    #[test]
    fn csv_formatting_keeps_empty_fields() {
        let rows = vec![RoundMetrics {
            round: 3,
            x_bar: 1.5,
            pad_frob_sq: None,
            g_bar: 0.25,
            q_frob: None,
            r_dev: None,
            clamp_count: None,
            wallclock_ms: 0,
        }];
        let text = metrics_csv(&rows);
        assert!(text.ends_with("3,1.5,,0.25,,,,0\n"));
    }
}
