//! One agent's actor-side machinery: tabular softmax policy, reset-chain
//! sampling, one-step actor TD errors, and the minibatch policy-gradient
//! estimate.
//!
//! Actor trajectories are drawn from the companion chain, whose kernel mixes
//! the agent's kernel with a reset to the initial distribution at weight
//! `1 - gamma`. The chain is sampled with an explicit gamma-biased coin so
//! reset events can be logged. Each step records the environment transition
//! `s' ~ P(.|s, a)` drawn before the coin: the one-step TD error must see the
//! original-kernel transition for the minibatch estimator to target
//! `(1 - gamma) grad J` exactly at companion stationarity, while the chain
//! state itself continues through the coin and therefore mixes to the
//! discounted visitation distribution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{FeatureMap, FiniteMdp};
use crate::seeding::sample_index;

/// Tabular softmax policy over a finite state-action space.
///
/// Probabilities per state are strictly positive and sum to one, and the
/// score norm satisfies `||grad log pi(a|s)|| <= sqrt(2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    logits: DMatrix<f64>,
}

impl SoftmaxPolicy {
    /// Zero logits: the uniform policy.
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            logits: DMatrix::zeros(num_states, num_actions),
        }
    }

    pub fn from_logits(logits: DMatrix<f64>) -> Self {
        Self { logits }
    }

    pub fn num_states(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    /// `pi(.|s)` via max-shifted softmax.
    pub fn probs(&self, s: usize) -> DVector<f64> {
        let row = self.logits.row(s);
        let m = row.max();
        let mut p = DVector::from_fn(self.num_actions(), |a, _| (row[a] - m).exp());
        let sum = p.sum();
        p /= sum;
        p
    }

    /// Full `|S| x |A|` probability table.
    pub fn table(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.num_states(), self.num_actions());
        for s in 0..self.num_states() {
            t.set_row(s, &self.probs(s).transpose());
        }
        t
    }

    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        self.probs(s)[a].ln()
    }

    /// Row `s` of `grad_theta log pi(a|s)`: `e_a - pi(.|s)`. All other rows
    /// of the full gradient table are zero.
    pub fn grad_log_row(&self, s: usize, a: usize) -> DVector<f64> {
        let mut g = -self.probs(s);
        g[a] += 1.0;
        g
    }

    pub fn sample_action<R: Rng>(&self, rng: &mut R, s: usize) -> usize {
        sample_index(rng, self.probs(s).as_slice())
    }
}

/// Live state of one agent's actor chain. The chain state persists across
/// rounds: the first state of round `t + 1` is the last state of round `t`.
#[derive(Debug, Clone)]
pub struct ActorChain {
    pub current_state: usize,
    rng: ChaCha8Rng,
}

impl ActorChain {
    /// Draw the initial state from `eta` using the agent's own stream.
    pub fn init(eta: &DVector<f64>, mut rng: ChaCha8Rng) -> Self {
        let s0 = sample_index(&mut rng, eta.as_slice());
        Self {
            current_state: s0,
            rng,
        }
    }
}

/// One sampled actor transition: the environment draw used by the TD error
/// plus the reset indicator that determined the chain continuation.
#[derive(Debug, Clone, Copy)]
pub struct ActorStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `s' ~ P(.|state, action)` (pre-coin environment transition).
    pub next_state: usize,
    /// The coin came up reset: the chain continued from a fresh eta draw.
    pub reset: bool,
}

#[derive(Debug, Clone)]
pub struct ActorTrajectory {
    pub steps: Vec<ActorStep>,
}

impl ActorTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn reset_count(&self) -> usize {
        self.steps.iter().filter(|s| s.reset).count()
    }
}

/// Sample `L` companion-chain transitions under the agent's policy.
///
/// Rewards come from the agent's own reward table. Per step the draws are, in
/// order: action, environment next state, reset coin, and (only on reset) the
/// eta draw the chain continues from.
pub fn sample_actor_block(
    chain: &mut ActorChain,
    mdp: &FiniteMdp,
    eta: &DVector<f64>,
    policy: &SoftmaxPolicy,
    l: usize,
) -> ActorTrajectory {
    let gamma = mdp.discount();
    let mut steps = Vec::with_capacity(l);
    for _ in 0..l {
        let s = chain.current_state;
        let a = policy.sample_action(&mut chain.rng, s);
        let reward = mdp.reward(s, a);
        let next_env = mdp.sample_next(&mut chain.rng, s, a);
        let coin: f64 = chain.rng.random();
        let reset = coin >= gamma;
        chain.current_state = if reset {
            sample_index(&mut chain.rng, eta.as_slice())
        } else {
            next_env
        };
        steps.push(ActorStep {
            state: s,
            action: a,
            reward,
            next_state: next_env,
            reset,
        });
    }
    ActorTrajectory { steps }
}

/// One-step actor TD errors
/// `delta_l = r_l + (gamma phi(s'_l) - phi(s_l))' B omega` for each step.
pub fn actor_td_errors(
    traj: &ActorTrajectory,
    features: &FeatureMap,
    b: &DMatrix<f64>,
    omega: &DVector<f64>,
    gamma: f64,
) -> Vec<f64> {
    let weights = b * omega;
    traj.steps
        .iter()
        .map(|step| {
            let phi_s = features.row_vec(step.state);
            let phi_next = features.row_vec(step.next_state);
            step.reward + (gamma * phi_next - phi_s).dot(&weights)
        })
        .collect()
}

/// Minibatch policy-gradient estimate
/// `g = (1/L) sum_l delta_l grad log pi(a_l|s_l)` as a full logits-shaped
/// table.
pub fn policy_gradient_estimate(
    deltas: &[f64],
    traj: &ActorTrajectory,
    policy: &SoftmaxPolicy,
) -> DMatrix<f64> {
    assert_eq!(deltas.len(), traj.len(), "deltas and trajectory aligned");
    let l = traj.len() as f64;
    let mut g = DMatrix::zeros(policy.num_states(), policy.num_actions());
    for (delta, step) in deltas.iter().zip(traj.steps.iter()) {
        let row = policy.grad_log_row(step.state, step.action);
        for a in 0..policy.num_actions() {
            g[(step.state, a)] += delta / l * row[a];
        }
    }
    g
}

/// `theta' = theta + alpha g`.
pub fn actor_step(policy: &mut SoftmaxPolicy, g: &DMatrix<f64>, alpha: f64) {
    policy.logits += g * alpha;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_random_federation, FeatureMap};
    use crate::oracle::{discounted_visitation, exact_value_and_gradient};
    use crate::seeding::{stream, StreamKind};
    use approx::assert_abs_diff_eq;

    #[test]
    fn probabilities_sum_to_one_and_are_positive() {
        let logits = DMatrix::from_row_slice(2, 3, &[5.0, -40.0, 2.0, 0.0, 0.0, 0.0]);
        let policy = SoftmaxPolicy::from_logits(logits);
        for s in 0..2 {
            let p = policy.probs(s);
            assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
            assert!(p.iter().all(|x| *x > 0.0));
        }
    }

    #[test]
    fn score_norm_at_most_sqrt_two() {
        let mut rng = stream(2, StreamKind::EnvShared);
        for _ in 0..200 {
            let logits = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-3.0..3.0));
            let policy = SoftmaxPolicy::from_logits(logits);
            for s in 0..3 {
                for a in 0..4 {
                    assert!(policy.grad_log_row(s, a).norm() <= 2f64.sqrt() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn score_matches_finite_differences_of_log_prob() {
        let logits = DMatrix::from_row_slice(2, 3, &[0.4, -0.2, 1.1, 0.0, 0.7, -0.5]);
        let policy = SoftmaxPolicy::from_logits(logits.clone());
        let h = 1e-6;
        for s in 0..2 {
            for a in 0..3 {
                let grad = policy.grad_log_row(s, a);
                for j in 0..3 {
                    let mut lp = logits.clone();
                    let mut lm = logits.clone();
                    lp[(s, j)] += h;
                    lm[(s, j)] -= h;
                    let fd = (SoftmaxPolicy::from_logits(lp).log_prob(s, a)
                        - SoftmaxPolicy::from_logits(lm).log_prob(s, a))
                        / (2.0 * h);
                    assert!((grad[j] - fd).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn logit_shift_leaves_probabilities_identical() {
        let logits = DMatrix::from_row_slice(2, 2, &[0.3, -0.4, 1.0, 2.0]);
        let mut shifted = logits.clone();
        shifted[(0, 0)] += 7.5;
        shifted[(0, 1)] += 7.5;
        let a = SoftmaxPolicy::from_logits(logits);
        let b = SoftmaxPolicy::from_logits(shifted);
        assert!((a.table() - b.table()).amax() <= 1e-15);
    }

    #[test]
    fn single_step_block_has_one_tuple() {
        let fed = make_random_federation(3, 2, 1, 2, 0.9, 1.0, 6).unwrap();
        let mut chain = ActorChain::init(&fed.initial_dist, stream(1, StreamKind::Actor(0)));
        let policy = SoftmaxPolicy::uniform(3, 2);
        let traj = sample_actor_block(&mut chain, &fed.agents[0], &fed.initial_dist, &policy, 1);
        assert_eq!(traj.len(), 1);
    }

    #[test]
    fn chain_state_persists_across_blocks() {
        let fed = make_random_federation(4, 2, 1, 2, 0.9, 1.0, 8).unwrap();
        let mut chain = ActorChain::init(&fed.initial_dist, stream(3, StreamKind::Actor(0)));
        let policy = SoftmaxPolicy::uniform(4, 2);
        for _ in 0..10 {
            let before = chain.current_state;
            let traj =
                sample_actor_block(&mut chain, &fed.agents[0], &fed.initial_dist, &policy, 3);
            assert_eq!(traj.steps[0].state, before);
        }
    }

    #[test]
    fn non_reset_steps_continue_from_environment_draw() {
        let fed = make_random_federation(4, 2, 1, 2, 0.9, 1.0, 12).unwrap();
        let mut chain = ActorChain::init(&fed.initial_dist, stream(5, StreamKind::Actor(0)));
        let policy = SoftmaxPolicy::uniform(4, 2);
        let traj = sample_actor_block(&mut chain, &fed.agents[0], &fed.initial_dist, &policy, 50);
        for pair in traj.steps.windows(2) {
            if !pair[0].reset {
                assert_eq!(pair[1].state, pair[0].next_state);
            }
        }
    }

    #[test]
    fn zero_head_zero_rewards_zero_deltas() {
        let mdp = FiniteMdp::new(
            2,
            1,
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.0, 0.0],
            0.9,
            1.0,
        )
        .unwrap();
        let eta = DVector::from_vec(vec![0.5, 0.5]);
        let mut chain = ActorChain::init(&eta, stream(9, StreamKind::Actor(0)));
        let policy = SoftmaxPolicy::uniform(2, 1);
        let traj = sample_actor_block(&mut chain, &mdp, &eta, &policy, 4);
        let features = FeatureMap::identity(2);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let omega = DVector::zeros(1);
        let deltas = actor_td_errors(&traj, &features, &b, &omega, 0.9);
        assert!(deltas.iter().all(|d| *d == 0.0));
        let g = policy_gradient_estimate(&deltas, &traj, &policy);
        assert!(g.amax() == 0.0);
    }

    #[test]
    fn single_state_delta_closed_form() {
        // One state: delta = r + (gamma - 1) * phi' B omega.
        let mdp = FiniteMdp::new(1, 1, vec![1.0], vec![0.7], 0.9, 1.0).unwrap();
        let eta = DVector::from_vec(vec![1.0]);
        let mut chain = ActorChain::init(&eta, stream(2, StreamKind::Actor(0)));
        let policy = SoftmaxPolicy::uniform(1, 1);
        let traj = sample_actor_block(&mut chain, &mdp, &eta, &policy, 3);
        let features = FeatureMap::identity(1);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let omega = DVector::from_vec(vec![0.4]);
        let deltas = actor_td_errors(&traj, &features, &b, &omega, 0.9);
        for d in deltas {
            assert_abs_diff_eq!(d, 0.7 + (0.9 - 1.0) * 0.4, epsilon = 1e-15);
        }
    }

    #[test]
    fn delta_bound_holds_over_many_samples() {
        let fed = make_random_federation(5, 3, 1, 3, 0.9, 1.0, 14).unwrap();
        let u_omega = 2.0;
        let u_delta = fed.reward_bound() + 2.0 * u_omega;
        let features = &fed.features;
        // Random orthonormal B via QR of a Gaussian matrix.
        let mut rng = stream(77, StreamKind::ServerInit);
        let gauss = DMatrix::from_fn(3, 2, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let b = gauss.qr().q();
        let omega = DVector::from_vec(vec![u_omega / 2f64.sqrt(), u_omega / 2f64.sqrt()]);
        let policy = SoftmaxPolicy::uniform(5, 3);
        let mut chain = ActorChain::init(&fed.initial_dist, stream(15, StreamKind::Actor(0)));
        for _ in 0..2_000 {
            let traj = sample_actor_block(&mut chain, &fed.agents[0], &fed.initial_dist, &policy, 5);
            for d in actor_td_errors(&traj, features, &b, &omega, 0.9) {
                assert!(d.abs() <= u_delta + 1e-12);
            }
        }
    }

    #[test]
    fn estimator_supported_on_visited_rows_only() {
        let policy = SoftmaxPolicy::uniform(3, 2);
        let traj = ActorTrajectory {
            steps: vec![ActorStep {
                state: 1,
                action: 0,
                reward: 0.0,
                next_state: 2,
                reset: false,
            }],
        };
        let g = policy_gradient_estimate(&[2.0], &traj, &policy);
        for s in [0usize, 2] {
            for a in 0..2 {
                assert_eq!(g[(s, a)], 0.0);
            }
        }
        // Row 1 carries the softmax score pattern e_a - pi.
        assert_abs_diff_eq!(g[(1, 0)], 2.0 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(1, 1)], -2.0 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn actor_step_zero_gradient_or_stepsize_is_identity() {
        let mut policy = SoftmaxPolicy::uniform(2, 2);
        let g = DMatrix::from_element(2, 2, 1.5);
        actor_step(&mut policy, &DMatrix::zeros(2, 2), 0.3);
        assert_eq!(policy.logits(), &DMatrix::zeros(2, 2));
        actor_step(&mut policy, &g, 0.0);
        assert_eq!(policy.logits(), &DMatrix::zeros(2, 2));
        actor_step(&mut policy, &g, 0.1);
        assert!((policy.logits() - g * 0.1).amax() <= 1e-15);
    }

    #[test]
    fn estimator_mean_matches_scaled_gradient_smoke() {
        // Small-sample version of the stationary-unbiasedness check: draw
        // (s, a, s') with s ~ nu, a ~ pi, s' ~ P, plug in the exact value
        // weights, and compare the sample mean of g against
        // (1 - gamma) grad J within a generous CLT band.
        let fed = make_random_federation(4, 2, 1, 4, 0.9, 1.0, 99).unwrap();
        let mdp = &fed.agents[0];
        let policy = SoftmaxPolicy::from_logits(DMatrix::from_fn(4, 2, |s, a| {
            0.2 * ((s + 2 * a) as f64).cos()
        }));
        let table = policy.table();
        let sq = exact_value_and_gradient(mdp, &table, &fed.initial_dist).unwrap();
        let nu = discounted_visitation(mdp, &table, &fed.initial_dist);
        let features = FeatureMap::identity(4);
        // Exact value weights: z* = V for identity features.
        let b = DMatrix::identity(4, 4);
        let omega = sq.v.clone();

        let mut rng = stream(123, StreamKind::Actor(0));
        let n = 200_000;
        let mut mean = DMatrix::zeros(4, 2);
        for _ in 0..n {
            let s = sample_index(&mut rng, nu.as_slice());
            let a = policy.sample_action(&mut rng, s);
            let sp = mdp.sample_next(&mut rng, s, a);
            let traj = ActorTrajectory {
                steps: vec![ActorStep {
                    state: s,
                    action: a,
                    reward: mdp.reward(s, a),
                    next_state: sp,
                    reset: false,
                }],
            };
            let deltas = actor_td_errors(&traj, &features, &b, &omega, mdp.discount());
            mean += policy_gradient_estimate(&deltas, &traj, &policy);
        }
        mean /= n as f64;
        let target = sq.grad_j * (1.0 - mdp.discount());
        assert!(
            (mean - target).amax() <= 0.01,
            "estimator mean too far from scaled gradient"
        );
    }
}
