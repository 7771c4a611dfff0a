//! One agent's critic-side machinery: Markovian trajectory sampling, the
//! TD(L) error, the projected head update, the innovation-projected local
//! subspace update, and the per-sample algebraic decompositions used as
//! test identities.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::actor::SoftmaxPolicy;
use crate::env::{FeatureMap, FiniteMdp};
use crate::oracle::TdSystem;
use crate::seeding::sample_index;

/// Live state of one agent's critic chain. The chain state persists across
/// rounds: the first state of round `t + 1` is the last state of round `t`.
#[derive(Debug, Clone)]
pub struct CriticChain {
    pub current_state: usize,
    rng: ChaCha8Rng,
}

impl CriticChain {
    /// Draw the initial state from `eta` using the agent's own stream.
    pub fn init(eta: &DVector<f64>, mut rng: ChaCha8Rng) -> Self {
        let s0 = sample_index(&mut rng, eta.as_slice());
        Self {
            current_state: s0,
            rng,
        }
    }
}

/// An L-step critic trajectory: `L + 1` states, `L` actions, `L` rewards.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn first_state(&self) -> usize {
        self.states[0]
    }

    pub fn last_state(&self) -> usize {
        *self.states.last().unwrap()
    }
}

/// Sample `L` transitions under the agent's policy and kernel, advancing the
/// chain to the trajectory's last state. All randomness comes from the
/// agent's own stream.
pub fn sample_critic_block(
    chain: &mut CriticChain,
    mdp: &FiniteMdp,
    policy: &SoftmaxPolicy,
    l: usize,
) -> Trajectory {
    let mut states = Vec::with_capacity(l + 1);
    let mut actions = Vec::with_capacity(l);
    let mut rewards = Vec::with_capacity(l);
    states.push(chain.current_state);
    for _ in 0..l {
        let s = *states.last().unwrap();
        let a = policy.sample_action(&mut chain.rng, s);
        actions.push(a);
        rewards.push(mdp.reward(s, a));
        states.push(mdp.sample_next(&mut chain.rng, s, a));
    }
    chain.current_state = *states.last().unwrap();
    Trajectory {
        states,
        actions,
        rewards,
    }
}

/// The TD(L) error of one block together with the TD feature `delta phi(s_0)`.
#[derive(Debug, Clone)]
pub struct TdSample {
    pub delta: f64,
    pub td_feature: DVector<f64>,
}

/// TD(L) error in the endpoint form
/// `delta = sum_{l<L} gamma^l r_l + (gamma^L phi(s_L) - phi(s_0))' B omega`.
pub fn td_l_error(
    traj: &Trajectory,
    features: &FeatureMap,
    b: &DMatrix<f64>,
    omega: &DVector<f64>,
    gamma: f64,
) -> TdSample {
    let l = traj.len();
    let weights = b * omega;
    let phi0 = features.row_vec(traj.first_state());
    let phil = features.row_vec(traj.last_state());
    let mut delta = (gamma.powi(l as i32) * phil - &phi0).dot(&weights);
    let mut disc = 1.0;
    for r in &traj.rewards {
        delta += disc * r;
        disc *= gamma;
    }
    TdSample {
        td_feature: delta * phi0,
        delta,
    }
}

/// The per-step telescoped form
/// `sum_{l<L} gamma^l (r_l + (gamma phi(s_{l+1}) - phi(s_l))' B omega)`.
/// Algebraically equal to [`td_l_error`]; kept as a cross-check so the two
/// printed forms stay pinned to one semantics.
pub fn td_l_error_stepwise(
    traj: &Trajectory,
    features: &FeatureMap,
    b: &DMatrix<f64>,
    omega: &DVector<f64>,
    gamma: f64,
) -> f64 {
    let weights = b * omega;
    let mut delta = 0.0;
    let mut disc = 1.0;
    for (step, r) in traj.rewards.iter().enumerate() {
        let phi_s = features.row_vec(traj.states[step]);
        let phi_next = features.row_vec(traj.states[step + 1]);
        delta += disc * (r + (gamma * phi_next - phi_s).dot(&weights));
        disc *= gamma;
    }
    delta
}

/// The two exact rewrites of the TD feature evaluated on one sample, plus the
/// pieces they are built from.
#[derive(Debug, Clone)]
pub struct TdDecomposition {
    /// `|| delta phi(s_0) - (A~ x + b) ||` for the per-sample outer-product
    /// form; an exact identity up to rounding.
    pub outer_residual: f64,
    /// `|| delta phi(s_0) - (xi + A_L x) ||` for the Markovian-noise form;
    /// exact up to rounding plus the fixed-point solve residual.
    pub noise_residual: f64,
    /// Markovian noise `xi = b~ - b_bar + (A~ - A_L) B omega`.
    pub xi: DVector<f64>,
    /// Per-sample drift `A~ = phi(s_0)(gamma^L phi(s_L) - phi(s_0))'`.
    pub a_tilde: DMatrix<f64>,
    /// Per-sample affine term
    /// `b = sum_l gamma^l (r_l + (gamma phi(s_{l+1}) - phi(s_l))' z*) phi(s_0)`.
    pub b_sample: DVector<f64>,
}

/// Evaluate both TD-feature rewrites against the exact system `sys` for the
/// head error `x = B omega - z*`.
pub fn td_feature_decomposition(
    traj: &Trajectory,
    features: &FeatureMap,
    b: &DMatrix<f64>,
    omega: &DVector<f64>,
    sys: &TdSystem,
    gamma: f64,
) -> TdDecomposition {
    let l = traj.len();
    let phi0 = features.row_vec(traj.first_state());
    let phil = features.row_vec(traj.last_state());
    let value_weights = b * omega;
    let x = &value_weights - &sys.z_star;

    let sample = td_l_error(traj, features, b, omega, gamma);

    let a_tilde = &phi0 * (gamma.powi(l as i32) * &phil - &phi0).transpose();

    let mut scalar_b = 0.0;
    let mut disc = 1.0;
    for (step, r) in traj.rewards.iter().enumerate() {
        let phi_s = features.row_vec(traj.states[step]);
        let phi_next = features.row_vec(traj.states[step + 1]);
        scalar_b += disc * (r + (gamma * phi_next - phi_s).dot(&sys.z_star));
        disc *= gamma;
    }
    let b_sample = scalar_b * &phi0;

    let mut disc_reward = 0.0;
    let mut disc = 1.0;
    for r in &traj.rewards {
        disc_reward += disc * r;
        disc *= gamma;
    }
    let b_tilde = disc_reward * &phi0;
    let xi = &b_tilde - &sys.b_bar + (&a_tilde - &sys.a_l) * &value_weights;

    let outer_residual = (&sample.td_feature - (&a_tilde * &x + &b_sample)).norm();
    let noise_residual = (&sample.td_feature - (&xi + &sys.a_l * &x)).norm();

    TdDecomposition {
        outer_residual,
        noise_residual,
        xi,
        a_tilde,
        b_sample,
    }
}

/// One agent's critic parameters: the head, its projection radius, and the
/// two critic stepsizes.
#[derive(Debug, Clone)]
pub struct CriticParams {
    pub omega: DVector<f64>,
    /// Projection radius `U_omega`.
    pub radius: f64,
    /// Head stepsize `beta`.
    pub head_step: f64,
    /// Subspace stepsize `zeta`.
    pub subspace_step: f64,
}

impl CriticParams {
    /// Zero head of rank `r`; the zero vector lies inside every ball.
    pub fn zero(rank: usize, radius: f64, head_step: f64, subspace_step: f64) -> Self {
        Self {
            omega: DVector::zeros(rank),
            radius,
            head_step,
            subspace_step,
        }
    }
}

/// Exact projection onto the l2 ball of the given radius.
pub fn project_ball(v: DVector<f64>, radius: f64) -> (DVector<f64>, bool) {
    let norm = v.norm();
    if norm > radius {
        (v * (radius / norm), true)
    } else {
        (v, false)
    }
}

/// Projected head update
/// `omega' = Pi_{U_omega}(omega + (beta/L) delta B' phi(s_0))`.
/// Returns the new head and whether the projection clamped.
pub fn head_update(
    params: &CriticParams,
    sample: &TdSample,
    b: &DMatrix<f64>,
    l: usize,
) -> (DVector<f64>, bool) {
    let candidate =
        &params.omega + b.transpose() * &sample.td_feature * (params.head_step / l as f64);
    project_ball(candidate, params.radius)
}

/// Innovation-projected local subspace increment
/// `dB = (zeta/L) (I - B B') delta phi(s_0) omega'`.
///
/// The projector is applied as `v - B (B' v)`, which is the same operator as
/// `B_perp B_perp'` without materializing a `d x (d - r)` basis. The returned
/// increment satisfies `B' dB = 0` up to rounding.
pub fn local_subspace_update(
    b: &DMatrix<f64>,
    sample: &TdSample,
    omega: &DVector<f64>,
    zeta: f64,
    l: usize,
) -> DMatrix<f64> {
    let projected = &sample.td_feature - b * (b.transpose() * &sample.td_feature);
    projected * omega.transpose() * (zeta / l as f64)
}
