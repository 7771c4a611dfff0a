//! Finite MDPs, heterogeneous per-agent environments, feature maps, and
//! generators of federations that satisfy the shared-subspace structure
//! exactly.
//!
//! Two generator families are provided. [`make_random_federation`] produces
//! generic ergodic MDPs with bounded random features and no known ground
//! truth. [`make_lumpable_federation`] produces group-lumpable MDPs with
//! identity features: transition probabilities into a group and rewards
//! depend on the current state only through its group, so for every
//! group-symmetric policy the critic fixed point is constant within groups
//! and lies exactly in the span of the normalized group indicators, which the
//! generator returns as the ground-truth subspace.
//!
//! Ergodicity is enforced constructively: every sampled transition row is
//! mixed with the uniform distribution at weight [`MIXING_FLOOR`], which
//! makes each kernel irreducible and aperiodic without a post-hoc check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{stream, StreamKind};

/// Uniform mixing weight applied to every generated transition row.
pub const MIXING_FLOOR: f64 = 0.05;

/// Tolerance on probability-vector normalization.
pub const DIST_TOL: f64 = 1e-12;

/// Tolerance on orthonormality of a ground-truth subspace.
pub const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid transitions: {0}")]
    InvalidTransitions(String),
    #[error("invalid rewards: {0}")]
    InvalidRewards(String),
    #[error("invalid discount: gamma must lie in (0,1), got {0}")]
    InvalidDiscount(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("invalid subspace: {0}")]
    InvalidSubspace(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

/// One agent's environment: transition tensor, reward table, and discount.
///
/// Invariants are enforced at construction and the fields are immutable
/// afterwards, so a `FiniteMdp` can be shared read-only across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `[s][a][s']`, each `(s,a)` slice a probability vector.
    transitions: Vec<f64>,
    /// Row-major `[s][a]`, each entry in `[-reward_bound, reward_bound]`.
    rewards: Vec<f64>,
    discount: f64,
    reward_bound: f64,
}

impl FiniteMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        discount: f64,
        reward_bound: f64,
    ) -> Result<Self, EnvError> {
        if num_states == 0 || num_actions == 0 {
            return Err(EnvError::DimensionMismatch(
                "num_states and num_actions must be positive".into(),
            ));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(EnvError::InvalidDiscount(discount));
        }
        if reward_bound <= 0.0 {
            return Err(EnvError::InvalidRewards(format!(
                "reward_bound must be positive, got {reward_bound}"
            )));
        }
        if transitions.len() != num_states * num_actions * num_states {
            return Err(EnvError::DimensionMismatch(format!(
                "transition tensor has {} entries, expected {}",
                transitions.len(),
                num_states * num_actions * num_states
            )));
        }
        if rewards.len() != num_states * num_actions {
            return Err(EnvError::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                num_states * num_actions
            )));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &transitions[(s * num_actions + a) * num_states..][..num_states];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > DIST_TOL {
                    return Err(EnvError::InvalidTransitions(format!(
                        "row (s={s}, a={a}) sums to {sum}"
                    )));
                }
                if let Some(p) = row.iter().find(|p| **p < 0.0) {
                    return Err(EnvError::InvalidTransitions(format!(
                        "row (s={s}, a={a}) has negative entry {p}"
                    )));
                }
            }
        }
        for (i, r) in rewards.iter().enumerate() {
            if r.abs() > reward_bound {
                return Err(EnvError::InvalidRewards(format!(
                    "reward {} at flat index {i} exceeds bound {reward_bound}",
                    r
                )));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            rewards,
            discount,
            reward_bound,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    /// The probability vector `P(. | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[(s * self.num_actions + a) * self.num_states..][..self.num_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    pub(crate) fn transitions_flat(&self) -> &[f64] {
        &self.transitions
    }

    pub(crate) fn rewards_flat(&self) -> &[f64] {
        &self.rewards
    }

    /// Draw `s' ~ P(. | s, a)` from the given stream.
    pub fn sample_next<R: Rng>(&self, rng: &mut R, s: usize, a: usize) -> usize {
        crate::seeding::sample_index(rng, self.transition_row(s, a))
    }

    /// Induced state kernel `K_pi(s, s') = sum_a pi(a|s) P(s'|s, a)`.
    pub fn induced_kernel(&self, policy: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.num_states;
        let mut k = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let p = policy[(s, a)];
                if p == 0.0 {
                    continue;
                }
                let row = self.transition_row(s, a);
                for sp in 0..n {
                    k[(s, sp)] += p * row[sp];
                }
            }
        }
        k
    }

    /// Policy-averaged reward `r_pi(s) = sum_a pi(a|s) R(s, a)`.
    pub fn mean_reward(&self, policy: &DMatrix<f64>) -> DVector<f64> {
        let n = self.num_states;
        DVector::from_fn(n, |s, _| {
            (0..self.num_actions)
                .map(|a| policy[(s, a)] * self.reward(s, a))
                .sum()
        })
    }
}

/// The map `phi: state -> R^d`, stored as a `|S| x d` matrix with `phi(s)` in
/// row `s`. Row norms are at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self, EnvError> {
        for s in 0..phi.nrows() {
            let norm = phi.row(s).norm();
            if norm > 1.0 + DIST_TOL {
                return Err(EnvError::InvalidFeatures(format!(
                    "row {s} has norm {norm} > 1"
                )));
            }
        }
        Ok(Self { phi })
    }

    /// Tabular identity features (`d = |S|`, `phi(s) = e_s`).
    pub fn identity(num_states: usize) -> Self {
        Self {
            phi: DMatrix::identity(num_states, num_states),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn num_states(&self) -> usize {
        self.phi.nrows()
    }

    /// `phi(s)` as an owned column vector.
    pub fn row_vec(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }

    /// The full `|S| x d` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.phi.nrows())
            .map(|s| self.phi.row(s).norm())
            .fold(0.0, f64::max)
    }
}

/// A federation of `K` agents sharing state/action spaces, discount, initial
/// distribution, and features; transition kernels and rewards differ per
/// agent. `b_star` is present only for synthetically generated federations
/// where the shared subspace is known by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub agents: Vec<FiniteMdp>,
    pub features: FeatureMap,
    pub initial_dist: DVector<f64>,
    pub b_star: Option<DMatrix<f64>>,
    pub seed: u64,
    pub generator: String,
}

impl Federation {
    pub fn new(
        agents: Vec<FiniteMdp>,
        features: FeatureMap,
        initial_dist: DVector<f64>,
        b_star: Option<DMatrix<f64>>,
        seed: u64,
        generator: String,
    ) -> Result<Self, EnvError> {
        let first = agents
            .first()
            .ok_or_else(|| EnvError::DimensionMismatch("federation has no agents".into()))?;
        let (ns, na, gamma) = (first.num_states, first.num_actions, first.discount);
        for (k, m) in agents.iter().enumerate() {
            if m.num_states != ns || m.num_actions != na || m.discount != gamma {
                return Err(EnvError::DimensionMismatch(format!(
                    "agent {k} does not share |S|, |A|, gamma with agent 0"
                )));
            }
        }
        if features.num_states() != ns {
            return Err(EnvError::DimensionMismatch(
                "feature map rows do not match num_states".into(),
            ));
        }
        validate_distribution(initial_dist.as_slice())
            .map_err(|e| EnvError::InvalidDistribution(format!("initial_dist: {e}")))?;
        if initial_dist.len() != ns {
            return Err(EnvError::DimensionMismatch(
                "initial_dist length does not match num_states".into(),
            ));
        }
        if let Some(b) = &b_star {
            if b.nrows() != features.dim() {
                return Err(EnvError::DimensionMismatch(
                    "b_star rows do not match feature dim".into(),
                ));
            }
            let gram = b.transpose() * b;
            let dev = (&gram - DMatrix::identity(b.ncols(), b.ncols())).norm();
            if dev > ORTHO_TOL {
                return Err(EnvError::InvalidSubspace(format!(
                    "b_star' * b_star deviates from identity by {dev}"
                )));
            }
        }
        Ok(Self {
            agents,
            features,
            initial_dist,
            b_star,
            seed,
            generator,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_states(&self) -> usize {
        self.agents[0].num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.agents[0].num_actions()
    }

    pub fn discount(&self) -> f64 {
        self.agents[0].discount()
    }

    pub fn reward_bound(&self) -> f64 {
        self.agents[0].reward_bound()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }
}

fn validate_distribution(p: &[f64]) -> Result<(), String> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(format!("sums to {sum}"));
    }
    if let Some(x) = p.iter().find(|x| **x < 0.0) {
        return Err(format!("negative entry {x}"));
    }
    Ok(())
}

/// Dirichlet(1) row via normalized Exp(1) draws, mixed with the uniform
/// distribution at the mixing-floor weight.
fn random_transition_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let sum: f64 = row.iter().sum();
    let unif = 1.0 / n as f64;
    for x in row.iter_mut() {
        *x = (1.0 - MIXING_FLOOR) * (*x / sum) + MIXING_FLOOR * unif;
    }
    // Exact renormalization so constructor tolerances never bite.
    let sum: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= sum;
    }
    row
}

/// K distinct ergodic MDPs with shared random bounded features and a uniform
/// initial distribution. No ground-truth subspace.
pub fn make_random_federation(
    num_states: usize,
    num_actions: usize,
    num_agents: usize,
    feature_dim: usize,
    gamma: f64,
    reward_bound: f64,
    seed: u64,
) -> Result<Federation, EnvError> {
    let mut shared = stream(seed, StreamKind::EnvShared);
    let mut phi = DMatrix::zeros(num_states, feature_dim);
    for s in 0..num_states {
        for j in 0..feature_dim {
            phi[(s, j)] = shared.sample::<f64, _>(StandardNormal);
        }
    }
    let max_norm = (0..num_states)
        .map(|s| phi.row(s).norm())
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        phi /= max_norm;
    }
    let features = FeatureMap::new(phi)?;

    let agents = (0..num_agents)
        .map(|k| {
            let mut rng = stream(seed, StreamKind::EnvAgent(k));
            let mut transitions = Vec::with_capacity(num_states * num_actions * num_states);
            for _ in 0..num_states * num_actions {
                transitions.extend(random_transition_row(&mut rng, num_states));
            }
            let rewards = (0..num_states * num_actions)
                .map(|_| rng.random_range(-reward_bound..=reward_bound))
                .collect();
            FiniteMdp::new(
                num_states,
                num_actions,
                transitions,
                rewards,
                gamma,
                reward_bound,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let eta = DVector::from_element(num_states, 1.0 / num_states as f64);
    Federation::new(
        agents,
        features,
        eta,
        None,
        seed,
        format!("random(num_states={num_states}, num_actions={num_actions}, d={feature_dim})"),
    )
}

/// Group-lumpable federation with identity features.
///
/// States are partitioned into `num_groups` contiguous groups of
/// `states_per_group` states; group `g` covers states
/// `[g * states_per_group, (g+1) * states_per_group)`. Each agent draws a
/// group-level kernel and group-level rewards; the state-level kernel spreads
/// each group transition uniformly over the target group. The returned
/// ground truth `b_star` is the orthonormalized group-indicator matrix, and
/// for any group-symmetric policy every agent's TD(L) fixed point is constant
/// within groups, hence lies in its span.
pub fn make_lumpable_federation(
    num_groups: usize,
    states_per_group: usize,
    num_actions: usize,
    num_agents: usize,
    gamma: f64,
    reward_bound: f64,
    seed: u64,
) -> Result<Federation, EnvError> {
    let num_states = num_groups * states_per_group;
    let agents = (0..num_agents)
        .map(|k| {
            let mut rng = stream(seed, StreamKind::EnvAgent(k));
            // Group-level kernel [g][a][g'] and rewards [g][a].
            let mut group_kernel = Vec::with_capacity(num_groups * num_actions);
            for _ in 0..num_groups * num_actions {
                group_kernel.push(random_transition_row(&mut rng, num_groups));
            }
            let group_rewards: Vec<f64> = (0..num_groups * num_actions)
                .map(|_| rng.random_range(-reward_bound..=reward_bound))
                .collect();

            let mut transitions = vec![0.0; num_states * num_actions * num_states];
            let mut rewards = vec![0.0; num_states * num_actions];
            for s in 0..num_states {
                let g = s / states_per_group;
                for a in 0..num_actions {
                    rewards[s * num_actions + a] = group_rewards[g * num_actions + a];
                    let grow = &group_kernel[g * num_actions + a];
                    let base = (s * num_actions + a) * num_states;
                    for (gp, pg) in grow.iter().enumerate() {
                        let w = pg / states_per_group as f64;
                        for i in 0..states_per_group {
                            transitions[base + gp * states_per_group + i] = w;
                        }
                    }
                }
            }
            FiniteMdp::new(
                num_states,
                num_actions,
                transitions,
                rewards,
                gamma,
                reward_bound,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut b_star = DMatrix::zeros(num_states, num_groups);
    let col_val = 1.0 / (states_per_group as f64).sqrt();
    for g in 0..num_groups {
        for i in 0..states_per_group {
            b_star[(g * states_per_group + i, g)] = col_val;
        }
    }
    let eta = DVector::from_element(num_states, 1.0 / num_states as f64);
    Federation::new(
        agents,
        FeatureMap::identity(num_states),
        eta,
        Some(b_star),
        seed,
        format!(
            "lumpable(num_groups={num_groups}, states_per_group={states_per_group}, \
             num_actions={num_actions})"
        ),
    )
}

/// The companion MDP with kernel `gamma * P + (1 - gamma) * eta`. Rewards and
/// discount are unchanged.
pub fn companion_kernel(mdp: &FiniteMdp, eta: &DVector<f64>) -> Result<FiniteMdp, EnvError> {
    if eta.len() != mdp.num_states() {
        return Err(EnvError::DimensionMismatch(
            "eta length does not match num_states".into(),
        ));
    }
    validate_distribution(eta.as_slice())
        .map_err(|e| EnvError::InvalidDistribution(format!("eta: {e}")))?;
    let gamma = mdp.discount();
    let n = mdp.num_states();
    let mut transitions = Vec::with_capacity(mdp.transitions_flat().len());
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let row = mdp.transition_row(s, a);
            for sp in 0..n {
                transitions.push(gamma * row[sp] + (1.0 - gamma) * eta[sp]);
            }
        }
    }
    FiniteMdp::new(
        n,
        mdp.num_actions(),
        transitions,
        mdp.rewards_flat().to_vec(),
        gamma,
        mdp.reward_bound(),
    )
}

/// Uniform policy table over actions.
pub fn uniform_policy(num_states: usize, num_actions: usize) -> DMatrix<f64> {
    DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64)
}

// --- serialization -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AgentDoc {
    /// Row-major [s][a][s'].
    transitions: Vec<f64>,
    /// Row-major [s][a].
    rewards: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FederationDoc {
    format: String,
    version: u32,
    seed: u64,
    generator: String,
    num_states: usize,
    num_actions: usize,
    num_agents: usize,
    discount: f64,
    reward_bound: f64,
    feature_dim: usize,
    /// Row-major [s][j].
    features: Vec<f64>,
    initial_dist: Vec<f64>,
    agents: Vec<AgentDoc>,
    /// Row-major [i][j], present only when the subspace is known.
    b_star: Option<Vec<f64>>,
    b_star_cols: Option<usize>,
}

const FEDERATION_FORMAT: &str = "pfedac.federation";
const FEDERATION_VERSION: u32 = 1;

impl Federation {
    /// Self-describing JSON document; all tensors row-major. `serde_json`
    /// prints doubles in shortest round-trip form, so save/load is bit-exact.
    pub fn to_json(&self) -> String {
        let phi = self.features.matrix();
        let features: Vec<f64> = (0..phi.nrows())
            .flat_map(|s| (0..phi.ncols()).map(move |j| phi[(s, j)]))
            .collect();
        let doc = FederationDoc {
            format: FEDERATION_FORMAT.into(),
            version: FEDERATION_VERSION,
            seed: self.seed,
            generator: self.generator.clone(),
            num_states: self.num_states(),
            num_actions: self.num_actions(),
            num_agents: self.num_agents(),
            discount: self.discount(),
            reward_bound: self.reward_bound(),
            feature_dim: self.feature_dim(),
            features,
            initial_dist: self.initial_dist.as_slice().to_vec(),
            agents: self
                .agents
                .iter()
                .map(|m| AgentDoc {
                    transitions: m.transitions_flat().to_vec(),
                    rewards: m.rewards_flat().to_vec(),
                })
                .collect(),
            b_star: self.b_star.as_ref().map(|b| {
                (0..b.nrows())
                    .flat_map(|i| (0..b.ncols()).map(move |j| b[(i, j)]))
                    .collect()
            }),
            b_star_cols: self.b_star.as_ref().map(|b| b.ncols()),
        };
        serde_json::to_string_pretty(&doc).expect("federation serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let doc: FederationDoc =
            serde_json::from_str(text).map_err(|e| EnvError::Serialization(e.to_string()))?;
        if doc.format != FEDERATION_FORMAT || doc.version != FEDERATION_VERSION {
            return Err(EnvError::Serialization(format!(
                "unsupported document {}@{}",
                doc.format, doc.version
            )));
        }
        let phi = DMatrix::from_row_slice(doc.num_states, doc.feature_dim, &doc.features);
        let agents = doc
            .agents
            .into_iter()
            .map(|a| {
                FiniteMdp::new(
                    doc.num_states,
                    doc.num_actions,
                    a.transitions,
                    a.rewards,
                    doc.discount,
                    doc.reward_bound,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let b_star = match (doc.b_star, doc.b_star_cols) {
            (Some(flat), Some(cols)) => Some(DMatrix::from_row_slice(
                doc.feature_dim,
                cols,
                &flat,
            )),
            (None, None) => None,
            _ => {
                return Err(EnvError::Serialization(
                    "b_star and b_star_cols must be present together".into(),
                ))
            }
        };
        Federation::new(
            agents,
            FeatureMap::new(phi)?,
            DVector::from_vec(doc.initial_dist),
            b_star,
            doc.seed,
            doc.generator,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_state_single_action_is_self_loop() {
        let fed = make_random_federation(1, 1, 1, 1, 0.9, 1.0, 0).unwrap();
        assert_eq!(fed.agents[0].transition_row(0, 0), &[1.0]);
    }

    #[test]
    fn generated_rows_are_probability_vectors() {
        let fed = make_random_federation(4, 2, 3, 3, 0.95, 1.0, 7).unwrap();
        for agent in &fed.agents {
            for s in 0..4 {
                for a in 0..2 {
                    let sum: f64 = agent.transition_row(s, a).iter().sum();
                    assert!((sum - 1.0).abs() <= DIST_TOL);
                    assert!(agent
                        .transition_row(s, a)
                        .iter()
                        .all(|p| *p >= MIXING_FLOOR / 4.0 - 1e-15));
                }
            }
        }
        assert!(fed.features.max_row_norm() <= 1.0 + DIST_TOL);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_random_federation(4, 2, 3, 3, 0.95, 1.0, 7).unwrap();
        let b = make_random_federation(4, 2, 3, 3, 0.95, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let c = make_lumpable_federation(2, 2, 2, 4, 0.9, 1.0, 3).unwrap();
        let d = make_lumpable_federation(2, 2, 2, 4, 0.9, 1.0, 3).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn agent_prefix_is_stable_in_k() {
        let small = make_lumpable_federation(2, 2, 2, 4, 0.9, 1.0, 3).unwrap();
        let large = make_lumpable_federation(2, 2, 2, 16, 0.9, 1.0, 3).unwrap();
        assert_eq!(&large.agents[..4], &small.agents[..]);
        assert_eq!(large.b_star, small.b_star);
    }

    #[test]
    fn lumpable_b_star_is_orthonormal_and_indicator_shaped() {
        let fed = make_lumpable_federation(1, 3, 2, 2, 0.9, 1.0, 0).unwrap();
        let b = fed.b_star.as_ref().unwrap();
        let v = 1.0 / 3f64.sqrt();
        for i in 0..3 {
            assert!((b[(i, 0)] - v).abs() < 1e-15);
        }
        let fed = make_lumpable_federation(2, 2, 2, 4, 0.9, 1.0, 3).unwrap();
        let b = fed.b_star.as_ref().unwrap();
        let gram = b.transpose() * b;
        assert!((gram - DMatrix::identity(2, 2)).norm() <= 1e-12);
    }

    #[test]
    fn lumpable_rewards_and_group_transitions_are_group_constant() {
        let fed = make_lumpable_federation(2, 3, 2, 2, 0.9, 1.0, 11).unwrap();
        let m = &fed.agents[1];
        for a in 0..2 {
            for g in 0..2 {
                let s0 = g * 3;
                for s in s0..s0 + 3 {
                    assert_eq!(m.reward(s, a), m.reward(s0, a));
                    // Mass into each group equals the group-kernel entry for
                    // every in-group source state.
                    for gp in 0..2 {
                        let mass: f64 = m.transition_row(s, a)[gp * 3..(gp + 1) * 3].iter().sum();
                        let mass0: f64 =
                            m.transition_row(s0, a)[gp * 3..(gp + 1) * 3].iter().sum();
                        assert!((mass - mass0).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn companion_kernel_two_point_mixture() {
        // P[s][a] = e_1, eta = e_0, gamma = 0.9 -> row = 0.9 e_1 + 0.1 e_0.
        let mdp = FiniteMdp::new(
            2,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.0, 0.0],
            0.9,
            1.0,
        )
        .unwrap();
        let eta = DVector::from_vec(vec![1.0, 0.0]);
        let comp = companion_kernel(&mdp, &eta).unwrap();
        assert!((comp.transition_row(0, 0)[0] - 0.1).abs() < 1e-15);
        assert!((comp.transition_row(0, 0)[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn companion_kernel_rows_sum_to_one() {
        let fed = make_random_federation(5, 3, 1, 2, 0.8, 1.0, 2).unwrap();
        let comp = companion_kernel(&fed.agents[0], &fed.initial_dist).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                let sum: f64 = comp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn companion_formula_reset_limit() {
        // With gamma replaced by 0 in the formula, every row equals eta.
        let fed = make_random_federation(3, 2, 1, 2, 0.9, 1.0, 4).unwrap();
        let mdp = &fed.agents[0];
        let eta = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let gamma = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                for sp in 0..3 {
                    let mixed = gamma * mdp.transition_row(s, a)[sp] + (1.0 - gamma) * eta[sp];
                    assert_eq!(mixed, eta[sp]);
                }
            }
        }
    }

    #[test]
    fn federation_json_round_trip_is_bit_exact() {
        let fed = make_lumpable_federation(2, 2, 2, 3, 0.9, 1.0, 5).unwrap();
        let text = fed.to_json();
        let back = Federation::from_json(&text).unwrap();
        assert_eq!(fed, back);
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        assert!(FiniteMdp::new(1, 1, vec![0.5], vec![0.0], 0.9, 1.0).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![2.0], 0.9, 1.0).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, 1.0).is_err());
        assert!(FeatureMap::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).is_err());
    }
}
