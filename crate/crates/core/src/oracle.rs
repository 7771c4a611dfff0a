//! Exact, sampling-free solvers for every stationary quantity the round loop
//! tracks: stationary and discounted-visitation distributions, exact
//! value/action-value/objective/policy-gradient, TD(L) systems with their
//! fixed points, and assumption diagnostics.
//!
//! Everything here is a pure function of immutable inputs and uses dense
//! partial-pivoting factorizations; state and feature dimensions are capped
//! at [`MAX_DIM`] by config validation, which keeps all solves desk-scale.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::env::{FeatureMap, Federation, FiniteMdp};

/// Largest supported `|S|` or `d`.
pub const MAX_DIM: usize = 512;

/// Residual tolerance on stationary and fixed-point solves.
pub const SOLVE_TOL: f64 = 1e-10;

/// Eigenvalues of `Z* Z*'` below `RANK_REL_TOL * lambda_max` count as zero
/// when locating the smallest nonzero eigenvalue.
pub const RANK_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    /// The balance system is rank-deficient beyond tolerance: the induced
    /// chain is reducible, which signals a generator or policy bug.
    #[error("singular chain: {0}")]
    SingularChain(String),
}

/// Everything exactly computable about one `(mdp, policy)` pair.
#[derive(Debug, Clone)]
pub struct StationaryQuantities {
    /// Stationary state distribution of the induced chain.
    pub mu: DVector<f64>,
    /// Discounted state visitation distribution for the given eta.
    pub nu: DVector<f64>,
    /// Cumulative discounted reward averaged over eta.
    pub j: f64,
    /// Exact policy gradient with respect to tabular softmax logits.
    pub grad_j: DMatrix<f64>,
    /// Exact value vector.
    pub v: DVector<f64>,
    /// Exact action-value table.
    pub q: DMatrix<f64>,
}

/// The exact TD(L) linear system of one `(agent, policy, L)` triple.
#[derive(Debug, Clone)]
pub struct TdSystem {
    /// `A_L = Phi' diag(mu) (gamma^L K^L - I) Phi`.
    pub a_l: DMatrix<f64>,
    /// `b_bar = Phi' diag(mu) sum_{l<L} gamma^l K^l r_pi`.
    pub b_bar: DVector<f64>,
    /// Solution of `A_L z = -b_bar` (least squares when `A_L` is singular).
    pub z_star: DVector<f64>,
    /// `-lambda_max(sym(A_L)) / L`; positive iff the exploration condition
    /// holds for this triple.
    pub lambda_margin: f64,
    /// Set when `A_L` was rank-deficient and `z_star` is a least-squares
    /// solution. Reported rather than fatal so experiments can proceed while
    /// surfacing the violation.
    pub singular: bool,
}

fn lu_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let max_diag = (0..a.nrows())
        .map(|i| lu.u()[(i, i)].abs())
        .fold(0.0, f64::max);
    let min_diag = (0..a.nrows())
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if max_diag == 0.0 || min_diag < 1e-13 * max_diag {
        return None;
    }
    let mut x = lu.solve(rhs)?;
    // One step of iterative refinement pushes the residual to rounding level.
    let residual = rhs - a * &x;
    if let Some(corr) = lu.solve(&residual) {
        x += corr;
    }
    Some(x)
}

/// Unique stationary distribution `mu` with `mu' K = mu'`, solved by
/// replacing the last balance equation with the normalization row.
pub fn stationary_distribution(
    mdp: &FiniteMdp,
    policy: &DMatrix<f64>,
) -> Result<DVector<f64>, OracleError> {
    let kernel = mdp.induced_kernel(policy);
    stationary_of_kernel(&kernel)
}

/// Stationary distribution of an explicit state kernel (rows sum to 1).
pub fn stationary_of_kernel(kernel: &DMatrix<f64>) -> Result<DVector<f64>, OracleError> {
    let n = kernel.nrows();
    let mut system = kernel.transpose() - DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let mu = lu_solve(&system, &rhs)
        .ok_or_else(|| OracleError::SingularChain("balance system is rank-deficient".into()))?;
    let residual = (kernel.transpose() * &mu - &mu).amax();
    if residual > SOLVE_TOL {
        return Err(OracleError::SingularChain(format!(
            "balance residual {residual} exceeds {SOLVE_TOL}"
        )));
    }
    if mu.min() < -1e-12 {
        return Err(OracleError::SingularChain(format!(
            "negative stationary mass {}",
            mu.min()
        )));
    }
    let mut mu = mu.map(|x| x.max(0.0));
    mu /= mu.sum();
    Ok(mu)
}

/// Discounted visitation `nu' = (1 - gamma) eta' (I - gamma K)^{-1}`,
/// renormalized defensively. Always solvable for `gamma < 1`.
pub fn discounted_visitation(
    mdp: &FiniteMdp,
    policy: &DMatrix<f64>,
    eta: &DVector<f64>,
) -> DVector<f64> {
    let n = mdp.num_states();
    let kernel = mdp.induced_kernel(policy);
    let gamma = mdp.discount();
    let system = DMatrix::identity(n, n) - kernel.transpose() * gamma;
    let rhs = eta * (1.0 - gamma);
    let nu = lu_solve(&system, &rhs).expect("I - gamma K' is invertible for gamma < 1");
    let mut nu = nu.map(|x| x.max(0.0));
    nu /= nu.sum();
    nu
}

/// Exact `mu`, `nu`, `J`, `grad J`, `V`, `Q` for one `(mdp, policy, eta)`.
///
/// The gradient is taken with respect to tabular softmax logits realizing the
/// given policy, which yields the advantage form
/// `grad J[s, a] = nu(s) pi(a|s) (Q(s, a) - V(s)) / (1 - gamma)`.
pub fn exact_value_and_gradient(
    mdp: &FiniteMdp,
    policy: &DMatrix<f64>,
    eta: &DVector<f64>,
) -> Result<StationaryQuantities, OracleError> {
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let gamma = mdp.discount();
    let kernel = mdp.induced_kernel(policy);
    let r_pi = mdp.mean_reward(policy);

    let system = DMatrix::identity(n, n) - &kernel * gamma;
    let v = lu_solve(&system, &r_pi).expect("I - gamma K is invertible for gamma < 1");

    let mut q = DMatrix::zeros(n, na);
    for s in 0..n {
        for a in 0..na {
            let row = mdp.transition_row(s, a);
            let future: f64 = row.iter().zip(v.iter()).map(|(p, vs)| p * vs).sum();
            q[(s, a)] = mdp.reward(s, a) + gamma * future;
        }
    }

    let mu = stationary_of_kernel(&kernel)?;
    let nu = discounted_visitation(mdp, policy, eta);
    let j = eta.dot(&v);

    let mut grad_j = DMatrix::zeros(n, na);
    for s in 0..n {
        for a in 0..na {
            grad_j[(s, a)] = nu[s] * policy[(s, a)] * (q[(s, a)] - v[s]) / (1.0 - gamma);
        }
    }

    Ok(StationaryQuantities {
        mu,
        nu,
        j,
        grad_j,
        v,
        q,
    })
}

/// Build and solve the exact TD(L) system for `(mdp, policy, features, L)`.
pub fn td_system(
    mdp: &FiniteMdp,
    policy: &DMatrix<f64>,
    features: &FeatureMap,
    l: usize,
) -> Result<TdSystem, OracleError> {
    assert!(l >= 1, "TD(L) requires L >= 1");
    let n = mdp.num_states();
    let d = features.dim();
    let gamma = mdp.discount();
    let kernel = mdp.induced_kernel(policy);
    let mu = stationary_of_kernel(&kernel)?;
    let phi = features.matrix();

    // K^L and sum_{l<L} gamma^l K^l r_pi in one pass.
    let r_pi = mdp.mean_reward(policy);
    let mut k_pow = DMatrix::identity(n, n);
    let mut discounted_reward = DVector::zeros(n);
    let mut w = r_pi.clone();
    for step in 0..l {
        discounted_reward += &w * gamma.powi(step as i32);
        w = &kernel * w;
        k_pow = &k_pow * &kernel;
    }

    let weighted_phi = DMatrix::from_fn(n, d, |s, jj| mu[s] * phi[(s, jj)]);
    let drift = &k_pow * phi * gamma.powi(l as i32) - phi;
    let a_l = weighted_phi.transpose() * drift;
    let b_bar = weighted_phi.transpose() * discounted_reward;

    let neg_b = -&b_bar;
    let (z_star, singular) = match lu_solve(&a_l, &neg_b) {
        Some(z) if (&a_l * &z + &b_bar).norm() <= SOLVE_TOL => (z, false),
        _ => {
            // Rank-deficient exploration matrix: report a least-squares
            // solution with the flag set instead of aborting.
            let svd = a_l.clone().svd(true, true);
            let z = svd
                .solve(&neg_b, 1e-12)
                .expect("svd solve with computed factors");
            (z, true)
        }
    };

    let sym = (&a_l + a_l.transpose()) * 0.5;
    let eigs = sym.symmetric_eigen().eigenvalues;
    let lambda_margin = -eigs.max() / l as f64;

    Ok(TdSystem {
        a_l,
        b_bar,
        z_star,
        lambda_margin,
        singular,
    })
}

/// Per-agent entry of the diagnostics report.
#[derive(Debug, Clone, Serialize)]
pub struct AgentDiagnostics {
    pub agent: usize,
    /// `-lambda_max(sym(A_L)) / L`; positive certifies exploration at this
    /// policy.
    pub lambda_margin: f64,
    pub td_singular: bool,
}

/// Computable diagnostics for the exploration, feature-bound, and
/// head-spread assumptions. Diagnostics report; they never fail.
///
/// The exploration margin is certified pointwise at the supplied policies
/// only; it is not a statement over all policies.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub l: usize,
    pub num_agents: usize,
    pub per_agent: Vec<AgentDiagnostics>,
    pub feature_norm_max: f64,
    /// `lambda^+_min(Z* Z*') / K` where `Z*` stacks the per-agent fixed
    /// points as columns; zero when all fixed points vanish.
    pub nu_hat: f64,
    /// Number of eigenvalues above the relative rank threshold.
    pub rank: usize,
    /// Set when `Z* Z*'` has no eigenvalue above threshold.
    pub degenerate: bool,
}

/// Run the assumption diagnostics for one policy per agent.
pub fn check_assumptions(
    federation: &Federation,
    policies: &[DMatrix<f64>],
    l: usize,
) -> Result<AssumptionReport, OracleError> {
    assert_eq!(
        policies.len(),
        federation.num_agents(),
        "one policy per agent"
    );
    let d = federation.feature_dim();
    let k = federation.num_agents();
    let mut z_stack = DMatrix::zeros(d, k);
    let mut per_agent = Vec::with_capacity(k);
    for (idx, (mdp, policy)) in federation.agents.iter().zip(policies.iter()).enumerate() {
        let sys = td_system(mdp, policy, &federation.features, l)?;
        z_stack.set_column(idx, &sys.z_star);
        per_agent.push(AgentDiagnostics {
            agent: idx,
            lambda_margin: sys.lambda_margin,
            td_singular: sys.singular,
        });
    }
    let (nu_hat, rank, degenerate) = head_spread(&z_stack);
    Ok(AssumptionReport {
        l,
        num_agents: k,
        per_agent,
        feature_norm_max: federation.features.max_row_norm(),
        nu_hat,
        rank,
        degenerate,
    })
}

/// `(lambda^+_min(Z Z') / K, rank, degenerate)` for a `d x K` stack of fixed
/// points. Works on the Gram side when `K < d`.
pub fn head_spread(z_stack: &DMatrix<f64>) -> (f64, usize, bool) {
    let k = z_stack.ncols();
    let gram = if z_stack.nrows() <= k {
        z_stack * z_stack.transpose()
    } else {
        z_stack.transpose() * z_stack
    };
    let eigs = gram.symmetric_eigen().eigenvalues;
    let lambda_max = eigs.max().max(0.0);
    let threshold = RANK_REL_TOL * lambda_max;
    let mut above: Vec<f64> = eigs.iter().copied().filter(|e| *e > threshold).collect();
    above.sort_by(|a, b| a.partial_cmp(b).unwrap());
    match above.first() {
        Some(min) if lambda_max > 0.0 => (min / k as f64, above.len(), false),
        _ => (0.0, 0, true),
    }
}
