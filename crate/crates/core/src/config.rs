//! Run configuration: a flat, diff-able `key = value` document with a
//! version key, hard validation (unknown keys are errors), and the stepsize
//! safety conditions checked before any run starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::env::{make_lumpable_federation, make_random_federation, EnvError, Federation};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("MissingKey: {0}")]
    MissingKey(String),
    #[error("UnknownKey: {0}")]
    UnknownKey(String),
    #[error("InvalidValue: {key}: {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("StepsizeConditionViolated: {0}")]
    StepsizeConditionViolated(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pfedac,
    LocalOnly,
    FedavgFull,
    Sweep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pfedac => "pfedac",
            Mode::LocalOnly => "local_only",
            Mode::FedavgFull => "fedavg_full",
            Mode::Sweep => "sweep",
        }
    }
}

/// Environment generator selection plus its parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvSpec {
    Random {
        num_states: usize,
        feature_dim: usize,
    },
    Lumpable {
        num_groups: usize,
        states_per_group: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub version: u32,
    pub mode: Mode,
    pub env: EnvSpec,
    pub num_actions: usize,
    /// Number of agents K (absent in sweep mode, which uses `k_list`).
    pub num_agents: usize,
    /// Subspace rank r.
    pub rank: usize,
    /// Block length L.
    pub l: usize,
    /// Total rounds T.
    pub rounds: usize,
    pub gamma: f64,
    pub reward_bound: f64,
    /// Head projection radius; `None` means auto:
    /// `2 max_k ||z^{k,*}(theta_0)||` computed from the oracle at startup.
    pub u_omega: Option<f64>,
    pub zeta: f64,
    /// beta = c * zeta.
    pub c: f64,
    /// alpha = c_theta * zeta.
    pub c_theta: f64,
    pub seed: u64,
    pub workers: usize,
    /// `None` means auto: 1 when `|S| <= 64`, otherwise 10.
    pub metrics_stride: Option<usize>,
    /// `None` means auto: `ceil(0.05 T)`.
    pub burn_in: Option<usize>,
    /// Sweep mode only.
    pub k_list: Vec<usize>,
    pub output_dir: PathBuf,
    pub debug_invariants: bool,
}

impl RunConfig {
    pub fn beta(&self) -> f64 {
        self.c * self.zeta
    }

    pub fn alpha(&self) -> f64 {
        self.c_theta * self.zeta
    }

    pub fn num_states(&self) -> usize {
        match self.env {
            EnvSpec::Random { num_states, .. } => num_states,
            EnvSpec::Lumpable {
                num_groups,
                states_per_group,
            } => num_groups * states_per_group,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.env {
            EnvSpec::Random { feature_dim, .. } => feature_dim,
            EnvSpec::Lumpable { .. } => self.num_states(),
        }
    }

    pub fn resolved_burn_in(&self) -> usize {
        self.burn_in
            .unwrap_or_else(|| (0.05 * self.rounds as f64).ceil() as usize)
    }

    pub fn resolved_metrics_stride(&self) -> usize {
        self.metrics_stride
            .unwrap_or(if self.num_states() <= 64 { 1 } else { 10 })
    }

    /// Build the federation for `num_agents` agents from this config's
    /// generator. Per-agent draws use nested streams, so a smaller federation
    /// is an agent-prefix of a larger one with the same seed.
    pub fn build_federation(&self, num_agents: usize) -> Result<Federation, EnvError> {
        match self.env {
            EnvSpec::Random {
                num_states,
                feature_dim,
            } => make_random_federation(
                num_states,
                self.num_actions,
                num_agents,
                feature_dim,
                self.gamma,
                self.reward_bound,
                self.seed,
            ),
            EnvSpec::Lumpable {
                num_groups,
                states_per_group,
            } => make_lumpable_federation(
                num_groups,
                states_per_group,
                self.num_actions,
                num_agents,
                self.gamma,
                self.reward_bound,
                self.seed,
            ),
        }
    }

    /// Check the printed safety conditions for `zeta` with the resolved head
    /// radius. A violation is a hard config error naming the inequality.
    pub fn validate_stepsizes(&self, u_omega: f64) -> Result<(), ConfigError> {
        let u_delta = self.reward_bound + 2.0 * u_omega;
        let zeta = self.zeta;
        let coupling = u_delta * u_omega * zeta / (self.l as f64 * (1.0 - self.gamma));
        if coupling > 0.5 {
            return Err(ConfigError::StepsizeConditionViolated(format!(
                "U_delta*U_omega*zeta/(L*(1-gamma)) = {coupling} exceeds 1/2"
            )));
        }
        if zeta > 1.0 {
            return Err(ConfigError::StepsizeConditionViolated(format!(
                "zeta = {zeta} exceeds 1"
            )));
        }
        let sqrt6_bound = 1.0 / (6f64.sqrt() * u_delta * u_omega);
        if zeta > sqrt6_bound {
            return Err(ConfigError::StepsizeConditionViolated(format!(
                "zeta = {zeta} exceeds 1/(sqrt(6)*U_delta*U_omega) = {sqrt6_bound}"
            )));
        }
        let radius_bound = 1.0 / (2.0 * u_omega);
        if zeta > radius_bound {
            return Err(ConfigError::StepsizeConditionViolated(format!(
                "zeta = {zeta} exceeds 1/(2*U_omega) = {radius_bound}"
            )));
        }
        Ok(())
    }

    /// Render as the flat key-value document; `parse` of the result yields an
    /// equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("version", self.version.to_string());
        kv("mode", self.mode.as_str().to_string());
        match self.env {
            EnvSpec::Random {
                num_states,
                feature_dim,
            } => {
                kv("env", "random".into());
                kv("num_states", num_states.to_string());
                kv("d", feature_dim.to_string());
            }
            EnvSpec::Lumpable {
                num_groups,
                states_per_group,
            } => {
                kv("env", "lumpable".into());
                kv("num_groups", num_groups.to_string());
                kv("states_per_group", states_per_group.to_string());
            }
        }
        kv("num_actions", self.num_actions.to_string());
        if self.mode == Mode::Sweep {
            let list: Vec<String> = self.k_list.iter().map(|k| k.to_string()).collect();
            kv("k_list", list.join(","));
        } else {
            kv("k", self.num_agents.to_string());
        }
        kv("r", self.rank.to_string());
        kv("l", self.l.to_string());
        kv("t", self.rounds.to_string());
        kv("gamma", self.gamma.to_string());
        kv("u_r", self.reward_bound.to_string());
        kv(
            "u_omega",
            self.u_omega.map_or("auto".into(), |v| v.to_string()),
        );
        kv("zeta", self.zeta.to_string());
        kv("c", self.c.to_string());
        kv("c_theta", self.c_theta.to_string());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv(
            "metrics_stride",
            self.metrics_stride.map_or("auto".into(), |v| v.to_string()),
        );
        kv(
            "burn_in",
            self.burn_in.map_or("auto".into(), |v| v.to_string()),
        );
        kv("output_dir", self.output_dir.display().to_string());
        kv("debug_invariants", self.debug_invariants.to_string());
        out
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::InvalidValue {
                key: format!("line {}", lineno + 1),
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if pairs.insert(key.clone(), value).is_some() {
                return Err(ConfigError::InvalidValue {
                    key,
                    detail: "duplicate key".into(),
                });
            }
        }
        Self::from_pairs(pairs)
    }

    fn from_pairs(mut pairs: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        const KNOWN: &[&str] = &[
            "version",
            "mode",
            "env",
            "num_states",
            "d",
            "num_groups",
            "states_per_group",
            "num_actions",
            "k",
            "k_list",
            "r",
            "l",
            "t",
            "gamma",
            "u_r",
            "u_omega",
            "zeta",
            "c",
            "c_theta",
            "seed",
            "workers",
            "metrics_stride",
            "burn_in",
            "output_dir",
            "debug_invariants",
        ];
        if let Some(unknown) = pairs.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(unknown.clone()));
        }

        fn take(pairs: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
            pairs.remove(key)
        }
        fn require(pairs: &mut BTreeMap<String, String>, key: &str) -> Result<String, ConfigError> {
            take(pairs, key).ok_or_else(|| ConfigError::MissingKey(key.into()))
        }
        fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue {
                key: key.into(),
                detail: format!("cannot parse `{value}`"),
            })
        }
        fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
            if v == 0 {
                Err(ConfigError::InvalidValue {
                    key: key.into(),
                    detail: "must be >= 1".into(),
                })
            } else {
                Ok(v)
            }
        }

        let version: u32 = parse_num("version", &require(&mut pairs, "version")?)?;
        if version != 1 {
            return Err(ConfigError::InvalidValue {
                key: "version".into(),
                detail: format!("unsupported version {version}, expected 1"),
            });
        }

        let mode = match require(&mut pairs, "mode")?.as_str() {
            "pfedac" => Mode::Pfedac,
            "local_only" => Mode::LocalOnly,
            "fedavg_full" => Mode::FedavgFull,
            "sweep" => Mode::Sweep,
            other => {
                return Err(ConfigError::InvalidValue {
                    key: "mode".into(),
                    detail: format!("unknown mode `{other}`"),
                })
            }
        };

        let env = match require(&mut pairs, "env")?.as_str() {
            "random" => {
                let num_states =
                    positive("num_states", parse_num("num_states", &require(&mut pairs, "num_states")?)?)?;
                let feature_dim = positive("d", parse_num("d", &require(&mut pairs, "d")?)?)?;
                EnvSpec::Random {
                    num_states,
                    feature_dim,
                }
            }
            "lumpable" => {
                if pairs.contains_key("num_states") || pairs.contains_key("d") {
                    return Err(ConfigError::InvalidValue {
                        key: "d".into(),
                        detail: "num_states and d are derived for the lumpable env".into(),
                    });
                }
                let num_groups = positive(
                    "num_groups",
                    parse_num("num_groups", &require(&mut pairs, "num_groups")?)?,
                )?;
                let states_per_group = positive(
                    "states_per_group",
                    parse_num(
                        "states_per_group",
                        &require(&mut pairs, "states_per_group")?,
                    )?,
                )?;
                EnvSpec::Lumpable {
                    num_groups,
                    states_per_group,
                }
            }
            other => {
                return Err(ConfigError::InvalidValue {
                    key: "env".into(),
                    detail: format!("unknown generator `{other}`"),
                })
            }
        };

        let num_actions = positive(
            "num_actions",
            parse_num("num_actions", &require(&mut pairs, "num_actions")?)?,
        )?;

        let (num_agents, k_list) = if mode == Mode::Sweep {
            if pairs.contains_key("k") {
                return Err(ConfigError::InvalidValue {
                    key: "k".into(),
                    detail: "sweep mode takes k_list, not k".into(),
                });
            }
            let raw = require(&mut pairs, "k_list")?;
            let k_list: Vec<usize> = raw
                .split(',')
                .map(|s| {
                    positive("k_list", parse_num::<usize>("k_list", s.trim())?)
                })
                .collect::<Result<_, _>>()?;
            if k_list.is_empty() {
                return Err(ConfigError::InvalidValue {
                    key: "k_list".into(),
                    detail: "must list at least one K".into(),
                });
            }
            let max = *k_list.iter().max().unwrap();
            (max, k_list)
        } else {
            if pairs.contains_key("k_list") {
                return Err(ConfigError::InvalidValue {
                    key: "k_list".into(),
                    detail: "k_list is only valid in sweep mode".into(),
                });
            }
            let k = positive("k", parse_num("k", &require(&mut pairs, "k")?)?)?;
            (k, Vec::new())
        };

        let rank = positive("r", parse_num("r", &require(&mut pairs, "r")?)?)?;
        let l = positive("l", parse_num("l", &require(&mut pairs, "l")?)?)?;
        let rounds = positive("t", parse_num("t", &require(&mut pairs, "t")?)?)?;

        let gamma: f64 = parse_num("gamma", &require(&mut pairs, "gamma")?)?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(ConfigError::InvalidValue {
                key: "gamma".into(),
                detail: format!("must lie in (0,1), got {gamma}"),
            });
        }

        let reward_bound: f64 = match take(&mut pairs, "u_r") {
            Some(v) => parse_num("u_r", &v)?,
            None => 1.0,
        };
        if reward_bound <= 0.0 {
            return Err(ConfigError::InvalidValue {
                key: "u_r".into(),
                detail: "must be positive".into(),
            });
        }

        let u_omega = match take(&mut pairs, "u_omega") {
            None => None,
            Some(v) if v == "auto" => None,
            Some(v) => {
                let x: f64 = parse_num("u_omega", &v)?;
                if x <= 0.0 {
                    return Err(ConfigError::InvalidValue {
                        key: "u_omega".into(),
                        detail: "must be positive".into(),
                    });
                }
                Some(x)
            }
        };

        let zeta: f64 = parse_num("zeta", &require(&mut pairs, "zeta")?)?;
        let c: f64 = parse_num("c", &require(&mut pairs, "c")?)?;
        let c_theta: f64 = parse_num("c_theta", &require(&mut pairs, "c_theta")?)?;
        for (key, v) in [("zeta", zeta), ("c", c), ("c_theta", c_theta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::InvalidValue {
                    key: key.into(),
                    detail: "must be finite and >= 0".into(),
                });
            }
        }

        let seed: u64 = parse_num("seed", &require(&mut pairs, "seed")?)?;

        let workers = match take(&mut pairs, "workers") {
            Some(v) => positive("workers", parse_num("workers", &v)?)?,
            None => 1,
        };
        let metrics_stride = match take(&mut pairs, "metrics_stride") {
            None => None,
            Some(v) if v == "auto" => None,
            Some(v) => Some(positive(
                "metrics_stride",
                parse_num("metrics_stride", &v)?,
            )?),
        };
        let burn_in = match take(&mut pairs, "burn_in") {
            None => None,
            Some(v) if v == "auto" => None,
            Some(v) => Some(parse_num("burn_in", &v)?),
        };
        let output_dir = PathBuf::from(take(&mut pairs, "output_dir").unwrap_or_else(|| "out".into()));
        let debug_invariants = match take(&mut pairs, "debug_invariants") {
            None => false,
            Some(v) => match v.as_str() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(ConfigError::InvalidValue {
                        key: "debug_invariants".into(),
                        detail: format!("expected true|false, got `{other}`"),
                    })
                }
            },
        };

        let cfg = RunConfig {
            version,
            mode,
            env,
            num_actions,
            num_agents,
            rank,
            l,
            rounds,
            gamma,
            reward_bound,
            u_omega,
            zeta,
            c,
            c_theta,
            seed,
            workers,
            metrics_stride,
            burn_in,
            k_list,
            output_dir,
            debug_invariants,
        };
        cfg.validate_dimensions()?;
        Ok(cfg)
    }

    fn validate_dimensions(&self) -> Result<(), ConfigError> {
        let max = crate::oracle::MAX_DIM;
        if self.num_states() > max || self.feature_dim() > max {
            return Err(ConfigError::InvalidValue {
                key: "num_states".into(),
                detail: format!("|S| and d are capped at {max}"),
            });
        }
        if self.rank > self.feature_dim() {
            return Err(ConfigError::InvalidValue {
                key: "r".into(),
                detail: format!(
                    "rank {} exceeds feature dimension {}",
                    self.rank,
                    self.feature_dim()
                ),
            });
        }
        if let Some(b) = self.burn_in {
            if b >= self.rounds {
                return Err(ConfigError::InvalidValue {
                    key: "burn_in".into(),
                    detail: format!("burn_in {b} must be below t {}", self.rounds),
                });
            }
        }
        Ok(())
    }
}

/// Read and fully validate a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::parse_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        [
            "version = 1",
            "mode = pfedac",
            "env = lumpable",
            "num_groups = 2",
            "states_per_group = 2",
            "num_actions = 2",
            "k = 4",
            "r = 2",
            "l = 2",
            "t = 100",
            "gamma = 0.9",
            "zeta = 0.001",
            "c = 1.0",
            "c_theta = 1.0",
            "seed = 0",
        ]
        .join("\n")
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::parse_str(&minimal()).unwrap();
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.resolved_burn_in(), 5); // ceil(0.05 * 100)
        assert_eq!(cfg.resolved_metrics_stride(), 1); // |S| = 4 <= 64
        assert_eq!(cfg.reward_bound, 1.0);
        assert_eq!(cfg.u_omega, None);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert!(!cfg.debug_invariants);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let text = format!("{}\nzetta = 0.1", minimal());
        match RunConfig::parse_str(&text) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "zetta"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = minimal().replace("zeta = 0.001\n", "");
        match RunConfig::parse_str(&text) {
            Err(ConfigError::MissingKey(k)) => assert_eq!(k, "zeta"),
            other => panic!("expected MissingKey, got {other:?}"),
        }
    }

    #[test]
    fn stepsize_violation_names_the_inequality() {
        let mut cfg = RunConfig::parse_str(&minimal()).unwrap();
        cfg.zeta = 0.9;
        // U_omega = 2: U_delta = 5, coupling = 5*2*0.9 / (2*0.1) = 45 > 1/2.
        match cfg.validate_stepsizes(2.0) {
            Err(ConfigError::StepsizeConditionViolated(msg)) => {
                assert!(msg.contains("U_delta*U_omega*zeta/(L*(1-gamma))"), "{msg}");
            }
            other => panic!("expected violation, got {other:?}"),
        }
        // Small coupling but zeta above the sqrt(6) bound.
        cfg.zeta = 0.05;
        cfg.l = 100;
        match cfg.validate_stepsizes(2.0) {
            Err(ConfigError::StepsizeConditionViolated(msg)) => {
                assert!(msg.contains("sqrt(6)"), "{msg}");
            }
            other => panic!("expected violation, got {other:?}"),
        }
        cfg.zeta = 0.0;
        cfg.validate_stepsizes(2.0).unwrap();
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::parse_str(&minimal()).unwrap();
        cfg.u_omega = Some(1.25);
        cfg.metrics_stride = Some(5);
        cfg.burn_in = Some(7);
        let text = cfg.render();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sweep_mode_takes_k_list() {
        let text = minimal()
            .replace("mode = pfedac", "mode = sweep")
            .replace("k = 4", "k_list = 4, 16");
        let cfg = RunConfig::parse_str(&text).unwrap();
        assert_eq!(cfg.k_list, vec![4, 16]);
        assert_eq!(cfg.num_agents, 16);
        let round = RunConfig::parse_str(&cfg.render()).unwrap();
        assert_eq!(cfg, round);
    }

    #[test]
    fn sweep_and_k_are_mutually_exclusive() {
        let text = format!("{}\nk_list = 2,4", minimal());
        assert!(matches!(
            RunConfig::parse_str(&text),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn rejects_bad_gamma_and_version() {
        let text = minimal().replace("gamma = 0.9", "gamma = 1.0");
        assert!(matches!(
            RunConfig::parse_str(&text),
            Err(ConfigError::InvalidValue { .. })
        ));
        let text = minimal().replace("version = 1", "version = 2");
        assert!(matches!(
            RunConfig::parse_str(&text),
            Err(ConfigError::InvalidValue { .. })
        ));
    }
}
