//! Run configuration: budget profiles, TOML loading with profile defaults,
//! and the canonical echo used to identify a run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ego::{EgoConfig, EgoVariant};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::marl::LearnerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Budgets small enough for a laptop CPU.
    Desk,
    /// Published budgets.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidConfig(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacopConfig {
    pub profile: Profile,
    /// Scenario preset name.
    pub env: String,
    pub seed: u64,
    pub n_p: usize,
    pub alpha_div: f64,
    pub alpha_incom: f64,
    pub alpha_reg: f64,
    pub lambda: f64,
    pub xi: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Teammate steps per mutation.
    pub t_tm: usize,
    /// Ego steps per teammate group.
    pub t_ego: usize,
    /// Teammate steps used to pre-train the first population.
    pub pretrain_steps: usize,
    /// Episodes per estimate inside the loop (selection, stopping criterion).
    pub eval_episodes: usize,
    /// Episodes per pairing when scoring against an evaluation set.
    pub test_episodes: usize,
    pub meta_episodes_per_head: usize,
    pub expansion_episodes: usize,
    pub reg_p: f64,
    pub ewc_mu: f64,
    pub ewc_fisher_episodes: usize,
    pub fcp_population: usize,
    /// Population steps for the population-then-best-response baselines.
    pub baseline_tm_steps: usize,
    /// Best-response steps for the same baselines.
    pub baseline_ego_steps: usize,
    /// Fill the transfer matrix after every ego update.
    pub track_alpha: bool,
    /// Train a fresh ego per group at the end of a run for forward transfer.
    pub alpha_tilde: bool,
    pub learner: LearnerConfig,
}

impl MacopConfig {
    pub fn profile(profile: Profile) -> Self {
        let (t_tm, t_ego, n_min, n_max, baseline_tm, baseline_ego) = match profile {
            Profile::Desk => (20_000, 10_000, 3, 6, 60_000, 120_000),
            Profile::Paper => (500_000, 125_000, 4, 10, 1_000_000, 1_000_000),
        };
        // short desk budgets need more gradient steps per collected round
        let updates_per_round = match profile {
            Profile::Desk => 2,
            Profile::Paper => 1,
        };
        MacopConfig {
            profile,
            env: "lbf4".into(),
            seed: 0,
            n_p: 4,
            alpha_div: 0.1,
            alpha_incom: 0.1,
            alpha_reg: 10.0,
            lambda: 0.0,
            xi: 0.5,
            n_min,
            n_max,
            t_tm,
            t_ego,
            pretrain_steps: t_tm,
            eval_episodes: 32,
            test_episodes: 32,
            meta_episodes_per_head: 4,
            expansion_episodes: 32,
            reg_p: 2.0,
            ewc_mu: 1.0,
            ewc_fisher_episodes: 32,
            fcp_population: 6,
            baseline_tm_steps: baseline_tm,
            baseline_ego_steps: baseline_ego,
            track_alpha: true,
            alpha_tilde: false,
            learner: LearnerConfig {
                updates_per_round,
                ..LearnerConfig::default()
            },
        }
    }

    pub fn desk() -> Self {
        Self::profile(Profile::Desk)
    }

    pub fn paper() -> Self {
        Self::profile(Profile::Paper)
    }

    /// Parse a TOML document. Keys absent from the document take the defaults
    /// of its `profile` (desk when unset); unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::InvalidConfig("profile must be a string".into())),
        };
        let mut base = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        merge(&mut base, user);
        let cfg: MacopConfig = base.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        EnvSpec::preset(&self.env)?;
        self.learner.validate()?;
        if self.n_p == 0 || self.fcp_population == 0 {
            return bad("population sizes must be >= 1");
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad("need 1 <= n_min <= n_max");
        }
        if self.t_tm == 0 || self.t_ego == 0 || self.baseline_tm_steps == 0 || self.baseline_ego_steps == 0 {
            return bad("budgets must be > 0");
        }
        if self.eval_episodes == 0 || self.test_episodes == 0 || self.expansion_episodes == 0 {
            return bad("episode counts must be >= 1");
        }
        let coeffs = [self.alpha_div, self.alpha_incom, self.alpha_reg, self.lambda, self.xi, self.ewc_mu];
        if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("coefficients must be finite and >= 0");
        }
        if self.reg_p < 1.0 {
            return bad("reg_p must be >= 1");
        }
        Ok(())
    }

    pub fn ego_config(&self, variant: EgoVariant) -> EgoConfig {
        EgoConfig {
            variant,
            alpha_reg: self.alpha_reg,
            reg_p: self.reg_p,
            lambda: self.lambda,
            expansion_episodes: self.expansion_episodes,
            meta_episodes_per_head: self.meta_episodes_per_head,
            ewc_mu: self.ewc_mu,
            ewc_fisher_episodes: self.ewc_fisher_episodes,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Teammate-generation baselines and ego-side variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Fcp,
    Trajedi,
    Lipo,
    Finetune,
    SingleHead,
    RandomHead,
    Ewc,
    Clear,
    MacopNoIncom,
    MacopNoDiv,
    MacopNoIncomDiv,
    MacopNoReg,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 12] = [
        BaselineKind::Fcp,
        BaselineKind::Trajedi,
        BaselineKind::Lipo,
        BaselineKind::Finetune,
        BaselineKind::SingleHead,
        BaselineKind::RandomHead,
        BaselineKind::Ewc,
        BaselineKind::Clear,
        BaselineKind::MacopNoIncom,
        BaselineKind::MacopNoDiv,
        BaselineKind::MacopNoIncomDiv,
        BaselineKind::MacopNoReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Fcp => "fcp",
            BaselineKind::Trajedi => "trajedi",
            BaselineKind::Lipo => "lipo",
            BaselineKind::Finetune => "finetune",
            BaselineKind::SingleHead => "single_head",
            BaselineKind::RandomHead => "random_head",
            BaselineKind::Ewc => "ewc",
            BaselineKind::Clear => "clear",
            BaselineKind::MacopNoIncom => "macop_no_incom",
            BaselineKind::MacopNoDiv => "macop_no_div",
            BaselineKind::MacopNoIncomDiv => "macop_no_incom_div",
            BaselineKind::MacopNoReg => "macop_no_reg",
        }
    }
}

/// Any trainable method: the full algorithm or one of its baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Algo {
    Macop,
    Baseline(BaselineKind),
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Macop => "macop",
            Algo::Baseline(k) => k.name(),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "macop" {
            return Ok(Algo::Macop);
        }
        BaselineKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .map(|&k| Algo::Baseline(k))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm '{s}'")))
    }
}

impl From<Algo> for String {
    fn from(a: Algo) -> String {
        a.name().to_string()
    }
}

impl TryFrom<String> for Algo {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// sha256 over the algorithm name and the canonical TOML echo.
pub fn run_id(algo: Algo, config: &MacopConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(algo.name().as_bytes());
    h.update([0u8]);
    h.update(config.to_toml_string()?.as_bytes());
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_table() {
        let c = MacopConfig::paper();
        assert_eq!((c.n_p, c.n_min, c.n_max, c.t_tm, c.t_ego), (4, 4, 10, 500_000, 125_000));
        assert_eq!((c.alpha_div, c.alpha_incom, c.alpha_reg, c.lambda, c.xi), (0.1, 0.1, 10.0, 0.0, 0.5));
        let d = MacopConfig::desk();
        assert_eq!((d.n_p, d.n_min, d.n_max, d.t_tm, d.t_ego), (4, 3, 6, 20_000, 10_000));
    }

    #[test]
    fn toml_overrides_and_rejects_unknown_keys() {
        let c = MacopConfig::from_toml_str("profile = \"paper\"\nxi = 0.7\n[learner]\nlr = 0.001\n").unwrap();
        assert_eq!(c.xi, 0.7);
        assert_eq!(c.learner.lr, 0.001);
        assert_eq!(c.learner.gamma, 0.99);
        assert_eq!(c.n_max, 10);
        assert!(MacopConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(MacopConfig::from_toml_str("[learner]\nbogus = 1\n").is_err());
        assert!(MacopConfig::from_toml_str("n_min = 7\n").is_err());
        assert!(MacopConfig::from_toml_str("env = \"nowhere\"\n").is_err());
    }

    #[test]
    fn echo_round_trips_and_ids_differ_by_algo() {
        let c = MacopConfig::desk();
        let back = MacopConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        let a = run_id(Algo::Macop, &c).unwrap();
        let b = run_id(Algo::Baseline(BaselineKind::Finetune), &c).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, run_id(Algo::Macop, &back).unwrap());
    }

    #[test]
    fn algo_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<Algo>().unwrap(), Algo::Baseline(k));
        }
        assert_eq!("macop".parse::<Algo>().unwrap(), Algo::Macop);
        assert!("qmix".parse::<Algo>().is_err());
    }
}
