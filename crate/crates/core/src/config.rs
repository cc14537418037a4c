//! Run configuration: model, schedule, extension and sweep keys in one flat
//! TOML table.

use crate::model::{GlueMatrices, ModelError, NormalForm};
use crate::schedule::{
    build_chain, compute_orders, extend_chain, leaf_sequence, ChainSchedule, ExtensionParams, ModelConstants,
    OrderParams, ScheduleError,
};
use crate::twist::{TwistError, TwistMap};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<TwistError> for ConfigError {
    fn from(e: TwistError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<ScheduleError> for ConfigError {
    fn from(e: ScheduleError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

fn d_leaves() -> usize {
    10
}
fn d_leaf_start() -> f64 {
    0.05
}
fn d_leaf_spacing_scale() -> f64 {
    0.1
}
fn d_eta() -> f64 {
    0.1
}
fn d_slack_floor() -> f64 {
    0.05
}
fn d_beam_width() -> usize {
    4
}
fn d_depth() -> usize {
    30
}
fn d_tol() -> f64 {
    1e-9
}
fn d_samples() -> usize {
    6
}
fn d_q_start() -> f64 {
    0.25
}
fn d_theta_start() -> f64 {
    0.5
}
fn d_a_star() -> f64 {
    0.1
}
fn d_k_cap() -> f64 {
    10.0
}
fn d_drift() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epsilon: f64,
    pub sigma: f64,
    pub tau: f64,
    pub upsilon: f64,
    pub k: f64,
    pub n: usize,
    pub m: usize,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub mu_minus: f64,
    pub mu_plus: f64,
    #[serde(rename = "T_minus")]
    pub t_minus: f64,
    #[serde(rename = "T_plus")]
    pub t_plus: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_prime")]
    pub r_prime: f64,
    pub delta_s: f64,
    pub delta_u: f64,
    #[serde(rename = "N_plus")]
    pub n_plus: u64,
    #[serde(rename = "N_minus")]
    pub n_minus: u64,
    pub nu: f64,
    pub nu_prime: f64,
    pub omega_prime: f64,
    pub seed: u64,

    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub big_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_star: Option<Vec<f64>>,
    #[serde(rename = "C_ext", default, skip_serializing_if = "Option::is_none")]
    pub c_ext: Option<f64>,
    #[serde(default = "d_a_star")]
    pub a_star: f64,
    #[serde(rename = "K_cap", default = "d_k_cap")]
    pub k_cap: f64,
    #[serde(default = "d_theta_start")]
    pub theta_start: f64,

    #[serde(default = "d_leaves")]
    pub leaves: usize,
    #[serde(default = "d_leaf_start")]
    pub leaf_start: f64,
    #[serde(default = "d_leaf_spacing_scale")]
    pub leaf_spacing_scale: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_slack_floor")]
    pub slack_floor: f64,
    #[serde(default = "d_beam_width")]
    pub beam_width: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_q_start")]
    pub q_start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_cap: Option<u64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_list: Option<Vec<f64>>,
    #[serde(default = "d_drift")]
    pub drift: f64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Uniform benchmark: all orders zero, ε = 0.1, k = 8.
    pub fn uniform() -> Self {
        Self {
            epsilon: 0.1,
            sigma: 0.0,
            tau: 0.0,
            upsilon: 0.0,
            k: 8.0,
            n: 1,
            m: 1,
            lambda_minus: 0.49,
            lambda_plus: 0.51,
            mu_minus: 1.96,
            mu_plus: 2.04,
            t_minus: 0.9,
            t_plus: 1.1,
            c: 1e-3,
            r: std::f64::consts::PI * 0.1,
            r_prime: 0.1,
            delta_s: 0.01,
            delta_u: 0.04,
            n_plus: 1,
            n_minus: 1,
            nu: 0.1,
            nu_prime: 0.1,
            omega_prime: 0.05,
            seed: 7,
            big_l: None,
            ell1: None,
            ell2: None,
            xi_star: None,
            c_ext: None,
            a_star: d_a_star(),
            k_cap: d_k_cap(),
            theta_start: d_theta_start(),
            leaves: 10,
            leaf_start: 0.05,
            leaf_spacing_scale: 0.1,
            eta: 0.02,
            slack_floor: d_slack_floor(),
            beam_width: d_beam_width(),
            depth: d_depth(),
            tol: d_tol(),
            samples: d_samples(),
            q_start: d_q_start(),
            n_cap: None,
            m_cap: None,
            epsilon_list: None,
            drift: d_drift(),
        }
    }

    /// The uniform case on three links with one θ and one ξ direction and
    /// unit coupling.
    pub fn extended(big_l: f64) -> Self {
        Self {
            big_l: Some(big_l),
            ell1: Some(1),
            ell2: Some(1),
            xi_star: Some(vec![0.5]),
            c_ext: Some(1.0),
            leaves: 3,
            ..Self::uniform()
        }
    }

    /// Chain over `leaves` leaves, extended when the extension keys are set.
    pub fn schedule(&self) -> Result<ChainSchedule, ScheduleError> {
        let constants = self.constants().map_err(|e| ScheduleError::Invalid(e.to_string()))?;
        let chain = build_chain(&self.orders()?, &constants, &self.leaf_ps(self.leaves))?;
        match self.extension() {
            Some(ext) => extend_chain(&chain, &ext, self.a_star, self.k_cap),
            None => Ok(chain),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        for (name, v) in [("sigma", self.sigma), ("tau", self.tau), ("upsilon", self.upsilon), ("k", self.k)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return bad(format!("epsilon {} not in (0, 0.5]", self.epsilon));
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be positive".into());
        }
        if !(self.t_minus > 0.0 && self.t_minus <= 1.0) {
            return bad(format!("T_minus {} not in (0, 1]", self.t_minus));
        }
        let a = self.twist_amplitude();
        let et = self.epsilon.powf(self.tau);
        if self.t_plus < et * (1.0 + a) * (1.0 - 1e-12) {
            return bad(format!("T_plus {} below the twist bound {}", self.t_plus, et * (1.0 + a)));
        }
        let r_min = std::f64::consts::PI * a * et;
        if self.r < r_min * (1.0 - 1e-12) {
            return bad(format!("R {} below the remainder bound {r_min}", self.r));
        }
        if !(self.c >= 0.0 && self.r_prime > 0.0 && self.nu > 0.0 && self.nu_prime > 0.0 && self.omega_prime >= 0.0) {
            return bad("C ≥ 0, R_prime > 0, nu > 0, nu_prime > 0, omega_prime ≥ 0 required".into());
        }
        if self.leaves == 0 || self.beam_width == 0 || self.samples == 0 {
            return bad("leaves, beam_width and samples must be positive".into());
        }
        if !(self.tol > 0.0 && self.leaf_spacing_scale > 0.0 && self.drift > 0.0) {
            return bad("tol, leaf_spacing_scale and drift must be positive".into());
        }
        if let Some(list) = &self.epsilon_list {
            if list.iter().any(|e| !(*e > 0.0 && *e <= 0.5)) {
                return bad("epsilon_list entries must lie in (0, 0.5]".into());
            }
        }
        let ext = [self.big_l.is_some(), self.ell1.is_some(), self.ell2.is_some(), self.xi_star.is_some(), self.c_ext.is_some()];
        if ext.iter().any(|&b| b) && !ext.iter().all(|&b| b) {
            return bad("extended system needs all of L, ell1, ell2, xi_star, C_ext".into());
        }
        if let (Some(ell2), Some(xi)) = (self.ell2, &self.xi_star) {
            if xi.len() != ell2 {
                return bad(format!("xi_star has {} entries, ell2 = {ell2}", xi.len()));
            }
        }
        self.normal_form()?;
        GlueMatrices::default_for(self.m, self.n).constants()?;
        Ok(())
    }

    /// Nonlinearity `a` of the twist, from `T₋ = 1 − |a|`.
    pub fn twist_amplitude(&self) -> f64 {
        1.0 - self.t_minus
    }

    pub fn orders(&self) -> Result<OrderParams, ScheduleError> {
        compute_orders(self.sigma, self.tau, self.upsilon, self.k)
    }

    pub fn twist(&self) -> Result<TwistMap, ConfigError> {
        Ok(TwistMap::new(self.n, self.epsilon, self.tau, self.k, self.c)?.with_nonlinearity(self.twist_amplitude())?)
    }

    pub fn normal_form(&self) -> Result<NormalForm, ConfigError> {
        Ok(NormalForm::new(
            self.m,
            (self.lambda_minus, self.lambda_plus),
            (self.mu_minus, self.mu_plus),
            self.delta_s,
            self.delta_u,
            self.twist()?,
        )?)
    }

    pub fn glue(&self) -> GlueMatrices {
        GlueMatrices::default_for(self.m, self.n)
    }

    pub fn constants(&self) -> Result<ModelConstants, ConfigError> {
        let twist = self.twist()?;
        Ok(ModelConstants {
            epsilon: self.epsilon,
            lambda_minus: self.lambda_minus,
            lambda_plus: self.lambda_plus,
            mu_minus: self.mu_minus,
            mu_plus: self.mu_plus,
            t_minus: self.t_minus,
            t_plus: self.t_plus,
            c: twist.lemma_constant(),
            r: self.r,
            r_prime: self.r_prime,
            glue: self.glue().constants()?,
            nu: self.nu,
            nu_prime: self.nu_prime,
            omega_prime: self.omega_prime,
            eta: self.eta,
            slack_floor: self.slack_floor,
            n_plus: self.n_plus,
            n_minus: self.n_minus,
            n_cap: self.n_cap,
            m_cap: self.m_cap,
        })
    }

    pub fn leaf_spacing(&self) -> f64 {
        self.leaf_spacing_scale * self.epsilon.powf(self.upsilon)
    }

    pub fn leaf_ps(&self, count: usize) -> Vec<f64> {
        leaf_sequence(self.leaf_start, self.leaf_spacing(), count)
    }

    pub fn extension(&self) -> Option<ExtensionParams> {
        let (big_l, ell1, ell2, xi, c_ext) = (self.big_l?, self.ell1?, self.ell2?, self.xi_star.clone()?, self.c_ext?);
        Some(ExtensionParams {
            ell1,
            ell2,
            c_ext,
            big_l,
            xi_star: xi,
            omega_theta: (1..=ell1).map(|j| (j as f64 * std::f64::consts::SQRT_2).fract()).collect(),
            theta_start: vec![self.theta_start; ell1],
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_round_trips_through_toml() {
        let cfg = RunConfig::uniform();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = RunConfig::uniform();
        cfg.epsilon = 0.7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::uniform();
        cfg.t_plus = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::uniform();
        cfg.big_l = Some(3.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_mandatory_key() {
        let text = RunConfig::uniform().to_toml().replace("mu_plus", "# mu_plus");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn constants_follow_twist() {
        let cfg = RunConfig::uniform();
        let c = cfg.constants().unwrap();
        assert!((c.c - 1e-3 * 3.1).abs() < 1e-15);
        assert_eq!(c.glue, [1.0, 0.1, 0.1, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
