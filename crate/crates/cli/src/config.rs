use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pcal::conductivity::{ConductivityField, Term};
use pcal::forward::PotentialField;
use pcal::geometry::P2;
use pcal::oracle::bump;
use pcal::recon::{DualSpace, DEFAULT_GAMMA_STAR, GAMMA_STAR_MAX};
use pcal::{CrossSectionMesh, CrossSectionSpec};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Recorded in reports; every pipeline stage runs on one thread.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub cross_section: CrossSectionSpec,
    #[serde(default)]
    pub faces: FacesConfig,
    #[serde(default)]
    pub fiber: FiberConfig,
    #[serde(default)]
    pub potentials: PotentialsConfig,
    pub cgo: Option<CgoSection>,
    pub recover: Option<RecoverSection>,
    pub stability: Option<StabilitySection>,
    pub conductivity: Option<ConductivitySection>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacesConfig {
    pub xi0: P2,
    /// Half-width of the input and output arcs around the probe direction; the whole
    /// boundary when absent.
    pub half_width: Option<f64>,
}

impl Default for FacesConfig {
    fn default() -> Self {
        FacesConfig { xi0: [1.0, 0.0], half_width: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    pub thetas: Vec<f64>,
    pub kmax: usize,
}

impl Default for FiberConfig {
    fn default() -> Self {
        FiberConfig { thetas: vec![0.5], kmax: 1 }
    }
}

/// `amp cos(2 pi m x1) (1 - |x' - center|^2 / rho^2)^3`, or a constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PotentialTerm {
    Constant {
        c: f64,
    },
    Bump {
        amp: f64,
        rho: f64,
        #[serde(default)]
        center: P2,
        #[serde(default)]
        m: u32,
    },
}

impl PotentialTerm {
    fn value(&self, x1: f64, p: P2) -> f64 {
        match *self {
            PotentialTerm::Constant { c } => c,
            PotentialTerm::Bump { amp, rho, center, m } => {
                amp * (2.0 * PI * m as f64 * x1).cos() * bump(rho, [p[0] - center[0], p[1] - center[1]])
            }
        }
    }

    fn order(&self) -> usize {
        match *self {
            PotentialTerm::Constant { .. } => 0,
            PotentialTerm::Bump { m, .. } => m as usize,
        }
    }
}

pub fn potential(mesh: &CrossSectionMesh, terms: &[PotentialTerm]) -> PotentialField {
    let mmax = terms.iter().map(PotentialTerm::order).max().unwrap_or(0);
    PotentialField::from_fn(mesh, mmax, |x1, p| terms.iter().map(|t| t.value(x1, p)).sum())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialsConfig {
    #[serde(default)]
    pub v1: Vec<PotentialTerm>,
    #[serde(default)]
    pub v2: Vec<PotentialTerm>,
    /// Direction `W` of the stability ladder `V1 + s W`.
    #[serde(default)]
    pub perturbation: Vec<PotentialTerm>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgoSection {
    pub k: i64,
    pub eta: P2,
    /// Used when `taus` is empty.
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub taus: Vec<f64>,
    #[serde(default = "default_tau_floor")]
    pub tau_floor: f64,
    pub jmax: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_r() -> f64 {
    0.5
}

fn default_tau_floor() -> f64 {
    20.0
}

fn default_eps() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverSection {
    pub ks: Vec<i64>,
    pub step: f64,
    pub eta_max: f64,
    #[serde(default = "default_tau_floor")]
    pub tau_floor: f64,
    /// Policy slope; defaults to twice the largest cross-section radius.
    pub c_hat: Option<f64>,
    #[serde(default = "default_n1")]
    pub n1: usize,
    /// Known DN difference norm, if any.
    pub gamma: Option<f64>,
}

fn default_n1() -> usize {
    16
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub scales: Vec<f64>,
    #[serde(default = "default_gamma_star")]
    pub gamma_star: f64,
    #[serde(default = "default_n1")]
    pub n1: usize,
    #[serde(default = "default_space")]
    pub space: DualSpace,
}

fn default_gamma_star() -> f64 {
    DEFAULT_GAMMA_STAR
}

fn default_space() -> DualSpace {
    DualSpace::Dirichlet
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivitySection {
    pub a1: Vec<Term>,
    pub a_star: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    #[serde(default)]
    pub perturbation: Vec<Term>,
    /// Scale of the single pair used by `check` and `sigma`.
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub scales: Vec<f64>,
    #[serde(default = "default_mmax")]
    pub mmax: usize,
    #[serde(default = "default_alpha_kmax")]
    pub alpha_kmax: usize,
    #[serde(default = "default_n1")]
    pub n1: usize,
    #[serde(default = "default_gamma_star")]
    pub gamma_star: f64,
}

fn default_s() -> f64 {
    0.25
}

fn default_mmax() -> usize {
    2
}

fn default_alpha_kmax() -> usize {
    3
}

impl ConductivitySection {
    pub fn a1(&self) -> Result<ConductivityField, Failure> {
        Ok(ConductivityField::new(self.a1.clone(), self.a_star, self.m_plus, self.m_minus)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Largest accepted ratio spread of a fitted stability constant.
    pub max_spread: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { max_spread: 10.0 }
    }
}

/// Parsed configuration with the hash of its source text.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn load(path: &Path) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Failure::validation(format!("config {}: {e}", path.display())))?;
    let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok(Loaded { config, hash })
}

fn positive(errs: &mut Vec<String>, key: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errs.push(format!("{key}: must be positive and finite, got {v}"));
    }
}

fn finite_all(errs: &mut Vec<String>, key: &str, vs: &[f64]) {
    if let Some(v) = vs.iter().find(|v| !v.is_finite()) {
        errs.push(format!("{key}: contains non-finite value {v}"));
    }
}

fn check_terms(errs: &mut Vec<String>, key: &str, terms: &[PotentialTerm]) {
    for (i, t) in terms.iter().enumerate() {
        match *t {
            PotentialTerm::Constant { c } => finite_all(errs, &format!("{key}[{i}].c"), &[c]),
            PotentialTerm::Bump { amp, rho, center, .. } => {
                finite_all(errs, &format!("{key}[{i}]"), &[amp, center[0], center[1]]);
                positive(errs, &format!("{key}[{i}].rho"), rho);
            }
        }
    }
}

impl ExperimentConfig {
    /// Every offending key, one message each; empty when the configuration is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!("schema_version: expected {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if self.workers == 0 {
            errs.push("workers: must be at least 1".into());
        }
        if let Err(e) = self.cross_section.validate() {
            errs.push(format!("cross_section: {e}"));
        }
        let xi = self.faces.xi0;
        if (xi[0].hypot(xi[1]) - 1.0).abs() > 1e-9 {
            errs.push(format!("faces.xi0: must be a unit vector, got {xi:?}"));
        }
        if let Some(w) = self.faces.half_width {
            if !(w > 0.0 && w <= PI) {
                errs.push(format!("faces.half_width: must lie in (0, pi], got {w}"));
            }
        }
        if self.fiber.thetas.is_empty() {
            errs.push("fiber.thetas: must not be empty".into());
        }
        if let Some(t) = self.fiber.thetas.iter().find(|t| !(0.0..2.0 * PI).contains(*t)) {
            errs.push(format!("fiber.thetas: {t} is outside [0, 2 pi)"));
        }
        check_terms(&mut errs, "potentials.v1", &self.potentials.v1);
        check_terms(&mut errs, "potentials.v2", &self.potentials.v2);
        check_terms(&mut errs, "potentials.perturbation", &self.potentials.perturbation);
        if let Some(c) = &self.cgo {
            if c.eta[0] == 0.0 && c.eta[1] == 0.0 {
                errs.push("cgo.eta: must be nonzero, the direction xi and the vector ell are built orthogonal to (2 pi k, eta)".into());
            }
            finite_all(&mut errs, "cgo.eta", &c.eta);
            if c.taus.is_empty() && !(c.r >= 0.0 && c.r.is_finite()) {
                errs.push(format!("cgo.r: must be nonnegative, got {}", c.r));
            }
            if !(0.0..2.0 * PI).contains(&c.theta) {
                errs.push(format!("cgo.theta: {} is outside [0, 2 pi)", c.theta));
            }
            for t in &c.taus {
                if !(*t >= c.tau_floor) {
                    errs.push(format!("cgo.taus: {t} is below cgo.tau_floor = {}", c.tau_floor));
                }
            }
            positive(&mut errs, "cgo.tau_floor", c.tau_floor);
            positive(&mut errs, "cgo.eps", c.eps);
        }
        if let Some(r) = &self.recover {
            if r.ks.is_empty() {
                errs.push("recover.ks: must not be empty".into());
            }
            positive(&mut errs, "recover.step", r.step);
            positive(&mut errs, "recover.eta_max", r.eta_max);
            positive(&mut errs, "recover.tau_floor", r.tau_floor);
            if let Some(c) = r.c_hat {
                positive(&mut errs, "recover.c_hat", c);
            }
            if r.n1 < 2 {
                errs.push("recover.n1: must be at least 2".into());
            }
        }
        if let Some(s) = &self.stability {
            if s.scales.is_empty() {
                errs.push("stability.scales: must not be empty".into());
            }
            finite_all(&mut errs, "stability.scales", &s.scales);
            if !(s.gamma_star > 0.0 && s.gamma_star < GAMMA_STAR_MAX) {
                errs.push(format!("stability.gamma_star: must lie in (0, e^-e), got {}", s.gamma_star));
            }
            if s.n1 < 2 {
                errs.push("stability.n1: must be at least 2".into());
            }
            if self.potentials.perturbation.is_empty() {
                errs.push("potentials.perturbation: required by the stability ladder".into());
            }
        }
        if let Some(c) = &self.conductivity {
            if c.a1.is_empty() {
                errs.push("conductivity.a1: must have at least one term".into());
            }
            positive(&mut errs, "conductivity.a_star", c.a_star);
            positive(&mut errs, "conductivity.m_plus", c.m_plus);
            if !(c.m_minus >= 0.0) {
                errs.push(format!("conductivity.m_minus: must be nonnegative, got {}", c.m_minus));
            }
            finite_all(&mut errs, "conductivity.scales", &c.scales);
            if !(c.gamma_star > 0.0 && c.gamma_star < GAMMA_STAR_MAX) {
                errs.push(format!("conductivity.gamma_star: must lie in (0, e^-e), got {}", c.gamma_star));
            }
        }
        positive(&mut errs, "tolerances.max_spread", self.tolerances.max_spread);
        errs
    }
}
