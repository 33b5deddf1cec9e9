//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the desk defaults; unknown keys
//! anywhere are rejected. A minimal file:
//!
//! ```toml
//! seed = 7
//!
//! [mesh]
//! nx = 32
//! nz = 8
//!
//! [prior]
//! gamma = 10.0
//! delta = 1e-5
//! kappa = 1.0
//!
//! [[qoi]]
//! tag = "outflow"
//! boundary = "right"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjoint::MisfitMode;
use crate::error::{Error, Result};
use crate::inversion::NewtonCgConfig;
use crate::lowrank::GevdConfig;
use crate::mesh::{DomainSpec, PressureSpace};
use crate::prediction::QoiSpec;
use crate::prior::PriorParams;
use crate::stokes::{NewtonConfig, PhysicsParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub nx: usize,
    pub nz: usize,
    /// Velocity polynomial degree.
    pub k: usize,
    pub pressure_space: PressureSpace,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            nx: 32,
            nz: 8,
            k: 2,
            pressure_space: PressureSpace::DiscP,
        }
    }
}

/// Gaussian bump `amplitude * exp(-((x - center) / width)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

/// Synthetic "true" basal field: a constant background plus bumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub background: f64,
    pub bumps: Vec<Bump>,
    /// Refinement factor of the mesh that generates the data.
    pub fine_factor: usize,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            background: 1.0,
            bumps: vec![Bump {
                amplitude: -2.0,
                center: 55.0,
                width: 10.0,
            }],
            fine_factor: 2,
        }
    }
}

impl TruthConfig {
    pub fn eval(&self, x: f64) -> f64 {
        self.background
            + self
                .bumps
                .iter()
                .map(|b| b.amplitude * (-((x - b.center) / b.width).powi(2)).exp())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Noise standard deviation relative to the local speed.
    pub level: f64,
    pub eps_norm: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            level: 0.1,
            eps_norm: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    /// `exp(beta_init)` as a multiple of the median of `exp(beta_true)`.
    pub init_factor: f64,
    pub solver: NewtonCgConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            init_factor: 1000.0,
            solver: NewtonCgConfig::default(),
        }
    }
}

/// Deterministic Tikhonov inversions swept over `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LCurveConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Number of log-spaced values.
    pub count: usize,
    /// Explicit values; overrides the log-spaced range when nonempty.
    pub gammas: Vec<f64>,
    pub delta: f64,
    pub kappa: f64,
    pub misfit: MisfitMode,
}

impl Default for LCurveConfig {
    fn default() -> Self {
        Self {
            gamma_min: 1e-4,
            gamma_max: 1e2,
            count: 13,
            gammas: Vec::new(),
            delta: 1e-8,
            kappa: 0.5,
            misfit: MisfitMode::Deterministic,
        }
    }
}

impl LCurveConfig {
    /// Values in ascending order.
    pub fn values(&self) -> Result<Vec<f64>> {
        if !self.gammas.is_empty() {
            let mut g = self.gammas.clone();
            g.sort_by(f64::total_cmp);
            return Ok(g);
        }
        if !(self.gamma_min > 0.0 && self.gamma_max > self.gamma_min) || self.count < 2 {
            return Err(Error::Config("L-curve range needs 0 < gamma_min < gamma_max and count >= 2".into()));
        }
        let (a, b) = (self.gamma_min.log10(), self.gamma_max.log10());
        Ok((0..self.count)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (self.count - 1) as f64))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub count: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { count: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub threads: usize,
    pub domain: DomainSpec,
    pub mesh: MeshConfig,
    pub physics: PhysicsParams,
    pub prior: PriorParams,
    pub truth: TruthConfig,
    pub noise: NoiseConfig,
    pub forward: NewtonConfig,
    pub inversion: InversionConfig,
    pub lcurve: LCurveConfig,
    pub gevd: GevdConfig,
    pub sampling: SamplingConfig,
    pub qoi: Vec<QoiSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut east = QoiSpec::new("below_sea_level", crate::mesh::BoundaryTag::Right);
        east.z_range = Some([-1e3, DomainSpec::desk_default().sea_level]);
        Self {
            seed: 2024,
            output_dir: "out".into(),
            threads: 1,
            domain: DomainSpec::desk_default(),
            mesh: MeshConfig::default(),
            physics: PhysicsParams::default(),
            prior: PriorParams::bayesian_default(),
            truth: TruthConfig::default(),
            noise: NoiseConfig::default(),
            forward: NewtonConfig::default(),
            inversion: InversionConfig::default(),
            lcurve: LCurveConfig::default(),
            gevd: GevdConfig::default(),
            sampling: SamplingConfig::default(),
            qoi: vec![QoiSpec::outflow(), east],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.physics.validate()?;
        self.prior.validate()?;
        self.forward.validate()?;
        self.inversion.solver.validate()?;
        self.gevd.validate()?;
        if self.mesh.nx == 0 || self.mesh.nz == 0 || !(2..=3).contains(&self.mesh.k) {
            return Err(Error::Config(format!("invalid mesh {:?}", self.mesh)));
        }
        if self.truth.fine_factor == 0 {
            return Err(Error::Config("truth.fine_factor must be at least 1".into()));
        }
        if !(self.noise.level >= 0.0 && self.noise.eps_norm > 0.0) {
            return Err(Error::Config("noise level must be nonnegative and eps_norm positive".into()));
        }
        if !(self.inversion.init_factor > 0.0) {
            return Err(Error::Config("inversion.init_factor must be positive".into()));
        }
        self.lcurve.values()?;
        if self.lcurve.kappa != 0.5 && self.lcurve.kappa != 1.0 || !(self.lcurve.delta > 0.0) {
            return Err(Error::Config("lcurve prior needs kappa in {0.5, 1} and delta > 0".into()));
        }
        let mut tags: Vec<&str> = self.qoi.iter().map(|q| q.tag.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) || tags.iter().any(|t| t.is_empty() || t.contains([',', '/', ' '])) {
            return Err(Error::Config("qoi tags must be unique, nonempty, without ',', '/' or spaces".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_toml(&back.to_toml().unwrap()).unwrap(), back);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[mesh]\nnx = 8\nnzz = 2").is_err());
        assert!(RunConfig::from_toml("[physics.rheology]\nm = 3.0").is_err());
        assert!(RunConfig::from_toml("[inversion.solver.continuation]\nfoo = 1").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("[prior]\ngamma = 3.0\n[mesh]\nnx = 16").unwrap();
        assert_eq!(cfg.prior.gamma, 3.0);
        assert_eq!(cfg.prior.delta, 1e-5);
        assert_eq!(cfg.mesh.nx, 16);
        assert_eq!(cfg.mesh.nz, 8);
    }

    #[test]
    fn lcurve_values_are_log_spaced() {
        let v = LCurveConfig::default().values().unwrap();
        assert_eq!(v.len(), 13);
        assert!((v[0] - 1e-4).abs() < 1e-18 && (v[12] - 1e2).abs() < 1e-10);
        for w in v.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(0.5)).abs() < 1e-12);
        }
    }
}
