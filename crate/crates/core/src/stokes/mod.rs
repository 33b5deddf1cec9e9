//! Nonlinear Stokes flow with Glen's-law rheology and exponential Robin sliding.
//!
//! The discrete unknown is the reduced vector `x = [velocity, pressure]` described by
//! [`DofMap`]. Every operator needed downstream (Newton residual and Jacobian, the
//! sources of the adjoint and incremental systems, and the basal pairings that turn
//! state and adjoint into parameter-space dual vectors) is assembled here so that
//! they all share one discretization.

mod assembly;
mod dofs;
mod krylov;
mod matrix;
mod rheology;
mod solver;

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

pub use dofs::{DofMap, NodeDofs};
pub use matrix::{Factorization, SaddleMatrix};
pub use rheology::{GlenRheology, SymTensor, ViscosityDerivs};
pub use solver::{ConvergenceRecord, ForwardSolution, LinearSolverKind, NewtonConfig, NewtonIterate};

use crate::mesh::FlowlineMesh;

/// Physical constants. Density in kg/m^3, gravity in m/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsParams {
    #[serde(default)]
    pub rheology: GlenRheology,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default = "default_rho_water")]
    pub rho_water: f64,
}

fn default_rho() -> f64 {
    910.0
}
fn default_g() -> f64 {
    9.81
}
fn default_rho_water() -> f64 {
    1028.0
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            rheology: GlenRheology::default(),
            rho: default_rho(),
            g: default_g(),
            rho_water: default_rho_water(),
        }
    }
}

/// kg/m^3 * m/s^2 = Pa/m; one Pa/m is 1e-3 MPa/km.
const PA_PER_M_TO_MPA_PER_KM: f64 = 1e-3;

impl PhysicsParams {
    /// Ice weight per unit volume, MPa/km.
    pub fn body_force(&self) -> f64 {
        self.rho * self.g * PA_PER_M_TO_MPA_PER_KM
    }

    /// Sea-water weight per unit volume, MPa/km.
    pub fn water_body_force(&self) -> f64 {
        self.rho_water * self.g * PA_PER_M_TO_MPA_PER_KM
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.rheology.validate()?;
        if !(self.rho > 0.0) || !(self.g >= 0.0) || !(self.rho_water >= 0.0) {
            return Err(crate::Error::InvalidArgument(format!("invalid physical constants {self:?}")));
        }
        Ok(())
    }
}

/// Velocity and pressure of a Stokes solution (or of an adjoint / incremental field).
#[derive(Debug, Clone, PartialEq)]
pub struct StokesState {
    /// Interleaved nodal velocity `[ux, uz]` in km/a.
    pub u: Vec<f64>,
    /// Pressure coefficients in MPa.
    pub p: Vec<f64>,
}

/// Discrete Stokes model on a fixed mesh.
pub struct StokesModel {
    mesh: Arc<FlowlineMesh>,
    physics: PhysicsParams,
    dofs: DofMap,
    load: Option<Vec<f64>>,
    pattern: OnceLock<matrix::Pattern>,
}

impl std::fmt::Debug for StokesModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StokesModel")
            .field("nx", &self.mesh.nx)
            .field("nz", &self.mesh.nz)
            .field("k", &self.mesh.k)
            .field("unknowns", &self.dofs.len())
            .finish()
    }
}

impl StokesModel {
    pub fn new(mesh: Arc<FlowlineMesh>, physics: PhysicsParams) -> crate::Result<Self> {
        physics.validate()?;
        let dofs = DofMap::new(&mesh);
        Ok(Self {
            mesh,
            physics,
            dofs,
            load: None,
            pattern: OnceLock::new(),
        })
    }

    /// Adds a fixed reduced-space load `f` so that the residual becomes `r(x) - f`.
    pub fn with_load(mut self, load: Vec<f64>) -> crate::Result<Self> {
        if load.len() != self.dofs.len() {
            return Err(crate::Error::InvalidArgument("load length mismatch".into()));
        }
        self.load = Some(load);
        Ok(self)
    }

    pub fn mesh(&self) -> &FlowlineMesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<FlowlineMesh> {
        Arc::clone(&self.mesh)
    }

    pub fn physics(&self) -> &PhysicsParams {
        &self.physics
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn n_unknowns(&self) -> usize {
        self.dofs.len()
    }

    pub fn state(&self, x: &[f64]) -> StokesState {
        StokesState {
            u: self.dofs.expand_velocity(x),
            p: self.dofs.pressure(x).to_vec(),
        }
    }

    /// Reduced vector of a state whose velocity satisfies the constraints.
    pub fn reduce(&self, state: &StokesState) -> Vec<f64> {
        let mut x = self.dofs.project_velocity(&state.u);
        x.extend_from_slice(&state.p);
        x
    }
}

#[cfg(test)]
mod tests;
