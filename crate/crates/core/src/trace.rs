//! Restriction of volume fields to a boundary and its mass-weighted adjoint.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, FlowlineMesh, TraceSpace};

/// Observation-style operator `B`: picks the boundary nodes of a nodal field with
/// `ncomp` interleaved components. The boundary pairing is `<a, b>_G = sum_c a_c^T M b_c`
/// with `M` the boundary mass matrix, and [`BoundaryTrace::lift`] is the adjoint of
/// `restrict` with respect to that pairing and the Euclidean volume pairing.
#[derive(Debug, Clone)]
pub struct BoundaryTrace {
    pub tag: BoundaryTag,
    pub nodes: Vec<usize>,
    pub mass: DMatrix<f64>,
    pub ncomp: usize,
    volume_nodes: usize,
}

impl BoundaryTrace {
    pub fn new(mesh: &FlowlineMesh, tag: BoundaryTag, ncomp: usize) -> Result<Self> {
        Ok(Self {
            tag,
            nodes: mesh.boundary_nodes(tag),
            mass: mesh.assemble_boundary_mass(tag, TraceSpace::Velocity)?,
            ncomp,
            volume_nodes: mesh.velocity_node_count(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len() * self.ncomp
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn restrict(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.check(field.len(), self.volume_nodes * self.ncomp)?;
        let nc = self.ncomp;
        let mut out = Vec::with_capacity(self.len());
        for &n in &self.nodes {
            out.extend_from_slice(&field[n * nc..(n + 1) * nc]);
        }
        Ok(out)
    }

    /// Adjoint of [`BoundaryTrace::restrict`]: `B^* w = P^T (M (x) I) w`.
    pub fn lift(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check(w.len(), self.len())?;
        let mw = self.mass_apply(w);
        let nc = self.ncomp;
        let mut out = vec![0.0; self.volume_nodes * nc];
        for (i, &n) in self.nodes.iter().enumerate() {
            for c in 0..nc {
                out[n * nc + c] += mw[i * nc + c];
            }
        }
        Ok(out)
    }

    /// Plain scatter of boundary values into a zero volume field (right inverse of `restrict`).
    pub fn extend_by_zero(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check(w.len(), self.len())?;
        let nc = self.ncomp;
        let mut out = vec![0.0; self.volume_nodes * nc];
        for (i, &n) in self.nodes.iter().enumerate() {
            out[n * nc..(n + 1) * nc].copy_from_slice(&w[i * nc..(i + 1) * nc]);
        }
        Ok(out)
    }

    /// `(M (x) I) w` for an interleaved boundary vector.
    pub fn mass_apply(&self, w: &[f64]) -> Vec<f64> {
        apply_interleaved(&self.mass, w, self.ncomp)
    }

    /// Boundary pairing `<a, b>_G`.
    pub fn pairing(&self, a: &[f64], b: &[f64]) -> f64 {
        self.mass_apply(b).iter().zip(a).map(|(x, y)| x * y).sum()
    }

    fn check(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::InvalidArgument(format!("field length {got}, expected {want}")));
        }
        Ok(())
    }
}

/// Applies a node-by-node matrix to every component of an interleaved vector.
pub(crate) fn apply_interleaved(m: &DMatrix<f64>, w: &[f64], ncomp: usize) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; n * ncomp];
    for i in 0..n {
        for j in 0..n {
            let mij = m[(i, j)];
            if mij != 0.0 {
                for c in 0..ncomp {
                    out[i * ncomp + c] += mij * w[j * ncomp + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{DomainSpec, LateralBc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_and_zero_fields() {
        let mesh = FlowlineMesh::new(DomainSpec::slab(1.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::NoSlip), 3, 2, 2).unwrap();
        let tr = BoundaryTrace::new(&mesh, BoundaryTag::Top, 2).unwrap();
        let c = vec![0.7; mesh.velocity_dof_count()];
        assert!(tr.restrict(&c).unwrap().iter().all(|&v| v == 0.7));
        let z = vec![0.0; mesh.velocity_dof_count()];
        assert!(tr.restrict(&z).unwrap().iter().all(|&v| v == 0.0));
        assert!(tr.restrict(&z[1..]).is_err());
    }

    #[test]
    fn restrict_and_lift_are_dual() {
        let mesh = FlowlineMesh::new(DomainSpec::desk_default(), 9, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for tag in [BoundaryTag::Top, BoundaryTag::Right] {
            let tr = BoundaryTrace::new(&mesh, tag, 2).unwrap();
            for _ in 0..100 {
                let u: Vec<f64> = (0..mesh.velocity_dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..tr.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lhs = tr.pairing(&tr.restrict(&u).unwrap(), &w);
                let rhs: f64 = tr.lift(&w).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum();
                let scale: f64 = lhs.abs().max(1.0);
                assert!((lhs - rhs).abs() < 1e-12 * scale);
            }
            let w: Vec<f64> = (0..tr.len()).map(|i| i as f64).collect();
            assert_eq!(tr.restrict(&tr.extend_by_zero(&w).unwrap()).unwrap(), w);
        }
    }
}
