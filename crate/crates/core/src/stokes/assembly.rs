//! Residual, Jacobian and the auxiliary forms shared by the adjoint machinery.

use nalgebra::{DMatrix, DVector};

use super::dofs::NodeDofs;
use super::matrix::{Pattern, SaddleMatrix};
use super::rheology::SymTensor;
use super::StokesModel;
use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Cell, Facet, LateralBc};

/// Which linearization of the viscous term to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Linearization {
    /// Full Newton operator including the anisotropic viscosity term.
    Newton,
    /// Fixed-viscosity (Picard) operator.
    Picard,
}

pub(crate) fn strain_rate(qdphi: &[[f64; 2]], local: &[[f64; 2]]) -> SymTensor {
    let mut g = [[0.0; 2]; 2];
    for (d, u) in qdphi.iter().zip(local) {
        g[0][0] += u[0] * d[0];
        g[0][1] += u[0] * d[1];
        g[1][0] += u[1] * d[0];
        g[1][1] += u[1] * d[1];
    }
    SymTensor::new(g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0]))
}

/// `tau : eps(phi e_x)` and `tau : eps(phi e_z)` for a shape gradient `d`.
#[inline]
fn test_contraction(t: &SymTensor, d: [f64; 2]) -> [f64; 2] {
    [t.xx * d[0] + t.xz * d[1], t.zz * d[1] + t.xz * d[0]]
}

fn gather(cell: &Cell, u: &[f64]) -> Vec<[f64; 2]> {
    cell.nodes.iter().map(|&n| [u[2 * n], u[2 * n + 1]]).collect()
}

fn facet_value(f: &Facet, iq: usize, u: &[f64]) -> [f64; 2] {
    let q = &f.qp[iq];
    let mut v = [0.0; 2];
    for (a, &n) in f.nodes.iter().enumerate() {
        v[0] += q.phi[a] * u[2 * n];
        v[1] += q.phi[a] * u[2 * n + 1];
    }
    v
}

#[inline]
fn tangential(v: [f64; 2], n: [f64; 2]) -> [f64; 2] {
    let vn = v[0] * n[0] + v[1] * n[1];
    [v[0] - vn * n[0], v[1] - vn * n[1]]
}

/// Basal P1 field evaluated at a bottom-facet quadrature point.
pub(crate) fn basal_at(f: &Facet, iq: usize, field: &[f64]) -> f64 {
    let v = f.basal.expect("bottom facet");
    let h = f.qp[iq].hat;
    h[0] * field[v[0]] + h[1] * field[v[1]]
}

/// Scatter of a node-level 2x2 block into reduced unknowns.
#[inline]
fn scatter_block(a: &NodeDofs, b: &NodeDofs, blk: &[[f64; 2]; 2], emit: &mut impl FnMut(usize, usize, f64)) {
    for (i, ci) in a.entries() {
        for (j, cj) in b.entries() {
            let v = ci[0] * (blk[0][0] * cj[0] + blk[0][1] * cj[1]) + ci[1] * (blk[1][0] * cj[0] + blk[1][1] * cj[1]);
            emit(i, j, v);
        }
    }
}

/// Velocity and pressure data at one volume quadrature point, for the residual core.
pub(crate) struct PointFields {
    pub e: SymTensor,
    pub p: f64,
}

impl StokesModel {
    fn check_inputs(&self, x: &[f64], beta: &[f64]) -> Result<()> {
        if x.len() != self.dofs.len() {
            return Err(Error::InvalidArgument(format!(
                "state length {} does not match {} unknowns",
                x.len(),
                self.dofs.len()
            )));
        }
        if beta.len() != self.mesh.basal_dof_count() {
            return Err(Error::InvalidArgument("basal field length mismatch".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Stokes state"));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basal sliding parameter"));
        }
        Ok(())
    }

    fn ocean_pressure(&self, z: f64) -> f64 {
        self.physics.water_body_force() * (self.mesh.spec.sea_level - z).max(0.0)
    }

    /// Nonlinear residual `r(x; beta)` in reduced dual form (minus the optional load).
    pub fn residual(&self, x: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, beta)?;
        let u = self.dofs.expand_velocity(x);
        let p = self.dofs.pressure(x);
        let npc = self.mesh.pressure_dofs_per_cell();
        let mut r = self.residual_core(
            beta,
            |c, cell, iq| {
                let q = &cell.qp[iq];
                let local = gather(cell, &u);
                let e = strain_rate(&q.dphi, &local);
                let pq: f64 = (0..npc).map(|i| q.psi[i] * p[c * npc + i]).sum();
                PointFields { e, p: pq }
            },
            |f, iq| facet_value(f, iq, &u),
        );
        if let Some(load) = &self.load {
            r.iter_mut().zip(load).for_each(|(a, b)| *a -= b);
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Stokes residual"));
        }
        Ok(r)
    }

    /// Residual functional evaluated with externally supplied strain rates, pressures and
    /// basal velocities; used for manufactured-solution forcing.
    pub(crate) fn residual_core(
        &self,
        beta: &[f64],
        volume: impl Fn(usize, &Cell, usize) -> PointFields,
        basal_u: impl Fn(&Facet, usize) -> [f64; 2],
    ) -> Vec<f64> {
        let nv = self.dofs.n_velocity();
        let mut full = vec![0.0; self.mesh.velocity_dof_count()];
        let mut r = vec![0.0; self.dofs.len()];
        let rg = self.physics.body_force();
        let rheo = self.physics.rheology;
        for (c, cell) in self.mesh.cells().iter().enumerate() {
            for (iq, q) in cell.qp.iter().enumerate() {
                let PointFields { e, p } = volume(c, cell, iq);
                let eta = rheo.effective_viscosity(&e);
                let div = e.trace();
                let s = e.scale(2.0 * eta);
                for (l, &n) in cell.nodes.iter().enumerate() {
                    let d = q.dphi[l];
                    let t = test_contraction(&s, d);
                    full[2 * n] += q.jxw * (t[0] - p * d[0]);
                    full[2 * n + 1] += q.jxw * (t[1] - p * d[1] + rg * q.phi[l]);
                }
                for (i, psi) in q.psi.iter().enumerate() {
                    r[self.dofs.pressure_index(c, i)] -= q.jxw * psi * div;
                }
            }
        }
        for f in self.mesh.facets_tagged(BoundaryTag::Bottom) {
            for (iq, q) in f.qp.iter().enumerate() {
                let tu = tangential(basal_u(f, iq), q.normal);
                let w = q.jxw * basal_at(f, iq, beta).exp();
                for (a, &n) in f.nodes.iter().enumerate() {
                    full[2 * n] += w * tu[0] * q.phi[a];
                    full[2 * n + 1] += w * tu[1] * q.phi[a];
                }
            }
        }
        self.add_ocean(&mut full);
        self.dofs.restrict_velocity(&full, &mut r[..nv]);
        r
    }

    fn add_ocean(&self, full: &mut [f64]) {
        for (tag, bc) in [
            (BoundaryTag::Left, self.mesh.spec.left_bc),
            (BoundaryTag::Right, self.mesh.spec.right_bc),
        ] {
            if bc != LateralBc::HydrostaticOcean {
                continue;
            }
            for f in self.mesh.facets_tagged(tag) {
                for q in &f.qp {
                    let pw = self.ocean_pressure(q.x[1]);
                    if pw == 0.0 {
                        continue;
                    }
                    for (a, &n) in f.nodes.iter().enumerate() {
                        full[2 * n] += q.jxw * pw * q.normal[0] * q.phi[a];
                        full[2 * n + 1] += q.jxw * pw * q.normal[1] * q.phi[a];
                    }
                }
            }
        }
    }

    /// Entries of the linearized operator in a fixed traversal order.
    fn operator_entries(&self, x: &[f64], beta: &[f64], lin: Linearization, with_indices: bool) -> (Vec<(usize, usize)>, Vec<f64>) {
        let u = self.dofs.expand_velocity(x);
        let rheo = self.physics.rheology;
        let mut idx = Vec::new();
        let mut val = Vec::new();
        let mut emit = |i: usize, j: usize, v: f64| {
            if with_indices {
                idx.push((i, j));
            }
            val.push(v);
        };
        for (c, cell) in self.mesh.cells().iter().enumerate() {
            let nloc = cell.nodes.len();
            let npc = cell.qp[0].psi.len();
            let local = gather(cell, &u);
            let mut ke = vec![[[0.0f64; 2]; 2]; nloc * nloc];
            let mut be = vec![[0.0f64; 2]; nloc * npc];
            for q in &cell.qp {
                let e = strain_rate(&q.dphi, &local);
                let dv = rheo.derivs(&e);
                let c1 = match lin {
                    Linearization::Newton => 2.0 * dv.d1,
                    Linearization::Picard => 0.0,
                };
                let eta = dv.eta * q.jxw;
                let c1 = c1 * q.jxw;
                let ed: Vec<[f64; 2]> = q.dphi.iter().map(|&d| test_contraction(&e, d)).collect();
                for l in 0..nloc {
                    let dl = q.dphi[l];
                    for m in 0..nloc {
                        let dm = q.dphi[m];
                        let blk = &mut ke[l * nloc + m];
                        blk[0][0] += 2.0 * eta * (dl[0] * dm[0] + 0.5 * dl[1] * dm[1]) + c1 * ed[l][0] * ed[m][0];
                        blk[0][1] += eta * dl[1] * dm[0] + c1 * ed[l][0] * ed[m][1];
                        blk[1][0] += eta * dl[0] * dm[1] + c1 * ed[l][1] * ed[m][0];
                        blk[1][1] += 2.0 * eta * (dl[1] * dm[1] + 0.5 * dl[0] * dm[0]) + c1 * ed[l][1] * ed[m][1];
                    }
                    for i in 0..npc {
                        let b = &mut be[l * npc + i];
                        b[0] -= q.jxw * q.psi[i] * dl[0];
                        b[1] -= q.jxw * q.psi[i] * dl[1];
                    }
                }
            }
            for l in 0..nloc {
                let a = self.dofs.node(cell.nodes[l]);
                for m in 0..nloc {
                    let b = self.dofs.node(cell.nodes[m]);
                    scatter_block(a, b, &ke[l * nloc + m], &mut emit);
                }
                for i in 0..npc {
                    let pi = self.dofs.pressure_index(c, i);
                    let bv = be[l * npc + i];
                    for (r, cr) in a.entries() {
                        let v = cr[0] * bv[0] + cr[1] * bv[1];
                        emit(r, pi, v);
                        emit(pi, r, v);
                    }
                }
            }
        }
        for f in self.mesh.facets_tagged(BoundaryTag::Bottom) {
            let nf = f.nodes.len();
            let mut ke = vec![[[0.0f64; 2]; 2]; nf * nf];
            for (iq, q) in f.qp.iter().enumerate() {
                let w = q.jxw * basal_at(f, iq, beta).exp();
                let n = q.normal;
                let proj = [[1.0 - n[0] * n[0], -n[0] * n[1]], [-n[1] * n[0], 1.0 - n[1] * n[1]]];
                for a in 0..nf {
                    for b in 0..nf {
                        let s = w * q.phi[a] * q.phi[b];
                        let blk = &mut ke[a * nf + b];
                        for cc in 0..2 {
                            for dd in 0..2 {
                                blk[cc][dd] += s * proj[cc][dd];
                            }
                        }
                    }
                }
            }
            for a in 0..nf {
                for b in 0..nf {
                    scatter_block(self.dofs.node(f.nodes[a]), self.dofs.node(f.nodes[b]), &ke[a * nf + b], &mut emit);
                }
            }
        }
        (idx, val)
    }

    fn pattern(&self, x: &[f64], beta: &[f64]) -> Result<&Pattern> {
        if let Some(p) = self.pattern.get() {
            return Ok(p);
        }
        let (idx, _) = self.operator_entries(x, beta, Linearization::Picard, true);
        let p = Pattern::new(self.dofs.len(), &idx)?;
        Ok(self.pattern.get_or_init(|| p))
    }

    pub(crate) fn assemble_linearized(&self, x: &[f64], beta: &[f64], lin: Linearization) -> Result<SaddleMatrix> {
        self.check_inputs(x, beta)?;
        let pattern = self.pattern(x, beta)?;
        let (_, val) = self.operator_entries(x, beta, lin, false);
        if val.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Stokes Jacobian"));
        }
        Ok(SaddleMatrix {
            mat: pattern.build(&val)?,
            n_velocity: self.dofs.n_velocity(),
        })
    }

    /// Newton operator `K(x; beta)`: the Jacobian of [`StokesModel::residual`].
    ///
    /// It is symmetric, so it also serves as the adjoint and incremental operator.
    pub fn jacobian(&self, x: &[f64], beta: &[f64]) -> Result<SaddleMatrix> {
        self.assemble_linearized(x, beta, Linearization::Newton)
    }

    pub(crate) fn factorize(&self, k: &SaddleMatrix) -> Result<super::Factorization> {
        let pattern = self.pattern.get().ok_or_else(|| Error::Consistency("pattern not initialized".into()))?;
        super::Factorization::new(pattern, k)
    }

    /// `int tau(a, b) : eps(w)` over test functions `w`, where `tau` is the second
    /// variation of the viscous stress at `u` in the directions `a` and `b`
    /// (full nodal velocity fields). Pressure rows are zero.
    pub fn viscous_second_variation(&self, u: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
        let rheo = self.physics.rheology;
        let mut full = vec![0.0; self.mesh.velocity_dof_count()];
        for cell in self.mesh.cells() {
            let (lu, la, lb) = (gather(cell, u), gather(cell, a), gather(cell, b));
            for q in &cell.qp {
                let e = strain_rate(&q.dphi, &lu);
                let ea = strain_rate(&q.dphi, &la);
                let eb = strain_rate(&q.dphi, &lb);
                let dv = rheo.derivs(&e);
                let (s_a, s_b) = (e.ddot(&ea), e.ddot(&eb));
                let mut tau = ea.scale(2.0 * dv.d1 * s_b);
                tau.axpy(2.0 * dv.d1 * s_a, &eb);
                tau.axpy(2.0 * dv.d2 * s_a * s_b + 2.0 * dv.d1 * ea.ddot(&eb), &e);
                for (l, &n) in cell.nodes.iter().enumerate() {
                    let t = test_contraction(&tau, q.dphi[l]);
                    full[2 * n] += q.jxw * t[0];
                    full[2 * n + 1] += q.jxw * t[1];
                }
            }
        }
        let mut r = vec![0.0; self.dofs.len()];
        self.dofs.restrict_velocity(&full, &mut r[..self.dofs.n_velocity()]);
        r
    }

    /// `int_bed s exp(beta) T a . T w` over test functions `w`, for a basal field `s`.
    pub fn robin_source(&self, beta: &[f64], s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.velocity_dof_count()];
        for f in self.mesh.facets_tagged(BoundaryTag::Bottom) {
            for (iq, q) in f.qp.iter().enumerate() {
                let w = q.jxw * basal_at(f, iq, beta).exp() * basal_at(f, iq, s);
                if w == 0.0 {
                    continue;
                }
                let ta = tangential(facet_value(f, iq, a), q.normal);
                for (l, &n) in f.nodes.iter().enumerate() {
                    full[2 * n] += w * ta[0] * q.phi[l];
                    full[2 * n + 1] += w * ta[1] * q.phi[l];
                }
            }
        }
        let mut r = vec![0.0; self.dofs.len()];
        self.dofs.restrict_velocity(&full, &mut r[..self.dofs.n_velocity()]);
        r
    }

    /// Basal dual vector `P_j = int_bed hat_j s exp(beta) T a . T b` (with `s = 1` if absent).
    pub fn basal_pairing(&self, beta: &[f64], s: Option<&[f64]>, a: &[f64], b: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.mesh.basal_dof_count());
        for f in self.mesh.facets_tagged(BoundaryTag::Bottom) {
            let v = f.basal.expect("bottom facet");
            for (iq, q) in f.qp.iter().enumerate() {
                let ta = tangential(facet_value(f, iq, a), q.normal);
                let tb = tangential(facet_value(f, iq, b), q.normal);
                let mut w = q.jxw * basal_at(f, iq, beta).exp() * (ta[0] * tb[0] + ta[1] * tb[1]);
                if let Some(s) = s {
                    w *= basal_at(f, iq, s);
                }
                out[v[0]] += w * q.hat[0];
                out[v[1]] += w * q.hat[1];
            }
        }
        out
    }

    /// Integral of the velocity divergence over each cell.
    pub fn cell_divergence(&self, x: &[f64]) -> Vec<f64> {
        let u = self.dofs.expand_velocity(x);
        self.mesh
            .cells()
            .iter()
            .map(|cell| {
                let local = gather(cell, &u);
                cell.qp.iter().map(|q| q.jxw * strain_rate(&q.dphi, &local).trace()).sum()
            })
            .collect()
    }

    /// Rest state: zero velocity and the cellwise L2 projection of the overburden
    /// pressure `rho g (s(x) - z)`.
    pub fn hydrostatic_guess(&self) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.dofs.len()];
        let rg = self.physics.body_force();
        for (c, cell) in self.mesh.cells().iter().enumerate() {
            let npc = cell.qp[0].psi.len();
            let mut m = DMatrix::zeros(npc, npc);
            let mut rhs = DVector::zeros(npc);
            for q in &cell.qp {
                let p = rg * (self.mesh.spec.surface.eval(q.x[0]) - q.x[1]);
                for i in 0..npc {
                    rhs[i] += q.jxw * q.psi[i] * p;
                    for j in 0..npc {
                        m[(i, j)] += q.jxw * q.psi[i] * q.psi[j];
                    }
                }
            }
            let sol = m
                .cholesky()
                .ok_or_else(|| Error::Singular("cell pressure mass matrix".into()))?
                .solve(&rhs);
            for i in 0..npc {
                x[self.dofs.pressure_index(c, i)] = sol[i];
            }
        }
        Ok(x)
    }

    /// Lumped approximation `-diag(int psi_i^2 / eta)` of the pressure Schur complement.
    pub(crate) fn schur_diagonal(&self, x: &[f64]) -> Vec<f64> {
        let u = self.dofs.expand_velocity(x);
        let rheo = self.physics.rheology;
        let mut d = vec![0.0; self.dofs.n_pressure()];
        let nv = self.dofs.n_velocity();
        for (c, cell) in self.mesh.cells().iter().enumerate() {
            let local = gather(cell, &u);
            for q in &cell.qp {
                let eta = rheo.effective_viscosity(&strain_rate(&q.dphi, &local));
                for (i, psi) in q.psi.iter().enumerate() {
                    d[self.dofs.pressure_index(c, i) - nv] -= q.jxw * psi * psi / eta;
                }
            }
        }
        d
    }

    /// Weak forcing that makes the given smooth velocity/pressure fields an exact
    /// solution of the continuous problem with natural boundary data.
    ///
    /// `grad(x)` returns `[[du_x/dx, du_x/dz], [du_z/dx, du_z/dz]]`.
    pub fn manufactured_load(
        &self,
        beta: &[f64],
        velocity: impl Fn([f64; 2]) -> [f64; 2],
        grad: impl Fn([f64; 2]) -> [[f64; 2]; 2],
        pressure: impl Fn([f64; 2]) -> f64,
    ) -> Vec<f64> {
        self.residual_core(
            beta,
            |_, cell, iq| {
                let x = cell.qp[iq].x;
                let g = grad(x);
                PointFields {
                    e: SymTensor::new(g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0])),
                    p: pressure(x),
                }
            },
            |f, iq| velocity(f.qp[iq].x),
        )
    }

    /// Velocity L2 error against an exact field, with an `npts`-point Gauss rule per direction.
    pub fn velocity_l2_error(&self, x: &[f64], exact: impl Fn([f64; 2]) -> [f64; 2], npts: usize) -> Result<f64> {
        let u = self.dofs.expand_velocity(x);
        let mut err = 0.0;
        for c in 0..self.mesh.cells().len() {
            let cell = self.mesh.cell_with_rule(c, npts)?;
            let local = gather(&cell, &u);
            for q in &cell.qp {
                let mut uh = [0.0; 2];
                for (phi, v) in q.phi.iter().zip(&local) {
                    uh[0] += phi * v[0];
                    uh[1] += phi * v[1];
                }
                let ue = exact(q.x);
                err += q.jxw * ((uh[0] - ue[0]).powi(2) + (uh[1] - ue[1]).powi(2));
            }
        }
        Ok(err.sqrt())
    }
}
