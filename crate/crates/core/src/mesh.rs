//! Structured flowline mesh of a vertical ice slab with mixed finite-element spaces.
//!
//! The slab `{(x, z) : 0 <= x <= L, b(x) <= z <= s(x)}` is split into `nx` columns
//! and `nz` layers of isoparametric `Q_k` quadrilaterals. Velocity lives on the
//! continuous `Q_k` lattice, pressure is cellwise discontinuous, and the basal
//! sliding parameter is continuous piecewise linear on the bed trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{LagrangeBasis, QuadratureRule};

/// Elevation profile `z(x)` for the bed or the surface, in km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Flat {
        z: f64,
    },
    /// `z0 + slope * x + amplitude * sin(2 pi x / wavelength)`.
    Sloped {
        z0: f64,
        slope: f64,
        #[serde(default)]
        amplitude: f64,
        #[serde(default = "default_wavelength")]
        wavelength: f64,
    },
    /// Piecewise-linear interpolation of `(x, z)` samples sorted by `x`.
    Tabulated { points: Vec<[f64; 2]> },
}

fn default_wavelength() -> f64 {
    1.0
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Profile::Flat { z } => *z,
            Profile::Sloped {
                z0,
                slope,
                amplitude,
                wavelength,
            } => z0 + slope * x + amplitude * (2.0 * std::f64::consts::PI * x / wavelength).sin(),
            Profile::Tabulated { points } => {
                if points.is_empty() {
                    return f64::NAN;
                }
                if x <= points[0][0] {
                    return points[0][1];
                }
                for w in points.windows(2) {
                    let ([x0, z0], [x1, z1]) = (w[0], w[1]);
                    if x <= x1 {
                        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
                        return z0 + t * (z1 - z0);
                    }
                }
                points[points.len() - 1][1]
            }
        }
    }
}

/// Condition applied on a lateral (left or right) boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LateralBc {
    NoSlip,
    TractionFree,
    /// Sea-water pressure below `sea_level`, traction-free above.
    HydrostaticOcean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    /// Horizontal extent in km.
    pub length: f64,
    pub bed: Profile,
    pub surface: Profile,
    pub left_bc: LateralBc,
    pub right_bc: LateralBc,
    /// Sea level elevation in km (only used by `HydrostaticOcean`).
    #[serde(default)]
    pub sea_level: f64,
    /// Horizontal grading `s` in `[0, 1)`: column edges sit at
    /// `x = L (xi + s xi (1 - xi))` for uniform `xi`, so cells shrink toward the
    /// right end by `(1 - s) / (1 + s)` relative to the left end.
    #[serde(default)]
    pub grading: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl DomainSpec {
    /// Flat slab `[0, length] x [bed, surface]` with the given lateral conditions.
    pub fn slab(length: f64, bed: f64, surface: f64, left_bc: LateralBc, right_bc: LateralBc) -> Self {
        Self {
            length,
            bed: Profile::Flat { z: bed },
            surface: Profile::Flat { z: surface },
            left_bc,
            right_bc,
            sea_level: 0.0,
            grading: 0.0,
        }
    }

    /// Inclined 100 km slab, 1 km thick, with a planar surface and a gentle bed undulation; grounded
    /// on land at the left and ending in a marine cliff close to flotation on the right,
    /// with columns refined toward the cliff.
    pub fn desk_default() -> Self {
        let slope = -0.005;
        Self {
            length: 100.0,
            bed: Profile::Sloped {
                z0: 0.0,
                slope,
                amplitude: 0.05,
                wavelength: 25.0,
            },
            surface: Profile::Sloped {
                z0: 1.0,
                slope,
                amplitude: 0.0,
                wavelength: 25.0,
            },
            left_bc: LateralBc::NoSlip,
            right_bc: LateralBc::HydrostaticOcean,
            sea_level: 0.35,
            grading: 0.8,
        }
    }

    /// Column edge position for the uniform coordinate `xi` in `[0, 1]`.
    pub fn column_x(&self, xi: f64) -> f64 {
        self.length * (xi + self.grading * xi * (1.0 - xi))
    }

    pub fn thickness(&self, x: f64) -> f64 {
        self.surface.eval(x) - self.bed.eval(x)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) || !self.length.is_finite() {
            return Err(Error::Geometry(format!("length must be positive, got {}", self.length)));
        }
        if !(0.0..1.0).contains(&self.grading) {
            return Err(Error::Geometry(format!("grading must lie in [0, 1), got {}", self.grading)));
        }
        if let Profile::Tabulated { points } = &self.bed {
            check_table(points, "bed")?;
        }
        if let Profile::Tabulated { points } = &self.surface {
            check_table(points, "surface")?;
        }
        let samples = 2000;
        for i in 0..=samples {
            let x = self.length * i as f64 / samples as f64;
            let h = self.thickness(x);
            if !(h > 0.0) {
                return Err(Error::Geometry(format!(
                    "surface must lie above bed, but s - b = {h} at x = {x}"
                )));
            }
        }
        Ok(())
    }
}

fn check_table(points: &[[f64; 2]], what: &str) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::Geometry(format!("{what} table needs at least two points")));
    }
    if points.windows(2).any(|w| w[1][0] <= w[0][0]) {
        return Err(Error::Geometry(format!("{what} table must be strictly increasing in x")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    Bottom,
    Top,
    Left,
    Right,
}

/// Discontinuous pressure space paired with continuous `Q_k` velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureSpace {
    /// Full polynomials of degree `k - 1` in physical coordinates (`Q_k x P_{k-1}^disc`).
    #[default]
    DiscP,
    /// Tensor polynomials of degree `k - 2` in reference coordinates (`Q_k x Q_{k-2}^disc`).
    DiscQ,
}

impl PressureSpace {
    pub fn dofs_per_cell(self, k: usize) -> usize {
        match self {
            PressureSpace::DiscP => k * (k + 1) / 2,
            PressureSpace::DiscQ => (k - 1) * (k - 1),
        }
    }
}

/// Boundary trace space used by [`FlowlineMesh::assemble_boundary_mass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSpace {
    /// Trace of the scalar `Q_k` velocity-component space.
    Velocity,
    /// Continuous P1 space on the bed vertices (bottom boundary only).
    Basal,
}

/// Volume quadrature point with precomputed physical shape data.
#[derive(Debug, Clone)]
pub struct QuadPoint {
    pub x: [f64; 2],
    /// Quadrature weight times Jacobian determinant.
    pub jxw: f64,
    pub phi: Vec<f64>,
    /// Physical gradients `[d/dx, d/dz]` of the velocity shape functions.
    pub dphi: Vec<[f64; 2]>,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub nodes: Vec<usize>,
    pub qp: Vec<QuadPoint>,
    pub area: f64,
}

/// Facet quadrature point.
#[derive(Debug, Clone)]
pub struct FacetPoint {
    pub x: [f64; 2],
    /// Quadrature weight times arc-length element.
    pub jxw: f64,
    /// Outward unit normal.
    pub normal: [f64; 2],
    /// Values of the `k + 1` facet velocity shape functions.
    pub phi: Vec<f64>,
    /// Values of the two basal P1 hat functions (bottom facets only).
    pub hat: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Facet {
    pub cell: usize,
    pub tag: BoundaryTag,
    /// Velocity nodes along the facet, ordered by increasing facet parameter.
    pub nodes: Vec<usize>,
    /// Positions of `nodes` inside the tag's boundary node list.
    pub trace: Vec<usize>,
    /// Basal vertex indices for bottom facets.
    pub basal: Option<[usize; 2]>,
    pub qp: Vec<FacetPoint>,
}

#[derive(Debug, Clone)]
pub struct FlowlineMesh {
    pub spec: DomainSpec,
    pub nx: usize,
    pub nz: usize,
    pub k: usize,
    pub pressure_space: PressureSpace,
    coords: Vec<[f64; 2]>,
    cells: Vec<Cell>,
    facets: Vec<Facet>,
}

impl FlowlineMesh {
    pub fn new(spec: DomainSpec, nx: usize, nz: usize, k: usize) -> Result<Self> {
        Self::with_pressure_space(spec, nx, nz, k, PressureSpace::default())
    }

    pub fn with_pressure_space(
        spec: DomainSpec,
        nx: usize,
        nz: usize,
        k: usize,
        pressure_space: PressureSpace,
    ) -> Result<Self> {
        if nx == 0 || nz == 0 {
            return Err(Error::InvalidArgument(format!("cell counts must be >= 1, got {nx} x {nz}")));
        }
        if !(2..=3).contains(&k) {
            return Err(Error::InvalidArgument(format!("velocity order k must be 2 or 3, got {k}")));
        }
        spec.validate()?;

        let nxn = k * nx + 1;
        let nzn = k * nz + 1;
        let mut coords = Vec::with_capacity(nxn * nzn);
        for i in 0..nxn {
            // Edge nodes follow the grading; interior nodes split each column evenly.
            let (ci, a) = ((i / k).min(nx - 1), i - k * (i / k).min(nx - 1));
            let (x0, x1) = (spec.column_x(ci as f64 / nx as f64), spec.column_x((ci + 1) as f64 / nx as f64));
            let x = x0 + (x1 - x0) * a as f64 / k as f64;
            let (b, s) = (spec.bed.eval(x), spec.surface.eval(x));
            for j in 0..nzn {
                let zeta = j as f64 / (nzn - 1) as f64;
                coords.push([x, b + zeta * (s - b)]);
            }
        }

        let basis = LagrangeBasis::new(k);
        let quad = QuadratureRule::gauss_legendre(k + 1);
        let nloc = (k + 1) * (k + 1);
        let mut cells = Vec::with_capacity(nx * nz);
        for ci in 0..nx {
            for cj in 0..nz {
                let mut nodes = Vec::with_capacity(nloc);
                for a in 0..=k {
                    for b in 0..=k {
                        nodes.push((k * ci + a) * nzn + k * cj + b);
                    }
                }
                cells.push(build_cell(&coords, nodes, &basis, &quad, pressure_space, k)?);
            }
        }

        let mut mesh = Self {
            spec,
            nx,
            nz,
            k,
            pressure_space,
            coords,
            cells,
            facets: Vec::new(),
        };
        mesh.facets = mesh.build_facets(&basis, &quad)?;
        Ok(mesh)
    }

    fn build_facets(&self, basis: &LagrangeBasis, quad: &QuadratureRule) -> Result<Vec<Facet>> {
        let k = self.k;
        let mut facets = Vec::new();
        let mut push = |cell: usize, tag: BoundaryTag, local: Vec<(usize, usize)>, basal: Option<[usize; 2]>| -> Result<()> {
            let nodes: Vec<usize> = local
                .iter()
                .map(|&(a, b)| self.cells[cell].nodes[a * (k + 1) + b])
                .collect();
            let boundary = self.boundary_nodes(tag);
            let trace = nodes
                .iter()
                .map(|n| boundary.iter().position(|m| m == n).expect("facet node on boundary"))
                .collect();
            let mut qp = Vec::with_capacity(quad.len());
            for (&t, &w) in quad.points.iter().zip(&quad.weights) {
                let phi = basis.values(t);
                let dphi = basis.derivatives(t);
                let mut x = [0.0; 2];
                let mut dx = [0.0; 2];
                for (m, &n) in nodes.iter().enumerate() {
                    let c = self.coords[n];
                    x[0] += phi[m] * c[0];
                    x[1] += phi[m] * c[1];
                    dx[0] += dphi[m] * c[0];
                    dx[1] += dphi[m] * c[1];
                }
                let len = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
                if !(len > 0.0) {
                    return Err(Error::Geometry("degenerate boundary facet".into()));
                }
                let (tx, tz) = (dx[0] / len, dx[1] / len);
                let normal = match tag {
                    BoundaryTag::Bottom | BoundaryTag::Right => [tz, -tx],
                    BoundaryTag::Top | BoundaryTag::Left => [-tz, tx],
                };
                qp.push(FacetPoint {
                    x,
                    jxw: w * len,
                    normal,
                    phi,
                    hat: [0.5 * (1.0 - t), 0.5 * (1.0 + t)],
                });
            }
            facets.push(Facet {
                cell,
                tag,
                nodes,
                trace,
                basal,
                qp,
            });
            Ok(())
        };
        for ci in 0..self.nx {
            push(ci * self.nz, BoundaryTag::Bottom, (0..=k).map(|a| (a, 0)).collect(), Some([ci, ci + 1]))?;
        }
        for ci in 0..self.nx {
            push(ci * self.nz + self.nz - 1, BoundaryTag::Top, (0..=k).map(|a| (a, k)).collect(), None)?;
        }
        for cj in 0..self.nz {
            push(cj, BoundaryTag::Left, (0..=k).map(|b| (0, b)).collect(), None)?;
        }
        for cj in 0..self.nz {
            push((self.nx - 1) * self.nz + cj, BoundaryTag::Right, (0..=k).map(|b| (k, b)).collect(), None)?;
        }
        Ok(facets)
    }

    pub fn nodes_x(&self) -> usize {
        self.k * self.nx + 1
    }

    pub fn nodes_z(&self) -> usize {
        self.k * self.nz + 1
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        i * self.nodes_z() + j
    }

    pub fn velocity_node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn velocity_dof_count(&self) -> usize {
        2 * self.coords.len()
    }

    pub fn pressure_dofs_per_cell(&self) -> usize {
        self.pressure_space.dofs_per_cell(self.k)
    }

    pub fn pressure_dof_count(&self) -> usize {
        self.cells.len() * self.pressure_dofs_per_cell()
    }

    pub fn basal_dof_count(&self) -> usize {
        self.nx + 1
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn facets(&self) -> impl Iterator<Item = &Facet> {
        self.facets.iter()
    }

    pub fn facets_tagged(&self, tag: BoundaryTag) -> impl Iterator<Item = &Facet> {
        self.facets.iter().filter(move |f| f.tag == tag)
    }

    /// Velocity nodes on a boundary, ordered by increasing `x` (top/bottom) or `z` (sides).
    pub fn boundary_nodes(&self, tag: BoundaryTag) -> Vec<usize> {
        let (nxn, nzn) = (self.nodes_x(), self.nodes_z());
        match tag {
            BoundaryTag::Bottom => (0..nxn).map(|i| self.node_index(i, 0)).collect(),
            BoundaryTag::Top => (0..nxn).map(|i| self.node_index(i, nzn - 1)).collect(),
            BoundaryTag::Left => (0..nzn).map(|j| self.node_index(0, j)).collect(),
            BoundaryTag::Right => (0..nzn).map(|j| self.node_index(nxn - 1, j)).collect(),
        }
    }

    /// Coordinates of the basal vertices carrying the sliding parameter.
    pub fn basal_coords(&self) -> Vec<[f64; 2]> {
        (0..=self.nx).map(|i| self.coords[self.node_index(self.k * i, 0)]).collect()
    }

    /// Velocity node index of every basal vertex.
    pub fn basal_vertex_nodes(&self) -> Vec<usize> {
        (0..=self.nx).map(|i| self.node_index(self.k * i, 0)).collect()
    }

    /// Cell `c` re-integrated with an `npts x npts` Gauss rule (for error norms).
    pub fn cell_with_rule(&self, c: usize, npts: usize) -> Result<Cell> {
        let basis = LagrangeBasis::new(self.k);
        let quad = QuadratureRule::gauss_legendre(npts);
        build_cell(&self.coords, self.cells[c].nodes.clone(), &basis, &quad, self.pressure_space, self.k)
    }

    /// Total length of a tagged boundary.
    pub fn boundary_measure(&self, tag: BoundaryTag) -> f64 {
        self.facets_tagged(tag).flat_map(|f| f.qp.iter()).map(|q| q.jxw).sum()
    }

    /// Boundary mass matrix of a trace space on `tag`.
    pub fn assemble_boundary_mass(&self, tag: BoundaryTag, space: TraceSpace) -> Result<nalgebra::DMatrix<f64>> {
        self.assemble_weighted_boundary_mass(tag, space, |_, _| 1.0)
    }

    /// Boundary mass matrix with a pointwise weight `w(facet, quadrature index)`.
    pub fn assemble_weighted_boundary_mass<F>(
        &self,
        tag: BoundaryTag,
        space: TraceSpace,
        weight: F,
    ) -> Result<nalgebra::DMatrix<f64>>
    where
        F: Fn(&Facet, usize) -> f64,
    {
        if self.facets_tagged(tag).next().is_none() {
            return Err(Error::InvalidArgument(format!("no facets carry tag {tag:?}")));
        }
        let n = match space {
            TraceSpace::Velocity => self.boundary_nodes(tag).len(),
            TraceSpace::Basal => {
                if tag != BoundaryTag::Bottom {
                    return Err(Error::InvalidArgument("the basal space lives on the bottom boundary only".into()));
                }
                self.basal_dof_count()
            }
        };
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for facet in self.facets_tagged(tag) {
            for (iq, q) in facet.qp.iter().enumerate() {
                let w = q.jxw * weight(facet, iq);
                match space {
                    TraceSpace::Velocity => {
                        for (a, &ia) in facet.trace.iter().enumerate() {
                            for (b, &ib) in facet.trace.iter().enumerate() {
                                m[(ia, ib)] += w * q.phi[a] * q.phi[b];
                            }
                        }
                    }
                    TraceSpace::Basal => {
                        let v = facet.basal.expect("bottom facet");
                        for a in 0..2 {
                            for b in 0..2 {
                                m[(v[a], v[b])] += w * q.hat[a] * q.hat[b];
                            }
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

fn build_cell(
    coords: &[[f64; 2]],
    nodes: Vec<usize>,
    basis: &LagrangeBasis,
    quad: &QuadratureRule,
    pressure_space: PressureSpace,
    k: usize,
) -> Result<Cell> {
    let nq = quad.len();
    let kk = k + 1;
    let (mut xmin, mut xmax, mut zmin, mut zmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &n in &nodes {
        let [x, z] = coords[n];
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        zmin = zmin.min(z);
        zmax = zmax.max(z);
    }
    let centre = [0.5 * (xmin + xmax), 0.5 * (zmin + zmax)];
    let half = [0.5 * (xmax - xmin), 0.5 * (zmax - zmin)];

    let mut qp = Vec::with_capacity(nq * nq);
    let mut area = 0.0;
    for (&xi, &wx) in quad.points.iter().zip(&quad.weights) {
        for (&eta, &wz) in quad.points.iter().zip(&quad.weights) {
            let (lx, dlx) = (basis.values(xi), basis.derivatives(xi));
            let (lz, dlz) = (basis.values(eta), basis.derivatives(eta));
            let mut phi = Vec::with_capacity(kk * kk);
            let mut dref = Vec::with_capacity(kk * kk);
            for a in 0..kk {
                for b in 0..kk {
                    phi.push(lx[a] * lz[b]);
                    dref.push([dlx[a] * lz[b], lx[a] * dlz[b]]);
                }
            }
            let mut x = [0.0; 2];
            let mut jac = [[0.0; 2]; 2];
            for (l, &n) in nodes.iter().enumerate() {
                let c = coords[n];
                for d in 0..2 {
                    x[d] += phi[l] * c[d];
                    jac[d][0] += dref[l][0] * c[d];
                    jac[d][1] += dref[l][1] * c[d];
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            if !(det > 0.0) {
                return Err(Error::Geometry(format!("non-positive cell Jacobian {det} at {x:?}")));
            }
            // Physical gradient = J^{-T} reference gradient.
            let inv = [[jac[1][1] / det, -jac[0][1] / det], [-jac[1][0] / det, jac[0][0] / det]];
            let dphi = dref
                .iter()
                .map(|g| [inv[0][0] * g[0] + inv[1][0] * g[1], inv[0][1] * g[0] + inv[1][1] * g[1]])
                .collect();
            let psi = match pressure_space {
                PressureSpace::DiscP => {
                    let (px, pz) = ((x[0] - centre[0]) / half[0], (x[1] - centre[1]) / half[1]);
                    let mut v = Vec::new();
                    for deg in 0..k {
                        for j in 0..=deg {
                            v.push(px.powi((deg - j) as i32) * pz.powi(j as i32));
                        }
                    }
                    v
                }
                PressureSpace::DiscQ => {
                    let mut v = Vec::new();
                    for i in 0..k - 1 {
                        for j in 0..k - 1 {
                            v.push(xi.powi(i as i32) * eta.powi(j as i32));
                        }
                    }
                    v
                }
            };
            let jxw = wx * wz * det;
            area += jxw;
            qp.push(QuadPoint { x, jxw, phi, dphi, psi });
        }
    }
    Ok(Cell { nodes, qp, area })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_slab() -> DomainSpec {
        DomainSpec::slab(1.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree)
    }

    #[test]
    fn dof_counts_follow_element_definitions() {
        let m = FlowlineMesh::with_pressure_space(unit_slab(), 2, 1, 2, PressureSpace::DiscQ).unwrap();
        assert_eq!(m.velocity_dof_count(), 30);
        assert_eq!(m.pressure_dof_count(), 2);
        assert_eq!(m.basal_dof_count(), 3);

        let m = FlowlineMesh::with_pressure_space(unit_slab(), 4, 2, 2, PressureSpace::DiscQ).unwrap();
        assert_eq!(m.velocity_dof_count(), 90);
        assert_eq!(m.pressure_dof_count(), 8);

        for (nx, nz, k) in [(1, 1, 2), (3, 2, 2), (5, 3, 3), (4, 4, 3)] {
            let m = FlowlineMesh::new(unit_slab(), nx, nz, k).unwrap();
            assert_eq!(m.velocity_dof_count(), 2 * (k * nx + 1) * (k * nz + 1));
            assert_eq!(m.pressure_dof_count(), nx * nz * k * (k + 1) / 2);
            assert_eq!(m.basal_dof_count(), nx + 1);
            let q = FlowlineMesh::with_pressure_space(unit_slab(), nx, nz, k, PressureSpace::DiscQ).unwrap();
            assert_eq!(q.pressure_dof_count(), nx * nz * (k - 1) * (k - 1));
        }
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        let mut spec = unit_slab();
        spec.surface = Profile::Sloped {
            z0: 1.0,
            slope: -1.0,
            amplitude: 0.0,
            wavelength: 1.0,
        };
        assert!(matches!(FlowlineMesh::new(spec, 2, 1, 2), Err(Error::Geometry(_))));
        assert!(FlowlineMesh::new(unit_slab(), 0, 1, 2).is_err());
        assert!(FlowlineMesh::new(unit_slab(), 2, 1, 1).is_err());
    }

    #[test]
    fn every_boundary_facet_has_one_tag_and_areas_add_up() {
        let area = |spec: DomainSpec, nx: usize| {
            let m = FlowlineMesh::new(spec, nx, 3, 2).unwrap();
            assert_eq!(m.facets().count(), 2 * nx + 2 * 3);
            m.cells().iter().map(|c| c.area).sum::<f64>()
        };
        // Whole bed wavelengths under a planar surface: the exact area is 100.
        let uniform = DomainSpec {
            grading: 0.0,
            ..DomainSpec::desk_default()
        };
        let total = area(uniform, 8);
        assert!((total - 100.0).abs() < 1e-6, "area {total}");
        // Graded columns sample the undulation unevenly; the error shrinks with refinement.
        let (coarse, fine) = (area(DomainSpec::desk_default(), 8), area(DomainSpec::desk_default(), 64));
        assert!((fine - 100.0).abs() < 1e-3 && (fine - 100.0).abs() < (coarse - 100.0).abs(), "{coarse} {fine}");
    }

    #[test]
    fn boundary_mass_partition_of_unity() {
        let m = FlowlineMesh::new(unit_slab(), 2, 1, 2).unwrap();
        let mb = m.assemble_boundary_mass(BoundaryTag::Bottom, TraceSpace::Basal).unwrap();
        assert!((mb.sum() - 1.0).abs() < 1e-14);
        let mt = m.assemble_boundary_mass(BoundaryTag::Top, TraceSpace::Velocity).unwrap();
        assert!((mt.sum() - 1.0).abs() < 1e-14);
        assert!(m.assemble_boundary_mass(BoundaryTag::Top, TraceSpace::Basal).is_err());
    }

    #[test]
    fn boundary_mass_is_symmetric_positive_definite() {
        let m = FlowlineMesh::new(DomainSpec::desk_default(), 13, 2, 3).unwrap();
        for (tag, space) in [
            (BoundaryTag::Bottom, TraceSpace::Basal),
            (BoundaryTag::Bottom, TraceSpace::Velocity),
            (BoundaryTag::Top, TraceSpace::Velocity),
            (BoundaryTag::Right, TraceSpace::Velocity),
        ] {
            let mm = m.assemble_boundary_mass(tag, space).unwrap();
            assert!((&mm - mm.transpose()).amax() < 1e-15 * mm.amax());
            let eig = nalgebra::SymmetricEigen::new(mm.clone());
            assert!(eig.eigenvalues.min() > 0.0, "{tag:?} {space:?}");
            assert!((mm.sum() - m.boundary_measure(tag)).abs() < 1e-12);
        }
    }

    #[test]
    fn tabulated_profile_interpolates_linearly() {
        let p = Profile::Tabulated {
            points: vec![[0.0, 0.0], [2.0, 1.0], [4.0, 0.0]],
        };
        assert_eq!(p.eval(1.0), 0.5);
        assert_eq!(p.eval(3.0), 0.5);
        assert_eq!(p.eval(-1.0), 0.0);
        assert_eq!(p.eval(5.0), 0.0);
    }
}
