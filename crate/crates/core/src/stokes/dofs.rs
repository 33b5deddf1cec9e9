use crate::mesh::{BoundaryTag, FlowlineMesh, LateralBc};
use crate::quadrature::LagrangeBasis;

/// Reduced unknowns attached to one velocity node.
///
/// A node value is `u = sum_i coef[i] * x[idx[i]]` over the first `count` entries.
/// Free nodes carry two Cartesian unknowns, basal nodes one tangential unknown
/// (no normal flow), and no-slip nodes none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeDofs {
    pub count: usize,
    pub idx: [usize; 2],
    pub coef: [[f64; 2]; 2],
}

impl NodeDofs {
    pub fn entries(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        (0..self.count).map(move |i| (self.idx[i], self.coef[i]))
    }
}

/// Map between full nodal velocity / pressure fields and the reduced unknown vector
/// `x = [velocity unknowns, pressure coefficients]`.
#[derive(Debug, Clone)]
pub struct DofMap {
    nodes: Vec<NodeDofs>,
    n_velocity: usize,
    n_pressure: usize,
    n_per_cell: usize,
    basal_normals: Vec<[f64; 2]>,
}

impl DofMap {
    pub fn new(mesh: &FlowlineMesh) -> Self {
        let nn = mesh.velocity_node_count();
        #[derive(Clone, Copy, PartialEq)]
        enum Kind {
            Free,
            Fixed,
            Tangential,
        }
        let mut kind = vec![Kind::Free; nn];
        let bottom = mesh.boundary_nodes(BoundaryTag::Bottom);
        for &n in &bottom {
            kind[n] = Kind::Tangential;
        }
        for (tag, bc) in [(BoundaryTag::Left, mesh.spec.left_bc), (BoundaryTag::Right, mesh.spec.right_bc)] {
            if bc == LateralBc::NoSlip {
                for n in mesh.boundary_nodes(tag) {
                    kind[n] = Kind::Fixed;
                }
            }
        }

        // Averaged facet tangents at basal nodes.
        let basis = LagrangeBasis::new(mesh.k);
        let mut tangent = vec![[0.0f64; 2]; nn];
        for f in mesh.facets_tagged(BoundaryTag::Bottom) {
            for (a, &t) in basis.nodes().iter().enumerate() {
                let d = basis.derivatives(t);
                let mut dx = [0.0; 2];
                for (m, &node) in f.nodes.iter().enumerate() {
                    let c = mesh.coords()[node];
                    dx[0] += d[m] * c[0];
                    dx[1] += d[m] * c[1];
                }
                let len = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
                let n = f.nodes[a];
                tangent[n][0] += dx[0] / len;
                tangent[n][1] += dx[1] / len;
            }
        }

        let mut nodes = Vec::with_capacity(nn);
        let mut next = 0;
        let mut basal_normals = vec![[0.0; 2]; nn];
        for n in 0..nn {
            let nd = match kind[n] {
                Kind::Fixed => NodeDofs {
                    count: 0,
                    idx: [0; 2],
                    coef: [[0.0; 2]; 2],
                },
                Kind::Free => {
                    next += 2;
                    NodeDofs {
                        count: 2,
                        idx: [next - 2, next - 1],
                        coef: [[1.0, 0.0], [0.0, 1.0]],
                    }
                }
                Kind::Tangential => {
                    let t = tangent[n];
                    let len = (t[0] * t[0] + t[1] * t[1]).sqrt();
                    let t = [t[0] / len, t[1] / len];
                    basal_normals[n] = [t[1], -t[0]];
                    next += 1;
                    NodeDofs {
                        count: 1,
                        idx: [next - 1, 0],
                        coef: [t, [0.0; 2]],
                    }
                }
            };
            nodes.push(nd);
        }
        Self {
            nodes,
            n_velocity: next,
            n_pressure: mesh.pressure_dof_count(),
            n_per_cell: mesh.pressure_dofs_per_cell(),
            basal_normals,
        }
    }

    pub fn node(&self, n: usize) -> &NodeDofs {
        &self.nodes[n]
    }

    pub fn n_velocity(&self) -> usize {
        self.n_velocity
    }

    pub fn n_pressure(&self) -> usize {
        self.n_pressure
    }

    pub fn len(&self) -> usize {
        self.n_velocity + self.n_pressure
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pressure_index(&self, cell: usize, i: usize) -> usize {
        self.n_velocity + cell * self.n_per_cell + i
    }

    /// Outward nodal normal used for the no-normal-flow constraint (zero off the bed).
    pub fn nodal_normal(&self, n: usize) -> [f64; 2] {
        self.basal_normals[n]
    }

    /// Full interleaved nodal velocity `[ux0, uz0, ux1, ...]` from a reduced vector.
    pub fn expand_velocity(&self, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; 2 * self.nodes.len()];
        for (n, nd) in self.nodes.iter().enumerate() {
            for (i, c) in nd.entries() {
                u[2 * n] += c[0] * x[i];
                u[2 * n + 1] += c[1] * x[i];
            }
        }
        u
    }

    pub fn pressure<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.n_velocity..]
    }

    /// Transpose of [`DofMap::expand_velocity`]: accumulates a full nodal dual vector.
    pub fn restrict_velocity(&self, full: &[f64], out: &mut [f64]) {
        for (n, nd) in self.nodes.iter().enumerate() {
            for (i, c) in nd.entries() {
                out[i] += c[0] * full[2 * n] + c[1] * full[2 * n + 1];
            }
        }
    }

    /// Reduced velocity unknowns representing a full nodal field; exact when the
    /// field satisfies the constraints.
    pub fn project_velocity(&self, full: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_velocity];
        for (n, nd) in self.nodes.iter().enumerate() {
            for (i, c) in nd.entries() {
                x[i] = c[0] * full[2 * n] + c[1] * full[2 * n + 1];
            }
        }
        x
    }
}
