//! Gauss–Legendre rules and one-dimensional Lagrange bases on `[-1, 1]`.

/// Tensor-product quadrature on the reference square plus a matching facet rule.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// `n`-point Gauss–Legendre rule, exact for polynomials of degree `2n - 1`.
    pub fn gauss_legendre(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one point");
        let mut points = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev initial guess, refined by Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            points[i] = -x;
            points[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Highest polynomial degree integrated exactly in one direction.
    pub fn exact_degree(&self) -> usize {
        2 * self.points.len() - 1
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Lagrange interpolation basis of order `k` on equispaced nodes of `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    nodes: Vec<f64>,
}

impl LagrangeBasis {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1);
        let nodes = (0..=order)
            .map(|a| -1.0 + 2.0 * a as f64 / order as f64)
            .collect();
        Self { nodes }
    }

    pub fn order(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn value(&self, a: usize, t: f64) -> f64 {
        let xa = self.nodes[a];
        self.nodes
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &xb)| (t - xb) / (xa - xb))
            .product()
    }

    pub fn derivative(&self, a: usize, t: f64) -> f64 {
        let xa = self.nodes[a];
        let mut sum = 0.0;
        for (m, &xm) in self.nodes.iter().enumerate() {
            if m == a {
                continue;
            }
            let mut term = 1.0 / (xa - xm);
            for (b, &xb) in self.nodes.iter().enumerate() {
                if b != a && b != m {
                    term *= (t - xb) / (xa - xb);
                }
            }
            sum += term;
        }
        sum
    }

    pub fn values(&self, t: f64) -> Vec<f64> {
        (0..self.nodes.len()).map(|a| self.value(a, t)).collect()
    }

    pub fn derivatives(&self, t: f64) -> Vec<f64> {
        (0..self.nodes.len()).map(|a| self.derivative(a, t)).collect()
    }
}
