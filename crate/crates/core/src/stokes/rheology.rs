use serde::{Deserialize, Serialize};

/// Symmetric 2x2 tensor stored as `[xx, zz, xz]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor {
    pub xx: f64,
    pub zz: f64,
    pub xz: f64,
}

impl SymTensor {
    pub const ZERO: Self = Self { xx: 0.0, zz: 0.0, xz: 0.0 };

    pub fn new(xx: f64, zz: f64, xz: f64) -> Self {
        Self { xx, zz, xz }
    }

    /// Double contraction `A : B`.
    pub fn ddot(&self, o: &Self) -> f64 {
        self.xx * o.xx + self.zz * o.zz + 2.0 * self.xz * o.xz
    }

    /// `1/2 tr(A^2)`.
    pub fn second_invariant(&self) -> f64 {
        0.5 * self.ddot(self)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(s * self.xx, s * self.zz, s * self.xz)
    }

    pub fn axpy(&mut self, a: f64, o: &Self) {
        self.xx += a * o.xx;
        self.zz += a * o.zz;
        self.xz += a * o.xz;
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.zz
    }
}

/// Glen's flow law `eta = 1/2 A^{-1/n} (eps_II + eps_reg)^{(1-n)/(2n)}`.
///
/// Units: `a` in MPa^-n a^-1, strain rates in a^-1, viscosity in MPa a.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlenRheology {
    pub n: f64,
    pub a: f64,
    pub eps_reg: f64,
}

impl Default for GlenRheology {
    fn default() -> Self {
        // 1e-16 Pa^-3 a^-1 expressed in MPa^-3 a^-1.
        Self {
            n: 3.0,
            a: 100.0,
            eps_reg: 1e-10,
        }
    }
}

/// Viscosity and its first two derivatives with respect to the regularized invariant.
#[derive(Debug, Clone, Copy)]
pub struct ViscosityDerivs {
    pub eta: f64,
    pub d1: f64,
    pub d2: f64,
}

impl GlenRheology {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.n >= 1.0) || !(self.a > 0.0) || !(self.eps_reg > 0.0) {
            return Err(crate::Error::InvalidArgument(format!("invalid rheology {self:?}")));
        }
        Ok(())
    }

    pub fn effective_viscosity(&self, strain_rate: &SymTensor) -> f64 {
        self.derivs(strain_rate).eta
    }

    pub fn derivs(&self, strain_rate: &SymTensor) -> ViscosityDerivs {
        let inv = strain_rate.second_invariant() + self.eps_reg;
        let expo = (1.0 - self.n) / (2.0 * self.n);
        let eta = 0.5 * self.a.powf(-1.0 / self.n) * inv.powf(expo);
        ViscosityDerivs {
            eta,
            d1: expo * eta / inv,
            d2: expo * (expo - 1.0) * eta / (inv * inv),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newtonian_limit_is_constant() {
        let r = GlenRheology { n: 1.0, a: 4.0, eps_reg: 1e-10 };
        for e in [SymTensor::ZERO, SymTensor::new(1.0, -1.0, 3.0)] {
            assert!((r.effective_viscosity(&e) - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn glen_values() {
        let r = GlenRheology { n: 3.0, a: 1.0, eps_reg: 1e-300 };
        // eps_II = 1/2 (xx^2 + zz^2 + 2 xz^2)
        let unit = SymTensor::new(1.0, 1.0, 0.0);
        assert!((r.effective_viscosity(&unit) - 0.5).abs() < 1e-14);
        let big = SymTensor::new(8.0, 8.0, 0.0);
        assert!((r.effective_viscosity(&big) - 0.125).abs() < 1e-14);
        let r = GlenRheology { n: 3.0, a: 1.0, eps_reg: 1.0 };
        assert!((r.effective_viscosity(&SymTensor::ZERO) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let r = GlenRheology { n: 3.0, a: 100.0, eps_reg: 1e-6 };
        let e = SymTensor::new(0.01, -0.01, 0.02);
        let d = r.derivs(&e);
        let inv = e.second_invariant() + r.eps_reg;
        let eta_of = |s: f64| 0.5 * r.a.powf(-1.0 / r.n) * s.powf((1.0 - r.n) / (2.0 * r.n));
        let h = 1e-6 * inv;
        let fd1 = (eta_of(inv + h) - eta_of(inv - h)) / (2.0 * h);
        let h2 = 1e-4 * inv;
        let fd2 = (eta_of(inv + h2) - 2.0 * eta_of(inv) + eta_of(inv - h2)) / (h2 * h2);
        assert!((fd1 - d.d1).abs() < 1e-6 * d.d1.abs());
        assert!((fd2 - d.d2).abs() < 1e-6 * d.d2.abs());
    }
}
