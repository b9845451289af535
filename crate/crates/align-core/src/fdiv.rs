//! f-divergence families and their convex conjugates.
//!
//! Each family is a convex generator `f: (0, inf) -> R` with `f(1) = 0`,
//! inducing `D_f(P||Q) = sum_x q(x) f(p(x)/q(x))` and the variational form
//! `D_f(P||Q) = sup_T E_P[T] - E_Q[f*(T)]` with `f*` the convex conjugate.
//! The conjugates here are closed-form; a numeric-sup checker is provided
//! so tests can verify them against `sup_u { u t - f(u) }` directly.

use crate::error::{Error, Result};

/// The implemented generator families.
///
/// `Alpha` carries its order parameter (must lie strictly between 0 and 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FDivFamily {
    /// f(u) = -log u; D_f(P||Q) = KL(Q||P).
    Airl,
    /// f(u) = -(u+1) log((1+u)/2) + u log u; D_f(P||Q) = 2 JS(P||Q).
    Gail,
    /// f(u) = u log u; D_f(P||Q) = KL(P||Q).
    Fairl,
    /// f(u) = (u^(1-a) - (1-a)u - a) / (a(a-1)).
    Alpha(f64),
}

impl FDivFamily {
    pub fn alpha(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || alpha == 0.0 || alpha == 1.0 || !alpha.is_finite() {
            return Err(Error::domain("alpha must lie strictly between 0 and 1"));
        }
        Ok(FDivFamily::Alpha(alpha))
    }

    pub fn name(&self) -> String {
        match self {
            FDivFamily::Airl => "airl".to_string(),
            FDivFamily::Gail => "gail".to_string(),
            FDivFamily::Fairl => "fairl".to_string(),
            FDivFamily::Alpha(a) => format!("alpha({a})"),
        }
    }

    /// The generator f(u), for u > 0.
    pub fn f(&self, u: f64) -> Result<f64> {
        if u <= 0.0 || !u.is_finite() {
            return Err(Error::domain(format!("f is defined on (0, inf), got {u}")));
        }
        Ok(match *self {
            FDivFamily::Airl => -u.ln(),
            FDivFamily::Gail => -(u + 1.0) * ((1.0 + u) / 2.0).ln() + u * u.ln(),
            FDivFamily::Fairl => u * u.ln(),
            FDivFamily::Alpha(a) => (u.powf(1.0 - a) - (1.0 - a) * u - a) / (a * (a - 1.0)),
        })
    }

    /// Extension of `q * f(p/q)` to the boundary, with `0 * f(0/0) := 0`.
    ///
    /// `q = 0 < p` is a support violation for every implemented family
    /// (the limit is infinite) and is reported as such by the divergence
    /// calculator rather than handled here.
    pub fn weighted_f(&self, p: f64, q: f64) -> Result<f64> {
        if q == 0.0 && p == 0.0 {
            return Ok(0.0);
        }
        if q == 0.0 {
            return Err(Error::SupportMismatch(format!(
                "q = 0 with p = {p} under family {}",
                self.name()
            )));
        }
        if p == 0.0 {
            // q f(p/q) as p -> 0: finite for FAIRL (0), infinite for AIRL,
            // q log 2 for GAIL, and finite for alpha in (0,1).
            return match *self {
                FDivFamily::Airl => Err(Error::SupportMismatch(
                    "p = 0 with q > 0 has infinite AIRL generator".to_string(),
                )),
                FDivFamily::Gail => Ok(q * 2f64.ln()),
                FDivFamily::Fairl => Ok(0.0),
                FDivFamily::Alpha(a) => Ok(q * -a / (a * (a - 1.0))),
            };
        }
        Ok(q * self.f(p / q)?)
    }

    /// Open interval on which the conjugate is finite.
    pub fn conjugate_domain(&self) -> (f64, f64) {
        match *self {
            FDivFamily::Airl => (f64::NEG_INFINITY, 0.0),
            FDivFamily::Gail => (f64::NEG_INFINITY, 2f64.ln()),
            FDivFamily::Fairl => (f64::NEG_INFINITY, f64::INFINITY),
            FDivFamily::Alpha(a) => (f64::NEG_INFINITY, 1.0 / a),
        }
    }

    pub fn in_conjugate_domain(&self, t: f64) -> bool {
        let (lo, hi) = self.conjugate_domain();
        t.is_finite() && t > lo && t < hi
    }

    /// Clamp a value into the conjugate domain, shrinking open upper bounds
    /// by a small margin so downstream logs stay finite.
    pub fn clamp_to_domain(&self, t: f64) -> f64 {
        let (_, hi) = self.conjugate_domain();
        if hi.is_finite() {
            t.min(hi - 1e-9)
        } else {
            t
        }
    }

    /// Closed-form convex conjugate f*(t) = sup_u { u t - f(u) }.
    pub fn conjugate(&self, t: f64) -> Result<f64> {
        if !self.in_conjugate_domain(t) {
            return Err(Error::domain(format!(
                "t = {t} outside conjugate domain of {}",
                self.name()
            )));
        }
        Ok(match *self {
            FDivFamily::Airl => -1.0 - (-t).ln(),
            FDivFamily::Gail => -(2.0 - t.exp()).ln(),
            FDivFamily::Fairl => (t - 1.0).exp(),
            // Maximizer u* = (1 - a t)^(-1/a); substitute into u t - f(u).
            FDivFamily::Alpha(a) => {
                let u = (1.0 - a * t).powf(-1.0 / a);
                u * t - self.f(u)?
            }
        })
    }

    /// Derivative of the conjugate; by duality this is the maximizing u*(t).
    pub fn conjugate_prime(&self, t: f64) -> Result<f64> {
        if !self.in_conjugate_domain(t) {
            return Err(Error::domain(format!(
                "t = {t} outside conjugate domain of {}",
                self.name()
            )));
        }
        Ok(match *self {
            FDivFamily::Airl => -1.0 / t,
            FDivFamily::Gail => {
                let e = t.exp();
                e / (2.0 - e)
            }
            FDivFamily::Fairl => (t - 1.0).exp(),
            FDivFamily::Alpha(a) => (1.0 - a * t).powf(-1.0 / a),
        })
    }

    /// Derivative of the generator, f'(u); the optimal critic value at
    /// density ratio u.
    pub fn f_prime(&self, u: f64) -> Result<f64> {
        if u <= 0.0 || !u.is_finite() {
            return Err(Error::domain(format!("f' is defined on (0, inf), got {u}")));
        }
        Ok(match *self {
            FDivFamily::Airl => -1.0 / u,
            FDivFamily::Gail => (2.0 * u / (1.0 + u)).ln(),
            FDivFamily::Fairl => u.ln() + 1.0,
            FDivFamily::Alpha(a) => (1.0 - u.powf(-a)) / a,
        })
    }
}

/// Numeric conjugate oracle: maximize `u t - f(u)` over a log-spaced grid on
/// `[u_lo, u_hi]`, then sharpen with ternary search around the best cell.
///
/// Kept independent of [`FDivFamily::conjugate`]; tests compare the two.
pub fn numeric_conjugate(
    family: FDivFamily,
    t: f64,
    u_lo: f64,
    u_hi: f64,
    grid: usize,
) -> Result<f64> {
    if u_lo <= 0.0 || u_hi <= u_lo || grid < 3 {
        return Err(Error::domain("bad numeric sup configuration"));
    }
    let g = |u: f64| -> Result<f64> { Ok(u * t - family.f(u)?) };
    let ln_lo = u_lo.ln();
    let ln_hi = u_hi.ln();
    let mut best_idx = 0usize;
    let mut best = f64::NEG_INFINITY;
    let us: Vec<f64> = (0..grid)
        .map(|i| (ln_lo + (ln_hi - ln_lo) * i as f64 / (grid - 1) as f64).exp())
        .collect();
    for (i, &u) in us.iter().enumerate() {
        let v = g(u)?;
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    // Ternary search between the neighbors of the best grid cell.
    let mut lo = us[best_idx.saturating_sub(1)];
    let mut hi = us[(best_idx + 1).min(grid - 1)];
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if g(m1)? < g(m2)? {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    g(0.5 * (lo + hi))
}
