//! Poincaré-ball geometry.
//!
//! Points are plain `f64` slices of dimension `d`. The ball of curvature `-c`
//! is `{x : ||x|| < 1/sqrt(c)}`. Every exported operation validates its input
//! for finiteness; the `*_unchecked` variants skip that and are used on the
//! training hot path where the store already guarantees finite coordinates.

use thiserror::Error;

/// Margin kept between projected points and the ball boundary.
pub const BALL_EPS: f64 = 1e-5;
/// Arguments of `artanh` are clamped to `1 - CLAMP_EPS`.
pub const CLAMP_EPS: f64 = 1e-15;
/// Below this norm a vector is treated as the origin in log/exp maps.
const ORIGIN_EPS: f64 = 1e-15;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("curvature must be positive and finite, got {0}")]
    BadCurvature(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Curvature magnitude `c > 0`; the metric has sectional curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self, GeometryError> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(GeometryError::BadCurvature(c))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest norm a projected point may have.
    #[inline]
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = GeometryError;
    fn try_from(c: f64) -> Result<Self, Self::Error> {
        Self::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

fn check(op: &'static str, xs: &[&[f64]]) -> Result<(), GeometryError> {
    if let Some(first) = xs.first() {
        for x in &xs[1..] {
            if x.len() != first.len() {
                return Err(GeometryError::DimensionMismatch(first.len(), x.len()));
            }
        }
    }
    if xs.iter().all(|x| x.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(GeometryError::NonFinite(op))
    }
}

#[inline]
fn clamped_artanh(u: f64) -> f64 {
    u.min(1.0 - CLAMP_EPS).atanh()
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &[f64], y: &[f64], c: Curvature) -> Result<Vec<f64>, GeometryError> {
    check("mobius_add", &[x, y])?;
    let mut out = mobius_add_unchecked(x, y, c);
    project_in_place(&mut out, c);
    Ok(out)
}

pub(crate) fn mobius_add_unchecked(x: &[f64], y: &[f64], c: Curvature) -> Vec<f64> {
    let c = c.get();
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
}

/// Geodesic distance `(2/sqrt c) artanh(sqrt c ||(-x) ⊕_c y||)`.
pub fn dist(x: &[f64], y: &[f64], c: Curvature) -> Result<f64, GeometryError> {
    check("dist", &[x, y])?;
    Ok(dist_unchecked(x, y, c))
}

pub(crate) fn dist_unchecked(x: &[f64], y: &[f64], c: Curvature) -> f64 {
    // ||(-x) ⊕ y|| written out without allocating.
    let cv = c.get();
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 - 2.0 * cv * xy + cv * y2;
    let b = 1.0 - cv * x2;
    let den = 1.0 - 2.0 * cv * xy + cv * cv * x2 * y2;
    let num_sq: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let w = b * yi - a * xi;
            w * w
        })
        .sum();
    let m = num_sq.sqrt() / den;
    let sc = c.sqrt();
    2.0 / sc * clamped_artanh(sc * m)
}

/// Logarithmic map at the origin.
pub fn log0(x: &[f64], c: Curvature) -> Result<Vec<f64>, GeometryError> {
    check("log0", &[x])?;
    Ok(log0_unchecked(x, c))
}

pub(crate) fn log0_unchecked(x: &[f64], c: Curvature) -> Vec<f64> {
    let r = norm(x);
    if r < ORIGIN_EPS {
        return vec![0.0; x.len()];
    }
    let sc = c.sqrt();
    let f = 2.0 / sc * clamped_artanh(sc * r) / r;
    x.iter().map(|v| v * f).collect()
}

/// Exponential map at the origin.
pub fn exp0(v: &[f64], c: Curvature) -> Result<Vec<f64>, GeometryError> {
    check("exp0", &[v])?;
    Ok(exp0_unchecked(v, c))
}

pub(crate) fn exp0_unchecked(v: &[f64], c: Curvature) -> Vec<f64> {
    let s = norm(v);
    if s < ORIGIN_EPS {
        return vec![0.0; v.len()];
    }
    let sc = c.sqrt();
    let h = (sc * s / 2.0).tanh() / (sc * s);
    v.iter().map(|x| x * h).collect()
}

/// Rescale onto the `(1 - BALL_EPS)/sqrt(c)` sphere when at or beyond it.
pub fn project(x: &[f64], c: Curvature) -> Result<Vec<f64>, GeometryError> {
    check("project", &[x])?;
    let mut out = x.to_vec();
    project_in_place(&mut out, c);
    Ok(out)
}

pub(crate) fn project_in_place(x: &mut [f64], c: Curvature) {
    let max = c.max_norm();
    let r = norm(x);
    // slack absorbs rounding so that projecting twice is a no-op
    if r > max * (1.0 + 4.0 * f64::EPSILON) {
        let s = max / r;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// Inverse-metric rescaling `((1 - c||x||^2)^2 / 4) g` of a Euclidean gradient.
pub fn riemannian_rescale(g: &[f64], x: &[f64], c: Curvature) -> Vec<f64> {
    let f = rescale_factor(x, c);
    g.iter().map(|v| v * f).collect()
}

#[inline]
pub(crate) fn rescale_factor(x: &[f64], c: Curvature) -> f64 {
    let t = 1.0 - c.get() * norm_sq(x);
    t * t / 4.0
}

/// Gradient of `dist(x, y)` with respect to `x`, `y` and `c`, in the form
/// `d/dx = dx_x x + dx_y y` and `d/dy = dy_x x + dy_y y`.
///
/// Uses the equivalent `arccosh` form of the distance. Coincident points have
/// no gradient and return zeros.
pub(crate) fn dist_grad(x: &[f64], y: &[f64], c: Curvature) -> DistGrad {
    let cv = c.get();
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let alpha = (1.0 - cv * x2).max(f64::MIN_POSITIVE);
    let beta = (1.0 - cv * y2).max(f64::MIN_POSITIVE);
    let delta: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = dist_unchecked(x, y, c);
    if delta <= 1e-30 {
        return DistGrad {
            value,
            ..Default::default()
        };
    }
    let gm1 = 2.0 * cv * delta / (alpha * beta); // gamma - 1
    let root = (gm1 * (gm1 + 2.0)).sqrt(); // sqrt(gamma^2 - 1)
    let sc = cv.sqrt();
    // d = acosh(gamma)/sqrt(c); dgamma/dx = 4c/(alpha beta) [(x - y) + c delta x / alpha]
    let k = 4.0 * cv / (sc * root * alpha * beta);
    let dgamma_dc = 2.0 * delta * (1.0 - cv * cv * x2 * y2) / (alpha * alpha * beta * beta);
    DistGrad {
        value,
        dx_x: k * (1.0 + cv * delta / alpha),
        dx_y: -k,
        dy_x: -k,
        dy_y: k * (1.0 + cv * delta / beta),
        dc: -0.5 / cv * value + dgamma_dc / (sc * root),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct DistGrad {
    pub value: f64,
    pub dx_x: f64,
    pub dx_y: f64,
    pub dy_x: f64,
    pub dy_y: f64,
    pub dc: f64,
}

impl DistGrad {
    /// `out += scale * d/dx`.
    #[inline]
    pub fn acc_dx(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let (a, b) = (scale * self.dx_x, scale * self.dx_y);
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o += a * xi + b * yi;
        }
    }

    /// `out += scale * d/dy`.
    #[inline]
    pub fn acc_dy(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let (a, b) = (scale * self.dy_x, scale * self.dy_y);
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o += a * xi + b * yi;
        }
    }
}

/// `log0(x) = f(||x||) x`; returns `(f, f'(r)/r, df/dc)` for Jacobian products.
pub(crate) fn log0_coeffs(r: f64, c: Curvature) -> (f64, f64, f64) {
    let cv = c.get();
    let sc = cv.sqrt();
    let u = sc * r;
    if u < 1e-4 {
        // artanh(u)/u = 1 + u^2/3 + u^4/5
        let f = 2.0 * (1.0 + u * u / 3.0 + u.powi(4) / 5.0);
        let fp_over_r = 4.0 * cv / 3.0 + 8.0 * cv * u * u / 5.0;
        let df_dc = 2.0 * r * r / 3.0 + 4.0 * cv * r.powi(4) / 5.0;
        return (f, fp_over_r, df_dc);
    }
    let at = clamped_artanh(u);
    let one_m = (1.0 - u * u).max(f64::MIN_POSITIVE);
    let f = 2.0 * at / u;
    let fp = 2.0 / (r * one_m) - 2.0 * at / (sc * r * r);
    // d/du [2 artanh(u)/u] = 2/(u(1-u^2)) - 2 artanh(u)/u^2 ; du/dc = r/(2 sqrt c)
    let df_du = 2.0 / (u * one_m) - 2.0 * at / (u * u);
    (f, fp / r, df_du * r / (2.0 * sc))
}

/// `exp0(v) = h(||v||) v`; returns `(h, h'(s)/s, dh/dc)`.
pub(crate) fn exp0_coeffs(s: f64, c: Curvature) -> (f64, f64, f64) {
    let cv = c.get();
    let sc = cv.sqrt();
    let w = sc * s / 2.0;
    if w < 1e-4 {
        // tanh(w)/(2w) = 1/2 - w^2/6 + w^4/15
        let h = 0.5 - w * w / 6.0 + w.powi(4) / 15.0;
        let hp_over_s = -cv / 12.0 + cv * cv * s * s / 60.0;
        let dh_dc = -s * s / 24.0 + cv * s.powi(4) / 120.0;
        return (h, hp_over_s, dh_dc);
    }
    let t = w.tanh();
    let sech2 = 1.0 - t * t;
    let h = t / (2.0 * w);
    let dh_dw = sech2 / (2.0 * w) - t / (2.0 * w * w);
    // dw/ds = sqrt c / 2 ; dw/dc = s / (4 sqrt c)
    (h, dh_dw * sc / 2.0 / s, dh_dw * s / (4.0 * sc))
}
