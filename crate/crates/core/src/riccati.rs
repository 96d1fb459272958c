//! Backward Riccati equation for the state slope of the decoupling field and
//! its closed-form comparison envelopes.

use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::ode::{integrate_adaptive, DenseCurve, DEFAULT_RTOL};

/// Levels above this are integrated in the reciprocal variable near T.
pub const RECIPROCAL_LEVEL: f64 = 1e6;
/// Fraction of the horizon covered by the reciprocal integration.
pub const RECIPROCAL_FRACTION: f64 = 0.05;

/// Solution of y' = g(t) y^2 + lin(t) y + c0(t) backward from y(T) = terminal.
pub(crate) struct QuadraticSolution {
    pub values: Vec<f64>,
    pub curve: DenseCurve<1>,
}

/// Integrate the quadratic ODE backward over the ascending `nodes`.
///
/// With `reciprocal` set, q = 1/y is integrated on the nodes with
/// t >= (1 - RECIPROCAL_FRACTION) T, which keeps the state O(1) when the
/// terminal value is huge.
pub(crate) fn solve_quadratic_backward<F>(
    nodes: &[f64],
    terminal: f64,
    coeffs: F,
    reciprocal: bool,
) -> Result<QuadraticSolution>
where
    F: Fn(f64) -> Result<(f64, f64, f64)> + Sync,
{
    let n = nodes.len();
    let horizon = nodes[n - 1];
    let direct = |t: f64, y: &[f64; 1]| -> Result<[f64; 1]> {
        let (g, lin, c0) = coeffs(t)?;
        Ok([g * y[0] * y[0] + lin * y[0] + c0])
    };
    let mut values = vec![0.0; n];
    values[n - 1] = terminal;

    let split = if reciprocal {
        let cut = horizon * (1.0 - RECIPROCAL_FRACTION);
        nodes.partition_point(|&t| t < cut).min(n - 1)
    } else {
        n - 1
    };

    let mut tail: Option<DenseCurve<1>> = None;
    let mut y_split = terminal;
    if split < n - 1 {
        let inv = |t: f64, q: &[f64; 1]| -> Result<[f64; 1]> {
            let (g, lin, c0) = coeffs(t)?;
            Ok([-(g + lin * q[0] + c0 * q[0] * q[0])])
        };
        let back: Vec<f64> = nodes[split..].iter().rev().copied().collect();
        let sol = integrate_adaptive(&inv, &back, [1.0 / terminal], DEFAULT_RTOL)?;
        for (k, &idx) in sol.node_index.iter().enumerate().skip(1) {
            let q = sol.states[idx][0];
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::Singularity { t: back[k] });
            }
            values[n - 1 - k] = 1.0 / q;
        }
        values[n - 1] = terminal;
        let p_vals: Vec<[f64; 1]> = sol.states.iter().map(|q| [1.0 / q[0]]).collect();
        let p_slopes: Vec<[f64; 1]> = sol
            .states
            .iter()
            .zip(&sol.slopes)
            .map(|(q, dq)| [-dq[0] / (q[0] * q[0])])
            .collect();
        tail = Some(DenseCurve::new(sol.mesh.clone(), p_vals, p_slopes));
        y_split = values[split];
    }

    let back: Vec<f64> = nodes[..=split].iter().rev().copied().collect();
    let sol = integrate_adaptive(&direct, &back, [y_split], DEFAULT_RTOL)?;
    for (k, &idx) in sol.node_index.iter().enumerate().skip(1) {
        let y = sol.states[idx][0];
        if !y.is_finite() {
            return Err(Error::Singularity { t: back[k] });
        }
        values[split - k] = y;
    }
    let mut curve = sol.dense();
    if let Some(tail) = tail {
        curve = curve.join(tail);
    }
    Ok(QuadraticSolution { values, curve })
}

/// P^L on a grid.
#[derive(Debug, Clone)]
pub struct RiccatiPath {
    level: f64,
    grid: TimeGrid,
    values: Vec<f64>,
    curve: DenseCurve<1>,
}

impl RiccatiPath {
    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Values at the grid nodes.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Piecewise-linear interpolation of the nodal values.
    pub fn interp(&self, t: f64) -> f64 {
        self.grid.interpolate(&self.values, t)
    }

    /// Dense output of the integrator (cubic Hermite on the accepted mesh).
    pub fn eval(&self, t: f64) -> f64 {
        self.curve.eval(t)[0]
    }

    /// Accepted integration mesh.
    pub fn mesh(&self) -> &[f64] {
        self.curve.times()
    }

    /// Scale all nodal and dense values; used to build corrupted fixtures.
    pub fn scaled(&self, factor: f64) -> Self {
        let values = self.values.iter().map(|v| v * factor).collect();
        let curve = DenseCurve::new(
            self.curve.times().to_vec(),
            self.curve.values().iter().map(|v| [v[0] * factor]).collect(),
            self.curve.slopes().iter().map(|v| [v[0] * factor]).collect(),
        );
        Self { values, curve, ..self.clone() }
    }

    /// Replace the nodal values (dense output rebuilt by linear slopes).
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        let nodes = self.grid.nodes();
        let slopes = (0..nodes.len())
            .map(|i| {
                let (a, b) = if i + 1 < nodes.len() { (i, i + 1) } else { (i - 1, i) };
                [(values[b] - values[a]) / (nodes[b] - nodes[a])]
            })
            .collect();
        let curve = DenseCurve::new(nodes.to_vec(), values.iter().map(|&v| [v]).collect(), slopes);
        Self { values, curve, ..self.clone() }
    }
}

/// Solve dP = (B^2 R^-1 P^2 - 2 A P - Q) dt backward from P_T = L.
pub fn solve_riccati(c: &CoefficientSet, level: f64, grid: &TimeGrid) -> Result<RiccatiPath> {
    if !(level.is_finite() && level > 0.0) {
        return Err(Error::Domain(format!("penalty level must be positive, got {level}")));
    }
    if (grid.horizon() - c.horizon).abs() > 1e-12 * c.horizon {
        return Err(Error::GridMismatch(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon(),
            c.horizon
        )));
    }
    let coeffs = |t: f64| -> Result<(f64, f64, f64)> {
        let b = c.b.eval(t);
        Ok((b * b / c.r.eval(t), -2.0 * c.a.eval(t), -c.q.eval(t)))
    };
    let sol = solve_quadratic_backward(grid.nodes(), level, coeffs, level > RECIPROCAL_LEVEL)?;
    if let Some(i) = sol.values.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Property {
            location: format!("t = {}", grid.nodes()[i]),
            detail: format!("Riccati solution lost positivity (P = {})", sol.values[i]),
        });
    }
    Ok(RiccatiPath {
        level,
        grid: grid.clone(),
        values: sol.values,
        curve: sol.curve,
    })
}

/// (e^{2K s}/L + kc (e^{2K s} - 1)/(2K))^{-1}; the lower comparison solution.
pub(crate) fn lower_form(k: f64, kc: f64, level: f64, s: f64) -> f64 {
    let x = 2.0 * k * s;
    let growth = if x == 0.0 { s } else { x.exp_m1() / (2.0 * k) };
    1.0 / (x.exp() / level + kc * growth)
}

/// sqrt(k1/k2) coth-type upper comparison solution with terminal value L.
pub(crate) fn upper_form(k1: f64, k2: f64, level: f64, s: f64) -> Result<f64> {
    let ratio = (k1 / k2).sqrt();
    let a = level / ratio;
    if !(a > 1.0) {
        return Err(Error::EnvelopeDomain { level, threshold: ratio });
    }
    let e = (2.0 * (k1 * k2).sqrt() * s).exp();
    Ok(ratio * (1.0 + 2.0 / ((1.0 + 2.0 / (a - 1.0)) * e - 1.0)))
}

/// Constants of the envelope family, all derived from (K, delta, eps0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
}

impl EnvelopeConstants {
    pub fn of(c: &CoefficientSet) -> Self {
        let (k, d, e) = (c.k, c.delta, c.eps0);
        Self {
            k1: k + 2.0 * k.powi(3) / (d * d),
            k2: d * d / (2.0 * k),
            k3: k * k / d + (k * k + k.powi(3)) / (d * e),
            k4: 2.0 * k.powi(3) / (d * d) + k + k * k,
            k5: d * d / (2.0 * k),
        }
    }
}

pub fn lower_envelope_hat_p(c: &CoefficientSet, level: f64, t: f64) -> f64 {
    lower_form(c.k, c.k * c.k / c.delta, level, (c.horizon - t).max(0.0))
}

pub fn upper_envelope_bar_p(c: &CoefficientSet, level: f64, t: f64) -> Result<f64> {
    let k = EnvelopeConstants::of(c);
    upper_form(k.k1, k.k2, level, (c.horizon - t).max(0.0))
}

/// Constant C1 with hat P^L_t >= C1 / (T - t + 1/L) for all t.
pub fn decay_constant_c1(c: &CoefficientSet) -> f64 {
    let x = 2.0 * c.k * c.horizon;
    let growth = x.exp_m1() / x;
    1.0 / x.exp().max(c.k * c.k / c.delta * growth)
}

/// Outcome of a two-sided bound check over grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub level: f64,
    pub lower_passed: bool,
    /// Smallest (value - lower + slack) over checked nodes.
    pub lower_margin: f64,
    pub lower_worst_t: f64,
    /// None when the upper envelope is undefined at this level.
    pub upper_passed: Option<bool>,
    pub upper_margin: Option<f64>,
    pub upper_worst_t: Option<f64>,
    /// Reason the upper check was skipped.
    pub upper_skip: Option<String>,
    pub nodes_checked: usize,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.lower_passed && self.upper_passed.unwrap_or(true)
    }
}

pub(crate) fn check_bounds<L, U>(
    level: f64,
    grid: &TimeGrid,
    values: &[f64],
    lower: L,
    upper: U,
) -> BoundReport
where
    L: Fn(f64) -> f64,
    U: Fn(f64) -> Result<f64>,
{
    let n = grid.interior_len();
    let mut lo = (f64::INFINITY, 0.0);
    let mut hi = (f64::INFINITY, 0.0);
    let mut skip = None;
    for i in 0..n {
        let t = grid.nodes()[i];
        let v = values[i];
        let slack = 1e-6 * (1.0 + v.abs());
        let m = v - lower(t) + slack;
        if m < lo.0 || m.is_nan() {
            lo = (m, t);
        }
        if skip.is_none() {
            match upper(t) {
                Ok(u) => {
                    let m = u - v + slack;
                    if m < hi.0 || m.is_nan() {
                        hi = (m, t);
                    }
                }
                Err(e) => skip = Some(e.to_string()),
            }
        }
    }
    let upper_ok = skip.is_none();
    BoundReport {
        level,
        lower_passed: lo.0 >= 0.0,
        lower_margin: lo.0,
        lower_worst_t: lo.1,
        upper_passed: upper_ok.then_some(hi.0 >= 0.0),
        upper_margin: upper_ok.then_some(hi.0),
        upper_worst_t: upper_ok.then_some(hi.1),
        upper_skip: skip,
        nodes_checked: n,
    }
}

/// Compare P against both envelopes at nodes with t <= T - eps_T.
pub fn check_riccati_envelope(p: &RiccatiPath, c: &CoefficientSet) -> BoundReport {
    let level = p.level();
    check_bounds(
        level,
        p.grid(),
        p.values(),
        |t| lower_envelope_hat_p(c, level, t),
        |t| upper_envelope_bar_p(c, level, t),
    )
}
