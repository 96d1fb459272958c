//! Classical fourth-order Runge-Kutta stepping with half-step error control,
//! cubic Hermite dense output, and a bracketing scalar root finder.
//!
//! Integration runs node to node over a caller-supplied sequence of times,
//! which may be decreasing (backward integration). Each node interval is
//! bisected recursively until the full step and the two half steps agree to
//! a relative tolerance. The accepted sub-mesh is returned so that repeated
//! solves (shooting, per-sample trajectories) can replay it without the
//! acceptance decisions changing between calls.

use crate::error::{Error, Result};

/// Default relative tolerance for the half-step agreement test.
pub const DEFAULT_RTOL: f64 = 1e-10;
/// Maximum recursion depth of the step bisection within one grid interval.
pub const MAX_BISECTIONS: u32 = 48;

pub type State<const N: usize> = [f64; N];

#[inline]
fn axpy<const N: usize>(y: &State<N>, h: f64, k: &State<N>) -> State<N> {
    let mut out = *y;
    for i in 0..N {
        out[i] += h * k[i];
    }
    out
}

#[inline]
fn is_finite<const N: usize>(y: &State<N>) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// One RK4 step from `(t, y)` with step `h`, reusing a precomputed first stage.
pub fn rk4_step<const N: usize, F>(
    rhs: &F,
    t: f64,
    y: &State<N>,
    k1: &State<N>,
    h: f64,
) -> Result<State<N>>
where
    F: Fn(f64, &State<N>) -> Result<State<N>>,
{
    let k2 = rhs(t + 0.5 * h, &axpy(y, 0.5 * h, k1))?;
    let k3 = rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k2))?;
    let k4 = rhs(t + h, &axpy(y, h, &k3))?;
    let mut out = *y;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// Piecewise cubic Hermite interpolant through `(t, y, y')` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCurve<const N: usize> {
    times: Vec<f64>,
    values: Vec<State<N>>,
    slopes: Vec<State<N>>,
}

impl<const N: usize> DenseCurve<N> {
    /// Build from points in either time order; stored increasing.
    pub fn new(mut times: Vec<f64>, mut values: Vec<State<N>>, mut slopes: Vec<State<N>>) -> Self {
        assert_eq!(times.len(), values.len());
        assert_eq!(times.len(), slopes.len());
        if times.len() > 1 && times[0] > times[times.len() - 1] {
            times.reverse();
            values.reverse();
            slopes.reverse();
        }
        Self { times, values, slopes }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[State<N>] {
        &self.values
    }

    pub fn slopes(&self) -> &[State<N>] {
        &self.slopes
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        let idx = self.times.partition_point(|&s| s <= t);
        idx.clamp(1, n - 1) - 1
    }

    /// Hermite evaluation; clamps to the end values outside the covered span.
    pub fn eval(&self, t: f64) -> State<N> {
        if self.times.len() == 1 || t <= self.start() {
            return self.values[0];
        }
        if t >= self.end() {
            return self.values[self.values.len() - 1];
        }
        let i = self.segment(t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = [0.0; N];
        for k in 0..N {
            out[k] = h00 * self.values[i][k]
                + h10 * h * self.slopes[i][k]
                + h01 * self.values[i + 1][k]
                + h11 * h * self.slopes[i + 1][k];
        }
        out
    }

    /// Piecewise-linear evaluation between stored points.
    pub fn eval_linear(&self, t: f64) -> State<N> {
        if self.times.len() == 1 || t <= self.start() {
            return self.values[0];
        }
        if t >= self.end() {
            return self.values[self.values.len() - 1];
        }
        let i = self.segment(t);
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        let mut out = [0.0; N];
        for k in 0..N {
            out[k] = (1.0 - w) * self.values[i][k] + w * self.values[i + 1][k];
        }
        out
    }

    /// Concatenate with a curve that starts where this one ends.
    pub fn join(mut self, other: DenseCurve<N>) -> Self {
        let skip = usize::from(
            !self.times.is_empty() && !other.times.is_empty() && other.times[0] <= self.end(),
        );
        self.times.extend_from_slice(&other.times[skip..]);
        self.values.extend_from_slice(&other.values[skip..]);
        self.slopes.extend_from_slice(&other.slopes[skip..]);
        self
    }
}

/// Result of integrating over a node sequence.
#[derive(Debug, Clone)]
pub struct Integration<const N: usize> {
    /// All accepted mesh times, in integration order (first entry = start).
    pub mesh: Vec<f64>,
    /// Solution at every mesh time.
    pub states: Vec<State<N>>,
    /// Right-hand side at every mesh time.
    pub slopes: Vec<State<N>>,
    /// Index into `mesh` of each requested node.
    pub node_index: Vec<usize>,
}

impl<const N: usize> Integration<N> {
    pub fn node_states(&self) -> Vec<State<N>> {
        self.node_index.iter().map(|&i| self.states[i]).collect()
    }

    pub fn dense(&self) -> DenseCurve<N> {
        DenseCurve::new(self.mesh.clone(), self.states.clone(), self.slopes.clone())
    }
}

struct Recorder<const N: usize> {
    mesh: Vec<f64>,
    states: Vec<State<N>>,
    slopes: Vec<State<N>>,
}

#[allow(clippy::too_many_arguments)]
fn advance<const N: usize, F>(
    rhs: &F,
    ta: f64,
    tb: f64,
    y: &State<N>,
    k1: &State<N>,
    rtol: f64,
    depth: u32,
    rec: &mut Recorder<N>,
) -> Result<(State<N>, State<N>)>
where
    F: Fn(f64, &State<N>) -> Result<State<N>>,
{
    let h = tb - ta;
    let tm = 0.5 * (ta + tb);
    let full = rk4_step(rhs, ta, y, k1, h)?;
    let half = rk4_step(rhs, ta, y, k1, tm - ta)?;
    let km = rhs(tm, &half)?;
    let two = rk4_step(rhs, tm, &half, &km, tb - tm)?;
    let ok = is_finite(&full)
        && is_finite(&two)
        && (0..N).all(|i| {
            let scale = y[i].abs().max(two[i].abs());
            (full[i] - two[i]).abs() <= rtol * scale
        });
    if ok {
        let kb = rhs(tb, &two)?;
        rec.mesh.push(tm);
        rec.states.push(half);
        rec.slopes.push(km);
        rec.mesh.push(tb);
        rec.states.push(two);
        rec.slopes.push(kb);
        return Ok((two, kb));
    }
    if depth >= MAX_BISECTIONS || tm == ta || tm == tb {
        return Err(Error::Singularity { t: ta });
    }
    let (ym, km) = advance(rhs, ta, tm, y, k1, rtol, depth + 1, rec)?;
    advance(rhs, tm, tb, &ym, &km, rtol, depth + 1, rec)
}

/// Integrate across `nodes` (monotone, either direction) from `y0` at `nodes[0]`,
/// bisecting each node interval until the half-step test passes.
pub fn integrate_adaptive<const N: usize, F>(
    rhs: &F,
    nodes: &[f64],
    y0: State<N>,
    rtol: f64,
) -> Result<Integration<N>>
where
    F: Fn(f64, &State<N>) -> Result<State<N>>,
{
    assert!(!nodes.is_empty());
    let k0 = rhs(nodes[0], &y0)?;
    let mut rec = Recorder {
        mesh: vec![nodes[0]],
        states: vec![y0],
        slopes: vec![k0],
    };
    let mut node_index = vec![0];
    let (mut y, mut k) = (y0, k0);
    for w in nodes.windows(2) {
        let (ny, nk) = advance(rhs, w[0], w[1], &y, &k, rtol, 0, &mut rec)?;
        y = ny;
        k = nk;
        node_index.push(rec.mesh.len() - 1);
    }
    Ok(Integration {
        mesh: rec.mesh,
        states: rec.states,
        slopes: rec.slopes,
        node_index,
    })
}

/// Plain RK4 over a fixed mesh (typically one returned by [`integrate_adaptive`]).
pub fn integrate_on_mesh<const N: usize, F>(
    rhs: &F,
    mesh: &[f64],
    y0: State<N>,
) -> Result<(Vec<State<N>>, Vec<State<N>>)>
where
    F: Fn(f64, &State<N>) -> Result<State<N>>,
{
    let mut states = Vec::with_capacity(mesh.len());
    let mut slopes = Vec::with_capacity(mesh.len());
    let mut y = y0;
    let mut k = rhs(mesh[0], &y)?;
    states.push(y);
    slopes.push(k);
    for w in mesh.windows(2) {
        y = rk4_step(rhs, w[0], &y, &k, w[1] - w[0])?;
        if !is_finite(&y) {
            return Err(Error::Singularity { t: w[0] });
        }
        k = rhs(w[1], &y)?;
        states.push(y);
        slopes.push(k);
    }
    Ok((states, slopes))
}

/// Outcome of a bracketing root search.
#[derive(Debug, Clone, Copy)]
pub struct Root {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
}

/// Brent's method on a sign-changing bracket `[a, b]`.
///
/// Stops once `|f| <= ftol`, the bracket collapses to a few ulps, or
/// `max_iter` evaluations are spent; the best point seen is returned.
pub fn brent<F>(mut f: F, a: f64, b: f64, fa: f64, fb: f64, ftol: f64, max_iter: usize) -> Result<Root>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa * fb > 0.0 {
        return Err(Error::Convergence {
            reason: "root not bracketed".into(),
            residual: fa.abs().min(fb.abs()),
        });
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    let mut evals = 0;
    while evals < max_iter {
        if fb.abs() <= ftol {
            break;
        }
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 1e-300;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol {
            break;
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * xm * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(xm) };
        fb = f(b)?;
        evals += 1;
    }
    Ok(Root {
        x: b,
        fx: fb,
        evaluations: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_exponential_decay_matches_closed_form() {
        let rhs = |_t: f64, y: &[f64; 1]| Ok([-2.0 * y[0]]);
        let nodes: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let sol = integrate_adaptive(&rhs, &nodes, [1.0], DEFAULT_RTOL).unwrap();
        let end = sol.states[*sol.node_index.last().unwrap()][0];
        assert!((end - (-2.0f64).exp()).abs() < 1e-9 * (-2.0f64).exp());
    }

    #[test]
    fn backward_integration_and_dense_output() {
        // y' = y^2 - 1 backward from y(1) = 2: y = coth(1 - t + acoth 2)
        let rhs = |_t: f64, y: &[f64; 1]| Ok([y[0] * y[0] - 1.0]);
        let nodes: Vec<f64> = (0..=50).rev().map(|i| i as f64 / 50.0).collect();
        let sol = integrate_adaptive(&rhs, &nodes, [2.0], DEFAULT_RTOL).unwrap();
        let c = 0.5 * (3.0f64).ln();
        let curve = sol.dense();
        for &t in &[0.0, 0.013, 0.5, 0.777, 1.0] {
            let exact = 1.0 / (1.0 - t + c).tanh();
            assert!((curve.eval(t)[0] - exact).abs() < 1e-9 * exact, "t={t}");
        }
    }

    #[test]
    fn fixed_mesh_replay_reproduces_adaptive_solution() {
        let rhs = |t: f64, y: &[f64; 2]| Ok([y[1], -y[0] + t.sin()]);
        let nodes: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let a = integrate_adaptive(&rhs, &nodes, [1.0, 0.0], DEFAULT_RTOL).unwrap();
        let (states, _) = integrate_on_mesh(&rhs, &a.mesh, [1.0, 0.0]).unwrap();
        for (s, r) in a.states.iter().zip(&states) {
            assert!((s[0] - r[0]).abs() < 1e-13 && (s[1] - r[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn blow_up_reports_singularity() {
        // y' = y^2 from y(0) = 1 blows up at t = 1.
        let rhs = |_t: f64, y: &[f64; 1]| Ok([y[0] * y[0]]);
        let err = integrate_adaptive(&rhs, &[0.0, 0.5, 1.0, 1.5], [1.0], DEFAULT_RTOL).unwrap_err();
        match err {
            Error::Singularity { t } => assert!(t > 0.5 && t < 1.0 + 1e-6, "{t}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn brent_finds_cubic_root() {
        let f = |x: f64| Ok(x * x * x - 2.0);
        let r = brent(f, 0.0, 2.0, -2.0, 6.0, 1e-14, 100).unwrap();
        assert!((r.x - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        let p = |t: f64| 1.0 + t - 2.0 * t * t + 0.5 * t * t * t;
        let dp = |t: f64| 1.0 - 4.0 * t + 1.5 * t * t;
        let ts = vec![0.0, 0.3, 1.0, 2.5];
        let curve = DenseCurve::new(
            ts.clone(),
            ts.iter().map(|&t| [p(t)]).collect(),
            ts.iter().map(|&t| [dp(t)]).collect(),
        );
        for &t in &[0.1, 0.7, 1.9, 2.4] {
            assert!((curve.eval(t)[0] - p(t)).abs() < 1e-12);
        }
    }
}
