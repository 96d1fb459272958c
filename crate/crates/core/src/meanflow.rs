//! Deterministic mean-field boundary value problem for (nu, m) = (E[X], E[Y]),
//! the decoupling offset phi = m - P nu, and the slope Psi of the mean
//! decoupling field.
//!
//! The primary method integrates the raw system backward from a trial terminal
//! mean nu_T = s with m_T = L s (so the terminal relation holds by
//! construction) and root-finds s so that nu_0 hits the prescribed mean. The
//! fallback is a damped Picard iteration in the decoupled variables.

use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::{ensure_same_grid, TimeGrid};
use crate::ode::{brent, integrate_adaptive, integrate_on_mesh, DenseCurve, Integration, DEFAULT_RTOL};
use crate::riccati::{solve_quadratic_backward, RiccatiPath, RECIPROCAL_LEVEL};

/// Relative tolerance on the initial-mean residual |nu_0 - E[xi]|.
pub const INITIAL_TOL: f64 = 1e-12;
const MAX_BRACKET_STEPS: usize = 60;
const MAX_BRENT_EVALS: usize = 200;
pub const PICARD_RELAXATION: f64 = 0.5;
pub const PICARD_MAX_ITER: usize = 2000;
pub const PICARD_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BvpMethod {
    Shooting,
    Picard,
}

#[derive(Debug, Clone)]
pub struct MeanFlow {
    level: f64,
    grid: TimeGrid,
    mean0: f64,
    nu: Vec<f64>,
    m: Vec<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    curve: DenseCurve<2>,
    shooting_residual: f64,
    initial_residual: f64,
    method: BvpMethod,
    iterations: usize,
}

impl MeanFlow {
    pub fn level(&self) -> f64 {
        self.level
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn mean0(&self) -> f64 {
        self.mean0
    }
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }
    pub fn m(&self) -> &[f64] {
        &self.m
    }
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }
    /// |m_T - L nu_T|.
    pub fn shooting_residual(&self) -> f64 {
        self.shooting_residual
    }
    /// |nu_0 - E[xi]|.
    pub fn initial_residual(&self) -> f64 {
        self.initial_residual
    }
    pub fn method(&self) -> BvpMethod {
        self.method
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    /// Dense (nu, m) from the integrator.
    pub fn eval(&self, t: f64) -> [f64; 2] {
        self.curve.eval(t)
    }
    pub fn curve(&self) -> &DenseCurve<2> {
        &self.curve
    }

    /// Acceptance bound on the terminal residual.
    pub fn shooting_tolerance(&self) -> f64 {
        1e-9 * (self.level * self.nu[self.nu.len() - 1].abs()).max(1.0)
    }
}

/// Right-hand side of the raw mean system.
fn raw_rhs(c: &CoefficientSet, t: f64, y: &[f64; 2]) -> Result<[f64; 2]> {
    let (nu, m) = (y[0], y[1]);
    let (a, b, q, r) = (c.a.eval(t), c.b.eval(t), c.q.eval(t), c.r.eval(t));
    let mu = c.mu(t, m)?;
    let dnu = a * nu - b * b * m / r + c.population_drift(t, mu) + c.f.eval(t, nu);
    let dm = -(a * m + q * nu + q * c.l.eval(t, nu));
    if !(dnu.is_finite() && dm.is_finite()) {
        return Err(Error::NonFinite { name: "mean drift", t, x: nu });
    }
    Ok([dnu, dm])
}

/// Backward integration from (s, L s) at the last node down to the first.
struct Shooter<'a> {
    c: &'a CoefficientSet,
    level: f64,
    back: Vec<f64>,
    frozen: Option<(Vec<f64>, Vec<usize>)>,
}

impl Shooter<'_> {
    fn adapt(&mut self, s: f64) -> Result<Integration<2>> {
        let rhs = |t: f64, y: &[f64; 2]| raw_rhs(self.c, t, y);
        let sol = integrate_adaptive(&rhs, &self.back, [s, self.level * s], DEFAULT_RTOL)?;
        self.frozen = Some((sol.mesh.clone(), sol.node_index.clone()));
        Ok(sol)
    }

    fn run(&self, s: f64) -> Result<Integration<2>> {
        let (mesh, node_index) = self.frozen.as_ref().expect("mesh frozen");
        let rhs = |t: f64, y: &[f64; 2]| raw_rhs(self.c, t, y);
        let (states, slopes) = integrate_on_mesh(&rhs, mesh, [s, self.level * s])?;
        Ok(Integration {
            mesh: mesh.clone(),
            states,
            slopes,
            node_index: node_index.clone(),
        })
    }

    fn nu_start(&self, s: f64) -> Result<f64> {
        let sol = self.run(s)?;
        Ok(sol.states[sol.states.len() - 1][0])
    }
}

struct Shot {
    sol: Integration<2>,
    iterations: usize,
}

fn residual_tol(target: f64) -> f64 {
    INITIAL_TOL * target.abs().max(1.0)
}

fn bracket_and_solve(sh: &Shooter, target: f64, guess: f64, evals: &mut usize) -> Result<f64> {
    let r = |s: f64| -> Result<f64> { Ok(sh.nu_start(s)? - target) };
    let scale = guess.abs().max(f64::MIN_POSITIVE);
    let (mut lo, mut hi) = (0.0, guess);
    let (mut rlo, mut rhi) = (r(lo)?, r(hi)?);
    *evals += 2;
    let mut step = scale;
    let mut k = 0;
    while rlo * rhi > 0.0 {
        k += 1;
        if k > MAX_BRACKET_STEPS {
            return Err(Error::Convergence {
                reason: format!("no sign change of nu_0(s) - target on [{lo:e}, {hi:e}]"),
                residual: rlo.abs().min(rhi.abs()),
            });
        }
        step *= 4.0;
        if rhi.abs() <= rlo.abs() {
            // Expand on the side that is closer to the root.
            let (nl, nh) = if hi >= lo { (hi, hi + step) } else { (hi, hi - step) };
            lo = nl;
            rlo = rhi;
            hi = nh;
            rhi = r(hi)?;
        } else {
            let nl = if lo <= hi { lo - step } else { lo + step };
            hi = lo;
            rhi = rlo;
            lo = nl;
            rlo = r(lo)?;
        }
        *evals += 1;
    }
    let tol = residual_tol(target) * 1e-3;
    let root = brent(r, lo, hi, rlo, rhi, tol, MAX_BRENT_EVALS)?;
    *evals += root.evaluations;
    Ok(root.x)
}

/// Shoot over ascending `nodes` so that nu at `nodes[0]` equals `target`.
fn shoot(c: &CoefficientSet, level: f64, nodes: &[f64], target: f64) -> Result<Shot> {
    let span = nodes[nodes.len() - 1] - nodes[0];
    let mut sh = Shooter {
        c,
        level,
        back: nodes.iter().rev().copied().collect(),
        frozen: None,
    };
    let guess = if target == 0.0 { 1.0 } else { target / (1.0 + level * span) };
    sh.adapt(guess)?;
    let mut evals = 1;
    let mut s = if target == 0.0 { 0.0 } else { bracket_and_solve(&sh, target, guess, &mut evals)? };
    // Re-adapt at the root; if the accepted mesh moved, solve once more on it.
    let old_mesh = sh.frozen.as_ref().map(|f| f.0.len());
    let mut sol = sh.adapt(s)?;
    if sh.frozen.as_ref().map(|f| f.0.len()) != old_mesh && target != 0.0 {
        s = bracket_and_solve(&sh, target, s, &mut evals)?;
        sol = sh.run(s)?;
    }
    let residual = sol.states[sol.states.len() - 1][0] - target;
    if !(residual.abs() <= residual_tol(target)) {
        return Err(Error::Convergence {
            reason: format!("initial mean mismatch after {evals} evaluations"),
            residual: residual.abs(),
        });
    }
    Ok(Shot { sol, iterations: evals })
}

/// Slope Psi of the mean decoupling field along the solved curve.
fn solve_psi(c: &CoefficientSet, level: f64, grid: &TimeGrid, curve: &DenseCurve<2>) -> Result<Vec<f64>> {
    let coeffs = |t: f64| -> Result<(f64, f64, f64)> {
        let [nu, m] = curve.eval(t);
        let mu = c.mu(t, m)?;
        let (a, b, q, r) = (c.a.eval(t), c.b.eval(t), c.q.eval(t), c.r.eval(t));
        let g = b * b / r - c.population_drift_slope(t, mu);
        let lin = -(2.0 * a + c.f.deriv(t, nu));
        let c0 = -q * (1.0 + c.l.deriv(t, nu));
        Ok((g, lin, c0))
    };
    Ok(solve_quadratic_backward(grid.nodes(), level, coeffs, level > RECIPROCAL_LEVEL)?.values)
}

fn assemble(
    c: &CoefficientSet,
    p: &RiccatiPath,
    mean0: f64,
    nu: Vec<f64>,
    m: Vec<f64>,
    curve: DenseCurve<2>,
    method: BvpMethod,
    iterations: usize,
) -> Result<MeanFlow> {
    let grid = p.grid().clone();
    let level = p.level();
    let phi: Vec<f64> = nu.iter().zip(&m).zip(p.values()).map(|((n, mm), pp)| mm - pp * n).collect();
    let psi = solve_psi(c, level, &grid, &curve)?;
    let last = nu.len() - 1;
    Ok(MeanFlow {
        level,
        mean0,
        shooting_residual: (m[last] - level * nu[last]).abs(),
        initial_residual: (nu[0] - mean0).abs(),
        nu,
        m,
        phi,
        psi,
        curve,
        grid,
        method,
        iterations,
    })
}

fn from_shot(c: &CoefficientSet, p: &RiccatiPath, mean0: f64, shot: Shot) -> Result<MeanFlow> {
    let n = p.grid().len();
    let mut nu = vec![0.0; n];
    let mut m = vec![0.0; n];
    for (k, &idx) in shot.sol.node_index.iter().enumerate() {
        nu[n - 1 - k] = shot.sol.states[idx][0];
        m[n - 1 - k] = shot.sol.states[idx][1];
    }
    let curve = shot.sol.dense();
    assemble(c, p, mean0, nu, m, curve, BvpMethod::Shooting, shot.iterations)
}

fn check_inputs(c: &CoefficientSet, level: f64, mean0: f64, p: &RiccatiPath, g: &TimeGrid) -> Result<()> {
    ensure_same_grid(p.grid(), g, "Riccati path and mean flow")?;
    if p.level() != level {
        return Err(Error::GridMismatch(format!(
            "Riccati path solved for L = {}, requested L = {level}",
            p.level()
        )));
    }
    if !(mean0.is_finite() && mean0 >= 0.0) {
        return Err(Error::Domain(format!("initial mean must be nonnegative, got {mean0}")));
    }
    if (g.horizon() - c.horizon).abs() > 1e-12 * c.horizon {
        return Err(Error::GridMismatch("grid horizon differs from model horizon".into()));
    }
    Ok(())
}

/// Solve the mean boundary value problem at level `level`.
///
/// Shooting is tried first; on a convergence failure the damped Picard
/// iteration is used instead.
pub fn solve_mean_bvp(
    c: &CoefficientSet,
    level: f64,
    mean0: f64,
    p: &RiccatiPath,
    g: &TimeGrid,
) -> Result<MeanFlow> {
    check_inputs(c, level, mean0, p, g)?;
    match shoot(c, level, g.nodes(), mean0) {
        Ok(shot) => from_shot(c, p, mean0, shot),
        Err(shoot_err @ Error::Convergence { .. }) => {
            solve_mean_bvp_picard(c, level, mean0, p, g).map_err(|_| shoot_err)
        }
        Err(e) => Err(e),
    }
}

/// Damped fixed-point iteration in the decoupled variables: given frozen
/// mean-field forcing, phi solves a linear backward ODE with phi_T = 0 and nu a
/// linear forward ODE with nu_0 = mean0; then m = P nu + phi.
pub fn solve_mean_bvp_picard(
    c: &CoefficientSet,
    level: f64,
    mean0: f64,
    p: &RiccatiPath,
    g: &TimeGrid,
) -> Result<MeanFlow> {
    check_inputs(c, level, mean0, p, g)?;
    let mesh: Vec<f64> = p.mesh().to_vec();
    let back: Vec<f64> = mesh.iter().rev().copied().collect();
    let nm = mesh.len();
    let p_at = |t: f64| p.eval(t);

    // Start from the uncoupled solution: phi = 0.
    let mut iterate: DenseCurve<2> = DenseCurve::new(mesh.clone(), vec![[0.0, 0.0]; nm], vec![[0.0, 0.0]; nm]);
    let mut first = true;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    while iterations < PICARD_MAX_ITER {
        iterations += 1;
        let frozen = |t: f64| -> Result<(f64, f64)> {
            if first {
                return Ok((0.0, 0.0));
            }
            let [nu, m] = iterate.eval(t);
            let mu = c.mu(t, m)?;
            Ok((c.f.eval(t, nu) + c.population_drift(t, mu), c.q.eval(t) * c.l.eval(t, nu)))
        };
        let phi_rhs = |t: f64, y: &[f64; 1]| -> Result<[f64; 1]> {
            let (forcing, ql) = frozen(t)?;
            let pt = p_at(t);
            let (a, b, r) = (c.a.eval(t), c.b.eval(t), c.r.eval(t));
            Ok([-((a - b * b * pt / r) * y[0] + pt * forcing + ql)])
        };
        let (phi_back, dphi_back) = integrate_on_mesh(&phi_rhs, &back, [0.0])?;
        let phi_curve = DenseCurve::new(back.clone(), phi_back, dphi_back);
        let nu_rhs = |t: f64, y: &[f64; 1]| -> Result<[f64; 1]> {
            let (forcing, _) = frozen(t)?;
            let pt = p_at(t);
            let (a, b, r) = (c.a.eval(t), c.b.eval(t), c.r.eval(t));
            Ok([(a - b * b * pt / r) * y[0] - b * b * phi_curve.eval(t)[0] / r + forcing])
        };
        let (nu_vals, dnu_vals) = integrate_on_mesh(&nu_rhs, &mesh, [mean0])?;

        let mut values = Vec::with_capacity(nm);
        let mut slopes = Vec::with_capacity(nm);
        let dp = DenseCurve::new(mesh.clone(), mesh.iter().map(|&t| [p_at(t)]).collect(), p_slopes(p, &mesh));
        for i in 0..nm {
            let t = mesh[i];
            let pt = p_at(t);
            let ph = phi_curve.values()[i][0];
            let dph = phi_curve.slopes()[i][0];
            let nu = nu_vals[i][0];
            let dnu = dnu_vals[i][0];
            values.push([nu, pt * nu + ph]);
            slopes.push([dnu, dp.slopes()[i][0] * nu + pt * dnu + dph]);
        }
        let w = if first { 1.0 } else { PICARD_RELAXATION };
        let mut change: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for i in 0..nm {
            let old = iterate.values()[i];
            for k in 0..2 {
                change = change.max((values[i][k] - old[k]).abs());
                scale = scale.max(values[i][k].abs());
                values[i][k] = (1.0 - w) * old[k] + w * values[i][k];
                slopes[i][k] = (1.0 - w) * iterate.slopes()[i][k] + w * slopes[i][k];
            }
        }
        iterate = DenseCurve::new(mesh.clone(), values, slopes);
        let was_first = first;
        first = false;
        if !c.has_couplings() && was_first {
            last_change = 0.0;
            break;
        }
        last_change = change / scale;
        if !was_first && last_change <= PICARD_TOL {
            break;
        }
        if !last_change.is_finite() {
            break;
        }
    }
    if !(last_change <= PICARD_TOL) {
        return Err(Error::Convergence {
            reason: format!("Picard iteration stalled after {iterations} sweeps"),
            residual: last_change,
        });
    }
    let mut nu = Vec::with_capacity(g.len());
    let mut m = Vec::with_capacity(g.len());
    for &t in g.nodes() {
        let i = mesh.partition_point(|&s| s < t);
        let [a, b] = iterate.values()[i];
        debug_assert_eq!(mesh[i], t);
        nu.push(a);
        m.push(b);
    }
    // Terminal pinning of phi: m_T = L nu_T exactly.
    let last = m.len() - 1;
    m[last] = level * nu[last];
    assemble(c, p, mean0, nu, m, iterate, BvpMethod::Picard, iterations)
}

fn p_slopes(p: &RiccatiPath, mesh: &[f64]) -> Vec<[f64; 1]> {
    // Central difference of the dense output; only used for Hermite slopes of m.
    mesh.iter()
        .map(|&t| {
            let h = 1e-7 * (1.0 + t.abs());
            let lo = (t - h).max(mesh[0]);
            let hi = (t + h).min(mesh[mesh.len() - 1]);
            [(p.eval(hi) - p.eval(lo)) / (hi - lo)]
        })
        .collect()
}

/// Decoupling offset Phi^L(t0, nu0): restart the mean problem at (t0, nu0)
/// and return m_{t0} - P_{t0} nu0.
pub fn phi_decoupling(
    c: &CoefficientSet,
    level: f64,
    t0: f64,
    nu0: f64,
    p: &RiccatiPath,
    g: &TimeGrid,
) -> Result<f64> {
    ensure_same_grid(p.grid(), g, "Riccati path and restart grid")?;
    if !(t0 >= 0.0 && t0 <= g.cutoff()) {
        return Err(Error::Domain(format!(
            "restart time {t0} must lie in [0, T - eps_T] = [0, {}]",
            g.cutoff()
        )));
    }
    if !nu0.is_finite() {
        return Err(Error::Domain(format!("restart mean must be finite, got {nu0}")));
    }
    if nu0 == 0.0 {
        return Ok(0.0);
    }
    let nodes = g.restart_nodes(t0);
    let shot = shoot(c, level, &nodes, nu0)?;
    let m0 = shot.sol.states[shot.sol.states.len() - 1][1];
    let pt = match g.index_of(t0) {
        Some(i) => p.values()[i],
        None => p.eval(t0),
    };
    Ok(m0 - pt * nu0)
}

/// Closed-form lower and upper comparison solutions for Psi.
pub fn psi_envelopes(c: &CoefficientSet, level: f64, t: f64) -> (f64, Result<f64>) {
    use crate::riccati::{lower_form, upper_form, EnvelopeConstants};
    let k = EnvelopeConstants::of(c);
    let s = (c.horizon - t).max(0.0);
    (lower_form(c.k, k.k3, level, s), upper_form(k.k4, k.k5, level, s))
}

/// Compare Psi against its envelopes at nodes with t <= T - eps_T.
pub fn check_psi_envelope(mf: &MeanFlow, c: &CoefficientSet) -> crate::riccati::BoundReport {
    let level = mf.level();
    crate::riccati::check_bounds(
        level,
        mf.grid(),
        mf.psi(),
        |t| psi_envelopes(c, level, t).0,
        |t| psi_envelopes(c, level, t).1,
    )
}
