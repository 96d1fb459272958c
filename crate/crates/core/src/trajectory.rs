//! Per-sample optimal paths for a fixed penalty level, the constrained limit
//! bundle built from the top of a ladder, and realized costs.
//!
//! Given the solved mean flow the closed-loop state equation is linear,
//! X' = a(t) X + b(t) with a = A - B^2 P / R and
//! b = -B^2 phi / R - B h(mu) + b(mu) + f(nu). The mesh is chosen once by the
//! adaptive integrator on (mean state, unit deviation) and then replayed for
//! every sample with the coefficients cached at the RK4 stage times.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{CoefficientSet, InitialLaw};
use crate::error::{Error, Result};
use crate::field::{LevelSolution, PenaltyLadder};
use crate::grid::{ensure_same_grid, TimeGrid};
use crate::meanflow::MeanFlow;
use crate::ode::{integrate_adaptive, DEFAULT_RTOL};
use crate::riccati::{decay_constant_c1, RiccatiPath};

/// Ladder tops below this only produce a quality warning for the limit.
pub const MIN_LIMIT_LEVEL: f64 = 1e4;

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryBundle {
    /// Penalty level, or None for the constrained limit.
    pub level: Option<f64>,
    #[serde(skip)]
    pub grid: TimeGrid,
    pub samples: Vec<f64>,
    /// x[i][k]: sample i at node k.
    pub x: Vec<Vec<f64>>,
    /// Time derivative of x along the closed loop.
    pub dx: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub alpha_mean: Vec<f64>,
    /// Mean state from the mean-field solve, for consistency checks.
    pub nu: Vec<f64>,
    /// Mean adjoint from the mean-field solve.
    pub m: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn terminal_states(&self) -> Vec<f64> {
        self.x.iter().map(|p| p[p.len() - 1]).collect()
    }

    pub fn is_limit(&self) -> bool {
        self.level.is_none()
    }

    pub(crate) fn recompute_means(&mut self) {
        let n = self.samples.len() as f64;
        let avg = |paths: &[Vec<f64>]| -> Vec<f64> {
            let len = paths[0].len();
            (0..len).map(|k| paths.iter().map(|p| p[k]).sum::<f64>() / n).collect()
        };
        self.x_mean = avg(&self.x);
        self.y_mean = avg(&self.y);
        self.alpha_mean = avg(&self.alpha);
    }
}

struct ClosedLoop<'a> {
    c: &'a CoefficientSet,
    p: &'a RiccatiPath,
    mf: &'a MeanFlow,
}

impl ClosedLoop<'_> {
    /// (a(t), b(t)) of the linear state equation.
    fn coeffs(&self, t: f64) -> Result<(f64, f64)> {
        let c = self.c;
        let pt = self.p.eval(t);
        let [nu, m] = self.mf.eval(t);
        let phi = m - pt * nu;
        let (a, b, r) = (c.a.eval(t), c.b.eval(t), c.r.eval(t));
        let mu = c.mu(t, m)?;
        let gain = b * b / r;
        Ok((a - gain * pt, -gain * phi + c.population_drift(t, mu) + c.f.eval(t, nu)))
    }
}

/// Cached (a, b) at mesh points and interval midpoints.
struct Cache {
    mesh: Vec<f64>,
    at_nodes: Vec<(f64, f64)>,
    at_mid: Vec<(f64, f64)>,
    node_index: Vec<usize>,
}

impl Cache {
    fn integrate(&self, x0: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.node_index.len());
        let mut x = x0;
        let mut next = 0;
        for k in 0..self.mesh.len() {
            if next < self.node_index.len() && self.node_index[next] == k {
                out.push(x);
                next += 1;
            }
            if k + 1 == self.mesh.len() {
                break;
            }
            let h = self.mesh[k + 1] - self.mesh[k];
            let (a0, b0) = self.at_nodes[k];
            let (am, bm) = self.at_mid[k];
            let (a1, b1) = self.at_nodes[k + 1];
            let k1 = a0 * x + b0;
            let k2 = am * (x + 0.5 * h * k1) + bm;
            let k3 = am * (x + 0.5 * h * k2) + bm;
            let k4 = a1 * (x + h * k3) + b1;
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out
    }
}

/// Simulate every sample of `law` under the level-L feedback.
pub fn simulate_level(
    c: &CoefficientSet,
    sol: &LevelSolution,
    law: &InitialLaw,
    g: &TimeGrid,
) -> Result<TrajectoryBundle> {
    let p = &sol.riccati;
    let mf = &sol.mean;
    ensure_same_grid(p.grid(), g, "Riccati path and trajectory grid")?;
    ensure_same_grid(mf.grid(), g, "mean flow and trajectory grid")?;
    if let Some((i, v)) = law.samples().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("initial sample {i} is negative ({v})")));
    }
    let lp = ClosedLoop { c, p, mf };
    // Mesh selection on (mean state, unit deviation mode).
    let rhs = |t: f64, y: &[f64; 2]| -> Result<[f64; 2]> {
        let (a, b) = lp.coeffs(t)?;
        Ok([a * y[0] + b, a * y[1]])
    };
    let sol_mesh = integrate_adaptive(&rhs, g.nodes(), [mf.mean0(), 1.0], DEFAULT_RTOL)?;
    let mesh = sol_mesh.mesh;
    let at_nodes: Vec<(f64, f64)> = mesh.iter().map(|&t| lp.coeffs(t)).collect::<Result<_>>()?;
    let at_mid: Vec<(f64, f64)> = mesh
        .windows(2)
        .map(|w| lp.coeffs(0.5 * (w[0] + w[1])))
        .collect::<Result<_>>()?;
    let cache = Cache { mesh, at_nodes, at_mid, node_index: sol_mesh.node_index };

    let nodes = g.nodes();
    let node_ab: Vec<(f64, f64)> = cache.node_index.iter().map(|&i| cache.at_nodes[i]).collect();
    let mu_nodes: Vec<f64> = nodes
        .iter()
        .zip(mf.m())
        .map(|(&t, &m)| c.mu(t, m))
        .collect::<Result<_>>()?;
    let control_offset: Vec<f64> = nodes.iter().zip(&mu_nodes).map(|(&t, &mu)| c.h.eval(t, mu)).collect();
    let feedback = |x: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dx: Vec<f64> = x.iter().zip(&node_ab).map(|(x, (a, b))| a * x + b).collect();
        let y: Vec<f64> = x
            .iter()
            .zip(p.values())
            .zip(mf.phi())
            .map(|((x, p), phi)| p * x + phi)
            .collect();
        let alpha = y
            .iter()
            .enumerate()
            .map(|(k, y)| {
                let t = nodes[k];
                -c.b.eval(t) * y / c.r.eval(t) - control_offset[k]
            })
            .collect();
        (dx, y, alpha)
    };

    let paths: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = law
        .samples()
        .par_iter()
        .map(|&xi| {
            let x = cache.integrate(xi);
            let (dx, y, alpha) = feedback(&x);
            (x, dx, y, alpha)
        })
        .collect();
    let mut bundle = TrajectoryBundle {
        level: Some(p.level()),
        grid: g.clone(),
        samples: law.samples().to_vec(),
        x: Vec::with_capacity(paths.len()),
        dx: Vec::with_capacity(paths.len()),
        y: Vec::with_capacity(paths.len()),
        alpha: Vec::with_capacity(paths.len()),
        x_mean: Vec::new(),
        y_mean: Vec::new(),
        alpha_mean: Vec::new(),
        nu: mf.nu().to_vec(),
        m: mf.m().to_vec(),
    };
    for (x, dx, y, alpha) in paths {
        bundle.x.push(x);
        bundle.dx.push(dx);
        bundle.y.push(y);
        bundle.alpha.push(alpha);
    }
    bundle.recompute_means();
    Ok(bundle)
}

/// Constrained limit objects with their quality certificate.
#[derive(Debug, Clone, Serialize)]
pub struct LimitBundle {
    pub bundle: TrajectoryBundle,
    pub level: f64,
    pub previous_level: Option<f64>,
    /// max over samples and nodes of |X^{L_max} - X^{L_prev}|.
    pub cauchy_gap: Option<f64>,
    pub terminal_states: Vec<f64>,
    /// Per-sample sup of Y, the bound used for the terminal tolerance.
    pub u_bounds: Vec<f64>,
    pub tol_terminal: Vec<f64>,
    pub warnings: Vec<String>,
}

/// X^infinity, Y^infinity and alpha^infinity from the top of the ladder.
///
/// `bundles` must hold one simulated bundle per ladder level (same order).
pub fn build_constrained_solution(
    c: &CoefficientSet,
    ladder: &PenaltyLadder,
    bundles: &[TrajectoryBundle],
    g: &TimeGrid,
) -> Result<LimitBundle> {
    ensure_same_grid(ladder.grid(), g, "ladder and limit grid")?;
    if bundles.len() != ladder.len() || bundles.is_empty() {
        return Err(Error::Ladder(format!(
            "expected {} simulated levels, got {}",
            ladder.len(),
            bundles.len()
        )));
    }
    let top = &bundles[bundles.len() - 1];
    let level = ladder.top().level();
    let mut warnings = Vec::new();
    if level < MIN_LIMIT_LEVEL {
        warnings.push(format!(
            "largest level {level} is below {MIN_LIMIT_LEVEL}; the limit estimate is coarse, add larger levels"
        ));
    }
    let mut limit = top.clone();
    limit.level = None;
    let last = g.len() - 1;
    for path in &mut limit.alpha {
        path[last] = 0.0;
    }
    limit.recompute_means();
    let _ = c;

    let (previous_level, cauchy_gap) = if bundles.len() >= 2 {
        let prev = &bundles[bundles.len() - 2];
        let gap = top
            .x
            .iter()
            .zip(&prev.x)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max);
        (Some(ladder.solutions()[bundles.len() - 2].level()), Some(gap))
    } else {
        (None, None)
    };
    let terminal_states = limit.terminal_states();
    let u_bounds: Vec<f64> = limit.y.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).collect();
    let tol_terminal: Vec<f64> = u_bounds.iter().map(|u| 10.0 * u / level).collect();
    for (i, (x, tol)) in terminal_states.iter().zip(&tol_terminal).enumerate() {
        if x.abs() > *tol && x.abs() > 0.0 {
            return Err(Error::LimitQuality(format!(
                "sample {i}: |X_T| = {:e} exceeds {:e} = 10 sup Y / L_max; increase the largest penalty level",
                x.abs(),
                tol
            )));
        }
    }
    Ok(LimitBundle {
        bundle: limit,
        level,
        previous_level,
        cauchy_gap,
        terminal_states,
        u_bounds,
        tol_terminal,
        warnings,
    })
}

/// Realized costs of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub level: Option<f64>,
    pub per_sample: Vec<f64>,
    /// Sample mean of the per-sample costs.
    pub expected: f64,
}

/// 1/2 int [Q (X + l(nu))^2 + R (alpha + h(mu))^2] dt by the trapezoid rule,
/// plus 1/2 L X_T^2 for finite levels.
pub fn evaluate_costs(bundle: &TrajectoryBundle, c: &CoefficientSet, mf: &MeanFlow) -> Result<CostReport> {
    ensure_same_grid(&bundle.grid, mf.grid(), "bundle and mean flow")?;
    let nodes = bundle.grid.nodes();
    let n = nodes.len();
    let mut l_nu = Vec::with_capacity(n);
    let mut h_mu = Vec::with_capacity(n);
    for (k, &t) in nodes.iter().enumerate() {
        l_nu.push(c.l.eval(t, mf.nu()[k]));
        h_mu.push(c.h.eval(t, c.mu(t, mf.m()[k])?));
    }
    let per_sample: Vec<f64> = bundle
        .x
        .iter()
        .zip(&bundle.alpha)
        .map(|(x, alpha)| {
            let integrand = |k: usize| {
                let t = nodes[k];
                let sx = x[k] + l_nu[k];
                let sa = alpha[k] + h_mu[k];
                c.q.eval(t) * sx * sx + c.r.eval(t) * sa * sa
            };
            let mut acc = 0.0;
            let mut prev = integrand(0);
            for k in 1..n {
                let cur = integrand(k);
                acc += 0.5 * (nodes[k] - nodes[k - 1]) * (prev + cur);
                prev = cur;
            }
            let terminal = bundle.level.map_or(0.0, |l| l * x[n - 1] * x[n - 1]);
            0.5 * (acc + terminal)
        })
        .collect();
    let expected = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CostReport { level: bundle.level, per_sample, expected })
}

/// Largest |Y - Y_backward| where Y_backward integrates
/// dY = -[A Y + Q X + Q l(nu)] dt from Y_T = L X_T (finite levels only).
pub fn backward_adjoint_gap(bundle: &TrajectoryBundle, c: &CoefficientSet, mf: &MeanFlow) -> Result<(f64, usize, f64)> {
    let level = bundle
        .level
        .ok_or_else(|| Error::Domain("backward re-derivation needs a finite level".into()))?;
    let nodes = bundle.grid.nodes();
    let n = nodes.len();
    let mut worst = (0.0, 0, nodes[0]);
    for (i, x) in bundle.x.iter().enumerate() {
        let dx = &bundle.dx[i];
        // Cubic Hermite state between nodes.
        let x_at = |k: usize, s: f64| -> f64 {
            let h = nodes[k + 1] - nodes[k];
            let u = (s - nodes[k]) / h;
            let (u2, u3) = (u * u, u * u * u);
            (2.0 * u3 - 3.0 * u2 + 1.0) * x[k]
                + (u3 - 2.0 * u2 + u) * h * dx[k]
                + (-2.0 * u3 + 3.0 * u2) * x[k + 1]
                + (u3 - u2) * h * dx[k + 1]
        };
        let f = |t: f64, xv: f64, yv: f64| -> f64 {
            let nu = mf.eval(t)[0];
            -(c.a.eval(t) * yv + c.q.eval(t) * xv + c.q.eval(t) * c.l.eval(t, nu))
        };
        let mut yb = level * x[n - 1];
        let scale = bundle.y[i].iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for k in (0..n - 1).rev() {
            let (t1, t0) = (nodes[k + 1], nodes[k]);
            let h = t0 - t1;
            let tm = 0.5 * (t0 + t1);
            let (x1, xm, x0) = (x[k + 1], x_at(k, tm), x[k]);
            let k1 = f(t1, x1, yb);
            let k2 = f(tm, xm, yb + 0.5 * h * k1);
            let k3 = f(tm, xm, yb + 0.5 * h * k2);
            let k4 = f(t0, x0, yb + h * k3);
            yb += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            let gap = (yb - bundle.y[i][k]).abs() / scale;
            if gap > worst.0 || gap.is_nan() {
                worst = (gap, i, t0);
            }
        }
    }
    Ok(worst)
}

/// Worst margin of the a-priori decay bound
/// X_t (1 + (C1 delta^2 / K) ln(T / (T - t))) <= (t K + 1) xi + t K E[xi]
/// over samples and nodes with t <= T - eps_T; returns (margin, sample, t).
pub fn decay_bound_margin(bundle: &TrajectoryBundle, c: &CoefficientSet, mean0: f64) -> (f64, usize, f64) {
    let g = &bundle.grid;
    let horizon = g.horizon();
    let c1 = decay_constant_c1(c);
    let factor = c1 * c.delta * c.delta / c.k;
    let mut worst = (f64::INFINITY, 0, 0.0);
    for (i, x) in bundle.x.iter().enumerate() {
        let xi = bundle.samples[i];
        for (k, &t) in g.nodes()[..g.interior_len()].iter().enumerate() {
            let lhs = x[k] * (1.0 + factor * (horizon / (horizon - t)).ln());
            let rhs = (t * c.k + 1.0) * xi + t * c.k * mean0;
            let m = rhs - lhs + 1e-10 * (1.0 + rhs.abs());
            if m < worst.0 || m.is_nan() {
                worst = (m, i, t);
            }
        }
    }
    worst
}

/// Least-squares slope of log X_T against log L over levels >= 1e2.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub levels_used: Vec<f64>,
}

pub const DECAY_FIT_MIN_LEVEL: f64 = 1e2;

/// None when fewer than two usable levels remain (zero terminal states are dropped).
pub fn terminal_decay_fit(levels: &[f64], terminal: &[f64]) -> Option<DecayFit> {
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .zip(terminal)
        .filter(|(l, x)| **l >= DECAY_FIT_MIN_LEVEL && x.abs() > 0.0)
        .map(|(l, x)| (l.ln(), x.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(DecayFit {
        slope: sxy / sxx,
        levels_used: levels
            .iter()
            .zip(terminal)
            .filter(|(l, x)| **l >= DECAY_FIT_MIN_LEVEL && x.abs() > 0.0)
            .map(|(l, _)| *l)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::run_ladder;
    use crate::grid::GridSpec;

    fn grid() -> TimeGrid {
        TimeGrid::graded(1.0, &GridSpec::default()).unwrap()
    }

    fn acoth(x: f64) -> f64 {
        0.5 * ((x + 1.0) / (x - 1.0)).ln()
    }

    #[test]
    fn zero_coupling_closed_form_paths() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        let sol = LevelSolution::solve(&c, 2.0, 1.0, &g).unwrap();
        let law = InitialLaw::from_samples(vec![1.0]).unwrap();
        let b = simulate_level(&c, &sol, &law, &g).unwrap();
        let k = acoth(2.0);
        for (i, &t) in g.nodes().iter().enumerate() {
            let exact = (1.0 - t + k).sinh() / (1.0 + k).sinh();
            assert!((b.x[0][i] - exact).abs() < 1e-10 * exact);
            assert_eq!(b.alpha[0][i], -b.y[0][i]);
        }
        assert!((b.terminal_states()[0] - 0.256_839_440_244_921_4).abs() < 1e-10);
        let cost = evaluate_costs(&b, &c, &sol.mean).unwrap();
        assert!((cost.expected - 0.547_242_974_874_043_9).abs() < 1e-6, "{}", cost.expected);
        let (gap, _, _) = backward_adjoint_gap(&b, &c, &sol.mean).unwrap();
        assert!(gap < 1e-8, "{gap}");
    }

    #[test]
    fn decay_fit_recovers_inverse_rate() {
        let levels = [1.0, 1e2, 1e3, 1e4];
        let xt: Vec<f64> = levels.iter().map(|l| 3.0 / l).collect();
        let fit = terminal_decay_fit(&levels, &xt).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert_eq!(fit.levels_used, vec![1e2, 1e3, 1e4]);
        assert!(terminal_decay_fit(&[1e2], &[1.0]).is_none());
    }

    #[test]
    fn zero_sample_stays_at_rest() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        let sol = LevelSolution::solve(&c, 10.0, 0.0, &g).unwrap();
        let law = InitialLaw::from_samples(vec![0.0, 0.0]).unwrap();
        let b = simulate_level(&c, &sol, &law, &g).unwrap();
        assert!(b.x.iter().chain(&b.y).chain(&b.alpha).all(|p| p.iter().all(|&v| v == 0.0)));
        let cost = evaluate_costs(&b, &c, &sol.mean).unwrap();
        assert_eq!(cost.expected, 0.0);
    }

    #[test]
    fn mean_of_samples_tracks_mean_flow() {
        let g = grid();
        let c = CoefficientSet {
            h: crate::coefficients::CouplingFn::Saturating { c: -0.2, s: 1.0, c_slope: 0.0 },
            b_coupling: crate::coefficients::CouplingFn::Saturating { c: 0.3, s: 1.0, c_slope: 0.0 },
            eps0: 0.8,
            ..CoefficientSet::unit(1.0)
        };
        let law = InitialLaw::from_samples(vec![0.6, 1.0, 1.4]).unwrap();
        let sol = LevelSolution::solve(&c, 100.0, law.mean(), &g).unwrap();
        let b = simulate_level(&c, &sol, &law, &g).unwrap();
        for (xm, nu) in b.x_mean.iter().zip(sol.mean.nu()) {
            assert!((xm - nu).abs() < 1e-8);
        }
        let (gap, _, _) = backward_adjoint_gap(&b, &c, &sol.mean).unwrap();
        assert!(gap < 1e-6, "{gap}");
    }

    #[test]
    fn limit_bundle_pins_control_and_decays() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        let law = InitialLaw::from_samples(vec![1.0, 0.5]).unwrap();
        let ladder = run_ladder(&c, &[1e2, 1e3, 1e4], law.mean(), &g).unwrap();
        let bundles: Vec<_> = ladder
            .solutions()
            .iter()
            .map(|s| simulate_level(&c, s, &law, &g).unwrap())
            .collect();
        let lim = build_constrained_solution(&c, &ladder, &bundles, &g).unwrap();
        assert!(lim.warnings.is_empty());
        let last = g.len() - 1;
        assert!(lim.bundle.alpha.iter().all(|p| p[last] == 0.0));
        let k = acoth(1e4);
        let expected = k.sinh() / (1.0 + k).sinh();
        assert!((lim.terminal_states[0] - expected).abs() < 1e-6 * expected);
        assert!((expected - 8.508_064_143_550_038e-5).abs() < 1e-15);
        let (m, _, _) = decay_bound_margin(&lim.bundle, &c, law.mean());
        assert!(m >= 0.0);
    }
}
