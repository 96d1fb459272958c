//! Decoupling field u^L(t, x, nu) = P^L_t x + Phi^L(t, nu), the penalty ladder,
//! and the large-L limit estimate.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::meanflow::{check_psi_envelope, phi_decoupling, solve_mean_bvp, MeanFlow};
use crate::riccati::{check_riccati_envelope, solve_riccati, BoundReport, RiccatiPath};

/// Default ladder 10^0, ..., 10^6.
pub fn default_levels() -> Vec<f64> {
    (0..=6).map(|k| 10f64.powi(k)).collect()
}

/// Everything solved at one penalty level.
#[derive(Debug, Clone)]
pub struct LevelSolution {
    pub riccati: RiccatiPath,
    pub mean: MeanFlow,
    pub riccati_bounds: BoundReport,
    pub psi_bounds: BoundReport,
}

impl LevelSolution {
    pub fn level(&self) -> f64 {
        self.riccati.level()
    }

    pub fn solve(c: &CoefficientSet, level: f64, mean0: f64, g: &TimeGrid) -> Result<Self> {
        let riccati = solve_riccati(c, level, g)?;
        let mean = solve_mean_bvp(c, level, mean0, &riccati, g)?;
        let riccati_bounds = check_riccati_envelope(&riccati, c);
        let psi_bounds = check_psi_envelope(&mean, c);
        Ok(Self { riccati, mean, riccati_bounds, psi_bounds })
    }
}

/// Worst violation of a nodewise ordering between consecutive levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderCheck {
    pub lower_level: f64,
    pub upper_level: f64,
    /// min over nodes of (upper - lower + slack); negative means violated.
    pub margin: f64,
    pub worst_t: f64,
}

/// Ordering margin of `lo <= hi + slack` over the given nodes.
pub(crate) fn order_margin(nodes: &[f64], lo: &[f64], hi: &[f64], slack: f64) -> (f64, f64) {
    let mut worst = (f64::INFINITY, nodes.first().copied().unwrap_or(0.0));
    for ((t, a), b) in nodes.iter().zip(lo).zip(hi) {
        let m = b - a + slack;
        if m < worst.0 || m.is_nan() {
            worst = (m, *t);
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct PenaltyLadder {
    coefficients: CoefficientSet,
    grid: TimeGrid,
    mean0: f64,
    solutions: Vec<LevelSolution>,
}

pub(crate) fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Ladder("at least one level is required".into()));
    }
    if let Some(l) = levels.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::Ladder(format!("levels must be positive and finite, got {l}")));
    }
    if let Some(w) = levels.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Ladder(format!(
            "levels must be strictly increasing ({} is followed by {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Solve every level in parallel. Results are returned in level order; the
/// first failure (by level) is reported together with the levels that succeeded.
pub fn run_ladder_partial(
    c: &CoefficientSet,
    levels: &[f64],
    mean0: f64,
    g: &TimeGrid,
) -> Result<(Vec<LevelSolution>, Option<Error>)> {
    check_levels(levels)?;
    let results: Vec<Result<LevelSolution>> =
        levels.par_iter().map(|&l| LevelSolution::solve(c, l, mean0, g)).collect();
    let mut solved = Vec::new();
    let mut failure = None;
    for (res, &level) in results.into_iter().zip(levels) {
        match res {
            Ok(s) => solved.push(s),
            Err(e) if failure.is_none() => {
                failure = Some(Error::LevelFailed { level, source: Box::new(e) })
            }
            Err(_) => {}
        }
    }
    Ok((solved, failure))
}

pub fn run_ladder(c: &CoefficientSet, levels: &[f64], mean0: f64, g: &TimeGrid) -> Result<PenaltyLadder> {
    let (solutions, failure) = run_ladder_partial(c, levels, mean0, g)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PenaltyLadder {
        coefficients: c.clone(),
        grid: g.clone(),
        mean0,
        solutions,
    })
}

impl PenaltyLadder {
    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coefficients
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn mean0(&self) -> f64 {
        self.mean0
    }
    pub fn levels(&self) -> Vec<f64> {
        self.solutions.iter().map(|s| s.level()).collect()
    }
    pub fn solutions(&self) -> &[LevelSolution] {
        &self.solutions
    }
    pub fn top(&self) -> &LevelSolution {
        self.solutions.last().expect("nonempty ladder")
    }
    pub fn len(&self) -> usize {
        self.solutions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    /// P^{L_i} <= P^{L_{i+1}} + 1e-9 at every node.
    pub fn riccati_order(&self) -> Vec<OrderCheck> {
        self.solutions
            .windows(2)
            .map(|w| {
                let (margin, worst_t) =
                    order_margin(self.grid.nodes(), w[0].riccati.values(), w[1].riccati.values(), 1e-9);
                OrderCheck { lower_level: w[0].level(), upper_level: w[1].level(), margin, worst_t }
            })
            .collect()
    }

    /// nu^{L_{i+1}} <= nu^{L_i} + 1e-9 at every node (the mean decreases in L).
    pub fn mean_order(&self) -> Vec<OrderCheck> {
        self.solutions
            .windows(2)
            .map(|w| {
                let (margin, worst_t) =
                    order_margin(self.grid.nodes(), w[1].mean.nu(), w[0].mean.nu(), 1e-9);
                OrderCheck { lower_level: w[0].level(), upper_level: w[1].level(), margin, worst_t }
            })
            .collect()
    }
}

/// u^L(t, x, nu) = P^L_t x + Phi^L(t, nu).
pub fn eval_u_l(c: &CoefficientSet, sol: &LevelSolution, t: f64, x: f64, nu: f64) -> Result<f64> {
    let p = &sol.riccati;
    let g = p.grid();
    let pt = match g.index_of(t) {
        Some(i) => p.values()[i],
        None => p.eval(t),
    };
    let phi = if c.has_couplings() { phi_decoupling(c, p.level(), t, nu, p, g)? } else { 0.0 };
    Ok(pt * x + phi)
}

/// Probe points (t, x, nu).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldProbes {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub nus: Vec<f64>,
}

impl FieldProbes {
    /// {0, T/4, T/2, 3T/4, T - eps_T} x {0, 1/2, 1, 2} x {0, 1/2, 1, 2}.
    pub fn default_for(g: &TimeGrid) -> Self {
        let t = g.horizon();
        Self {
            times: vec![0.0, 0.25 * t, 0.5 * t, 0.75 * t, g.cutoff()],
            xs: vec![0.0, 0.5, 1.0, 2.0],
            nus: vec![0.0, 0.5, 1.0, 2.0],
        }
    }

    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &t in &self.times {
            for &x in &self.xs {
                for &nu in &self.nus {
                    out.push((t, x, nu));
                }
            }
        }
        out
    }

    pub fn validate(&self, g: &TimeGrid) -> Result<()> {
        if self.times.is_empty() || self.xs.is_empty() || self.nus.is_empty() {
            return Err(Error::Config("probe axes must be nonempty".into()));
        }
        if let Some(t) = self.times.iter().find(|t| !(**t >= 0.0 && **t <= g.cutoff())) {
            return Err(Error::Config(format!(
                "probe time {t} must lie in [0, T - eps_T] = [0, {}]",
                g.cutoff()
            )));
        }
        if self.xs.iter().chain(&self.nus).any(|v| !v.is_finite()) {
            return Err(Error::Config("probe coordinates must be finite".into()));
        }
        Ok(())
    }
}

/// u^L at every probe for every level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeTable {
    pub levels: Vec<f64>,
    pub points: Vec<(f64, f64, f64)>,
    /// values[level][probe]
    pub values: Vec<Vec<f64>>,
    /// P^L_t at each probe time, per level (for envelope comparisons).
    pub slopes: Vec<Vec<f64>>,
}

impl ProbeTable {
    pub fn build(ladder: &PenaltyLadder, probes: &FieldProbes) -> Result<Self> {
        probes.validate(ladder.grid())?;
        let c = ladder.coefficients();
        let points = probes.points();
        // Phi depends on (t, nu) only; solve once per pair.
        let pairs: Vec<(f64, f64)> = probes
            .times
            .iter()
            .flat_map(|&t| probes.nus.iter().map(move |&nu| (t, nu)))
            .collect();
        let per_level: Vec<Result<(Vec<f64>, Vec<f64>)>> = ladder
            .solutions()
            .par_iter()
            .map(|sol| {
                let phis: Vec<f64> = pairs
                    .par_iter()
                    .map(|&(t, nu)| eval_u_l(c, sol, t, 0.0, nu))
                    .collect::<Result<_>>()?;
                let mut values = Vec::with_capacity(points.len());
                let mut slopes = Vec::with_capacity(points.len());
                for &(t, x, nu) in &points {
                    let k = pairs.iter().position(|&(pt, pn)| pt == t && pn == nu).expect("pair");
                    let p = eval_u_l(c, sol, t, 1.0, 0.0)?;
                    values.push(p * x + phis[k]);
                    slopes.push(p);
                }
                Ok((values, slopes))
            })
            .collect();
        let mut values = Vec::new();
        let mut slopes = Vec::new();
        for (r, sol) in per_level.into_iter().zip(ladder.solutions()) {
            let (v, s) = r.map_err(|e| Error::LevelFailed { level: sol.level(), source: Box::new(e) })?;
            values.push(v);
            slopes.push(s);
        }
        Ok(Self { levels: ladder.levels(), points, values, slopes })
    }

    /// Worst margin of u^{L_i} <= u^{L_{i+1}} + slack over probes with
    /// x >= nu > 0. There u = P (x - nu) + u(t, nu, nu) and both terms grow
    /// with L; for x < nu the decrease of Phi in L can dominate.
    pub fn monotone_margin(&self, slack: f64) -> (f64, Option<(usize, usize)>) {
        let mut worst = (f64::INFINITY, None);
        for i in 0..self.values.len().saturating_sub(1) {
            for (k, &(_, x, nu)) in self.points.iter().enumerate() {
                if x >= nu && nu > 0.0 {
                    let m = self.values[i + 1][k] - self.values[i][k] + slack;
                    if m < worst.0 || m.is_nan() {
                        worst = (m, Some((i, k)));
                    }
                }
            }
        }
        worst
    }

    /// Number of (level pair, probe) decreases beyond `slack` at probes with
    /// 0 < x < nu, which the monotonicity argument does not cover.
    pub fn off_region_decreases(&self, slack: f64) -> usize {
        let mut count = 0;
        for i in 0..self.values.len().saturating_sub(1) {
            for (k, &(_, x, nu)) in self.points.iter().enumerate() {
                if x > 0.0 && x < nu && self.values[i + 1][k] - self.values[i][k] + slack < 0.0 {
                    count += 1;
                }
            }
        }
        count
    }
}

/// A limit probe value with its convergence certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitProbe {
    pub t: f64,
    pub x: f64,
    pub nu: f64,
    pub u: f64,
    /// Value at the level below the top.
    pub u_previous: f64,
    /// |u^{L_max} - u^{L_prev}|
    pub gap: f64,
    /// Probes with x = 0, nu = 0 or x < nu are outside the region where
    /// monotone convergence is established.
    pub outside_proved_region: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGap {
    pub t: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitField {
    pub level: f64,
    pub previous_level: f64,
    pub probes: Vec<LimitProbe>,
    pub cauchy_gap: f64,
    pub cauchy_gap_by_time: Vec<TimeGap>,
    /// (t, P^{L_max}_t) on the graded tail nodes up to T - eps_T.
    pub p_tail: Vec<(f64, f64)>,
}

impl LimitField {
    /// Optional extrapolation in 1/L through the top two levels (not used by default).
    pub fn richardson(&self) -> Vec<f64> {
        let (a, b) = (1.0 / self.previous_level, 1.0 / self.level);
        self.probes.iter().map(|p| p.u + (p.u - p.u_previous) * b / (a - b)).collect()
    }
}

/// u^infinity estimate from the top level with the Cauchy gap to the level below.
pub fn estimate_u_infinity(ladder: &PenaltyLadder, probes: &FieldProbes) -> Result<LimitField> {
    if ladder.len() < 3 {
        return Err(Error::Ladder(format!("need at least 3 levels, got {}", ladder.len())));
    }
    let table = ProbeTable::build(ladder, probes)?;
    limit_from_table(ladder, &table)
}

pub(crate) fn limit_from_table(ladder: &PenaltyLadder, table: &ProbeTable) -> Result<LimitField> {
    let (margin, at) = table.monotone_margin(1e-8);
    if margin < 0.0 || margin.is_nan() {
        let (i, k) = at.expect("located");
        let (t, x, nu) = table.points[k];
        return Err(Error::Property {
            location: format!("probe (t = {t}, x = {x}, nu = {nu}) between L = {} and L = {}", table.levels[i], table.levels[i + 1]),
            detail: format!(
                "u decreased from {} to {}",
                table.values[i][k],
                table.values[i + 1][k]
            ),
        });
    }
    let n = table.values.len();
    let top = &table.values[n - 1];
    let prev = &table.values[n.saturating_sub(2)];
    let probes: Vec<LimitProbe> = table
        .points
        .iter()
        .enumerate()
        .map(|(k, &(t, x, nu))| LimitProbe {
            t,
            x,
            nu,
            u: top[k],
            u_previous: prev[k],
            gap: (top[k] - prev[k]).abs(),
            outside_proved_region: x == 0.0 || nu == 0.0 || x < nu,
        })
        .collect();
    let mut by_time: Vec<TimeGap> = Vec::new();
    for p in &probes {
        match by_time.iter_mut().find(|g| g.t == p.t) {
            Some(g) => g.gap = g.gap.max(p.gap),
            None => by_time.push(TimeGap { t: p.t, gap: p.gap }),
        }
    }
    let g = ladder.grid();
    let tail_start = g.horizon() * 0.99;
    let top_p = &ladder.top().riccati;
    let p_tail = g.nodes()[..g.interior_len()]
        .iter()
        .zip(top_p.values())
        .filter(|(t, _)| **t >= tail_start)
        .map(|(t, p)| (*t, *p))
        .collect();
    Ok(LimitField {
        level: table.levels[n - 1],
        previous_level: table.levels[n.saturating_sub(2)],
        cauchy_gap: probes.iter().map(|p| p.gap).fold(0.0, f64::max),
        cauchy_gap_by_time: by_time,
        probes,
        p_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn grid() -> TimeGrid {
        TimeGrid::graded(1.0, &GridSpec::default()).unwrap()
    }

    fn coth_level(level: f64, s: f64) -> f64 {
        let c = 0.5 * ((level + 1.0) / (level - 1.0)).ln();
        1.0 / (s + c).tanh()
    }

    #[test]
    fn ladder_rejects_bad_orderings() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        assert!(matches!(run_ladder(&c, &[10.0, 1.0], 1.0, &g), Err(Error::Ladder(_))));
        assert!(matches!(run_ladder(&c, &[], 1.0, &g), Err(Error::Ladder(_))));
        assert!(matches!(run_ladder(&c, &[1.0, -1.0], 1.0, &g), Err(Error::Ladder(_))));
    }

    #[test]
    fn two_level_ladder_matches_closed_form() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        let ladder = run_ladder(&c, &[1.0, 10.0], 1.0, &g).unwrap();
        assert!((ladder.solutions()[0].riccati.values()[0] - 1.0).abs() < 1e-14);
        assert!((ladder.solutions()[1].riccati.values()[0] - coth_level(10.0, 1.0)).abs() < 1e-9);
        assert!(ladder.riccati_order().iter().all(|o| o.margin >= 0.0));
        let single = run_ladder(&c, &[10.0], 1.0, &g).unwrap();
        assert_eq!(single.top().riccati.values(), ladder.top().riccati.values());
    }

    #[test]
    fn u_examples() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        let sol = LevelSolution::solve(&c, 2.0, 1.0, &g).unwrap();
        assert_eq!(eval_u_l(&c, &sol, 0.5, 0.0, 0.0).unwrap(), 0.0);
        assert!((eval_u_l(&c, &sol, 0.0, 1.0, 0.7).unwrap() - 1.094_485_949_748_087_7).abs() < 1e-9);
        let u1 = eval_u_l(&c, &sol, 0.3, 0.4, 1.0).unwrap();
        let u2 = eval_u_l(&c, &sol, 0.3, 0.8, 1.0).unwrap();
        assert!((u2 - u1 - sol.riccati.eval(0.3) * 0.4).abs() < 1e-14);
    }

    #[test]
    fn limit_zero_coupling_gap() {
        let g = grid();
        let c = CoefficientSet::unit(1.0);
        let ladder = run_ladder(&c, &[1.0, 10.0, 100.0, 1e5, 1e6], 1.0, &g).unwrap();
        let lim = estimate_u_infinity(&ladder, &FieldProbes::default_for(&g)).unwrap();
        let at0 = lim.cauchy_gap_by_time.iter().find(|g| g.t == 0.0).unwrap().gap;
        // x ranges up to 2, so the t = 0 gap is twice the slope gap.
        let slope_gap = coth_level(1e6, 1.0) - coth_level(1e5, 1.0);
        assert!((at0 - 2.0 * slope_gap).abs() < 1e-9, "{at0}");
        assert!((slope_gap - 6.516_460_828_811_394e-6).abs() < 1e-12);
        for p in lim.probes.iter().filter(|p| p.x == 0.0 && p.nu == 0.0) {
            assert_eq!(p.u, 0.0);
        }
        let short = run_ladder(&c, &[1.0, 10.0], 1.0, &g).unwrap();
        assert!(estimate_u_infinity(&short, &FieldProbes::default_for(&g)).is_err());
    }
}
