//! Model data: time-dependent linear coefficients, the four nonlinear mean-field
//! couplings, the structural constants, validation against the standing
//! assumptions, and inversion of the population response map m -> m + h(t, m).

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance of the response-map inversion (scaled by max(1, |a|)).
pub const RHO_TOL: f64 = 1e-12;
const RHO_MAX_ITER: usize = 200;
const FD_STEP: f64 = 1e-5;

/// Time-only coefficient: `value + slope * t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFn {
    Constant { value: f64 },
    Affine { value: f64, slope: f64 },
}

impl ScalarFn {
    pub fn constant(value: f64) -> Self {
        ScalarFn::Constant { value }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            ScalarFn::Constant { value } => value,
            ScalarFn::Affine { value, slope } => value + slope * t,
        }
    }

    /// Supremum and infimum over `[0, horizon]` (exact: the family is affine).
    pub fn range(&self, horizon: f64) -> (f64, f64) {
        let (a, b) = (self.eval(0.0), self.eval(horizon));
        (a.min(b), a.max(b))
    }
}

/// Mean-field coupling g(t, x) from the catalog. Every parametric member
/// carries a time-varying amplitude `c + c_slope * t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingFn {
    Zero,
    /// `c x`
    Linear {
        c: f64,
        #[serde(default)]
        c_slope: f64,
    },
    /// `c s tanh(x / s)`: slope `c` at the origin, saturating at `|c| s`.
    Saturating {
        c: f64,
        s: f64,
        #[serde(default)]
        c_slope: f64,
    },
    /// `c x^3` on `|x| <= w`, continued by its tangent lines outside.
    ClippedCubic {
        c: f64,
        w: f64,
        #[serde(default)]
        c_slope: f64,
    },
    /// Bilinear interpolation of `values[i][j] = g(t[i], x[j])`, extrapolated
    /// linearly in x and clamped in t. Derivatives by central differences.
    Tabulated {
        t: Vec<f64>,
        x: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl Default for CouplingFn {
    fn default() -> Self {
        CouplingFn::Zero
    }
}

fn bracket(grid: &[f64], v: f64) -> (usize, f64) {
    if grid.len() == 1 {
        return (0, 0.0);
    }
    let i = grid.partition_point(|&g| g <= v).clamp(1, grid.len() - 1) - 1;
    (i, (v - grid[i]) / (grid[i + 1] - grid[i]))
}

impl CouplingFn {
    pub fn is_zero(&self) -> bool {
        matches!(self, CouplingFn::Zero)
    }

    fn amplitude(c: f64, c_slope: f64, t: f64) -> f64 {
        c + c_slope * t
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            CouplingFn::Zero => 0.0,
            CouplingFn::Linear { c, c_slope } => Self::amplitude(*c, *c_slope, t) * x,
            CouplingFn::Saturating { c, s, c_slope } => {
                Self::amplitude(*c, *c_slope, t) * s * (x / s).tanh()
            }
            CouplingFn::ClippedCubic { c, w, c_slope } => {
                let a = Self::amplitude(*c, *c_slope, t);
                if x.abs() <= *w {
                    a * x * x * x
                } else {
                    a * (3.0 * w * w * x - 2.0 * w * w * w * x.signum())
                }
            }
            CouplingFn::Tabulated { t: ts, x: xs, values } => {
                let tc = t.clamp(ts[0], ts[ts.len() - 1]);
                let (i, wt) = bracket(ts, tc);
                let (j, wx) = bracket(xs, x);
                let row = |r: &Vec<f64>| {
                    if xs.len() == 1 {
                        r[0]
                    } else {
                        (1.0 - wx) * r[j] + wx * r[j + 1]
                    }
                };
                if ts.len() == 1 {
                    row(&values[0])
                } else {
                    (1.0 - wt) * row(&values[i]) + wt * row(&values[i + 1])
                }
            }
        }
    }

    /// Partial derivative in x.
    pub fn deriv(&self, t: f64, x: f64) -> f64 {
        match self {
            CouplingFn::Zero => 0.0,
            CouplingFn::Linear { c, c_slope } => Self::amplitude(*c, *c_slope, t),
            CouplingFn::Saturating { c, s, c_slope } => {
                let th = (x / s).tanh();
                Self::amplitude(*c, *c_slope, t) * (1.0 - th * th)
            }
            CouplingFn::ClippedCubic { c, w, c_slope } => {
                let a = Self::amplitude(*c, *c_slope, t);
                let z = x.abs().min(*w);
                3.0 * a * z * z
            }
            CouplingFn::Tabulated { .. } => {
                let h = FD_STEP * x.abs().max(1.0);
                (self.eval(t, x + h) - self.eval(t, x - h)) / (2.0 * h)
            }
        }
    }

    fn check_shape(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("coupling `{name}`: {msg}")));
        match self {
            CouplingFn::Saturating { s, .. } if !(*s > 0.0) => bad(format!("scale s = {s} must be positive")),
            CouplingFn::ClippedCubic { w, .. } if !(*w > 0.0) => bad(format!("width w = {w} must be positive")),
            CouplingFn::Tabulated { t, x, values } => {
                if t.is_empty() || x.is_empty() {
                    return bad("table axes must be nonempty".into());
                }
                if t.windows(2).any(|w| w[1] <= w[0]) || x.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("table axes must be strictly increasing".into());
                }
                if values.len() != t.len() || values.iter().any(|r| r.len() != x.len()) {
                    return bad(format!("values must be a {} x {} array", t.len(), x.len()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Full model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    #[serde(rename = "A")]
    pub a: ScalarFn,
    #[serde(rename = "B")]
    pub b: ScalarFn,
    #[serde(rename = "Q")]
    pub q: ScalarFn,
    #[serde(rename = "R")]
    pub r: ScalarFn,
    #[serde(default)]
    pub f: CouplingFn,
    #[serde(default, rename = "b")]
    pub b_coupling: CouplingFn,
    #[serde(default)]
    pub l: CouplingFn,
    #[serde(default)]
    pub h: CouplingFn,
    #[serde(rename = "K")]
    pub k: f64,
    pub delta: f64,
    pub eps0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl CoefficientSet {
    /// A = 0, B = Q = R = 1, no couplings, K = delta = eps0 = 1.
    pub fn unit(horizon: f64) -> Self {
        Self {
            a: ScalarFn::constant(0.0),
            b: ScalarFn::constant(1.0),
            q: ScalarFn::constant(1.0),
            r: ScalarFn::constant(1.0),
            f: CouplingFn::Zero,
            b_coupling: CouplingFn::Zero,
            l: CouplingFn::Zero,
            h: CouplingFn::Zero,
            k: 1.0,
            delta: 1.0,
            eps0: 1.0,
            horizon,
        }
    }

    pub fn has_couplings(&self) -> bool {
        !(self.f.is_zero() && self.b_coupling.is_zero() && self.l.is_zero() && self.h.is_zero())
    }

    /// Structural checks that do not depend on probing (positive constants,
    /// well-formed catalog parameters).
    pub fn check_well_formed(&self) -> Result<()> {
        for (name, v) in [("K", self.k), ("delta", self.delta), ("eps0", self.eps0), ("T", self.horizon)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("`{name}` must be positive and finite, got {v}")));
            }
        }
        self.f.check_shape("f")?;
        self.b_coupling.check_shape("b")?;
        self.l.check_shape("l")?;
        self.h.check_shape("h")
    }

    /// ρ(t, a): the solution m of m + h(t, m) = a.
    pub fn rho(&self, t: f64, a: f64) -> Result<f64> {
        if self.h.is_zero() {
            return Ok(a);
        }
        if let CouplingFn::Linear { c, c_slope } = self.h {
            let slope = 1.0 + c + c_slope * t;
            if slope != 0.0 {
                return Ok(a / slope);
            }
        }
        invert_monotone(|m| m + self.h.eval(t, m) - a, |m| 1.0 + self.h.deriv(t, m), a, self.k)
            .map_err(|reason| Error::ResponseInversion { t, a, reason })
    }

    /// Mean control level μ = ρ(t, −B m / R) induced by the mean adjoint m.
    #[inline]
    pub fn mu(&self, t: f64, m: f64) -> Result<f64> {
        self.rho(t, -self.b.eval(t) * m / self.r.eval(t))
    }

    /// Population drift contribution −B h(μ) + b(μ) at mean control μ.
    #[inline]
    pub fn population_drift(&self, t: f64, mu: f64) -> f64 {
        -self.b.eval(t) * self.h.eval(t, mu) + self.b_coupling.eval(t, mu)
    }

    /// dG/dm for G(m) = population_drift(t, mu(t, m)); chain rule through ρ.
    pub fn population_drift_slope(&self, t: f64, mu: f64) -> f64 {
        let bt = self.b.eval(t);
        let hp = self.h.deriv(t, mu);
        let bp = self.b_coupling.deriv(t, mu);
        -(bt / self.r.eval(t)) * (bp - bt * hp) / (1.0 + hp)
    }

    /// Validate the standing assumptions on a probe lattice.
    pub fn validate(&self, law: Option<&InitialLaw>, probes: &ProbeGrid) -> Result<ValidationReport> {
        validate_assumptions(self, law, probes)
    }
}

/// Safeguarded Newton for a strictly monotone scalar map with slope bounded away from 0.
fn invert_monotone<G, D>(g: G, dg: D, a: f64, k: f64) -> std::result::Result<f64, &'static str>
where
    G: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let tol = RHO_TOL * a.abs().max(1.0);
    let half = k * a.abs() + 1.0;
    let (mut lo, mut hi) = (a - half, a + half);
    let (mut glo, mut ghi) = (g(lo), g(hi));
    let mut widen = 0;
    while glo * ghi > 0.0 {
        widen += 1;
        if widen > 80 {
            return Err("no sign change after geometric widening");
        }
        let w = hi - lo;
        lo -= w;
        hi += w;
        glo = g(lo);
        ghi = g(hi);
    }
    if !(glo.is_finite() && ghi.is_finite()) {
        return Err("non-finite residual on bracket");
    }
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    let increasing = ghi > 0.0;
    let mut x = a.clamp(lo, hi);
    for _ in 0..RHO_MAX_ITER {
        let gx = g(x);
        if !gx.is_finite() {
            return Err("non-finite residual");
        }
        if gx.abs() <= tol {
            return Ok(x);
        }
        if (gx > 0.0) == increasing {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return Ok(x);
        }
        let d = dg(x);
        let newton = x - gx / d;
        x = if d != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err("maximum iterations exceeded")
}

/// Distribution of the nonnegative initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawSpec {
    Samples {
        values: Vec<f64>,
        /// Overrides the sample mean when given.
        #[serde(default)]
        mean: Option<f64>,
    },
    Uniform {
        lo: f64,
        hi: f64,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Discrete {
        values: Vec<f64>,
        weights: Vec<f64>,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_count() -> usize {
    64
}

impl Default for LawSpec {
    fn default() -> Self {
        LawSpec::Uniform {
            lo: 0.5,
            hi: 1.5,
            count: default_count(),
            seed: 0,
        }
    }
}

impl LawSpec {
    /// Replace the seed of random laws.
    pub fn with_seed(mut self, new_seed: u64) -> Self {
        match &mut self {
            LawSpec::Uniform { seed, .. } | LawSpec::Discrete { seed, .. } => *seed = new_seed,
            LawSpec::Samples { .. } => {}
        }
        self
    }

    pub fn realize(&self) -> Result<InitialLaw> {
        match self {
            LawSpec::Samples { values, mean } => match mean {
                Some(m) => InitialLaw::with_mean(values.clone(), *m, 0),
                None => InitialLaw::from_samples(values.clone()),
            },
            LawSpec::Uniform { lo, hi, count, seed } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) || *count == 0 {
                    return Err(Error::Config(format!(
                        "uniform law needs finite lo <= hi and count > 0 (lo = {lo}, hi = {hi}, count = {count})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let samples = (0..*count).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
                let mut law = InitialLaw::from_samples(samples)?;
                law.seed = *seed;
                Ok(law)
            }
            LawSpec::Discrete { values, weights, count, seed } => {
                if values.is_empty() || values.len() != weights.len() || *count == 0 {
                    return Err(Error::Config(
                        "discrete law needs matching nonempty values/weights and count > 0".into(),
                    ));
                }
                let dist = WeightedIndex::new(weights)
                    .map_err(|e| Error::Config(format!("discrete law weights: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let samples = (0..*count).map(|_| values[dist.sample(&mut rng)]).collect();
                let mut law = InitialLaw::from_samples(samples)?;
                law.seed = *seed;
                Ok(law)
            }
        }
    }
}

/// Realized draws of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialLaw {
    samples: Vec<f64>,
    mean: f64,
    seed: u64,
}

impl InitialLaw {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::check(&samples)?;
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        Ok(Self { samples, mean, seed: 0 })
    }

    /// Samples with a separately declared population mean.
    pub fn with_mean(samples: Vec<f64>, mean: f64, seed: u64) -> Result<Self> {
        Self::check(&samples)?;
        if !(mean.is_finite() && mean >= 0.0) {
            return Err(Error::Domain(format!("initial mean must be nonnegative, got {mean}")));
        }
        Ok(Self { samples, mean, seed })
    }

    fn check(samples: &[f64]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Domain("initial law needs at least one sample".into()));
        }
        if let Some((i, v)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain(format!("initial sample {i} is not finite ({v})")));
        }
        if let Some((i, v)) = samples.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::Domain(format!("initial sample {i} is negative ({v})")));
        }
        Ok(())
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(0.0, f64::max)
    }

    pub fn sample_mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

/// Tensor lattice of (t, x) points on [0, T] x [−x_bar, x_bar].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
}

impl ProbeGrid {
    pub fn lattice(horizon: f64, x_bar: f64, nt: usize, nx: usize) -> Self {
        let lin = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            if n <= 1 {
                return vec![lo];
            }
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        };
        Self {
            times: lin(0.0, horizon, nt),
            xs: lin(-x_bar, x_bar, nx),
        }
    }

    /// Default 101 x 101 lattice with x_bar = max(1, 2 max ξ).
    pub fn default_for(horizon: f64, law: Option<&InitialLaw>) -> Self {
        let x_bar = law.map_or(1.0, |l| (2.0 * l.max()).max(1.0));
        Self::lattice(horizon, x_bar, 101, 101)
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty() || self.xs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t: f64,
    pub x: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseResult {
    pub clause: String,
    pub passed: bool,
    /// Most violating probe when failed, otherwise the tightest probe.
    pub worst: Option<Violation>,
    /// Signed margin at `worst` (negative means violated).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub clauses: Vec<ClauseResult>,
    pub note: String,
}

impl ValidationReport {
    pub fn failed_clauses(&self) -> impl Iterator<Item = &ClauseResult> {
        self.clauses.iter().filter(|c| !c.passed)
    }
}

struct Clause {
    name: &'static str,
    margin: f64,
    at: Option<Violation>,
}

impl Clause {
    fn new(name: &'static str) -> Self {
        Self { name, margin: f64::INFINITY, at: None }
    }

    fn observe(&mut self, margin: f64, t: f64, x: Option<f64>, value: f64) {
        if margin < self.margin {
            self.margin = margin;
            self.at = Some(Violation { t, x, value });
        }
    }

    fn finish(self, slack: f64) -> ClauseResult {
        ClauseResult {
            clause: self.name.to_string(),
            passed: self.margin >= -slack,
            worst: self.at,
            margin: if self.margin.is_finite() { self.margin } else { 0.0 },
        }
    }
}

fn finite(name: &'static str, v: f64, t: f64, x: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { name, t, x })
    }
}

/// Check every clause of the standing assumptions on `probes`.
pub fn validate_assumptions(
    c: &CoefficientSet,
    law: Option<&InitialLaw>,
    probes: &ProbeGrid,
) -> Result<ValidationReport> {
    if probes.is_empty() {
        return Err(Error::Config("probe grid must be nonempty".into()));
    }
    c.check_well_formed()?;
    let k = c.k;
    // Slack absorbs rounding in sign tests such as f' <= 0 for exactly-zero slopes.
    let slack = 1e-12;

    let mut xi_nonneg = Clause::new("xi >= 0");
    let mut xi_bounded = Clause::new("xi bounded");
    if let Some(law) = law {
        for &s in law.samples() {
            xi_nonneg.observe(s, 0.0, Some(s), s);
            xi_bounded.observe(if s.is_finite() { 1.0 } else { -1.0 }, 0.0, Some(s), s);
        }
        xi_nonneg.observe(law.mean(), 0.0, None, law.mean());
    }

    let mut bound_abcqr = Clause::new("|A|, |B|, |Q|, |R| <= K");
    let mut q_pos = Clause::new("Q_t > 0");
    let mut a_nonpos = Clause::new("A_t <= 0");
    let mut r_lower = Clause::new("R_t >= delta");
    let mut b_lower = Clause::new("|B_t| >= delta");
    let mut vanish = Clause::new("f(t,0) = b(t,0) = l(t,0) = h(t,0) = 0");
    let mut deriv_bound = Clause::new("|f'|, |b'|, |l'|, |h'| <= K");
    let mut response = Clause::new("|1 + h'| >= eps0");
    let mut f_dec = Clause::new("f' <= 0");
    let mut l_inc = Clause::new("l' >= 0");
    let mut b4 = Clause::new("B R^-1 (b' - B h') / (1 + h') >= 0");

    for &t in &probes.times {
        let at = finite("A", c.a.eval(t), t, 0.0)?;
        let bt = finite("B", c.b.eval(t), t, 0.0)?;
        let qt = finite("Q", c.q.eval(t), t, 0.0)?;
        let rt = finite("R", c.r.eval(t), t, 0.0)?;
        for v in [at, bt, qt, rt] {
            bound_abcqr.observe(k - v.abs(), t, None, v);
        }
        q_pos.observe(if qt > 0.0 { qt } else { qt - 1.0 }, t, None, qt);
        a_nonpos.observe(-at, t, None, at);
        r_lower.observe(rt - c.delta, t, None, rt);
        b_lower.observe(bt.abs() - c.delta, t, None, bt);
        for (name, g) in [("f", &c.f), ("b", &c.b_coupling), ("l", &c.l), ("h", &c.h)] {
            let v = finite(name, g.eval(t, 0.0), t, 0.0)?;
            vanish.observe(-v.abs(), t, Some(0.0), v);
        }
        for &x in &probes.xs {
            let fp = finite("f'", c.f.deriv(t, x), t, x)?;
            let bp = finite("b'", c.b_coupling.deriv(t, x), t, x)?;
            let lp = finite("l'", c.l.deriv(t, x), t, x)?;
            let hp = finite("h'", c.h.deriv(t, x), t, x)?;
            for name_v in [("f", c.f.eval(t, x)), ("b", c.b_coupling.eval(t, x)), ("l", c.l.eval(t, x)), ("h", c.h.eval(t, x))] {
                finite(name_v.0, name_v.1, t, x)?;
            }
            for v in [fp, bp, lp, hp] {
                deriv_bound.observe(k - v.abs(), t, Some(x), v);
            }
            let one_h = 1.0 + hp;
            response.observe(one_h.abs() - c.eps0, t, Some(x), one_h);
            f_dec.observe(-fp, t, Some(x), fp);
            l_inc.observe(lp, t, Some(x), lp);
            let cond = if one_h != 0.0 { bt / rt * (bp - bt * hp) / one_h } else { f64::NEG_INFINITY };
            b4.observe(cond, t, Some(x), cond);
        }
    }

    let mut clauses = Vec::new();
    if law.is_some() {
        clauses.push(xi_nonneg.finish(0.0));
        clauses.push(xi_bounded.finish(0.0));
    }
    clauses.push(bound_abcqr.finish(slack));
    // Q margin is shifted by -1 when Q <= 0 so that Q = 0 fails.
    clauses.push(q_pos.finish(0.0));
    clauses.push(a_nonpos.finish(0.0));
    clauses.push(r_lower.finish(slack));
    clauses.push(b_lower.finish(slack));
    clauses.push(vanish.finish(slack));
    clauses.push(deriv_bound.finish(slack));
    clauses.push(response.finish(slack));
    clauses.push(f_dec.finish(slack));
    clauses.push(l_inc.finish(slack));
    clauses.push(b4.finish(slack));

    Ok(ValidationReport {
        passed: clauses.iter().all(|c| c.passed),
        clauses,
        note: format!(
            "sampled verification on {} x {} probes over [0, {}] x [{}, {}]",
            probes.times.len(),
            probes.xs.len(),
            c.horizon,
            probes.xs.first().copied().unwrap_or(0.0),
            probes.xs.last().copied().unwrap_or(0.0)
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_h(h: CouplingFn) -> CoefficientSet {
        CoefficientSet { h, ..CoefficientSet::unit(1.0) }
    }

    fn probes() -> ProbeGrid {
        ProbeGrid::lattice(1.0, 2.0, 11, 41)
    }

    #[test]
    fn unit_set_passes() {
        let law = InitialLaw::from_samples(vec![1.0, 0.5]).unwrap();
        let rep = validate_assumptions(&CoefficientSet::unit(1.0), Some(&law), &probes()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.note.contains("sampled verification"));
    }

    #[test]
    fn positive_drift_fails_sign_clause() {
        let c = CoefficientSet { a: ScalarFn::constant(0.1), ..CoefficientSet::unit(1.0) };
        let rep = validate_assumptions(&c, None, &probes()).unwrap();
        let failed: Vec<_> = rep.failed_clauses().map(|c| c.clause.as_str()).collect();
        assert_eq!(failed, vec!["A_t <= 0"]);
    }

    #[test]
    fn degenerate_response_fails() {
        let c = with_h(CouplingFn::Linear { c: -1.0, c_slope: 0.0 });
        let rep = validate_assumptions(&c, None, &probes()).unwrap();
        assert!(rep.failed_clauses().any(|c| c.clause == "|1 + h'| >= eps0"));
    }

    #[test]
    fn zero_q_fails_strict_positivity() {
        let c = CoefficientSet { q: ScalarFn::constant(0.0), ..CoefficientSet::unit(1.0) };
        let rep = validate_assumptions(&c, None, &probes()).unwrap();
        assert!(rep.failed_clauses().any(|c| c.clause == "Q_t > 0"));
    }

    #[test]
    fn non_finite_coefficient_is_an_error() {
        let c = CoefficientSet { b: ScalarFn::constant(f64::NAN), ..CoefficientSet::unit(1.0) };
        assert!(matches!(validate_assumptions(&c, None, &probes()), Err(Error::NonFinite { name: "B", .. })));
    }

    #[test]
    fn rho_examples() {
        let c = CoefficientSet::unit(1.0);
        assert_eq!(c.rho(0.0, 0.5).unwrap(), 0.5);
        let c = with_h(CouplingFn::Linear { c: 0.5, c_slope: 0.0 });
        assert!((c.rho(0.0, 3.0).unwrap() - 2.0).abs() < 1e-14);
        let c = with_h(CouplingFn::Saturating { c: 0.2, s: 1.0, c_slope: 0.0 });
        let m = c.rho(0.0, 1.0).unwrap();
        // Independent bisection oracle.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + 0.2 * mid.tanh() - 1.0 > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((m - 0.5 * (lo + hi)).abs() < 1e-12);
        assert!((m - 0.860_678_574_727_052_4).abs() < 1e-12);
    }

    #[test]
    fn rho_handles_decreasing_response() {
        // 1 + h' = -1 everywhere: m -> -m.
        let c = with_h(CouplingFn::Linear { c: -2.0, c_slope: 0.0 });
        assert!((c.rho(0.3, 0.7).unwrap() + 0.7).abs() < 1e-14);
        let c = with_h(CouplingFn::Saturating { c: -3.0, s: 100.0, c_slope: 0.0 });
        let m = c.rho(0.0, 2.0).unwrap();
        assert!((m + c.h.eval(0.0, m) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_cubic_is_c1() {
        let g = CouplingFn::ClippedCubic { c: -0.1, w: 1.5, c_slope: 0.0 };
        for x in [1.5 - 1e-9, 1.5 + 1e-9, -1.5 - 1e-9, -1.5 + 1e-9] {
            assert!((g.eval(0.0, x) - (-0.1 * 1.5f64.powi(3) * x.signum())).abs() < 1e-8);
            assert!((g.deriv(0.0, x) - (-0.3 * 2.25)).abs() < 1e-8);
        }
        let h = 1e-6;
        for x in [-3.0, -0.4, 0.0, 0.9, 2.2] {
            let fd = (g.eval(0.0, x + h) - g.eval(0.0, x - h)) / (2.0 * h);
            assert!((fd - g.deriv(0.0, x)).abs() < 1e-7);
        }
    }

    #[test]
    fn tabulated_matches_linear_source() {
        let ts = vec![0.0, 0.5, 1.0];
        let xs = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let values = ts.iter().map(|&t| xs.iter().map(|&x| (0.3 + 0.1 * t) * x).collect()).collect();
        let g = CouplingFn::Tabulated { t: ts, x: xs, values };
        for (t, x) in [(0.25, 0.7), (0.9, -1.3), (0.1, 3.5)] {
            assert!((g.eval(t, x) - (0.3 + 0.1 * t) * x).abs() < 1e-12);
            assert!((g.deriv(t, x) - (0.3 + 0.1 * t)).abs() < 1e-8);
        }
    }

    #[test]
    fn laws_are_reproducible() {
        let spec = LawSpec::Uniform { lo: 0.5, hi: 1.5, count: 16, seed: 7 };
        let a = spec.realize().unwrap();
        let b = spec.realize().unwrap();
        assert_eq!(a, b);
        assert!(a.samples().iter().all(|&s| (0.5..1.5).contains(&s)));
        let d = LawSpec::Discrete { values: vec![0.0, 2.0], weights: vec![1.0, 3.0], count: 32, seed: 1 }
            .realize()
            .unwrap();
        assert!(d.samples().iter().all(|&s| s == 0.0 || s == 2.0));
        assert!(InitialLaw::from_samples(vec![1.0, -0.1]).is_err());
    }

    proptest! {
        #[test]
        fn rho_roundtrip(t in 0.0f64..1.0, m in -50.0f64..50.0, c in -0.8f64..0.9, s in 0.2f64..3.0) {
            let set = with_h(CouplingFn::Saturating { c, s, c_slope: 0.0 });
            let a = m + set.h.eval(t, m);
            let back = set.rho(t, a).unwrap();
            prop_assert!((back - m).abs() <= 1e-10 * m.abs().max(1.0));
        }

        #[test]
        fn rho_is_lipschitz(t in 0.0f64..1.0, a1 in -20.0f64..20.0, a2 in -20.0f64..20.0, c in -0.5f64..0.9) {
            let mut set = with_h(CouplingFn::Saturating { c, s: 0.7, c_slope: 0.0 });
            set.eps0 = 1.0 - c.abs();
            let r1 = set.rho(t, a1).unwrap();
            let r2 = set.rho(t, a2).unwrap();
            prop_assert!((r1 - r2).abs() <= (1.0 / set.eps0 + 1e-8) * (a1 - a2).abs() + 1e-11);
        }

        #[test]
        fn validation_is_deterministic(c in -0.5f64..0.5) {
            let set = with_h(CouplingFn::Saturating { c, s: 1.0, c_slope: 0.0 });
            let p = probes();
            prop_assert_eq!(validate_assumptions(&set, None, &p).unwrap(), validate_assumptions(&set, None, &p).unwrap());
        }
    }
}
