//! The verification suites: almost-sure identities (`exact`), statistical
//! identities with fixed seeds (`statistical`), and informational curves
//! (`exploratory`).
//!
//! A statistical check that fails is rerun once on the next seed before it
//! is reported as failed. The seed that produced the reported numbers is
//! recorded in the check.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{alpha_window, boundary_sum_height, gambler_ruin_absorb, prop_bounds, radial_drift};
use crate::configs::{bernoulli_on, BoundarySpec, Configuration};
use crate::error::MonteCarloError;
use crate::graphical::{check_duality, check_monotone, sample_window, Window};
use crate::montecarlo::{
    drift_check, event_rate_ratio, growth_profile, inclusion_tail, law_agreement, occupancy_curve, replicas,
    rho_delta_derivative, ruin_probability, thinning_two_sample, threshold_scan, corridor_inclusion, McConfig,
    ResultRow, SurvivalProxy,
};
use crate::rng::StreamKey;
use crate::stats::{TwoSampleReport, Verdict};
use crate::tree::{ball, boundary_edges, random_connected_set, Region, TreeParams, VertexAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Exact,
    Statistical,
    Exploratory,
}

impl Suite {
    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Exact => "exact",
            Suite::Statistical => "statistical",
            Suite::Exploratory => "exploratory",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Suite::Exact),
            "statistical" => Ok(Suite::Statistical),
            "exploratory" => Ok(Suite::Exploratory),
            other => Err(format!("unknown suite {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub workers: Option<usize>,
    /// Multiplies every replica count; 1 gives the full sizes.
    pub scale: f64,
}

impl VerifyOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, workers: None, scale: 1.0 }
    }

    fn n(&self, full: u64) -> u64 {
        ((full as f64 * self.scale).round() as u64).max(50)
    }

    fn cfg(&self, seed: u64) -> McConfig {
        McConfig { seed, workers: self.workers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub seed: u64,
    pub attempts: u32,
    pub detail: String,
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    /// Exploratory suites always pass.
    pub fn passed(&self) -> bool {
        self.suite == Suite::Exploratory || self.checks.iter().all(|c| c.passed)
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        self.checks.iter().flat_map(|c| c.rows.iter().cloned()).collect()
    }

    pub fn truncated(&self) -> u64 {
        self.checks.iter().flat_map(|c| &c.rows).map(|r| r.truncated).sum()
    }
}

type Outcome = Result<(bool, String, Vec<ResultRow>), MonteCarloError>;

fn finish(name: &str, seed: u64, attempts: u32, outcome: Outcome) -> Check {
    let (passed, detail, rows) = outcome.unwrap_or_else(|e| (false, e.to_string(), Vec::new()));
    Check { name: name.into(), passed, seed, attempts, detail, rows }
}

fn once(name: &str, seed: u64, f: impl FnOnce(u64) -> Outcome) -> Check {
    finish(name, seed, 1, f(seed))
}

fn with_retry(name: &str, seed: u64, f: impl Fn(u64) -> Outcome) -> Check {
    let first = finish(name, seed, 1, f(seed));
    if first.passed {
        return first;
    }
    let next = seed.wrapping_add(1);
    finish(name, next, 2, f(next))
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let checks = match suite {
        Suite::Exact => exact_checks(opts),
        Suite::Statistical => statistical_checks(opts),
        Suite::Exploratory => exploratory_checks(opts),
    };
    SuiteReport { suite, seed: opts.seed, checks }
}

pub fn exact_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = vec![duality_check(opts), monotone_check(opts), drift_sign_check(opts)];
    for (d, lambda) in [(3, 1.0), (3, 1.05), (4, 1.3)] {
        out.push(boundary_sum_check(d, lambda, opts));
    }
    out.push(bounds_check());
    out
}

pub fn statistical_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = vec![ruin_check(opts)];
    for lambda in [1.0, 2.0, 3.0] {
        out.push(drift_increment_check(lambda, opts));
    }
    out.extend([thinning_check(opts), derivative_check(opts), event_check(opts), law_check(opts)]);
    out
}

pub fn exploratory_checks(opts: &VerifyOptions) -> Vec<Check> {
    let small = VerifyOptions { scale: opts.scale * 0.2, ..*opts };
    vec![
        phase_check(&small),
        occupancy_check(&small),
        inclusion_check(&small),
        growth_check(&small),
        corridor_check(&small),
    ]
}

/// A random window inside `Ball(0, 4)` with sets and times for the exact
/// checks.
struct Instance {
    window: Window,
    a: Configuration,
    b: Configuration,
    s: f64,
    t: f64,
    lambda: f64,
    lambda2: f64,
}

fn random_instance(key: &StreamKey) -> Result<Instance, MonteCarloError> {
    let mut rng = key.child("setup").stream();
    let params = TreeParams::new(rng.random_range(3..=4))?;
    let size = rng.random_range(1..=25);
    let vertices = random_connected_set(params, &VertexAddr::origin(), size, Some(4), &mut rng);
    let horizon = 2.0 * (1.0 - rng.random::<f64>());
    let lambda_max = 1.0 + 2.0 * rng.random::<f64>();
    let window = sample_window(params, &Region::explicit(vertices.clone()), horizon, lambda_max, &key.child("window"))?;
    let q = rng.random::<f64>();
    let a = bernoulli_on(&vertices, q, &mut rng);
    let b = bernoulli_on(&vertices, q, &mut rng);
    let s = horizon * rng.random::<f64>();
    let t = s + (horizon - s) * rng.random::<f64>();
    let lambda = 1.0 + (lambda_max - 1.0) * rng.random::<f64>();
    let lambda2 = lambda + (lambda_max - lambda) * rng.random::<f64>();
    Ok(Instance { window, a, b, s, t, lambda, lambda2 })
}

fn count_check(name: &str, opts: &VerifyOptions, n: u64, case: impl Fn(&StreamKey) -> Result<bool, MonteCarloError> + Send + Sync) -> Check {
    once(name, opts.seed, |seed| {
        let cfg = opts.cfg(seed);
        let key = cfg.key(name);
        let results = replicas(&cfg, name, 0, n, &(), |_, _, i| case(&key.index(i)))?;
        let good = results.iter().filter(|&&x| x).count() as u64;
        let row = ResultRow::value(name, "holds_fraction", None, 0, good as f64 / n as f64, n);
        Ok((good == n, format!("{good}/{n} cases hold"), vec![row]))
    })
}

/// Forward and backward sweeps agree on every random window.
pub fn duality_check(opts: &VerifyOptions) -> Check {
    count_check("duality", opts, opts.n(10_000), |key| {
        let x = random_instance(key)?;
        Ok(check_duality(&x.window, &x.a, &x.b, x.s, x.t, x.lambda)?.is_some())
    })
}

/// Coupled forward states are ordered when the initial set and the rate are.
pub fn monotone_check(opts: &VerifyOptions) -> Check {
    count_check("monotone", opts, opts.n(10_000), |key| {
        let x = random_instance(key)?;
        let a2: Configuration = x.a.iter().chain(x.b.iter()).cloned().collect();
        Ok(check_monotone(&x.window, &x.a, &a2, x.s, x.t, x.lambda, x.lambda2)?)
    })
}

/// The radial drift is nonnegative for `α ∈ [1/λ, λ]`.
pub fn drift_sign_check(opts: &VerifyOptions) -> Check {
    count_check("radial_drift_sign", opts, opts.n(10_000), |key| {
        let mut rng = key.stream();
        let params = TreeParams::new(rng.random_range(3..=5))?;
        let lambda = 1.0 + 3.0 * rng.random::<f64>();
        let alpha = 1.0 / lambda + (lambda - 1.0 / lambda) * rng.random::<f64>();
        let cells = ball(params, &VertexAddr::origin(), rng.random_range(0..=3));
        let c = bernoulli_on(&cells, rng.random::<f64>(), &mut rng);
        let edges = boundary_edges(params, c.iter()).len() as f64;
        Ok(radial_drift(&c, alpha, lambda, params) >= -1e-12 * edges)
    })
}

/// The height boundary sum is nonpositive on random connected sets for
/// every `α` in the admissible window. When the window is empty the check
/// holds vacuously and says so.
pub fn boundary_sum_check(d: u32, lambda: f64, opts: &VerifyOptions) -> Check {
    let name = format!("boundary_sum_d{d}_l{lambda}");
    let Some((lo, hi)) = alpha_window(d, lambda) else {
        let row = ResultRow::value(&name, "alpha_window_empty", Some(lambda), d, 1.0, 0);
        return Check {
            name,
            passed: true,
            seed: opts.seed,
            attempts: 1,
            detail: format!("no admissible alpha for d = {d}, lambda = {lambda}; nothing to check"),
            rows: vec![row],
        };
    };
    let mut check = count_check(&name, opts, opts.n(10_000), |key| {
        let mut rng = key.stream();
        let params = TreeParams::new(d)?;
        let alpha = lo + (hi - lo) * rng.random::<f64>();
        let around = ball(params, &VertexAddr::origin(), 2);
        let root = &around[rng.random_range(0..around.len())];
        let u = random_connected_set(params, root, rng.random_range(1..=20), Some(6), &mut rng);
        Ok(boundary_sum_height(&u, alpha, lambda, params) <= 1e-9)
    });
    for row in &mut check.rows {
        row.d = d;
        row.lambda = Some(lambda);
    }
    check
}

/// Closed-form threshold bounds at the reference degrees.
pub fn bounds_check() -> Check {
    once("bounds", 0, |_| {
        let b3 = prop_bounds(3)?;
        let b18 = prop_bounds(18)?;
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
        let mut ok = close(b3.lambda_l_lower, 1.5 / 2f64.sqrt()) && close(b3.lambda_l_upper, 6.0) && close(b3.lambda_c_upper, 6.0);
        ok &= close(b18.lambda_l_upper, 36.0);
        let mut rows = Vec::new();
        for d in 3..=100 {
            let b = prop_bounds(d)?;
            ok &= b.lambda_l_lower <= b.lambda_l_upper;
            for (metric, v) in [("lambda_l_lower", b.lambda_l_lower), ("lambda_l_upper", b.lambda_l_upper), ("lambda_c_upper", b.lambda_c_upper)] {
                rows.push(ResultRow::value("bounds", metric, None, d, v, 1));
            }
        }
        let detail = format!("d = 3: ({}, {}, {}); d = 18 upper {}", b3.lambda_l_lower, b3.lambda_l_upper, b3.lambda_c_upper, b18.lambda_l_upper);
        Ok((ok, detail, rows))
    })
}

/// Extinction before size 20 from one infected vertex at `d = 3, λ = 2`
/// against the gambler's ruin probability.
pub fn ruin_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(100_000);
    with_retry("ruin", opts.seed, |seed| {
        let params = TreeParams::new(3)?;
        let est = ruin_probability(params, 2.0, 20, n, &opts.cfg(seed))?;
        let exact = gambler_ruin_absorb(2.0, 1, Some(20));
        let ok = (est.mean - exact).abs() <= 3.0 * est.stderr;
        let rows = vec![
            ResultRow::estimate("ruin", "extinct_before_20", Some(2.0), 3, &est),
            ResultRow::value("ruin", "exact", Some(2.0), 3, exact, 1),
        ];
        Ok((ok, format!("estimate {:.6} +- {:.6}, exact {exact:.7}", est.mean, est.stderr), rows))
    })
}

/// Mean increment of the size walk against `(λ - 1)/(λ + 1)`.
pub fn drift_increment_check(lambda: f64, opts: &VerifyOptions) -> Check {
    let n = opts.n(100_000);
    with_retry(&format!("drift_l{lambda}"), opts.seed, |seed| {
        let est = drift_check(TreeParams::new(3)?, lambda, n, &opts.cfg(seed))?;
        let target = (lambda - 1.0) / (lambda + 1.0);
        let ok = (est.mean - target).abs() <= 3.0 * est.stderr;
        let rows = vec![ResultRow::estimate("drift", "mean_increment", Some(lambda), 3, &est)];
        Ok((ok, format!("mean {:.5} +- {:.5}, target {target:.5}", est.mean, est.stderr), rows))
    })
}

fn test_rows(experiment: &str, lambda: f64, d: u32, n: u64, t: &TwoSampleReport) -> Vec<ResultRow> {
    vec![
        ResultRow::value(experiment, &format!("{}_chi2", t.statistic), Some(lambda), d, t.chi2, n),
        ResultRow::value(experiment, &format!("{}_p_value", t.statistic), Some(lambda), d, t.p_value, n),
    ]
}

fn test_passes(t: &TwoSampleReport) -> bool {
    t.verdict != Verdict::Fail
}

/// Thinning of the WB state against the walk from the thinned initial set.
pub fn thinning_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(50_000);
    with_retry("thinning", opts.seed, |seed| {
        let params = TreeParams::new(3)?;
        let xi0 = Configuration::singleton(VertexAddr::origin());
        let rep = thinning_two_sample(params, 3.0, &xi0, 0.5, 8, n, &opts.cfg(seed))?;
        let mut rows = test_rows("thinning", 3.0, 3, n, &rep.test);
        rows.push(ResultRow::estimate("thinning", "dual_origin", Some(3.0), 3, &rep.dual_origin));
        rows.push(ResultRow::estimate("thinning", "thinned_origin", Some(3.0), 3, &rep.thinned_origin));
        rows.push(ResultRow::estimate("thinning", "doubling_shift", Some(3.0), 3, &rep.doubling));
        let detail = format!("p = {:.4} over {} cells", rep.test.p_value, rep.test.cells.len());
        Ok((test_passes(&rep.test), detail, rows))
    })
}

/// Finite-difference derivative of the infected density at time 0.
pub fn derivative_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(100_000);
    with_retry("derivative", opts.seed, |seed| {
        let rep = rho_delta_derivative(TreeParams::new(3)?, 2.0, 0.3, 0.05, 8, n, &opts.cfg(seed))?;
        let ok = (rep.lhs - rep.rhs).abs() <= 0.1;
        let v = |metric: &str, x: f64| ResultRow::value("derivative", metric, Some(2.0), 3, x, n);
        let mut rows = vec![
            ResultRow { stderr: Some(rep.lhs_stderr), ..v("lhs", rep.lhs) },
            ResultRow { stderr: Some(rep.lhs_raw_stderr), ..v("lhs_raw", rep.lhs_raw) },
            v("rhs", rep.rhs),
            v("rho0_hat", rep.rho0_hat),
            v("rho_h_hat", rep.rho_h_hat),
            v("delta0_hat", rep.delta0_hat),
        ];
        rows.push(ResultRow::estimate("derivative", "light_cone_exit", Some(2.0), 3, &rep.light_cone));
        Ok((ok, format!("lhs {:.4} +- {:.4}, rhs {:.4}", rep.lhs, rep.lhs_stderr, rep.rhs), rows))
    })
}

/// Infections across the center edge against healings across its reverse.
pub fn event_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(10_000);
    with_retry("event_rate", opts.seed, |seed| {
        let rep = event_rate_ratio(TreeParams::new(3)?, 2.0, 0.5, 2.0, 8, n, &opts.cfg(seed))?;
        let e = |metric: &str, x| ResultRow::estimate("event_rate", metric, Some(2.0), 3, x);
        let rows = vec![
            e("e_plus", &rep.e_plus),
            e("e_minus_reversed", &rep.e_minus_rev),
            e("difference", &rep.difference),
            ResultRow::value("event_rate", "ratio", Some(2.0), 3, rep.ratio, n),
            e("light_cone_exit", &rep.light_cone),
        ];
        let detail = format!(
            "E+ {:.4}, E- {:.4}, ratio {:.4}, (1 - 1/lambda)E+ = {:.4}",
            rep.e_plus.mean,
            rep.e_minus_rev.mean,
            rep.ratio,
            0.5 * rep.e_plus.mean
        );
        Ok((rep.ratio_ok && rep.bound_check, detail, rows))
    })
}

/// Simulators against the sweeps of the graphical construction.
pub fn law_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(50_000);
    with_retry("law_agreement", opts.seed, |seed| {
        let rep = law_agreement(TreeParams::new(3)?, 2.0, 2, 1.0, n, &opts.cfg(seed))?;
        let mut rows = test_rows("law_agreement", 2.0, 3, n, &rep.wb);
        rows.extend(test_rows("law_agreement", 2.0, 3, n, &rep.bcrw));
        let detail = format!("wb p = {:.4}, bcrw p = {:.4}", rep.wb.p_value, rep.bcrw.p_value);
        Ok((test_passes(&rep.wb) && test_passes(&rep.bcrw), detail, rows))
    })
}

/// The subtree below the origin, cut at `depth`, with everything else
/// frozen healthy.
pub fn truncated_subtree(depth: u32) -> BoundarySpec {
    BoundarySpec::minus(Region::subtree(VertexAddr::origin(), Some(depth)))
}

/// Origin occupancy at time 30 across `λ`: near 0 below the lower bound,
/// clearly positive above the upper bound, and nondecreasing in between.
/// The value at 1.02 is also computed on a subtree twice as deep.
pub fn phase_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(10_000);
    let grid = [1.02, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
    let proxy = SurvivalProxy::OriginOccupiedAt { t: 30.0 };
    with_retry("phase", opts.seed, |seed| {
        let params = TreeParams::new(3)?;
        let cfg = opts.cfg(seed);
        let scan = threshold_scan(params, &grid, &proxy, &truncated_subtree(6), n, &cfg)?;
        let deep = threshold_scan(params, &[1.02], &proxy, &truncated_subtree(12), n, &cfg)?;
        let low = scan.points[0].1.mean;
        let high = scan.points[grid.len() - 1].1.mean;
        let deep_low = deep.points[0].1.mean;
        let ok = low < 0.01 && deep_low < 0.01 && high > 0.02 && scan.monotone;
        let mut rows: Vec<ResultRow> =
            scan.points.iter().map(|(l, e)| ResultRow::estimate("phase", "origin_occupied_t30_depth6", Some(*l), 3, e)).collect();
        rows.push(ResultRow::estimate("phase", "origin_occupied_t30_depth12", Some(1.02), 3, &deep.points[0].1));
        let detail = format!(
            "p(1.02) = {low:.4} (depth 12: {deep_low:.4}), p(8) = {high:.4}, monotone {}, first positive {:?}, bracket [{:.4}, {}]",
            scan.monotone, scan.first_positive, scan.bounds.lambda_l_lower, scan.bounds.lambda_l_upper
        );
        Ok((ok, detail, rows))
    })
}

fn occupancy_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(10_000);
    once("occupancy", opts.seed, |seed| {
        let params = TreeParams::new(3)?;
        let grid = [0.0, 0.5, 1.0, 2.0, 4.0, 7.0, 10.0];
        let mut rows = Vec::new();
        let mut minima = Vec::new();
        for lambda in [1.0, 8.0] {
            let curve = occupancy_curve(params, lambda, &grid, 6, n, &opts.cfg(seed))?;
            minima.push(curve.iter().map(|p| p.1.mean).fold(1.0, f64::min));
            for (t, e) in &curve {
                rows.push(ResultRow::estimate("occupancy", &format!("origin_occupied_t{t}"), Some(lambda), 3, e));
            }
        }
        Ok((true, format!("minimum over t: {:.4} at lambda 1, {:.4} at lambda 8", minima[0], minima[1]), rows))
    })
}

fn inclusion_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(10_000);
    once("inclusion_tail", opts.seed, |seed| {
        let grid = [0.01, 0.03, 0.1, 0.3, 1.0];
        let tail = inclusion_tail(TreeParams::new(3)?, 8.0, &grid, 6, n, &opts.cfg(seed))?;
        let mut rows: Vec<ResultRow> =
            tail.points.iter().map(|(t, e)| ResultRow::estimate("inclusion_tail", &format!("tail_t{t}"), Some(8.0), 3, e)).collect();
        for (i, s) in tail.local_slopes.iter().enumerate() {
            rows.push(ResultRow::value("inclusion_tail", &format!("local_slope_{i}"), Some(8.0), 3, *s, n));
        }
        Ok((true, format!("local slopes {:?}", tail.local_slopes), rows))
    })
}

fn growth_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(2_000);
    once("growth", opts.seed, |seed| {
        let rep = growth_profile(TreeParams::new(3)?, 1.5, &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0], n, &opts.cfg(seed))?;
        let mut rows = Vec::new();
        for p in &rep.points {
            rows.push(ResultRow::value("growth", &format!("mean_log_size_t{}", p.t), Some(1.5), 3, p.mean_log_size, n));
            rows.push(ResultRow::value("growth", &format!("speed_t{}", p.t), Some(1.5), 3, p.speed, n));
        }
        rows.push(ResultRow::value("growth", "log_size_slope", Some(1.5), 3, rep.log_size_slope, n));
        rows.push(ResultRow::value("growth", "log_size_r2", Some(1.5), 3, rep.log_size_r2, n));
        Ok((true, format!("log-size slope {:.3}, R^2 {:.4}", rep.log_size_slope, rep.log_size_r2), rows))
    })
}

fn corridor_check(opts: &VerifyOptions) -> Check {
    let n = opts.n(5_000);
    once("corridor", opts.seed, |seed| {
        let pts = corridor_inclusion(TreeParams::new(3)?, 8.0, &[1, 2, 4], &[0.05, 0.2, 1.0], n, &opts.cfg(seed))?;
        let rows =
            pts.iter().map(|p| ResultRow::estimate("corridor", &format!("included_r{}_u{}", p.r, p.u), Some(8.0), 3, &p.estimate)).collect();
        Ok((true, String::from("inclusion probability by radius and time"), rows))
    })
}
