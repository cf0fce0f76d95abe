//! Replica orchestration and the Monte Carlo experiments.
//!
//! Replica `i` of an experiment labeled `L` draws from the stream keyed
//! `(seed, L, i)`, so results do not depend on the worker count or on the
//! order in which replicas run. Replicas are collected in index order and
//! reduced sequentially.
//!
//! Runs meant to approximate the infinite tree use `Ball(0, R)` with `-`
//! boundary. Reports carry the probability that the branching coalescing
//! walk started from the observed vertices leaves `Ball(0, R)` before the
//! observation time. Two copies of the process on `Ball(0, R)` and on a
//! larger ball, built on one graphical representation, can only differ on
//! the observed vertices on that event.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{prop_bounds, Bounds};
use crate::configs::{bernoulli_on, realize_init, thin, BoundarySpec, Configuration, InitSpec};
use crate::dynamics::{BcrwSim, EventKind, Process, RunOptions, StopCondition, StopReason, Trajectory, WbSim, DEFAULT_MAX_EVENTS};
use crate::error::MonteCarloError;
use crate::graphical::sample_window;
use crate::rng::{RandomStream, StreamKey};
use crate::stats::{chi_square_two_sample, EstimatorResult, MeanAccumulator, TwoSampleReport};
use crate::tree::{ball, distance, parent, Region, TreeParams, VertexAddr};

/// Significance level of every two-sample test.
pub const ALPHA: f64 = 0.01;

/// Seed and worker count shared by all experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub seed: u64,
    /// `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl McConfig {
    pub fn new(seed: u64) -> Self {
        Self { seed, workers: None }
    }

    pub fn with_workers(seed: u64, workers: usize) -> Self {
        Self { seed, workers: Some(workers) }
    }

    pub fn key(&self, label: &str) -> StreamKey {
        StreamKey::root(self.seed).child(label)
    }

    fn install<T: Send>(&self, job: impl FnOnce() -> T + Send) -> Result<T, MonteCarloError> {
        match self.workers {
            None => Ok(job()),
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| MonteCarloError::Workers(e.to_string()))?;
                Ok(pool.install(job))
            }
        }
    }
}

/// Runs replicas `first..first + n` of the experiment `label`. Each worker
/// clones `proto` once and reuses it (simulators keep their interned tree).
pub fn replicas<S, T, F>(
    cfg: &McConfig,
    label: &str,
    first: u64,
    n: u64,
    proto: &S,
    f: F,
) -> Result<Vec<T>, MonteCarloError>
where
    S: Clone + Send + Sync,
    T: Send,
    F: Fn(&mut S, &mut RandomStream, u64) -> Result<T, MonteCarloError> + Send + Sync,
{
    let key = cfg.key(label);
    cfg.install(|| {
        (first..first + n)
            .into_par_iter()
            .map_init(|| proto.clone(), |sim, i| f(sim, &mut key.index(i).stream(), i))
            .collect()
    })?
}

fn check_lambda(lambda: f64) -> Result<(), MonteCarloError> {
    if lambda >= 1.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(MonteCarloError::InvalidParameters(format!("lambda must be >= 1, got {lambda}")))
    }
}

fn origin_ball(params: TreeParams, r: u32) -> Vec<VertexAddr> {
    ball(params, &VertexAddr::origin(), r)
}

fn minus_ball(r: u32) -> BoundarySpec {
    BoundarySpec::minus(Region::ball(VertexAddr::origin(), r))
}

/// A complete run description for [`estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub process: Process,
    pub params: TreeParams,
    pub lambda: f64,
    pub init: InitSpec,
    pub boundary: BoundarySpec,
    pub stop: StopCondition,
    #[serde(default)]
    pub record_events: bool,
}

/// Runs `n` replicas of `spec` (streams `(seed, "replica", i)`) and
/// estimates the probability of `predicate`. Truncated replicas are
/// excluded from the estimate and counted separately.
pub fn estimate<P>(spec: &RunSpec, predicate: P, n: u64, cfg: &McConfig) -> Result<EstimatorResult, MonteCarloError>
where
    P: Fn(&Trajectory) -> bool + Send + Sync,
{
    let outcomes = run_spec(spec, n, cfg, |_, tr| (!tr.truncated()).then(|| predicate(tr)))?;
    proportion_of(&outcomes)
}

/// Runs `n` replicas of `spec` and maps each replica index and trajectory
/// through `f`.
pub fn run_spec<T, F>(spec: &RunSpec, n: u64, cfg: &McConfig, f: F) -> Result<Vec<T>, MonteCarloError>
where
    T: Send,
    F: Fn(u64, &Trajectory) -> T + Send + Sync,
{
    if n == 0 {
        return Err(MonteCarloError::InvalidParameters("at least one replica is required".into()));
    }
    spec.init.validate(spec.params, &spec.boundary)?;
    spec.stop.validate()?;
    let opts = RunOptions { record_events: spec.record_events, snapshot_times: Vec::new() };
    let proto = Sims::new(spec.process, spec.params, &spec.boundary, spec.lambda)?;
    replicas(cfg, "replica", 0, n, &proto, |sims, rng, i| {
        let init = realize_init(&spec.init, spec.params, rng)?;
        let tr = match sims {
            Sims::Wb(s) => s.run(&init, &spec.stop, &opts, rng)?,
            Sims::Bcrw(s) => s.run(&init, &spec.stop, &opts, rng)?,
        };
        Ok(f(i, &tr))
    })
}

#[derive(Clone)]
enum Sims {
    Wb(WbSim),
    Bcrw(BcrwSim),
}

impl Sims {
    fn new(process: Process, params: TreeParams, boundary: &BoundarySpec, lambda: f64) -> Result<Self, MonteCarloError> {
        Ok(match process {
            Process::Wb => Sims::Wb(WbSim::new(params, boundary.clone(), lambda)?),
            Process::Bcrw => Sims::Bcrw(BcrwSim::new(params, boundary.clone(), lambda)?),
        })
    }
}

/// Proportion of `Some(true)` among decided outcomes; `None` marks a
/// truncated replica.
pub fn proportion_of(outcomes: &[Option<bool>]) -> Result<EstimatorResult, MonteCarloError> {
    let truncated = outcomes.iter().filter(|o| o.is_none()).count() as u64;
    let used = outcomes.len() as u64 - truncated;
    if used == 0 {
        return Err(MonteCarloError::AllTruncated(outcomes.len()));
    }
    let hits = outcomes.iter().filter(|o| **o == Some(true)).count() as u64;
    Ok(EstimatorResult::proportion(hits, used, truncated))
}

/// Estimated probability that the WB process from the origin is absorbed
/// at 0 before its size reaches `size`.
pub fn ruin_probability(params: TreeParams, lambda: f64, size: usize, n: u64, cfg: &McConfig) -> Result<EstimatorResult, MonteCarloError> {
    let spec = RunSpec {
        process: Process::Wb,
        params,
        lambda,
        init: InitSpec::Origin {},
        boundary: BoundarySpec::None,
        stop: StopCondition::extinction_or_size(size),
        record_events: false,
    };
    estimate(&spec, |tr| tr.stop == StopReason::Extinction, n, cfg)
}

/// Mean increment of the embedded size walk of the WB process without
/// boundary. Increments are pooled in replica order from runs started at
/// the origin, each followed for at most `per_run` transitions or until
/// extinction, until `n_steps` increments are collected.
pub fn drift_check(params: TreeParams, lambda: f64, n_steps: u64, cfg: &McConfig) -> Result<EstimatorResult, MonteCarloError> {
    check_lambda(lambda)?;
    const PER_RUN: u64 = 1_000;
    const BATCH: u64 = 256;
    let proto = WbSim::new(params, BoundarySpec::None, lambda)?;
    let origin = Configuration::singleton(VertexAddr::origin());
    let mut acc = MeanAccumulator::default();
    let mut next = 0;
    while acc.count() < n_steps {
        let batch = replicas(cfg, "drift", next, BATCH, &proto, |sim, rng, _| {
            sim.reset(&origin)?;
            let mut incs = Vec::new();
            for _ in 0..PER_RUN {
                match sim.step(rng) {
                    Ok(e) => incs.push(if e.kind == EventKind::Infect { 1i8 } else { -1 }),
                    Err(crate::error::DynamicsError::Deadlock) => break,
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(incs)
        })?;
        next += BATCH;
        for x in batch.into_iter().flatten() {
            if acc.count() == n_steps {
                break;
            }
            acc.push(x as f64);
        }
    }
    Ok(acc.result(0))
}

/// Probability that the branching coalescing walk from `observed` leaves
/// `Ball(0, r)` by time `t`. This bounds how much any statistic of
/// `observed` at time `t` can move when `r` is enlarged. The bound is crude,
/// since most exits never feed back to `observed`.
pub fn light_cone_exit(
    params: TreeParams,
    lambda: f64,
    observed: &[VertexAddr],
    t: f64,
    r: u32,
    n: u64,
    cfg: &McConfig,
) -> Result<EstimatorResult, MonteCarloError> {
    let proto = BcrwSim::new(params, minus_ball(r), lambda)?;
    let init: Configuration = observed.iter().cloned().collect();
    let outcomes = replicas(cfg, "light_cone", 0, n, &proto, |sim, rng, _| {
        sim.reset(&init)?;
        let mut events = 0u64;
        while !sim.exited() {
            if events >= DEFAULT_MAX_EVENTS {
                return Ok(None);
            }
            match sim.advance(rng, t) {
                Ok(Some(_)) => events += 1,
                Ok(None) | Err(crate::error::DynamicsError::Deadlock) => break,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(sim.exited()))
    })?;
    proportion_of(&outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThinningReport {
    pub test: TwoSampleReport,
    /// Origin occupancy on each side.
    pub dual_origin: EstimatorResult,
    pub thinned_origin: EstimatorResult,
    /// Paired difference of the dual origin occupancy between `Ball(0, r)`
    /// and `Ball(0, 2r)`, both driven by the same streams.
    pub doubling: EstimatorResult,
}

/// Compares the walk started from a `p`-thinning of `xi0` with the
/// `p`-thinning of the WB state started from `xi0`, `p = 1 - 1/λ`, both at
/// time `t` on `Ball(0, r)` with `-` boundary, through their occupancy
/// patterns on `Ball(0, 1)`.
///
/// The walk side is rerun on `Ball(0, 2r)` with the same streams. The two
/// runs agree until a particle first tries to leave `Ball(0, r)`, so the
/// paired difference isolates the effect of the radius. If its mean exceeds
/// the standard error of the origin occupancy the call fails with
/// `RadiusTooSmall`.
pub fn thinning_two_sample(
    params: TreeParams,
    lambda: f64,
    xi0: &Configuration,
    t: f64,
    r: u32,
    n: u64,
    cfg: &McConfig,
) -> Result<ThinningReport, MonteCarloError> {
    if !(lambda > 1.0 && lambda.is_finite()) {
        return Err(MonteCarloError::InvalidParameters(format!("thinning needs lambda > 1, got {lambda}")));
    }
    if xi0.iter().any(|x| 2 * x.radius() > r) {
        return Err(MonteCarloError::InvalidParameters(format!("initial set must lie in Ball(0, {})", r / 2)));
    }
    let p = 1.0 - 1.0 / lambda;
    let cells = origin_ball(params, 1);
    let origin = VertexAddr::origin();

    let dual_side = |radius: u32| -> Result<Vec<Option<(u64, bool)>>, MonteCarloError> {
        let proto = BcrwSim::new(params, minus_ball(radius), lambda)?;
        replicas(cfg, "thinning/dual", 0, n, &proto, |sim, rng, i| {
            let start = thin(xi0, p, &cfg.key("thinning/dual/thin").index(i))?;
            sim.reset(&start)?;
            if sim.run_until(rng, t, DEFAULT_MAX_EVENTS)?.truncated {
                return Ok(None);
            }
            let c = sim.config();
            Ok(Some((c.pattern(&cells), c.contains(&origin))))
        })
    };
    let dual = dual_side(r)?;
    let wide = dual_side(2 * r)?;
    let wb_proto = WbSim::new(params, minus_ball(r), lambda)?;
    let primal: Vec<Option<(u64, bool)>> = replicas(cfg, "thinning/wb", 0, n, &wb_proto, |sim, rng, i| {
        sim.reset(xi0)?;
        if sim.run_until(rng, t, DEFAULT_MAX_EVENTS)?.truncated {
            return Ok(None);
        }
        let c = thin(&sim.config(), p, &cfg.key("thinning/wb/thin").index(i))?;
        Ok(Some((c.pattern(&cells), c.contains(&origin))))
    })?;

    let patterns = |v: &[Option<(u64, bool)>]| -> Vec<u64> { v.iter().flatten().map(|x| x.0).collect() };
    let origin_of = |v: &[Option<(u64, bool)>]| proportion_of(&v.iter().map(|x| x.map(|y| y.1)).collect::<Vec<_>>());
    let dual_origin = origin_of(&dual)?;
    let thinned_origin = origin_of(&primal)?;
    let shifts: Vec<f64> = dual
        .iter()
        .zip(&wide)
        .filter_map(|(a, b)| Some(f64::from(u8::from(a.as_ref()?.1)) - f64::from(u8::from(b.as_ref()?.1))))
        .collect();
    let doubling = EstimatorResult::mean_of(&shifts, n - shifts.len() as u64);
    let stderr = dual_origin.stderr.max(1.0 / n as f64);
    if doubling.mean.abs() > stderr {
        return Err(MonteCarloError::RadiusTooSmall { radius: r, shift: doubling.mean, stderr });
    }
    Ok(ThinningReport {
        test: chi_square_two_sample("ball1_pattern", &patterns(&dual), &patterns(&primal), ALPHA),
        dual_origin,
        thinned_origin,
        doubling,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub rho0_hat: f64,
    pub rho_h_hat: f64,
    pub delta0_hat: f64,
    /// `(ρ̂_h - p)/h` with `ρ̂_h = p + mean(ξ_h(0) - ξ_0(0))`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `(mean ξ_h(0) - p)/h`, without the control variate.
    pub lhs_raw: f64,
    pub lhs_raw_stderr: f64,
    /// `d(λ - 1)p(1 - p)`.
    pub rhs: f64,
    pub n: u64,
    pub light_cone: EstimatorResult,
}

/// Finite-difference check of `dρ/dt = d(λ-1)δ` at time 0 from Bernoulli(p)
/// signs on `Ball(0, r)`, run to time `h` with `-` boundary.
///
/// `ξ_0(0)` has known mean `p`, so `ξ_h(0) - ξ_0(0)` estimates `ρ_h - p`
/// without bias and with far less noise than `ξ_h(0)` alone.
pub fn rho_delta_derivative(
    params: TreeParams,
    lambda: f64,
    p: f64,
    h: f64,
    r: u32,
    n: u64,
    cfg: &McConfig,
) -> Result<DerivativeReport, MonteCarloError> {
    check_lambda(lambda)?;
    if !(0.0..=1.0).contains(&p) || h <= 0.0 {
        return Err(MonteCarloError::InvalidParameters(format!("need p in [0, 1] and h > 0, got p = {p}, h = {h}")));
    }
    let cells = origin_ball(params, r);
    let origin = VertexAddr::origin();
    let up = parent(&origin);
    let proto = WbSim::new(params, minus_ball(r), lambda)?;
    let rows: Vec<(bool, bool, bool)> = replicas(cfg, "derivative", 0, n, &proto, |sim, rng, i| {
        let init = bernoulli_on(&cells, p, &mut cfg.key("derivative/init").index(i).stream());
        let x0 = init.contains(&origin);
        let discordant = x0 && !init.contains(&up);
        sim.reset(&init)?;
        if sim.run_until(rng, h, DEFAULT_MAX_EVENTS)?.truncated {
            return Err(MonteCarloError::AllTruncated(1));
        }
        Ok((x0, sim.is_plus_addr(&origin), discordant))
    })?;
    let nf = n as f64;
    let frac = |f: &dyn Fn(&(bool, bool, bool)) -> bool| rows.iter().filter(|x| f(x)).count() as f64 / nf;
    let rho0_hat = frac(&|x| x.0);
    let rho_h_hat = frac(&|x| x.1);
    let delta0_hat = frac(&|x| x.2);
    let diff: MeanAccumulator = rows.iter().map(|x| f64::from(u8::from(x.1)) - f64::from(u8::from(x.0))).collect();
    let raw: MeanAccumulator = rows.iter().map(|x| f64::from(u8::from(x.1))).collect();
    let stderr = (diff.variance() / nf).sqrt();
    let light_cone = light_cone_exit(params, lambda, std::slice::from_ref(&origin), h, r, n.min(10_000), cfg)?;
    Ok(DerivativeReport {
        rho0_hat,
        rho_h_hat,
        delta0_hat,
        lhs: diff.mean() / h,
        lhs_stderr: stderr / h,
        lhs_raw: (raw.mean() - p) / h,
        lhs_raw_stderr: (raw.variance() / nf).sqrt() / h,
        rhs: params.degree() as f64 * (lambda - 1.0) * p * (1.0 - p),
        n,
        light_cone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRateReport {
    /// Mean number of infections of `parent(0)` by `0` up to `T`.
    pub e_plus: EstimatorResult,
    /// Mean number of healings of `0` by `parent(0)` up to `T`.
    pub e_minus_rev: EstimatorResult,
    /// Mean of `e⁺ - λe⁻`, which vanishes exactly.
    pub difference: EstimatorResult,
    pub ratio: f64,
    pub ratio_ok: bool,
    /// `(1 - 1/λ)Ê⁺ <= 1/d + 3 stderr`.
    pub bound_check: bool,
    pub light_cone: EstimatorResult,
}

/// Counts infections along the edge `(0, parent(0))` and healings along the
/// reverse edge for the WB process from Bernoulli(p) signs on `Ball(0, r)`.
pub fn event_rate_ratio(
    params: TreeParams,
    lambda: f64,
    p: f64,
    t: f64,
    r: u32,
    n: u64,
    cfg: &McConfig,
) -> Result<EventRateReport, MonteCarloError> {
    check_lambda(lambda)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(MonteCarloError::InvalidParameters(format!("p must lie in [0, 1], got {p}")));
    }
    let cells = origin_ball(params, r);
    let origin = VertexAddr::origin();
    let up = parent(&origin);
    let mut proto = WbSim::new(params, minus_ball(r), lambda)?;
    let (u, v) = (proto.intern(&origin), proto.intern(&up));
    let rows: Vec<Option<(u64, u64)>> = replicas(cfg, "event_rate", 0, n, &proto, |sim, rng, i| {
        let init = bernoulli_on(&cells, p, &mut cfg.key("event_rate/init").index(i).stream());
        sim.reset(&init)?;
        let (mut plus, mut minus) = (0u64, 0u64);
        for _ in 0..DEFAULT_MAX_EVENTS {
            match sim.advance(rng, t) {
                Ok(Some(e)) => {
                    if e.u == u && e.v == v {
                        match e.kind {
                            EventKind::Infect => plus += 1,
                            EventKind::Heal => minus += 1,
                            _ => {}
                        }
                    }
                }
                Ok(None) | Err(crate::error::DynamicsError::Deadlock) => return Ok(Some((plus, minus))),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(None)
    })?;
    let truncated = rows.iter().filter(|x| x.is_none()).count() as u64;
    let done: Vec<(u64, u64)> = rows.into_iter().flatten().collect();
    if done.is_empty() {
        return Err(MonteCarloError::AllTruncated(n as usize));
    }
    let e_plus: MeanAccumulator = done.iter().map(|x| x.0 as f64).collect();
    let e_minus: MeanAccumulator = done.iter().map(|x| x.1 as f64).collect();
    let diff: MeanAccumulator = done.iter().map(|x| x.0 as f64 - lambda * x.1 as f64).collect();
    let (e_plus, e_minus_rev, difference) = (e_plus.result(truncated), e_minus.result(truncated), diff.result(truncated));
    let ratio = e_plus.mean / e_minus_rev.mean;
    let ratio_ok = difference.mean.abs() <= 3.0 * difference.stderr;
    let scale = 1.0 - 1.0 / lambda;
    let bound_check = scale * e_plus.mean <= 1.0 / params.degree() as f64 + 3.0 * scale * e_plus.stderr;
    let light_cone = light_cone_exit(params, lambda, &[origin, up], t, r, n.min(10_000), cfg)?;
    Ok(EventRateReport { e_plus, e_minus_rev, difference, ratio, ratio_ok, bound_check, light_cone })
}

/// `P(0 occupied at t)` for the branching coalescing walk from the origin
/// on the subtree of the origin cut at `depth`, everything else frozen `-`.
pub fn occupancy_curve(
    params: TreeParams,
    lambda: f64,
    t_grid: &[f64],
    depth: u32,
    n: u64,
    cfg: &McConfig,
) -> Result<Vec<(f64, EstimatorResult)>, MonteCarloError> {
    let mut grid = t_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let origin = VertexAddr::origin();
    let boundary = BoundarySpec::minus(Region::subtree(origin.clone(), Some(depth)));
    let mut proto = BcrwSim::new(params, boundary, lambda)?;
    let o = proto.intern(&origin);
    let start = Configuration::singleton(origin);
    let rows: Vec<Vec<Option<bool>>> = replicas(cfg, "occupancy", 0, n, &proto, |sim, rng, _| {
        sim.reset(&start)?;
        let mut out = Vec::with_capacity(grid.len());
        let mut truncated = false;
        for &t in &grid {
            truncated = truncated || sim.run_until(rng, t, DEFAULT_MAX_EVENTS)?.truncated;
            out.push((!truncated).then(|| sim.is_occupied(o)));
        }
        Ok(out)
    })?;
    grid.iter()
        .enumerate()
        .map(|(j, &t)| Ok((t, proportion_of(&rows.iter().map(|row| row[j]).collect::<Vec<_>>())?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InclusionTail {
    pub points: Vec<(f64, EstimatorResult)>,
    /// `-Δ log P / Δ log t` between consecutive grid points with positive
    /// tail estimates.
    pub local_slopes: Vec<f64>,
}

/// `P(τ̂_y > t)` for the walk from the origin, `y = parent(0)`, on
/// `Ball(0, r)` with `-` boundary.
pub fn inclusion_tail(
    params: TreeParams,
    lambda: f64,
    t_grid: &[f64],
    r: u32,
    n: u64,
    cfg: &McConfig,
) -> Result<InclusionTail, MonteCarloError> {
    let mut grid = t_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let horizon = grid.last().copied().unwrap_or(0.0);
    let origin = VertexAddr::origin();
    let mut proto = BcrwSim::new(params, minus_ball(r), lambda)?;
    let y = proto.intern(&parent(&origin));
    let start = Configuration::singleton(origin);
    let times: Vec<Option<f64>> = replicas(cfg, "inclusion_tail", 0, n, &proto, |sim, rng, _| {
        sim.reset(&start)?;
        for _ in 0..DEFAULT_MAX_EVENTS {
            if sim.is_occupied(y) {
                return Ok(Some(sim.time()));
            }
            match sim.advance(rng, horizon) {
                Ok(Some(_)) => {}
                Ok(None) | Err(crate::error::DynamicsError::Deadlock) => return Ok(Some(f64::INFINITY)),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(None)
    })?;
    let points: Vec<(f64, EstimatorResult)> = grid
        .iter()
        .map(|&t| Ok((t, proportion_of(&times.iter().map(|x| x.map(|tau| tau > t)).collect::<Vec<_>>())?)))
        .collect::<Result<_, MonteCarloError>>()?;
    let local_slopes = points
        .windows(2)
        .filter(|w| w[0].0 > 0.0 && w[0].1.mean > 0.0 && w[1].1.mean > 0.0)
        .map(|w| -(w[1].1.mean.ln() - w[0].1.mean.ln()) / (w[1].0.ln() - w[0].0.ln()))
        .collect();
    Ok(InclusionTail { points, local_slopes })
}

/// Finite-horizon stand-ins for the survival events, all for the WB process
/// started from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurvivalProxy {
    /// Reported as the probability of reaching size `n` before extinction,
    /// so that every proxy increases with `λ`.
    ExtinctBeforeSize { n: usize },
    OriginOccupiedAt { t: f64 },
    OriginReinfections { t: f64, threshold: u64 },
    IncludesSetBy { set: Vec<VertexAddr>, t: f64 },
}

impl SurvivalProxy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ExtinctBeforeSize { .. } => "reaches_size",
            Self::OriginOccupiedAt { .. } => "origin_occupied",
            Self::OriginReinfections { .. } => "origin_reinfections",
            Self::IncludesSetBy { .. } => "includes_set",
        }
    }

    fn horizon(&self) -> Option<f64> {
        match self {
            Self::ExtinctBeforeSize { .. } => None,
            Self::OriginOccupiedAt { t } | Self::OriginReinfections { t, .. } | Self::IncludesSetBy { t, .. } => Some(*t),
        }
    }
}

/// Estimated probability of `proxy` at rate `lambda` on the graph described
/// by `boundary`.
pub fn proxy_probability(
    params: TreeParams,
    lambda: f64,
    proxy: &SurvivalProxy,
    boundary: &BoundarySpec,
    n: u64,
    cfg: &McConfig,
) -> Result<EstimatorResult, MonteCarloError> {
    check_lambda(lambda)?;
    if proxy.horizon().is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
        return Err(MonteCarloError::InvalidParameters("proxy horizon must be finite".into()));
    }
    let origin = VertexAddr::origin();
    let start = Configuration::singleton(origin.clone());
    InitSpec::Origin {}.validate(params, boundary)?;
    let mut proto = WbSim::new(params, boundary.clone(), lambda)?;
    let o = proto.intern(&origin);
    let set_ids: Vec<_> = match proxy {
        SurvivalProxy::IncludesSetBy { set, .. } => set.iter().map(|x| proto.intern(x)).collect(),
        _ => Vec::new(),
    };
    let label = format!("proxy/{}", proxy.name());
    let outcomes = replicas(cfg, &label, 0, n, &proto, |sim, rng, _| {
        sim.reset(&start)?;
        let mut events = 0u64;
        let outcome = match proxy {
            SurvivalProxy::ExtinctBeforeSize { n: size } => loop {
                if sim.is_empty() {
                    break Some(false);
                }
                if sim.len() >= *size {
                    break Some(true);
                }
                if events >= DEFAULT_MAX_EVENTS {
                    break None;
                }
                match sim.step(rng) {
                    Ok(_) => events += 1,
                    Err(crate::error::DynamicsError::Deadlock) => break Some(false),
                    Err(e) => return Err(e.into()),
                }
            },
            SurvivalProxy::OriginOccupiedAt { t } => {
                let adv = sim.run_until(rng, *t, DEFAULT_MAX_EVENTS)?;
                (!adv.truncated).then(|| sim.is_plus(o))
            }
            SurvivalProxy::OriginReinfections { t, threshold } => {
                let mut count = 0;
                loop {
                    if count >= *threshold {
                        break Some(true);
                    }
                    if events >= DEFAULT_MAX_EVENTS {
                        break None;
                    }
                    match sim.advance(rng, *t) {
                        Ok(Some(e)) => {
                            events += 1;
                            count += u64::from(e.kind == EventKind::Infect && e.v == o);
                        }
                        Ok(None) | Err(crate::error::DynamicsError::Deadlock) => break Some(false),
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            SurvivalProxy::IncludesSetBy { t, .. } => loop {
                if set_ids.iter().all(|&x| sim.is_plus(x)) {
                    break Some(true);
                }
                if events >= DEFAULT_MAX_EVENTS {
                    break None;
                }
                match sim.advance(rng, *t) {
                    Ok(Some(_)) => events += 1,
                    Ok(None) | Err(crate::error::DynamicsError::Deadlock) => break Some(false),
                    Err(e) => return Err(e.into()),
                }
            },
        };
        Ok(outcome)
    })?;
    proportion_of(&outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub proxy: SurvivalProxy,
    pub points: Vec<(f64, EstimatorResult)>,
    /// Every step of the curve satisfies `p̂_{i+1} >= p̂_i - 3 σ`, with `σ`
    /// the combined standard error of the two estimates.
    pub monotone: bool,
    /// Smallest grid value whose 95% interval excludes 0.
    pub first_positive: Option<f64>,
    pub bounds: Bounds,
}

/// The proxy probability across `lambda_grid`.
pub fn threshold_scan(
    params: TreeParams,
    lambda_grid: &[f64],
    proxy: &SurvivalProxy,
    boundary: &BoundarySpec,
    n: u64,
    cfg: &McConfig,
) -> Result<ScanReport, MonteCarloError> {
    let bounds = prop_bounds(params.degree())?;
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    if grid.iter().any(|&l| !(1.0..=2.0 * bounds.lambda_l_upper).contains(&l)) {
        return Err(MonteCarloError::InvalidParameters(format!(
            "lambda grid must lie in [1, {}]",
            2.0 * bounds.lambda_l_upper
        )));
    }
    let points: Vec<(f64, EstimatorResult)> = grid
        .iter()
        .map(|&l| Ok((l, proxy_probability(params, l, proxy, boundary, n, cfg)?)))
        .collect::<Result<_, MonteCarloError>>()?;
    let monotone = points.windows(2).all(|w| {
        let (a, b) = (&w[0].1, &w[1].1);
        b.mean >= a.mean - 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
    });
    let first_positive = points.iter().find(|(_, e)| e.ci95.0 > 0.0).map(|(l, _)| *l);
    Ok(ScanReport { proxy: proxy.clone(), points, monotone, first_positive, bounds })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthPoint {
    pub t: f64,
    pub mean_log_size: f64,
    pub mean_max_distance: f64,
    /// `mean_max_distance / t`.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub points: Vec<GrowthPoint>,
    pub log_size_slope: f64,
    pub log_size_r2: f64,
    pub truncated: u64,
}

/// Size and spread of the walk from the origin on the whole tree.
pub fn growth_profile(params: TreeParams, lambda: f64, t_grid: &[f64], n: u64, cfg: &McConfig) -> Result<GrowthReport, MonteCarloError> {
    let mut grid: Vec<f64> = t_grid.iter().copied().filter(|&t| t > 0.0).collect();
    grid.sort_by(f64::total_cmp);
    let origin = VertexAddr::origin();
    let proto = BcrwSim::new(params, BoundarySpec::None, lambda)?;
    let start = Configuration::singleton(origin.clone());
    let rows: Vec<Option<Vec<(f64, f64)>>> = replicas(cfg, "growth", 0, n, &proto, |sim, rng, _| {
        sim.reset(&start)?;
        let mut out = Vec::new();
        for &t in &grid {
            if sim.run_until(rng, t, DEFAULT_MAX_EVENTS)?.truncated {
                return Ok(None);
            }
            let far = sim.particles().map(|id| distance(&origin, sim.lattice().addr(id))).max().unwrap_or(0);
            out.push(((sim.len() as f64).ln(), far as f64));
        }
        Ok(Some(out))
    })?;
    let truncated = rows.iter().filter(|r| r.is_none()).count() as u64;
    let done: Vec<Vec<(f64, f64)>> = rows.into_iter().flatten().collect();
    if done.is_empty() {
        return Err(MonteCarloError::AllTruncated(n as usize));
    }
    let m = done.len() as f64;
    let points: Vec<GrowthPoint> = grid
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mean_log_size = done.iter().map(|r| r[j].0).sum::<f64>() / m;
            let mean_max_distance = done.iter().map(|r| r[j].1).sum::<f64>() / m;
            GrowthPoint { t, mean_log_size, mean_max_distance, speed: mean_max_distance / t }
        })
        .collect();
    let (slope, r2) = linear_fit(&points.iter().map(|p| (p.t, p.mean_log_size)).collect::<Vec<_>>());
    Ok(GrowthReport { points, log_size_slope: slope, log_size_r2: r2, truncated })
}

/// Least-squares slope and coefficient of determination.
pub fn linear_fit(xy: &[(f64, f64)]) -> (f64, f64) {
    let n = xy.len() as f64;
    if xy.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorridorPoint {
    pub r: u32,
    pub u: f64,
    pub estimate: EstimatorResult,
}

/// `P(τ̂_y ≤ u)` for the walk from `x = 0` to `y = parent(0)` confined to
/// `Ball(x, r)` with `-` boundary.
pub fn corridor_inclusion(
    params: TreeParams,
    lambda: f64,
    radii: &[u32],
    u_grid: &[f64],
    n: u64,
    cfg: &McConfig,
) -> Result<Vec<CorridorPoint>, MonteCarloError> {
    let mut out = Vec::new();
    // Common streams across radii keep the curve in r smooth.
    for &r in radii {
        let tail = inclusion_tail(params, lambda, u_grid, r, n, cfg)?;
        for (u, est) in tail.points {
            let hit = EstimatorResult::proportion(est.n_used - (est.mean * est.n_used as f64).round() as u64, est.n_used, est.truncated);
            out.push(CorridorPoint { r, u, estimate: hit });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawAgreement {
    pub wb: TwoSampleReport,
    pub bcrw: TwoSampleReport,
}

/// Compares the simulators with the graphical construction on
/// `Ball(0, window_radius)` with `-` boundary: WB from the origin against
/// the forward sweep, and the walk from the origin against the backward
/// sweep, through patterns on `Ball(0, 1)` at time `t`.
pub fn law_agreement(
    params: TreeParams,
    lambda: f64,
    window_radius: u32,
    t: f64,
    n: u64,
    cfg: &McConfig,
) -> Result<LawAgreement, MonteCarloError> {
    check_lambda(lambda)?;
    let region = Region::ball(VertexAddr::origin(), window_radius);
    let boundary = BoundarySpec::minus(region.clone());
    let cells = origin_ball(params, 1);
    let start = Configuration::singleton(VertexAddr::origin());

    let wb_proto = WbSim::new(params, boundary.clone(), lambda)?;
    let wb: Vec<u64> = replicas(cfg, "law/wb", 0, n, &wb_proto, |sim, rng, _| {
        sim.reset(&start)?;
        sim.run_until(rng, t, DEFAULT_MAX_EVENTS)?;
        Ok(sim.config().pattern(&cells))
    })?;
    let bcrw_proto = BcrwSim::new(params, boundary, lambda)?;
    let bcrw: Vec<u64> = replicas(cfg, "law/bcrw", 0, n, &bcrw_proto, |sim, rng, _| {
        sim.reset(&start)?;
        sim.run_until(rng, t, DEFAULT_MAX_EVENTS)?;
        Ok(sim.config().pattern(&cells))
    })?;
    let windows: Vec<(u64, u64)> = replicas(cfg, "law/window", 0, n, &(), |_, _, i| {
        let w = sample_window(params, &region, t, lambda, &cfg.key("law/window").index(i))?;
        let fwd = w.forward_reach(&start, 0.0, t, lambda)?;
        let bwd = w.backward_reach(&start, t, 0.0, lambda)?;
        Ok((fwd.pattern(&cells), bwd.pattern(&cells)))
    })?;
    let fwd: Vec<u64> = windows.iter().map(|x| x.0).collect();
    let bwd: Vec<u64> = windows.iter().map(|x| x.1).collect();
    Ok(LawAgreement {
        wb: chi_square_two_sample("wb_vs_forward_sweep", &wb, &fwd, ALPHA),
        bcrw: chi_square_two_sample("bcrw_vs_backward_sweep", &bcrw, &bwd, ALPHA),
    })
}

/// Column names of the results CSV.
pub const RESULTS_HEADER: &str = "experiment,metric,lambda,d,value,stderr,n,truncated";

/// One line of the results CSV. Missing `lambda` or `stderr` print as empty
/// cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub metric: String,
    pub lambda: Option<f64>,
    pub d: u32,
    pub value: f64,
    pub stderr: Option<f64>,
    pub n: u64,
    pub truncated: u64,
}

impl ResultRow {
    pub fn estimate(experiment: &str, metric: &str, lambda: Option<f64>, d: u32, e: &EstimatorResult) -> Self {
        Self {
            experiment: experiment.into(),
            metric: metric.into(),
            lambda,
            d,
            value: e.mean,
            stderr: Some(e.stderr),
            n: e.n,
            truncated: e.truncated,
        }
    }

    pub fn value(experiment: &str, metric: &str, lambda: Option<f64>, d: u32, value: f64, n: u64) -> Self {
        Self { experiment: experiment.into(), metric: metric.into(), lambda, d, value, stderr: None, n, truncated: 0 }
    }

    pub fn csv_line(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.experiment,
            self.metric,
            opt(self.lambda),
            self.d,
            self.value,
            opt(self.stderr),
            self.n,
            self.truncated
        )
    }
}

/// Writes the header and one line per row.
pub fn write_results_csv<W: std::io::Write>(out: &mut W, rows: &[ResultRow]) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}
