//! Exact continuous-time simulation of the Williams-Bjerknes process and of
//! the branching coalescing random walk, with frozen boundary conditions.
//!
//! Both simulators use the Gillespie direct method. The WB simulator keeps
//! its discordant edges in three swap-remove index sets, one per rate class:
//!
//! | infected `u` | healthy `v` | rate of the pair            |
//! |--------------|-------------|-----------------------------|
//! | free         | free        | `λ` (infect v) + `1` (heal u) |
//! | frozen `+`   | free        | `λ` (infect v)              |
//! | free         | frozen `-`  | `1` (heal u)                |
//!
//! so a pair is sampled in O(1) and a flip touches only the `d` edges at the
//! flipped vertex.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Write};

use indexmap::IndexSet;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::configs::{BoundarySpec, Configuration, Site};
use crate::error::{ConfigError, DynamicsError};
use crate::lattice::{Lattice, VertexId};
use crate::rng::exponential;
use crate::tree::{TreeParams, VertexAddr};

pub const DEFAULT_MAX_EVENTS: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Wb,
    Bcrw,
}

/// What happened along the logged edge `(u, v)`.
///
/// WB events log the discordant pair as `(infected, healthy)` before the
/// flip: `Infect` turns `v` to `+`, `Heal` turns `u` to `-`. BCRW events log
/// `(particle, target)`. `Exit` and `Absorb` are moves onto a frozen `-` or
/// `+` vertex; a branch aimed at a frozen vertex is logged as `Branch` and
/// creates no active particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Infect,
    Heal,
    Move,
    Branch,
    Coalesce,
    Exit,
    Absorb,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Infect => "infect",
            Self::Heal => "heal",
            Self::Move => "move",
            Self::Branch => "branch",
            Self::Coalesce => "coalesce",
            Self::Exit => "exit",
            Self::Absorb => "absorb",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One transition, with interned vertex ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub time: f64,
    pub kind: EventKind,
    pub u: VertexId,
    pub v: VertexId,
}

/// One logged transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub u: VertexAddr,
    pub v: VertexAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairClass {
    BothFree,
    FrozenSource,
    FrozenTarget,
}

fn check_lambda(lambda: f64) -> Result<(), DynamicsError> {
    if lambda >= 1.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(DynamicsError::Lambda(lambda))
    }
}

/// State of the WB process on the tree, possibly with boundary conditions.
#[derive(Debug, Clone)]
pub struct WbSim {
    lattice: Lattice,
    lambda: f64,
    time: f64,
    plus: Vec<bool>,
    members: IndexSet<VertexId>,
    both_free: IndexSet<(VertexId, VertexId)>,
    frozen_source: IndexSet<(VertexId, VertexId)>,
    frozen_target: IndexSet<(VertexId, VertexId)>,
    plus_frontier: Vec<VertexId>,
}

impl WbSim {
    pub fn new(params: TreeParams, boundary: BoundarySpec, lambda: f64) -> Result<Self, DynamicsError> {
        check_lambda(lambda)?;
        let frontier = match &boundary {
            BoundarySpec::Plus { region } => region.frontier(params),
            _ => Vec::new(),
        };
        let mut lattice = Lattice::new(params, boundary);
        let plus_frontier = frontier.iter().map(|x| lattice.intern(x)).collect();
        Ok(Self {
            lattice,
            lambda,
            time: 0.0,
            plus: Vec::new(),
            members: IndexSet::new(),
            both_free: IndexSet::new(),
            frozen_source: IndexSet::new(),
            frozen_target: IndexSet::new(),
            plus_frontier,
        })
    }

    /// Clears the state and starts again from `init` at time 0. The interned
    /// lattice is kept, so repeated replicas reuse neighbor tables.
    pub fn reset(&mut self, init: &Configuration) -> Result<(), DynamicsError> {
        for &m in &self.members {
            self.plus[m as usize] = false;
        }
        self.members.clear();
        self.both_free.clear();
        self.frozen_source.clear();
        self.frozen_target.clear();
        self.time = 0.0;
        for x in init.sorted() {
            let id = self.lattice.intern(&x);
            if self.lattice.site(id) != Site::Free {
                return Err(ConfigError::FrozenInitialVertex(x.to_string()).into());
            }
            self.set_plus(id, true);
        }
        let members: Vec<VertexId> = self.members.iter().copied().collect();
        for x in members {
            for &y in self.lattice.neighbors(x).iter() {
                self.insert_pair(x, y);
            }
        }
        for i in 0..self.plus_frontier.len() {
            let f = self.plus_frontier[i];
            for &y in self.lattice.neighbors(f).iter() {
                self.insert_pair(f, y);
            }
        }
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of free infected vertices.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn intern(&mut self, x: &VertexAddr) -> VertexId {
        self.lattice.intern(x)
    }

    /// Sign of a vertex, frozen vertices included.
    pub fn is_plus(&self, id: VertexId) -> bool {
        match self.lattice.site(id) {
            Site::FrozenPlus => true,
            Site::FrozenMinus => false,
            Site::Free => self.plus.get(id as usize).copied().unwrap_or(false),
        }
    }

    pub fn is_plus_addr(&self, x: &VertexAddr) -> bool {
        match self.lattice.lookup(x) {
            Some(id) => self.is_plus(id),
            None => self.lattice.boundary().site(x) == Site::FrozenPlus,
        }
    }

    pub fn config(&self) -> Configuration {
        self.members.iter().map(|&m| self.lattice.addr(m).clone()).collect()
    }

    pub fn total_rate(&self) -> f64 {
        (self.lambda + 1.0) * self.both_free.len() as f64
            + self.lambda * self.frozen_source.len() as f64
            + self.frozen_target.len() as f64
    }

    /// The maintained discordant pairs `(infected, healthy)`, sorted.
    pub fn discordant_pairs(&self) -> Vec<(VertexAddr, VertexAddr)> {
        let mut out: Vec<_> = self
            .both_free
            .iter()
            .chain(&self.frozen_source)
            .chain(&self.frozen_target)
            .map(|&(u, v)| (self.lattice.addr(u).clone(), self.lattice.addr(v).clone()))
            .collect();
        out.sort();
        out
    }

    fn set_plus(&mut self, id: VertexId, value: bool) {
        let i = id as usize;
        if self.plus.len() <= i {
            self.plus.resize(self.lattice.len().max(i + 1), false);
        }
        self.plus[i] = value;
        if value {
            self.members.insert(id);
        } else {
            self.members.swap_remove(&id);
        }
    }

    fn classify(&self, x: VertexId, y: VertexId) -> Option<((VertexId, VertexId), PairClass)> {
        let (px, py) = (self.is_plus(x), self.is_plus(y));
        if px == py {
            return None;
        }
        let (u, v) = if px { (x, y) } else { (y, x) };
        let class = match (self.lattice.site(u), self.lattice.site(v)) {
            (Site::Free, Site::Free) => PairClass::BothFree,
            (Site::FrozenPlus, Site::Free) => PairClass::FrozenSource,
            (Site::Free, Site::FrozenMinus) => PairClass::FrozenTarget,
            _ => return None,
        };
        Some(((u, v), class))
    }

    fn class_set(&mut self, class: PairClass) -> &mut IndexSet<(VertexId, VertexId)> {
        match class {
            PairClass::BothFree => &mut self.both_free,
            PairClass::FrozenSource => &mut self.frozen_source,
            PairClass::FrozenTarget => &mut self.frozen_target,
        }
    }

    fn insert_pair(&mut self, x: VertexId, y: VertexId) {
        if let Some((pair, class)) = self.classify(x, y) {
            self.class_set(class).insert(pair);
        }
    }

    fn remove_pair(&mut self, x: VertexId, y: VertexId) {
        if let Some((pair, class)) = self.classify(x, y) {
            self.class_set(class).swap_remove(&pair);
        }
    }

    fn flip(&mut self, x: VertexId) {
        let nbrs = self.lattice.neighbors(x);
        for &y in nbrs.iter() {
            self.remove_pair(x, y);
        }
        let value = !self.is_plus(x);
        self.set_plus(x, value);
        for &y in nbrs.iter() {
            self.insert_pair(x, y);
        }
    }

    /// One transition. Fails with `Deadlock` when no edge is discordant.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StepEvent, DynamicsError> {
        self.advance(rng, f64::INFINITY).map(|e| e.expect("infinite horizon"))
    }

    /// Performs the next transition if it happens no later than `horizon`;
    /// otherwise moves the clock to `horizon` and returns `None`. Discarding
    /// the overshooting waiting time is exact by memorylessness.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        horizon: f64,
    ) -> Result<Option<StepEvent>, DynamicsError> {
        let mass_both = (self.lambda + 1.0) * self.both_free.len() as f64;
        let mass_src = self.lambda * self.frozen_source.len() as f64;
        let total = mass_both + mass_src + self.frozen_target.len() as f64;
        if total <= 0.0 {
            return Err(DynamicsError::Deadlock);
        }
        let next = self.time + exponential(rng, total);
        if next > horizon {
            self.time = horizon;
            return Ok(None);
        }
        self.time = next;
        let r = rng.random::<f64>() * total;
        let (pair, infect) = if r < mass_both {
            let i = rng.random_range(0..self.both_free.len());
            let infect = rng.random::<f64>() * (self.lambda + 1.0) < self.lambda;
            (self.both_free[i], infect)
        } else if r < mass_both + mass_src || self.frozen_target.is_empty() {
            let i = rng.random_range(0..self.frozen_source.len());
            (self.frozen_source[i], true)
        } else {
            let i = rng.random_range(0..self.frozen_target.len());
            (self.frozen_target[i], false)
        };
        let (u, v) = pair;
        let kind = if infect {
            self.flip(v);
            EventKind::Infect
        } else {
            self.flip(u);
            EventKind::Heal
        };
        Ok(Some(StepEvent { time: self.time, kind, u, v }))
    }
}

/// State of the branching coalescing random walk.
#[derive(Debug, Clone)]
pub struct BcrwSim {
    lattice: Lattice,
    lambda: f64,
    time: f64,
    occupied_flag: Vec<bool>,
    occupied: IndexSet<VertexId>,
    absorbed: IndexSet<VertexId>,
    exited: bool,
}

impl BcrwSim {
    pub fn new(params: TreeParams, boundary: BoundarySpec, lambda: f64) -> Result<Self, DynamicsError> {
        check_lambda(lambda)?;
        Ok(Self {
            lattice: Lattice::new(params, boundary),
            lambda,
            time: 0.0,
            occupied_flag: Vec::new(),
            occupied: IndexSet::new(),
            absorbed: IndexSet::new(),
            exited: false,
        })
    }

    pub fn reset(&mut self, init: &Configuration) -> Result<(), DynamicsError> {
        for &m in &self.occupied {
            self.occupied_flag[m as usize] = false;
        }
        self.occupied.clear();
        self.absorbed.clear();
        self.exited = false;
        self.time = 0.0;
        for x in init.sorted() {
            let id = self.lattice.intern(&x);
            if self.lattice.site(id) != Site::Free {
                return Err(ConfigError::FrozenInitialVertex(x.to_string()).into());
            }
            self.set_occupied(id, true);
        }
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Number of active particles.
    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// Whether some particle has ever reached a frozen vertex.
    pub fn exited(&self) -> bool {
        self.exited
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn intern(&mut self, x: &VertexAddr) -> VertexId {
        self.lattice.intern(x)
    }

    pub fn is_occupied(&self, id: VertexId) -> bool {
        self.occupied_flag.get(id as usize).copied().unwrap_or(false)
    }

    pub fn is_occupied_addr(&self, x: &VertexAddr) -> bool {
        self.lattice.lookup(x).is_some_and(|id| self.is_occupied(id))
    }

    pub fn config(&self) -> Configuration {
        self.occupied.iter().map(|&m| self.lattice.addr(m).clone()).collect()
    }

    pub fn absorbed(&self) -> Configuration {
        self.absorbed.iter().map(|&m| self.lattice.addr(m).clone()).collect()
    }

    /// Active particle positions, as ids.
    pub fn particles(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.occupied.iter().copied()
    }

    pub fn total_rate(&self) -> f64 {
        self.lattice.degree() as f64 * self.lambda * self.occupied.len() as f64
    }

    fn set_occupied(&mut self, id: VertexId, value: bool) {
        let i = id as usize;
        if self.occupied_flag.len() <= i {
            self.occupied_flag.resize(self.lattice.len().max(i + 1), false);
        }
        self.occupied_flag[i] = value;
        if value {
            self.occupied.insert(id);
        } else {
            self.occupied.swap_remove(&id);
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StepEvent, DynamicsError> {
        self.advance(rng, f64::INFINITY).map(|e| e.expect("infinite horizon"))
    }

    /// As [`WbSim::advance`]. Each particle jumps to each neighbor at rate 1
    /// and branches onto it at rate `λ - 1`, so the total rate is `dλn`.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        horizon: f64,
    ) -> Result<Option<StepEvent>, DynamicsError> {
        let total = self.total_rate();
        if total <= 0.0 {
            return Err(DynamicsError::Deadlock);
        }
        let next = self.time + exponential(rng, total);
        if next > horizon {
            self.time = horizon;
            return Ok(None);
        }
        self.time = next;
        let x = self.occupied[rng.random_range(0..self.occupied.len())];
        let slot = rng.random_range(0..self.lattice.degree());
        let moves = rng.random::<f64>() * self.lambda < 1.0;
        let y = self.lattice.neighbor(x, slot);
        let kind = match (self.lattice.site(y), moves) {
            (Site::Free, true) => {
                self.set_occupied(x, false);
                if self.is_occupied(y) {
                    EventKind::Coalesce
                } else {
                    self.set_occupied(y, true);
                    EventKind::Move
                }
            }
            (Site::Free, false) => {
                self.set_occupied(y, true);
                EventKind::Branch
            }
            (Site::FrozenMinus, _) => {
                self.exited = true;
                if moves {
                    self.set_occupied(x, false);
                    EventKind::Exit
                } else {
                    EventKind::Branch
                }
            }
            (Site::FrozenPlus, _) => {
                self.exited = true;
                self.absorbed.insert(y);
                if moves {
                    self.set_occupied(x, false);
                    EventKind::Absorb
                } else {
                    EventKind::Branch
                }
            }
        };
        Ok(Some(StepEvent { time: self.time, kind, u: x, v: y }))
    }
}

/// When a run stops. At least one of `t_max` and `max_events` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCondition {
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "default_max_events")]
    pub max_events: Option<u64>,
    #[serde(default)]
    pub extinction: bool,
    #[serde(default)]
    pub size_reaches: Option<usize>,
    #[serde(default)]
    pub includes_set: Option<Vec<VertexAddr>>,
}

fn default_max_events() -> Option<u64> {
    Some(DEFAULT_MAX_EVENTS)
}

impl Default for StopCondition {
    fn default() -> Self {
        Self {
            t_max: None,
            max_events: default_max_events(),
            extinction: false,
            size_reaches: None,
            includes_set: None,
        }
    }
}

impl StopCondition {
    pub fn at_time(t_max: f64) -> Self {
        Self { t_max: Some(t_max), ..Self::default() }
    }

    pub fn extinction_or_size(n: usize) -> Self {
        Self { extinction: true, size_reaches: Some(n), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let finite_time = self.t_max.is_some_and(f64::is_finite);
        if finite_time || self.max_events.is_some() {
            Ok(())
        } else {
            Err(DynamicsError::UnboundedStop)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Extinction,
    SizeReached,
    Included,
    TimeLimit,
    /// Hit `max_events`; the run is truncated.
    EventLimit,
    /// No transition possible (and not covered by `Extinction`).
    Absorbed,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Extinction => "extinction",
            Self::SizeReached => "size_reached",
            Self::Included => "included",
            Self::TimeLimit => "time_limit",
            Self::EventLimit => "event_limit",
            Self::Absorbed => "absorbed",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep the full event log (needed by replay-based queries).
    pub record_events: bool,
    /// Times at which to store a copy of the state.
    pub snapshot_times: Vec<f64>,
}

impl RunOptions {
    pub fn logged() -> Self {
        Self { record_events: true, snapshot_times: Vec::new() }
    }
}

/// The record of one complete run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub process: Process,
    pub params: TreeParams,
    pub lambda: f64,
    pub boundary: BoundarySpec,
    pub initial: Configuration,
    pub events: Option<Vec<Event>>,
    pub snapshots: Vec<(f64, Configuration)>,
    pub final_state: Configuration,
    /// BCRW particles frozen on `+` boundary vertices.
    pub absorbed_plus: Configuration,
    /// BCRW: some particle reached a frozen vertex.
    pub exited: bool,
    pub end_time: f64,
    pub n_events: u64,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn truncated(&self) -> bool {
        self.stop == StopReason::EventLimit
    }
}

/// Common driver over the two simulators.
trait Simulator {
    fn size(&self) -> usize;
    fn absorbed_count(&self) -> usize;
    fn contains(&self, x: &VertexAddr) -> bool;
    fn advance_dyn(&mut self, rng: &mut dyn rand::RngCore, horizon: f64)
        -> Result<Option<StepEvent>, DynamicsError>;
    fn addr_of(&self, id: VertexId) -> VertexAddr;
    fn state(&self) -> Configuration;
}

impl Simulator for WbSim {
    fn size(&self) -> usize {
        self.len()
    }
    fn absorbed_count(&self) -> usize {
        0
    }
    fn contains(&self, x: &VertexAddr) -> bool {
        self.is_plus_addr(x)
    }
    fn advance_dyn(&mut self, rng: &mut dyn rand::RngCore, horizon: f64) -> Result<Option<StepEvent>, DynamicsError> {
        self.advance(rng, horizon)
    }
    fn addr_of(&self, id: VertexId) -> VertexAddr {
        self.lattice.addr(id).clone()
    }
    fn state(&self) -> Configuration {
        self.config()
    }
}

impl Simulator for BcrwSim {
    fn size(&self) -> usize {
        self.len()
    }
    fn absorbed_count(&self) -> usize {
        self.absorbed.len()
    }
    fn contains(&self, x: &VertexAddr) -> bool {
        self.is_occupied_addr(x) || self.lattice.lookup(x).is_some_and(|id| self.absorbed.contains(&id))
    }
    fn advance_dyn(&mut self, rng: &mut dyn rand::RngCore, horizon: f64) -> Result<Option<StepEvent>, DynamicsError> {
        self.advance(rng, horizon)
    }
    fn addr_of(&self, id: VertexId) -> VertexAddr {
        self.lattice.addr(id).clone()
    }
    fn state(&self) -> Configuration {
        self.config()
    }
}

/// Events, snapshots, event count, stop reason and end time of a run.
type Driven = (Option<Vec<Event>>, Vec<(f64, Configuration)>, u64, StopReason, f64);

fn drive<S: Simulator>(
    sim: &mut S,
    stop: &StopCondition,
    opts: &RunOptions,
    rng: &mut dyn rand::RngCore,
) -> Result<Driven, DynamicsError> {
    stop.validate()?;
    let t_max = stop.t_max.unwrap_or(f64::INFINITY);
    let max_events = stop.max_events.unwrap_or(u64::MAX);
    let mut snapshot_times = opts.snapshot_times.clone();
    snapshot_times.sort_by(f64::total_cmp);
    let mut pending = snapshot_times.into_iter().filter(|&t| t <= t_max).peekable();
    let mut snapshots = Vec::new();
    let mut events = opts.record_events.then(Vec::new);
    let mut n_events = 0u64;
    let mut now = 0.0;

    let reason = loop {
        while pending.peek().is_some_and(|&t| t <= now) {
            snapshots.push((pending.next().expect("peeked"), sim.state()));
        }
        if stop.extinction && sim.size() == 0 && sim.absorbed_count() == 0 {
            break StopReason::Extinction;
        }
        if stop.size_reaches.is_some_and(|n| sim.size() >= n) {
            break StopReason::SizeReached;
        }
        if let Some(set) = &stop.includes_set {
            if set.iter().all(|x| sim.contains(x)) {
                break StopReason::Included;
            }
        }
        if n_events >= max_events {
            break StopReason::EventLimit;
        }
        let horizon = pending.peek().copied().unwrap_or(t_max).min(t_max);
        match sim.advance_dyn(rng, horizon) {
            Ok(Some(e)) => {
                now = e.time;
                n_events += 1;
                if let Some(log) = events.as_mut() {
                    log.push(Event { time: e.time, kind: e.kind, u: sim.addr_of(e.u), v: sim.addr_of(e.v) });
                }
            }
            Ok(None) => {
                now = horizon;
                if horizon >= t_max {
                    break StopReason::TimeLimit;
                }
            }
            Err(DynamicsError::Deadlock) => {
                // Absorbing: the state holds through any requested snapshot.
                for t in pending.by_ref() {
                    snapshots.push((t, sim.state()));
                }
                break StopReason::Absorbed;
            }
            Err(e) => return Err(e),
        }
    };
    if reason == StopReason::TimeLimit {
        for t in pending {
            snapshots.push((t, sim.state()));
        }
    }
    let end = if reason == StopReason::TimeLimit { t_max } else { now };
    Ok((events, snapshots, n_events, reason, end))
}

/// Runs the WB process from `init` until a stop condition fires.
pub fn wb_run<R: Rng>(
    params: TreeParams,
    init: &Configuration,
    boundary: &BoundarySpec,
    lambda: f64,
    stop: &StopCondition,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<Trajectory, DynamicsError> {
    WbSim::new(params, boundary.clone(), lambda)?.run(init, stop, opts, rng)
}

/// Runs the BCRW from `init` until a stop condition fires. `includes_set`
/// counts absorbed particles as present.
pub fn bcrw_run<R: Rng>(
    params: TreeParams,
    init: &Configuration,
    boundary: &BoundarySpec,
    lambda: f64,
    stop: &StopCondition,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<Trajectory, DynamicsError> {
    BcrwSim::new(params, boundary.clone(), lambda)?.run(init, stop, opts, rng)
}

/// How [`WbSim::run_until`] or [`BcrwSim::run_until`] ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Advance {
    pub events: u64,
    /// Stopped by the event cap before reaching the target time.
    pub truncated: bool,
}

macro_rules! shared_runs {
    ($sim:ty, $process:expr, $absorbed:expr, $exited:expr) => {
        impl $sim {
            /// Resets to `init` and runs until a stop condition fires.
            pub fn run<R: Rng>(
                &mut self,
                init: &Configuration,
                stop: &StopCondition,
                opts: &RunOptions,
                rng: &mut R,
            ) -> Result<Trajectory, DynamicsError> {
                self.reset(init)?;
                let (events, snapshots, n_events, reason, end_time) = drive(self, stop, opts, rng)?;
                Ok(Trajectory {
                    process: $process,
                    params: self.lattice.params(),
                    lambda: self.lambda,
                    boundary: self.lattice.boundary().clone(),
                    initial: init.clone(),
                    events,
                    snapshots,
                    final_state: self.config(),
                    absorbed_plus: $absorbed(&*self),
                    exited: $exited(&*self),
                    end_time,
                    n_events,
                    stop: reason,
                })
            }

            /// Advances the current state to time `t` (or until no transition
            /// is possible), performing at most `max_events` transitions.
            pub fn run_until<R: Rng + ?Sized>(&mut self, rng: &mut R, t: f64, max_events: u64) -> Result<Advance, DynamicsError> {
                let mut events = 0;
                loop {
                    if events >= max_events {
                        return Ok(Advance { events, truncated: true });
                    }
                    match self.advance(rng, t) {
                        Ok(Some(_)) => events += 1,
                        Ok(None) | Err(DynamicsError::Deadlock) => return Ok(Advance { events, truncated: false }),
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    };
}

shared_runs!(WbSim, Process::Wb, |_: &WbSim| Configuration::empty(), |_: &WbSim| false);
shared_runs!(BcrwSim, Process::Bcrw, |s: &BcrwSim| s.absorbed(), |s: &BcrwSim| s.exited());

/// Applies one logged event to `(state, absorbed)`.
fn apply(process: Process, boundary: &BoundarySpec, e: &Event, state: &mut Configuration, absorbed: &mut Configuration) {
    match (process, e.kind) {
        (Process::Wb, EventKind::Infect) => {
            state.insert(e.v.clone());
        }
        (Process::Wb, EventKind::Heal) => {
            state.remove(&e.u);
        }
        (Process::Bcrw, EventKind::Move) => {
            state.remove(&e.u);
            state.insert(e.v.clone());
        }
        (Process::Bcrw, EventKind::Coalesce | EventKind::Exit) => {
            state.remove(&e.u);
        }
        (Process::Bcrw, EventKind::Absorb) => {
            state.remove(&e.u);
            absorbed.insert(e.v.clone());
        }
        (Process::Bcrw, EventKind::Branch) => match boundary.site(&e.v) {
            Site::Free => {
                state.insert(e.v.clone());
            }
            Site::FrozenPlus => {
                absorbed.insert(e.v.clone());
            }
            Site::FrozenMinus => {}
        },
        _ => unreachable!("{:?} event in a {:?} trajectory", e.kind, process),
    }
}

/// Replays the event log from the initial state; returns the final state and
/// the absorbed set.
pub fn replay(tr: &Trajectory) -> Result<(Configuration, Configuration), DynamicsError> {
    let events = tr.events.as_ref().ok_or(DynamicsError::MissingEvents)?;
    let mut state = tr.initial.clone();
    let mut absorbed = Configuration::empty();
    for e in events {
        apply(tr.process, &tr.boundary, e, &mut state, &mut absorbed);
    }
    Ok((state, absorbed))
}

/// `τ_U`: the first time the state (plus absorbed particles, for BCRW)
/// contains `U`, or `None` if it never does during the run.
pub fn inclusion_time(tr: &Trajectory, set: &[VertexAddr]) -> Result<Option<f64>, DynamicsError> {
    let events = tr.events.as_ref().ok_or(DynamicsError::MissingEvents)?;
    let wanted: HashSet<&VertexAddr> = set.iter().collect();
    let mut state = tr.initial.clone();
    let mut absorbed = Configuration::empty();
    let covered = |s: &Configuration, a: &Configuration| wanted.iter().all(|x| s.contains(x) || a.contains(x));
    if covered(&state, &absorbed) {
        return Ok(Some(0.0));
    }
    for e in events {
        apply(tr.process, &tr.boundary, e, &mut state, &mut absorbed);
        if (wanted.contains(&e.u) || wanted.contains(&e.v)) && covered(&state, &absorbed) {
            return Ok(Some(e.time));
        }
    }
    Ok(None)
}

/// `|ξ|` at the initial state and after each transition of a WB run without
/// frozen vertices: a nearest-neighbor walk on the integers.
pub fn embedded_size_walk(tr: &Trajectory) -> Result<Vec<usize>, DynamicsError> {
    let events = tr.events.as_ref().ok_or(DynamicsError::MissingEvents)?;
    if tr.process != Process::Wb {
        return Err(DynamicsError::InvalidForBoundary("BCRW trajectory".into()));
    }
    let mut size = tr.initial.len();
    let mut walk = Vec::with_capacity(events.len() + 1);
    walk.push(size);
    for e in events {
        for x in [&e.u, &e.v] {
            if tr.boundary.site(x) != Site::Free {
                return Err(DynamicsError::InvalidForBoundary(x.to_string()));
            }
        }
        match e.kind {
            EventKind::Infect => size += 1,
            EventKind::Heal => size -= 1,
            _ => unreachable!(),
        }
        walk.push(size);
    }
    Ok(walk)
}

/// Writes `replica,time,kind,u,v` rows (no header).
pub fn write_events_csv<W: Write>(out: &mut W, replica: u64, tr: &Trajectory) -> io::Result<()> {
    if let Some(events) = &tr.events {
        for e in events {
            writeln!(out, "{replica},{},{},{},{}", e.time, e.kind, e.u, e.v)?;
        }
    }
    Ok(())
}

/// Writes `replica,time,vertex` rows for every `+` vertex of every snapshot.
pub fn write_snapshots_csv<W: Write>(out: &mut W, replica: u64, tr: &Trajectory) -> io::Result<()> {
    for (t, c) in &tr.snapshots {
        for x in c.sorted() {
            writeln!(out, "{replica},{t},{x}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::tree::{neighbors, Region};
    use std::collections::HashMap;

    fn d3() -> TreeParams {
        TreeParams::new(3).unwrap()
    }

    fn origin() -> Configuration {
        Configuration::singleton(VertexAddr::origin())
    }

    /// Discordant pairs recomputed from the configuration and boundary alone.
    fn discordant_from_scratch(sim: &WbSim, params: TreeParams, boundary: &BoundarySpec) -> Vec<(VertexAddr, VertexAddr)> {
        let config = sim.config();
        let sign = |x: &VertexAddr| match boundary.site(x) {
            Site::FrozenPlus => true,
            Site::FrozenMinus => false,
            Site::Free => config.contains(x),
        };
        let mut candidates: Vec<VertexAddr> = config.sorted();
        if let BoundarySpec::Plus { region } = boundary {
            candidates.extend(region.frontier(params));
        }
        let mut out = HashSet::new();
        for x in candidates {
            for y in neighbors(params, &x) {
                let (sx, sy) = (sign(&x), sign(&y));
                if sx == sy {
                    continue;
                }
                let (u, v) = if sx { (x.clone(), y.clone()) } else { (y.clone(), x.clone()) };
                if boundary.site(&u) == Site::Free || boundary.site(&v) == Site::Free {
                    out.insert((u, v));
                }
            }
        }
        let mut out: Vec<_> = out.into_iter().collect();
        out.sort();
        out
    }

    #[test]
    fn incremental_discordant_set_matches_recomputation() {
        let params = d3();
        let o = VertexAddr::origin();
        let boundaries = [
            BoundarySpec::None,
            BoundarySpec::minus(Region::ball(o.clone(), 3)),
            BoundarySpec::plus(Region::ball(o.clone(), 2)),
            BoundarySpec::plus(Region::subtree(o.clone(), None)),
        ];
        let mut rng = StreamKey::root(21).stream();
        for boundary in boundaries {
            let mut sim = WbSim::new(params, boundary.clone(), 1.7).unwrap();
            sim.reset(&origin()).unwrap();
            for _ in 0..2_500 {
                match sim.step(&mut rng) {
                    Ok(_) => {}
                    Err(DynamicsError::Deadlock) => sim.reset(&origin()).unwrap(),
                    Err(e) => panic!("{e}"),
                }
                assert_eq!(sim.discordant_pairs(), discordant_from_scratch(&sim, params, &boundary));
            }
        }
    }

    #[test]
    fn wb_step_from_single_vertex() {
        let params = d3();
        let mut sim = WbSim::new(params, BoundarySpec::None, 2.0).unwrap();
        sim.reset(&origin()).unwrap();
        assert_eq!(sim.total_rate(), 9.0);
        let mut counts: HashMap<Vec<VertexAddr>, usize> = HashMap::new();
        let mut rng = StreamKey::root(22).stream();
        let n = 45_000;
        for _ in 0..n {
            sim.reset(&origin()).unwrap();
            sim.step(&mut rng).unwrap();
            *counts.entry(sim.config().sorted()).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        // Chi-square against {∅: 1/3, each neighbor: 2/9}, 3 dof, 0.999 quantile 16.27.
        let mut stat = 0.0;
        for (state, c) in &counts {
            let p = if state.is_empty() { 1.0 / 3.0 } else { 2.0 / 9.0 };
            let e = p * n as f64;
            stat += (*c as f64 - e).powi(2) / e;
        }
        assert!(stat < 16.27, "chi2 {stat}");
    }

    #[test]
    fn frozen_neighbors_deadlock() {
        let params = d3();
        let o = VertexAddr::origin();
        let mut sim = WbSim::new(params, BoundarySpec::plus(Region::ball(o, 0)), 2.0).unwrap();
        sim.reset(&origin()).unwrap();
        assert_eq!(sim.step(&mut StreamKey::root(1).stream()), Err(DynamicsError::Deadlock));
    }

    #[test]
    fn size_walk_up_probability() {
        let params = d3();
        let mut rng = StreamKey::root(23).stream();
        let mut ups = 0u64;
        let mut total = 0u64;
        for _ in 0..400 {
            let tr = wb_run(params, &origin(), &BoundarySpec::None, 2.0,
                &StopCondition { max_events: Some(60), extinction: true, ..Default::default() },
                &RunOptions::logged(), &mut rng).unwrap();
            let walk = embedded_size_walk(&tr).unwrap();
            for w in walk.windows(2) {
                let diff = w[1] as i64 - w[0] as i64;
                assert!(diff == 1 || diff == -1);
                ups += u64::from(diff == 1);
                total += 1;
            }
        }
        // Binomial(total, 2/3): two-sided chi-square with 1 dof at 0.999 is 10.83.
        let e = total as f64 * 2.0 / 3.0;
        let var = total as f64 * 2.0 / 9.0;
        let z2 = (ups as f64 - e).powi(2) / var;
        assert!(z2 < 10.83, "ups {ups} of {total}");
    }

    #[test]
    fn empty_init_stops_immediately() {
        let tr = wb_run(d3(), &Configuration::empty(), &BoundarySpec::None, 2.0,
            &StopCondition::extinction_or_size(10), &RunOptions::logged(), &mut StreamKey::root(1).stream()).unwrap();
        assert_eq!(tr.stop, StopReason::Extinction);
        assert_eq!(tr.n_events, 0);
        assert_eq!(tr.end_time, 0.0);
        let tr = bcrw_run(d3(), &Configuration::empty(), &BoundarySpec::None, 2.0,
            &StopCondition::at_time(1.0), &RunOptions::logged(), &mut StreamKey::root(1).stream()).unwrap();
        assert_eq!(tr.stop, StopReason::Absorbed);
        assert_eq!(tr.n_events, 0);
    }

    #[test]
    fn heal_only_extinction_time_is_exponential_d() {
        let params = d3();
        let boundary = BoundarySpec::minus(Region::ball(VertexAddr::origin(), 0));
        let mut rng = StreamKey::root(24).stream();
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let tr = wb_run(params, &origin(), &boundary, 2.0, &StopCondition { extinction: true, ..Default::default() },
                &RunOptions::logged(), &mut rng).unwrap();
            assert_eq!(tr.stop, StopReason::Extinction);
            assert_eq!(tr.n_events, 1);
            assert_eq!(tr.events.as_ref().unwrap()[0].kind, EventKind::Heal);
            sum += tr.end_time;
        }
        let mean = sum / n as f64;
        // Exp(3) has mean 1/3 and sd 1/3; the sample mean has sd ≈ 0.00236.
        assert!((mean - 1.0 / 3.0).abs() < 0.0095, "{mean}");
    }

    #[test]
    fn bcrw_single_particle_outcomes() {
        let params = d3();
        let o = VertexAddr::origin();
        let mut sim = BcrwSim::new(params, BoundarySpec::None, 2.0).unwrap();
        sim.reset(&origin()).unwrap();
        assert_eq!(sim.total_rate(), 6.0);
        let mut counts: HashMap<(EventKind, VertexAddr), usize> = HashMap::new();
        let mut rng = StreamKey::root(25).stream();
        let n = 60_000;
        for _ in 0..n {
            sim.reset(&origin()).unwrap();
            let e = sim.step(&mut rng).unwrap();
            assert_eq!(sim.lattice().addr(e.u), &o);
            *counts.entry((e.kind, sim.lattice().addr(e.v).clone())).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let e = n as f64 / 6.0;
        let stat: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 5 dof, 0.999 quantile 20.52
        assert!(stat < 20.52, "chi2 {stat}");
    }

    #[test]
    fn bcrw_lambda_one_never_branches() {
        let mut rng = StreamKey::root(26).stream();
        let tr = bcrw_run(d3(), &origin(), &BoundarySpec::None, 1.0, &StopCondition { max_events: Some(5_000), ..Default::default() },
            &RunOptions::logged(), &mut rng).unwrap();
        assert!(tr.events.unwrap().iter().all(|e| e.kind == EventKind::Move));
        assert_eq!(tr.final_state.len(), 1);
    }

    #[test]
    fn bcrw_coalescence() {
        let params = d3();
        let o = VertexAddr::origin();
        let p = crate::tree::parent(&o);
        // Force the particle at `o` to jump onto `p`: search a seed where the
        // first event is that move.
        for seed in 0..500 {
            let mut sim = BcrwSim::new(params, BoundarySpec::None, 1.0).unwrap();
            sim.reset(&[o.clone(), p.clone()].into_iter().collect()).unwrap();
            let e = sim.step(&mut StreamKey::root(seed).stream()).unwrap();
            if e.kind == EventKind::Coalesce {
                assert_eq!(sim.len(), 1);
                return;
            }
            assert_eq!(sim.len(), 2);
        }
        panic!("no coalescence observed");
    }

    #[test]
    fn bcrw_without_boundary_never_dies() {
        let mut rng = StreamKey::root(27).stream();
        for _ in 0..50 {
            let tr = bcrw_run(d3(), &origin(), &BoundarySpec::None, 1.5,
                &StopCondition { t_max: Some(3.0), extinction: true, max_events: Some(20_000), ..Default::default() },
                &RunOptions::logged(), &mut rng).unwrap();
            assert_ne!(tr.stop, StopReason::Extinction);
            let mut n = tr.initial.len() as i64;
            for e in tr.events.as_ref().unwrap() {
                let before = n;
                n += match e.kind {
                    EventKind::Branch => 1,
                    EventKind::Coalesce => -1,
                    _ => 0,
                };
                let (state, _) = (n, before);
                assert!(state >= 1);
            }
        }
    }

    #[test]
    fn bcrw_can_die_at_minus_boundary() {
        let boundary = BoundarySpec::minus(Region::ball(VertexAddr::origin(), 1));
        let mut rng = StreamKey::root(28).stream();
        let extinct = (0..200)
            .filter(|_| {
                bcrw_run(d3(), &origin(), &boundary, 1.2,
                    &StopCondition { t_max: Some(20.0), extinction: true, ..Default::default() },
                    &RunOptions::default(), &mut rng).unwrap().stop == StopReason::Extinction
            })
            .count();
        assert!(extinct > 0);
    }

    #[test]
    fn replay_reproduces_final_state() {
        let params = d3();
        let o = VertexAddr::origin();
        let cases = [
            (Process::Wb, BoundarySpec::None),
            (Process::Wb, BoundarySpec::plus(Region::ball(o.clone(), 2))),
            (Process::Bcrw, BoundarySpec::minus(Region::ball(o.clone(), 2))),
            (Process::Bcrw, BoundarySpec::plus(Region::ball(o.clone(), 2))),
        ];
        let mut rng = StreamKey::root(29).stream();
        for (process, boundary) in cases {
            for _ in 0..30 {
                let stop = StopCondition { t_max: Some(2.0), max_events: Some(5_000), ..Default::default() };
                let tr = match process {
                    Process::Wb => wb_run(params, &origin(), &boundary, 1.8, &stop, &RunOptions::logged(), &mut rng),
                    Process::Bcrw => bcrw_run(params, &origin(), &boundary, 1.8, &stop, &RunOptions::logged(), &mut rng),
                }
                .unwrap();
                let times: Vec<f64> = tr.events.as_ref().unwrap().iter().map(|e| e.time).collect();
                assert!(times.windows(2).all(|w| w[0] < w[1]));
                let (state, absorbed) = replay(&tr).unwrap();
                assert_eq!(state, tr.final_state);
                assert_eq!(absorbed, tr.absorbed_plus);
            }
        }
    }

    #[test]
    fn inclusion_time_examples() {
        let params = d3();
        let o = VertexAddr::origin();
        let mut rng = StreamKey::root(30).stream();
        let tr = wb_run(params, &origin(), &BoundarySpec::None, 2.0, &StopCondition { max_events: Some(50), ..Default::default() },
            &RunOptions::logged(), &mut rng).unwrap();
        assert_eq!(inclusion_time(&tr, &[]).unwrap(), Some(0.0));
        assert_eq!(inclusion_time(&tr, std::slice::from_ref(&o)).unwrap(), Some(0.0));
        // Replay oracle for a neighbor: first event time at which it is in the state.
        for y in neighbors(params, &o) {
            let mut state = tr.initial.clone();
            let mut expected = None;
            for e in tr.events.as_ref().unwrap() {
                match e.kind {
                    EventKind::Infect => { state.insert(e.v.clone()); }
                    EventKind::Heal => { state.remove(&e.u); }
                    _ => unreachable!(),
                }
                if state.contains(&y) {
                    expected = Some(e.time);
                    break;
                }
            }
            assert_eq!(inclusion_time(&tr, std::slice::from_ref(&y)).unwrap(), expected);
        }
    }

    #[test]
    fn reinclusion_after_heal() {
        let params = d3();
        let o = VertexAddr::origin();
        for seed in 0..200 {
            let tr = wb_run(params, &origin(), &BoundarySpec::None, 2.0,
                &StopCondition { max_events: Some(40), ..Default::default() },
                &RunOptions::logged(), &mut StreamKey::root(seed).stream()).unwrap();
            let events = tr.events.as_ref().unwrap();
            let Some(heal) = events.iter().position(|e| e.kind == EventKind::Heal && e.u == o) else { continue };
            // Re-run the tail of the log from the post-heal state.
            let mut tail = tr.clone();
            let mut state = tr.initial.clone();
            for e in &events[..=heal] {
                match e.kind {
                    EventKind::Infect => { state.insert(e.v.clone()); }
                    _ => { state.remove(&e.u); }
                }
            }
            assert!(!state.contains(&o));
            tail.initial = state;
            tail.events = Some(events[heal + 1..].to_vec());
            let expected = events[heal + 1..].iter().find(|e| e.kind == EventKind::Infect && e.v == o).map(|e| e.time);
            assert_eq!(inclusion_time(&tail, std::slice::from_ref(&o)).unwrap(), expected);
        }
    }

    #[test]
    fn size_walk_single_infection() {
        let tr = Trajectory {
            process: Process::Wb,
            params: d3(),
            lambda: 2.0,
            boundary: BoundarySpec::None,
            initial: origin(),
            events: Some(vec![Event { time: 0.1, kind: EventKind::Infect, u: VertexAddr::origin(), v: VertexAddr::ray(1) }]),
            snapshots: vec![],
            final_state: Configuration::empty(),
            absorbed_plus: Configuration::empty(),
            exited: false,
            end_time: 0.1,
            n_events: 1,
            stop: StopReason::EventLimit,
        };
        assert_eq!(embedded_size_walk(&tr).unwrap(), vec![1, 2]);
    }

    #[test]
    fn size_walk_rejects_frozen_vertices() {
        let boundary = BoundarySpec::minus(Region::ball(VertexAddr::origin(), 0));
        let tr = wb_run(d3(), &origin(), &boundary, 2.0, &StopCondition { extinction: true, ..Default::default() },
            &RunOptions::logged(), &mut StreamKey::root(3).stream()).unwrap();
        assert!(matches!(embedded_size_walk(&tr), Err(DynamicsError::InvalidForBoundary(_))));
    }

    #[test]
    fn snapshots_and_time_limit() {
        let mut rng = StreamKey::root(31).stream();
        let opts = RunOptions { record_events: true, snapshot_times: vec![0.0, 0.5, 1.0] };
        let tr = wb_run(d3(), &origin(), &BoundarySpec::None, 2.0, &StopCondition::at_time(1.0), &opts, &mut rng).unwrap();
        assert_eq!(tr.snapshots.len(), 3);
        assert_eq!(tr.snapshots[0].1, origin());
        assert_eq!(tr.snapshots[2].1, tr.final_state);
        if tr.stop == StopReason::TimeLimit {
            assert_eq!(tr.end_time, 1.0);
        }
        // Snapshot at 0.5 equals the replay of events up to 0.5.
        let mut state = tr.initial.clone();
        for e in tr.events.as_ref().unwrap().iter().filter(|e| e.time <= 0.5) {
            match e.kind {
                EventKind::Infect => { state.insert(e.v.clone()); }
                _ => { state.remove(&e.u); }
            }
        }
        assert_eq!(tr.snapshots[1].1, state);
    }

    #[test]
    fn determinism() {
        let run = || {
            let tr = bcrw_run(d3(), &origin(), &BoundarySpec::minus(Region::ball(VertexAddr::origin(), 3)), 2.5,
                &StopCondition::at_time(2.0), &RunOptions::logged(), &mut StreamKey::replica(9, 4).stream()).unwrap();
            let mut buf = Vec::new();
            write_events_csv(&mut buf, 4, &tr).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unbounded_stop_rejected() {
        let stop = StopCondition { max_events: None, ..Default::default() };
        assert_eq!(stop.validate(), Err(DynamicsError::UnboundedStop));
        assert!(WbSim::new(d3(), BoundarySpec::None, 0.5).is_err());
    }
}
