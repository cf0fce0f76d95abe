//! Graphical (percolation) construction of the WB process and its dual on a
//! finite window `W × [0, T]`.
//!
//! Every ordered edge `(u, v)` with `v ∈ W` carries two Poisson processes of
//! arrows `u → v`: `°` arrows at rate 1, after which `v` copies `u`, and `•`
//! arrows at rate `λmax - 1`, after which `v` becomes `+` if `u` is. Each `•`
//! arrow carries a uniform mark and is active at infection rate `λ` iff
//! `mark < (λ - 1)/(λmax - 1)`, which couples all `λ ∈ [1, λmax]` on one
//! window. Vertices outside `W` have no incoming arrows and count as `-`.
//!
//! Each edge process is drawn from its own keyed stream as successive gaps,
//! so enlarging the window in space or time never changes existing arrows.

use std::collections::HashMap;
use std::io::{self, Write};

use crate::configs::{BoundarySpec, Configuration, Site};
use crate::error::GraphicalError;
use crate::rng::{exponential, StreamKey};
use crate::tree::{enumerate_region, neighbors, Region, TreeParams, VertexAddr};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrowKind {
    /// Rate 1; the head copies the tail.
    Circ,
    /// Rate `λmax - 1`; the head becomes `+` if the tail is.
    Bullet,
}

impl ArrowKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Circ => "circ",
            Self::Bullet => "bullet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arrow {
    pub time: f64,
    pub kind: ArrowKind,
    /// Tail, as an index into the window; `None` when outside `W`.
    pub tail: Option<u32>,
    pub head: u32,
    pub tail_addr: VertexAddr,
    pub mark: f64,
}

/// A sampled window: the vertices of `W` and all arrows into them, in time
/// order.
#[derive(Debug, Clone)]
pub struct Window {
    params: TreeParams,
    vertices: Vec<VertexAddr>,
    index: HashMap<VertexAddr, u32>,
    horizon: f64,
    lambda_max: f64,
    arrows: Vec<Arrow>,
}

/// Arrow times of one edge process on `[0, horizon]`, each with its mark.
pub fn edge_process(key: &StreamKey, rate: f64, horizon: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let mut rng = key.stream();
    let mut t = 0.0;
    loop {
        t += exponential(&mut rng, rate);
        let mark: f64 = rng.random();
        if t > horizon {
            return out;
        }
        out.push((t, mark));
    }
}

/// Samples the arrows of `region × [0, horizon]`, keyed by `key`.
pub fn sample_window(
    params: TreeParams,
    region: &Region,
    horizon: f64,
    lambda_max: f64,
    key: &StreamKey,
) -> Result<Window, GraphicalError> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(GraphicalError::InvalidWindow(format!("horizon {horizon}")));
    }
    if !(lambda_max >= 1.0 && lambda_max.is_finite()) {
        return Err(GraphicalError::InvalidWindow(format!("lambda_max {lambda_max}")));
    }
    let vertices = enumerate_region(params, region).map_err(|e| GraphicalError::InvalidWindow(e.to_string()))?;
    let index: HashMap<VertexAddr, u32> = vertices.iter().enumerate().map(|(i, x)| (x.clone(), i as u32)).collect();
    let edges = key.child("edge");
    let mut arrows = Vec::new();
    for (head, v) in vertices.iter().enumerate() {
        for u in neighbors(params, v) {
            let k = edges.vertex(&u).vertex(v);
            let tail = index.get(&u).copied();
            for (kind, rate) in [(ArrowKind::Circ, 1.0), (ArrowKind::Bullet, lambda_max - 1.0)] {
                for (time, mark) in edge_process(&k.child(kind.as_str()), rate, horizon) {
                    arrows.push(Arrow { time, kind, tail, head: head as u32, tail_addr: u.clone(), mark });
                }
            }
        }
    }
    Ok(Window::assemble(params, vertices, index, horizon, lambda_max, arrows))
}

impl Window {
    fn assemble(
        params: TreeParams,
        vertices: Vec<VertexAddr>,
        index: HashMap<VertexAddr, u32>,
        horizon: f64,
        lambda_max: f64,
        mut arrows: Vec<Arrow>,
    ) -> Self {
        // Ties have probability zero; break them by (time, u, v, kind) anyway.
        arrows.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then_with(|| a.tail_addr.cmp(&b.tail_addr))
                .then_with(|| vertices[a.head as usize].cmp(&vertices[b.head as usize]))
                .then_with(|| (a.kind as u8).cmp(&(b.kind as u8)))
        });
        Window { params, vertices, index, horizon, lambda_max, arrows }
    }

    /// A window with prescribed arrows `(u, v, kind, time, mark)`, mainly for
    /// tests and replaying dumps. Every head must lie in `vertices`.
    pub fn from_arrows(
        params: TreeParams,
        vertices: Vec<VertexAddr>,
        horizon: f64,
        lambda_max: f64,
        arrows: Vec<(VertexAddr, VertexAddr, ArrowKind, f64, f64)>,
    ) -> Result<Self, GraphicalError> {
        let mut vertices = vertices;
        vertices.sort();
        vertices.dedup();
        let index: HashMap<VertexAddr, u32> = vertices.iter().enumerate().map(|(i, x)| (x.clone(), i as u32)).collect();
        let mut out = Vec::with_capacity(arrows.len());
        for (u, v, kind, time, mark) in arrows {
            let &head = index.get(&v).ok_or_else(|| GraphicalError::NotInWindow(v.to_string()))?;
            if !neighbors(params, &v).contains(&u) {
                return Err(GraphicalError::InvalidWindow(format!("{u} and {v} are not adjacent")));
            }
            if !(time > 0.0 && time <= horizon) {
                return Err(GraphicalError::TimeOutsideWindow { t: time, horizon });
            }
            out.push(Arrow { time, kind, tail: index.get(&u).copied(), head, tail_addr: u, mark });
        }
        Ok(Window::assemble(params, vertices, index, horizon, lambda_max, out))
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn vertices(&self) -> &[VertexAddr] {
        &self.vertices
    }

    pub fn contains(&self, x: &VertexAddr) -> bool {
        self.index.contains_key(x)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn arrows(&self) -> &[Arrow] {
        &self.arrows
    }

    fn threshold(&self, lambda: f64) -> Result<f64, GraphicalError> {
        if !(1.0..=self.lambda_max).contains(&lambda) {
            return Err(GraphicalError::LambdaExceedsWindow { lambda, lambda_max: self.lambda_max });
        }
        Ok(if self.lambda_max > 1.0 { (lambda - 1.0) / (self.lambda_max - 1.0) } else { 0.0 })
    }

    fn check_times(&self, s: f64, t: f64) -> Result<(), GraphicalError> {
        for x in [s, t] {
            if !(0.0..=self.horizon).contains(&x) {
                return Err(GraphicalError::TimeOutsideWindow { t: x, horizon: self.horizon });
            }
        }
        if s > t {
            return Err(GraphicalError::TimeOutsideWindow { t: s, horizon: t });
        }
        Ok(())
    }

    fn mask(&self, set: &Configuration) -> Result<Vec<bool>, GraphicalError> {
        let mut m = vec![false; self.vertices.len()];
        for x in set.iter() {
            let &i = self.index.get(x).ok_or_else(|| GraphicalError::NotInWindow(x.to_string()))?;
            m[i as usize] = true;
        }
        Ok(m)
    }

    fn unmask(&self, m: &[bool]) -> Configuration {
        m.iter().zip(&self.vertices).filter(|(&b, _)| b).map(|(_, x)| x.clone()).collect()
    }

    /// Arrows with time in `(s, t]` active at rate `lambda`.
    fn active(&self, s: f64, t: f64, lambda: f64) -> Result<impl DoubleEndedIterator<Item = &Arrow>, GraphicalError> {
        self.check_times(s, t)?;
        let theta = self.threshold(lambda)?;
        let lo = self.arrows.partition_point(|a| a.time <= s);
        let hi = self.arrows.partition_point(|a| a.time <= t);
        Ok(self.arrows[lo..hi].iter().filter(move |a| a.kind == ArrowKind::Circ || a.mark < theta))
    }

    /// The WB state at time `t` started from `a` at time `s`, with every
    /// vertex outside the window held at `-`.
    pub fn forward_reach(&self, a: &Configuration, s: f64, t: f64, lambda: f64) -> Result<Configuration, GraphicalError> {
        self.forward_reach_bc(a, s, t, lambda, &BoundarySpec::None)
    }

    /// As [`Window::forward_reach`] with a boundary condition. A vertex is
    /// free iff it lies in the window and is free under `boundary`; frozen
    /// `+` vertices are those the boundary freezes to `+`, and every other
    /// vertex is `-`.
    pub fn forward_reach_bc(
        &self,
        a: &Configuration,
        s: f64,
        t: f64,
        lambda: f64,
        boundary: &BoundarySpec,
    ) -> Result<Configuration, GraphicalError> {
        let mut state = self.mask(a)?;
        let free: Vec<bool> = self.vertices.iter().map(|x| boundary.site(x) == Site::Free).collect();
        for (i, x) in self.vertices.iter().enumerate() {
            if state[i] && !free[i] {
                return Err(GraphicalError::NotInWindow(x.to_string()));
            }
            if boundary.site(x) == Site::FrozenPlus {
                state[i] = true;
            }
        }
        for arrow in self.active(s, t, lambda)? {
            let h = arrow.head as usize;
            if !free[h] {
                continue;
            }
            let tail_plus = match arrow.tail {
                Some(i) => state[i as usize],
                None => boundary.site(&arrow.tail_addr) == Site::FrozenPlus,
            };
            match arrow.kind {
                ArrowKind::Circ => state[h] = tail_plus,
                ArrowKind::Bullet => state[h] |= tail_plus,
            }
        }
        for (i, f) in free.iter().enumerate() {
            if !f {
                state[i] = false;
            }
        }
        Ok(self.unmask(&state))
    }

    /// The dual: particles started on `b` at time `t`, followed backward to
    /// time `s`. Along a `°` arrow a particle moves to the tail (and is lost
    /// if the tail is outside the window); along a `•` arrow it also leaves a
    /// copy at the tail. Particles landing together coalesce.
    pub fn backward_reach(&self, b: &Configuration, t: f64, s: f64, lambda: f64) -> Result<Configuration, GraphicalError> {
        let mut occ = self.mask(b)?;
        for arrow in self.active(s, t, lambda)?.rev() {
            let h = arrow.head as usize;
            if !occ[h] {
                continue;
            }
            if arrow.kind == ArrowKind::Circ {
                occ[h] = false;
            }
            if let Some(i) = arrow.tail {
                occ[i as usize] = true;
            }
        }
        Ok(self.unmask(&occ))
    }

    /// Writes `u,v,kind,time,mark` rows, one per arrow; `°` arrows have an
    /// empty mark.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "u,v,kind,time,mark")?;
        for a in &self.arrows {
            let v = &self.vertices[a.head as usize];
            match a.kind {
                ArrowKind::Circ => writeln!(out, "{},{v},circ,{},", a.tail_addr, a.time)?,
                ArrowKind::Bullet => writeln!(out, "{},{v},bullet,{},{}", a.tail_addr, a.time, a.mark)?,
            }
        }
        Ok(())
    }
}

/// Whether `forward(A) ∩ B ≠ ∅` agrees with `backward(B) ∩ A ≠ ∅` on the
/// window. Returns the common value, or `None` on disagreement.
pub fn check_duality(
    window: &Window,
    a: &Configuration,
    b: &Configuration,
    s: f64,
    t: f64,
    lambda: f64,
) -> Result<Option<bool>, GraphicalError> {
    let fwd = window.forward_reach(a, s, t, lambda)?.intersects(b);
    let bwd = window.backward_reach(b, t, s, lambda)?.intersects(a);
    Ok((fwd == bwd).then_some(fwd))
}

/// Whether the coupled forward states are monotone in both the initial set
/// (`a ⊆ a2`) and the rate (`lambda <= lambda2`).
pub fn check_monotone(
    window: &Window,
    a: &Configuration,
    a2: &Configuration,
    s: f64,
    t: f64,
    lambda: f64,
    lambda2: f64,
) -> Result<bool, GraphicalError> {
    let low = window.forward_reach(a, s, t, lambda)?;
    let high = window.forward_reach(a2, s, t, lambda2)?;
    Ok(low.is_subset(&high))
}
