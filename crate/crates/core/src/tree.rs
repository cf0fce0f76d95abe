//! The d-regular tree with a distinguished origin and a fixed end.
//!
//! Every vertex is addressed relative to the origin `0` and the ray
//! `0 = a(0), a(1), a(2), ...` that runs toward the fixed end. The parent of
//! a vertex is its neighbor in the direction of the end, so every vertex has
//! exactly one parent and `d - 1` children.
//!
//! An address `(k, w)` names the vertex reached from `a(k)` by following the
//! child indices in `w`, each in `0..=d-2`. The ray vertex `a(k)` (for
//! `k >= 1`) has `a(k-1)` as its child with index 0, so the canonical form
//! forbids `k > 0` with a word starting in 0: that vertex is already named by
//! a smaller `k`.
//!
//! In these coordinates the graph distance to the origin is `k + |w|` and the
//! height (signed depth with respect to the end) is `|w| - k`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::TreeError;

/// Largest supported degree. Child indices are stored as bytes.
pub const MAX_DEGREE: u32 = 64;

/// Degree of the regular tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct TreeParams {
    d: u32,
}

impl TreeParams {
    /// Requires `3 <= d <= 64`.
    pub fn new(d: u32) -> Result<Self, TreeError> {
        if !(3..=MAX_DEGREE).contains(&d) {
            return Err(TreeError::DegreeOutOfRange(d));
        }
        Ok(Self { d })
    }

    pub fn degree(&self) -> u32 {
        self.d
    }

    /// Number of children of every vertex.
    pub fn branching(&self) -> u32 {
        self.d - 1
    }

    /// Checks that every child index of `x` is below `d - 1`.
    pub fn check(&self, x: &VertexAddr) -> Result<(), TreeError> {
        match x.word().iter().find(|&&i| u32::from(i) > self.d - 2) {
            Some(&i) => Err(TreeError::ChildIndex { index: i, d: self.d }),
            None => Ok(()),
        }
    }

    /// `|S_x(r)| = d (d-1)^(r-1)` for `r >= 1`.
    pub fn sphere_size(&self, r: u32) -> u64 {
        if r == 0 {
            1
        } else {
            u64::from(self.d) * u64::from(self.d - 1).pow(r - 1)
        }
    }

    /// `|B_x(r)|`.
    pub fn ball_size(&self, r: u32) -> u64 {
        (0..=r).map(|i| self.sphere_size(i)).sum()
    }
}

impl TryFrom<u32> for TreeParams {
    type Error = TreeError;
    fn try_from(d: u32) -> Result<Self, TreeError> {
        Self::new(d)
    }
}

impl From<TreeParams> for u32 {
    fn from(p: TreeParams) -> u32 {
        p.d
    }
}

/// Canonical address `(k, w)` of a vertex.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VertexAddr {
    k: u32,
    w: Vec<u8>,
}

impl VertexAddr {
    pub fn origin() -> Self {
        Self { k: 0, w: Vec::new() }
    }

    /// The ray vertex `a(k)`.
    pub fn ray(k: u32) -> Self {
        Self { k, w: Vec::new() }
    }

    /// Builds `(k, w)`, rejecting non-canonical forms.
    pub fn new(k: u32, w: Vec<u8>) -> Result<Self, TreeError> {
        if k > 0 && w.first() == Some(&0) {
            return Err(TreeError::NonCanonical(Self { k, w }.to_string()));
        }
        Ok(Self { k, w })
    }

    pub fn up(&self) -> u32 {
        self.k
    }

    pub fn word(&self) -> &[u8] {
        &self.w
    }

    pub fn is_origin(&self) -> bool {
        self.k == 0 && self.w.is_empty()
    }

    /// `ρ(0, x)`.
    pub fn radius(&self) -> u32 {
        self.k + self.w.len() as u32
    }

    /// Letter `i` of the descent word of `self` lifted to start at `a(top)`.
    fn lifted(&self, top: u32, i: usize) -> u8 {
        let pad = (top - self.k) as usize;
        if i < pad {
            0
        } else {
            self.w[i - pad]
        }
    }

    fn lifted_len(&self, top: u32) -> usize {
        (top - self.k) as usize + self.w.len()
    }
}

impl Ord for VertexAddr {
    fn cmp(&self, other: &Self) -> Ordering {
        self.radius()
            .cmp(&other.radius())
            .then(self.k.cmp(&other.k))
            .then_with(|| self.w.cmp(&other.w))
    }
}

impl PartialOrd for VertexAddr {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VertexAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_origin() {
            return f.write_str("o");
        }
        write!(f, "u{}", self.k)?;
        for (j, i) in self.w.iter().enumerate() {
            f.write_str(if j == 0 { "/" } else { "." })?;
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for VertexAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Parses `"o"` or `"u<k>[/i1.i2...]"`.
///
/// The origin has exactly one spelling, so `"u0"` is rejected. Child indices
/// are not checked against a degree here; see [`TreeParams::check`].
impl FromStr for VertexAddr {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, TreeError> {
        let bad = || TreeError::Parse(s.to_string());
        if s == "o" {
            return Ok(Self::origin());
        }
        let rest = s.strip_prefix('u').ok_or_else(bad)?;
        let (k_str, word_str) = match rest.split_once('/') {
            Some((k, w)) => (k, Some(w)),
            None => (rest, None),
        };
        if k_str.is_empty() || !k_str.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let k: u32 = k_str.parse().map_err(|_| bad())?;
        let mut w = Vec::new();
        if let Some(word_str) = word_str {
            for letter in word_str.split('.') {
                if letter.is_empty() || !letter.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let i: u32 = letter.parse().map_err(|_| bad())?;
                if i > MAX_DEGREE - 2 {
                    return Err(bad());
                }
                w.push(i as u8);
            }
        }
        if k == 0 && w.is_empty() {
            return Err(bad());
        }
        Self::new(k, w)
    }
}

impl Serialize for VertexAddr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VertexAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The neighbor toward the fixed end. The origin's parent is `a(1)`.
pub fn parent(x: &VertexAddr) -> VertexAddr {
    match x.w.split_last() {
        Some((_, prefix)) => VertexAddr { k: x.k, w: prefix.to_vec() },
        None => VertexAddr::ray(x.k + 1),
    }
}

/// Child `i` of `x`, `0 <= i <= d - 2`.
pub fn child(x: &VertexAddr, i: u8) -> VertexAddr {
    if x.k > 0 && x.w.is_empty() {
        if i == 0 {
            VertexAddr::ray(x.k - 1)
        } else {
            VertexAddr { k: x.k, w: vec![i] }
        }
    } else {
        let mut w = Vec::with_capacity(x.w.len() + 1);
        w.extend_from_slice(&x.w);
        w.push(i);
        VertexAddr { k: x.k, w }
    }
}

/// The `d - 1` children of `x` in index order.
pub fn children(params: TreeParams, x: &VertexAddr) -> Vec<VertexAddr> {
    (0..params.branching() as u8).map(|i| child(x, i)).collect()
}

/// Parent first, then children in index order.
pub fn neighbors(params: TreeParams, x: &VertexAddr) -> Vec<VertexAddr> {
    let mut out = Vec::with_capacity(params.degree() as usize);
    out.push(parent(x));
    out.extend(children(params, x));
    out
}

/// Graph distance `ρ(x, y)`.
pub fn distance(x: &VertexAddr, y: &VertexAddr) -> u32 {
    let top = x.k.max(y.k);
    let (lx, ly) = (x.lifted_len(top), y.lifted_len(top));
    let common = (0..lx.min(ly))
        .take_while(|&i| x.lifted(top, i) == y.lifted(top, i))
        .count();
    (lx + ly - 2 * common) as u32
}

/// Height `h(x) = |w| - k`: depth below the first common ancestor of `x`
/// and the origin, minus the depth of the origin below it.
pub fn height(x: &VertexAddr) -> i64 {
    x.w.len() as i64 - i64::from(x.k)
}

/// True iff `y` lies in the subtree `T_x` (including `y = x`).
pub fn in_subtree(x: &VertexAddr, y: &VertexAddr) -> bool {
    if y.k > x.k {
        return false;
    }
    // Lift both to a(x.k); x's word must prefix y's.
    let top = x.k;
    let (lx, ly) = (x.lifted_len(top), y.lifted_len(top));
    lx <= ly && (0..lx).all(|i| x.lifted(top, i) == y.lifted(top, i))
}

/// Distinguishes the region variants; obtain one through [`Region`]'s
/// constructors, which validate them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionKind {
    WholeTree,
    Ball { center: VertexAddr, radius: u32 },
    /// `T_x`, optionally cut at the given depth below `root`.
    Subtree { root: VertexAddr, depth: Option<u32> },
    /// `T_xy = (T_x \ T_y) ∪ {y}`, optionally cut at a depth below `root`.
    SubtreeMinusBelow { root: VertexAddr, below: VertexAddr, depth: Option<u32> },
    Explicit(BTreeSet<VertexAddr>),
}

/// An immutable vertex region of the tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RegionSpec", into = "RegionSpec")]
pub struct Region {
    kind: RegionKind,
}

impl Region {
    pub fn whole_tree() -> Self {
        Self { kind: RegionKind::WholeTree }
    }

    pub fn ball(center: VertexAddr, radius: u32) -> Self {
        Self { kind: RegionKind::Ball { center, radius } }
    }

    pub fn subtree(root: VertexAddr, depth: Option<u32>) -> Self {
        Self { kind: RegionKind::Subtree { root, depth } }
    }

    /// `T_xy`; `below` must lie in `T_root`.
    pub fn subtree_minus_below(
        root: VertexAddr,
        below: VertexAddr,
        depth: Option<u32>,
    ) -> Result<Self, TreeError> {
        if !in_subtree(&root, &below) {
            return Err(TreeError::NotInSubtree {
                root: root.to_string(),
                vertex: below.to_string(),
            });
        }
        Ok(Self { kind: RegionKind::SubtreeMinusBelow { root, below, depth } })
    }

    pub fn explicit<I: IntoIterator<Item = VertexAddr>>(vertices: I) -> Self {
        Self { kind: RegionKind::Explicit(vertices.into_iter().collect()) }
    }

    pub fn kind(&self) -> &RegionKind {
        &self.kind
    }

    pub fn contains(&self, x: &VertexAddr) -> bool {
        match &self.kind {
            RegionKind::WholeTree => true,
            RegionKind::Ball { center, radius } => distance(center, x) <= *radius,
            RegionKind::Subtree { root, depth } => {
                in_subtree(root, x) && depth.is_none_or(|cap| distance(root, x) <= cap)
            }
            RegionKind::SubtreeMinusBelow { root, below, depth } => {
                in_subtree(root, x)
                    && (x == below || !in_subtree(below, x))
                    && depth.is_none_or(|cap| distance(root, x) <= cap)
            }
            RegionKind::Explicit(set) => set.contains(x),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.kind {
            RegionKind::WholeTree => false,
            RegionKind::Ball { .. } | RegionKind::Explicit(_) => true,
            RegionKind::Subtree { depth, .. } => depth.is_some(),
            RegionKind::SubtreeMinusBelow { root, below, depth } => depth.is_some() || root == below,
        }
    }

    /// Vertices of the region with at least one neighbor outside it. Finite
    /// for every region kind, including the uncapped subtrees.
    pub fn frontier(&self, params: TreeParams) -> Vec<VertexAddr> {
        let mut out: Vec<VertexAddr> = match &self.kind {
            RegionKind::WholeTree => Vec::new(),
            RegionKind::Subtree { root, depth: None } => vec![root.clone()],
            RegionKind::SubtreeMinusBelow { root, below, depth: None } => {
                let mut v = vec![root.clone(), below.clone()];
                v.dedup();
                v
            }
            _ => enumerate_region(params, self)
                .expect("finite region")
                .into_iter()
                .filter(|x| neighbors(params, x).iter().any(|y| !self.contains(y)))
                .collect(),
        };
        out.sort();
        out
    }
}

/// JSON form of a [`Region`], e.g. `{"type": "subtree", "root": "o"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    WholeTree,
    Ball {
        center: VertexAddr,
        radius: u32,
    },
    Subtree {
        root: VertexAddr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth: Option<u32>,
    },
    SubtreeMinusBelow {
        root: VertexAddr,
        below: VertexAddr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth: Option<u32>,
    },
    Explicit {
        vertices: Vec<VertexAddr>,
    },
}

impl TryFrom<RegionSpec> for Region {
    type Error = TreeError;
    fn try_from(spec: RegionSpec) -> Result<Self, TreeError> {
        Ok(match spec {
            RegionSpec::WholeTree => Region::whole_tree(),
            RegionSpec::Ball { center, radius } => Region::ball(center, radius),
            RegionSpec::Subtree { root, depth } => Region::subtree(root, depth),
            RegionSpec::SubtreeMinusBelow { root, below, depth } => {
                Region::subtree_minus_below(root, below, depth)?
            }
            RegionSpec::Explicit { vertices } => Region::explicit(vertices),
        })
    }
}

impl From<Region> for RegionSpec {
    fn from(r: Region) -> Self {
        match r.kind {
            RegionKind::WholeTree => RegionSpec::WholeTree,
            RegionKind::Ball { center, radius } => RegionSpec::Ball { center, radius },
            RegionKind::Subtree { root, depth } => RegionSpec::Subtree { root, depth },
            RegionKind::SubtreeMinusBelow { root, below, depth } => {
                RegionSpec::SubtreeMinusBelow { root, below, depth }
            }
            RegionKind::Explicit(set) => RegionSpec::Explicit { vertices: set.into_iter().collect() },
        }
    }
}

/// All vertices of a finite region, sorted by `(ρ(0,·), k, w)`.
pub fn enumerate_region(params: TreeParams, region: &Region) -> Result<Vec<VertexAddr>, TreeError> {
    let mut out = match &region.kind {
        RegionKind::WholeTree => return Err(TreeError::InfiniteRegion),
        RegionKind::Ball { center, radius } => ball(params, center, *radius),
        RegionKind::Explicit(set) => set.iter().cloned().collect(),
        RegionKind::Subtree { root, depth } => {
            let cap = depth.ok_or(TreeError::InfiniteRegion)?;
            descendants(params, root, cap, None)
        }
        RegionKind::SubtreeMinusBelow { root, below, depth } => match depth {
            Some(cap) => descendants(params, root, *cap, Some(below)),
            None if root == below => vec![root.clone()],
            None => return Err(TreeError::InfiniteRegion),
        },
    };
    out.sort();
    Ok(out)
}

/// `B_center(radius)` in BFS order.
pub fn ball(params: TreeParams, center: &VertexAddr, radius: u32) -> Vec<VertexAddr> {
    let mut out = vec![center.clone()];
    let mut queue = VecDeque::from([(center.clone(), None::<VertexAddr>, 0u32)]);
    while let Some((x, came_from, r)) = queue.pop_front() {
        if r == radius {
            continue;
        }
        for y in neighbors(params, &x) {
            if came_from.as_ref() != Some(&y) {
                out.push(y.clone());
                queue.push_back((y, Some(x.clone()), r + 1));
            }
        }
    }
    out
}

/// `S_center(radius)`.
pub fn sphere(params: TreeParams, center: &VertexAddr, radius: u32) -> Vec<VertexAddr> {
    let mut s: Vec<_> = ball(params, center, radius)
        .into_iter()
        .filter(|x| distance(center, x) == radius)
        .collect();
    s.sort();
    s
}

fn descendants(
    params: TreeParams,
    root: &VertexAddr,
    cap: u32,
    cut: Option<&VertexAddr>,
) -> Vec<VertexAddr> {
    let mut out = Vec::new();
    let mut stack = vec![(root.clone(), 0u32)];
    while let Some((x, depth)) = stack.pop() {
        let stop_here = cut == Some(&x) && x != *root;
        out.push(x.clone());
        if depth < cap && !stop_here {
            for c in children(params, &x) {
                stack.push((c, depth + 1));
            }
        }
    }
    out
}

/// `∂_T U` as ordered pairs `(u ∈ U, v ∉ U)`, in sorted order of `u`, then
/// neighbor order.
pub fn boundary_edges<'a, I>(params: TreeParams, set: I) -> Vec<(VertexAddr, VertexAddr)>
where
    I: IntoIterator<Item = &'a VertexAddr>,
{
    let members: HashSet<&VertexAddr> = set.into_iter().collect();
    let mut sorted: Vec<&VertexAddr> = members.iter().copied().collect();
    sorted.sort();
    let mut out = Vec::new();
    for u in sorted {
        for v in neighbors(params, u) {
            if !members.contains(&v) {
                out.push((u.clone(), v));
            }
        }
    }
    out
}

/// Grows a random connected set of `size` vertices from `root` by repeatedly
/// adding a uniformly chosen outside neighbor. Candidates farther than
/// `max_radius` from the origin are never added.
pub fn random_connected_set<R: Rng + ?Sized>(
    params: TreeParams,
    root: &VertexAddr,
    size: usize,
    max_radius: Option<u32>,
    rng: &mut R,
) -> Vec<VertexAddr> {
    let allowed = |x: &VertexAddr| max_radius.is_none_or(|r| x.radius() <= r);
    let mut members = vec![root.clone()];
    let mut seen: HashSet<VertexAddr> = HashSet::from([root.clone()]);
    let mut candidates: Vec<VertexAddr> = Vec::new();
    let push_candidates = |x: &VertexAddr, seen: &mut HashSet<VertexAddr>, cands: &mut Vec<VertexAddr>| {
        for y in neighbors(params, x) {
            if allowed(&y) && seen.insert(y.clone()) {
                cands.push(y);
            }
        }
    };
    push_candidates(root, &mut seen, &mut candidates);
    while members.len() < size && !candidates.is_empty() {
        let pick = rng.random_range(0..candidates.len());
        let x = candidates.swap_remove(pick);
        push_candidates(&x, &mut seen, &mut candidates);
        members.push(x);
    }
    members.sort();
    members
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn addr(s: &str) -> VertexAddr {
        s.parse().unwrap()
    }

    fn d3() -> TreeParams {
        TreeParams::new(3).unwrap()
    }

    #[test]
    fn degree_bounds() {
        assert!(TreeParams::new(2).is_err());
        assert!(TreeParams::new(65).is_err());
        assert!(TreeParams::new(3).is_ok());
        assert!(TreeParams::new(64).is_ok());
    }

    #[test]
    fn parent_examples() {
        assert_eq!(parent(&VertexAddr::origin()), VertexAddr::ray(1));
        assert_eq!(parent(&addr("u0/0.1")), addr("u0/0"));
        assert_eq!(parent(&addr("u2/1")), VertexAddr::ray(2));
    }

    #[test]
    fn children_examples() {
        let p = d3();
        assert_eq!(children(p, &VertexAddr::origin()), vec![addr("u0/0"), addr("u0/1")]);
        assert_eq!(children(p, &VertexAddr::ray(1)), vec![VertexAddr::origin(), addr("u1/1")]);
        assert_eq!(children(p, &addr("u0/1")), vec![addr("u0/1.0"), addr("u0/1.1")]);
    }

    #[test]
    fn distance_examples() {
        let x = addr("u2/1");
        assert_eq!(distance(&x, &x), 0);
        assert_eq!(distance(&VertexAddr::origin(), &addr("u0/0")), 1);
        assert_eq!(distance(&addr("u2/1"), &addr("u0/0.1")), 5);
    }

    #[test]
    fn height_examples() {
        assert_eq!(height(&VertexAddr::origin()), 0);
        assert_eq!(height(&addr("u2/1")), -1);
        assert_eq!(height(&addr("u0/0.1.0")), 3);
    }

    #[test]
    fn grammar() {
        assert_eq!(addr("u2/1.0"), VertexAddr::new(2, vec![1, 0]).unwrap());
        assert_eq!(addr("u2/1.0").to_string(), "u2/1.0");
        assert_eq!(VertexAddr::origin().to_string(), "o");
        assert_eq!(addr("u0/0.1").to_string(), "u0/0.1");
        for bad in ["u2/0.1", "x", "u", "u0", "u1/", "u1/1..0", "u-1", "u1/a", "o/1", "u1/99"] {
            assert!(bad.parse::<VertexAddr>().is_err(), "{bad} should be rejected");
        }
        assert!(d3().check(&addr("u0/2")).is_err());
        assert!(d3().check(&addr("u0/1")).is_ok());
    }

    #[test]
    fn ball_sizes() {
        let p = d3();
        let o = VertexAddr::origin();
        assert_eq!(enumerate_region(p, &Region::ball(o.clone(), 1)).unwrap().len(), 4);
        assert_eq!(enumerate_region(p, &Region::ball(o.clone(), 2)).unwrap().len(), 10);
        assert_eq!(enumerate_region(p, &Region::ball(addr("u3/1"), 0)).unwrap(), vec![addr("u3/1")]);
        for d in 3..=6 {
            let p = TreeParams::new(d).unwrap();
            for r in 1..=4 {
                assert_eq!(sphere(p, &addr("u2/1"), r).len() as u64, p.sphere_size(r));
            }
        }
    }

    #[test]
    fn infinite_regions_rejected() {
        let p = d3();
        let o = VertexAddr::origin();
        assert_eq!(enumerate_region(p, &Region::whole_tree()), Err(TreeError::InfiniteRegion));
        assert_eq!(enumerate_region(p, &Region::subtree(o.clone(), None)), Err(TreeError::InfiniteRegion));
        let txy = Region::subtree_minus_below(o.clone(), addr("u0/1"), None).unwrap();
        assert_eq!(enumerate_region(p, &txy), Err(TreeError::InfiniteRegion));
    }

    #[test]
    fn subtree_minus_below() {
        let p = d3();
        let o = VertexAddr::origin();
        assert!(Region::subtree_minus_below(o.clone(), VertexAddr::ray(1), None).is_err());
        let txy = Region::subtree_minus_below(o.clone(), addr("u0/1"), Some(2)).unwrap();
        // T_0 to depth 2 has 7 vertices; removing the two children of 0/1 leaves 5.
        let vs = enumerate_region(p, &txy).unwrap();
        assert_eq!(vs.len(), 5);
        assert!(vs.contains(&addr("u0/1")));
        assert!(!vs.contains(&addr("u0/1.0")));
        assert!(txy.contains(&addr("u0/0.1")));
        assert!(!txy.contains(&VertexAddr::ray(1)));
        let frontier = txy.frontier(p);
        assert!(frontier.contains(&o));
        assert!(frontier.contains(&addr("u0/1")));
    }

    #[test]
    fn uncapped_frontiers() {
        let p = d3();
        let t0 = Region::subtree(VertexAddr::origin(), None);
        assert_eq!(t0.frontier(p), vec![VertexAddr::origin()]);
        let capped = Region::subtree(VertexAddr::origin(), Some(2));
        assert_eq!(capped.frontier(p).len(), 1 + 4);
    }

    #[test]
    fn boundary_edge_examples() {
        let p = d3();
        let o = VertexAddr::origin();
        assert_eq!(boundary_edges(p, [&o]).len(), 3);
        assert_eq!(boundary_edges(p, [&o, &addr("u0/0")]).len(), 4);
        assert!(boundary_edges(p, std::iter::empty::<&VertexAddr>()).is_empty());
    }

    /// BFS distances inside a ball, computed from neighbor lists only.
    fn bfs_distances(p: TreeParams, radius: u32) -> HashMap<VertexAddr, HashMap<VertexAddr, u32>> {
        let verts = ball(p, &VertexAddr::origin(), radius);
        let inside: HashSet<_> = verts.iter().cloned().collect();
        let mut all = HashMap::new();
        for s in &verts {
            let mut dist = HashMap::from([(s.clone(), 0u32)]);
            let mut q = VecDeque::from([s.clone()]);
            while let Some(x) = q.pop_front() {
                let dx = dist[&x];
                for y in neighbors(p, &x) {
                    if inside.contains(&y) && !dist.contains_key(&y) {
                        dist.insert(y.clone(), dx + 1);
                        q.push_back(y);
                    }
                }
            }
            all.insert(s.clone(), dist);
        }
        all
    }

    #[test]
    fn distance_matches_bfs_in_ball() {
        for d in [3, 4, 5] {
            let p = TreeParams::new(d).unwrap();
            let radius = if d == 3 { 5 } else { 3 };
            for (s, dist) in bfs_distances(p, radius) {
                for (t, dt) in dist {
                    assert_eq!(distance(&s, &t), dt, "d={d} {s} {t}");
                }
            }
        }
        // The (2,[1]) vs (0,[0,1]) example inside the radius-6 ball.
        let p = d3();
        let table = bfs_distances(p, 6);
        assert_eq!(table[&addr("u2/1")][&addr("u0/0.1")], 5);
    }

    fn random_addr(rng: &mut ChaCha8Rng, p: TreeParams) -> VertexAddr {
        let k = rng.random_range(0..6u32);
        let len = rng.random_range(0..6usize);
        let mut w: Vec<u8> = (0..len).map(|_| rng.random_range(0..p.branching()) as u8).collect();
        if k > 0 && !w.is_empty() && w[0] == 0 {
            w[0] = rng.random_range(1..p.branching()) as u8;
        }
        VertexAddr::new(k, w).unwrap()
    }

    #[test]
    fn canonicality_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [3u32, 4, 7] {
            let p = TreeParams::new(d).unwrap();
            for _ in 0..30_000 {
                let x = random_addr(&mut rng, p);
                for c in children(p, &x) {
                    assert_eq!(parent(&c), x);
                    assert!(VertexAddr::new(c.k, c.w.clone()).is_ok());
                }
                assert!(children(p, &parent(&x)).contains(&x));
                assert_eq!(distance(&x, &parent(&x)), 1);
                assert_eq!(x.to_string().parse::<VertexAddr>().unwrap(), x);
            }
        }
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = TreeParams::new(4).unwrap();
        for _ in 0..20_000 {
            let (x, y, z) = (random_addr(&mut rng, p), random_addr(&mut rng, p), random_addr(&mut rng, p));
            assert_eq!(distance(&x, &y), distance(&y, &x));
            assert!(distance(&x, &z) <= distance(&x, &y) + distance(&y, &z));
            assert_eq!(distance(&VertexAddr::origin(), &x), x.radius());
        }
    }

    #[test]
    fn isoperimetry_on_random_connected_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..10_000 {
            let d = 3 + (trial % 3) as u32;
            let p = TreeParams::new(d).unwrap();
            let root = random_addr(&mut rng, p);
            let size = rng.random_range(1..40);
            let u = random_connected_set(p, &root, size, None, &mut rng);
            assert_eq!(u.len(), size);
            let edges = boundary_edges(p, u.iter());
            assert!(edges.len() as u64 >= u64::from(d - 2) * u.len() as u64);
            // A connected set of n vertices in a tree spans n - 1 edges.
            assert_eq!(edges.len(), d as usize * size - 2 * (size - 1));
        }
    }

    #[test]
    fn height_is_a_horofunction() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = TreeParams::new(5).unwrap();
        for _ in 0..5_000 {
            let x = random_addr(&mut rng, p);
            assert_eq!(height(&parent(&x)), height(&x) - 1);
            for c in children(p, &x) {
                assert_eq!(height(&c), height(&x) + 1);
            }
        }
    }
}
