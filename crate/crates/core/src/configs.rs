//! Configurations, boundary conditions, initial conditions and thinning.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::rng::StreamKey;
use crate::tree::{enumerate_region, Region, TreeParams, VertexAddr};

/// The finite set of `+` vertices (infected for WB, occupied for BCRW).
/// Every other vertex is `-`, except frozen boundary vertices, whose sign
/// lives in the [`BoundarySpec`] and is never stored here.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Configuration {
    plus: HashSet<VertexAddr>,
}

impl Configuration {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn singleton(x: VertexAddr) -> Self {
        Self { plus: HashSet::from([x]) }
    }

    pub fn contains(&self, x: &VertexAddr) -> bool {
        self.plus.contains(x)
    }

    pub fn len(&self) -> usize {
        self.plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty()
    }

    pub fn insert(&mut self, x: VertexAddr) -> bool {
        self.plus.insert(x)
    }

    pub fn remove(&mut self, x: &VertexAddr) -> bool {
        self.plus.remove(x)
    }

    /// Unordered iteration; use [`Configuration::sorted`] wherever order
    /// can leak into output or into a random stream.
    pub fn iter(&self) -> impl Iterator<Item = &VertexAddr> {
        self.plus.iter()
    }

    /// Members in canonical `(ρ(0,·), k, w)` order.
    pub fn sorted(&self) -> Vec<VertexAddr> {
        let mut v: Vec<_> = self.plus.iter().cloned().collect();
        v.sort();
        v
    }

    pub fn is_subset(&self, other: &Configuration) -> bool {
        self.plus.is_subset(&other.plus)
    }

    pub fn intersects(&self, other: &Configuration) -> bool {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small.plus.iter().any(|x| large.contains(x))
    }

    /// Occupancy of `cells` as a bit pattern, bit `i` set iff `cells[i]` is `+`.
    pub fn pattern(&self, cells: &[VertexAddr]) -> u64 {
        debug_assert!(cells.len() <= 64);
        cells
            .iter()
            .enumerate()
            .filter(|(_, x)| self.contains(x))
            .fold(0u64, |acc, (i, _)| acc | (1 << i))
    }
}

impl FromIterator<VertexAddr> for Configuration {
    fn from_iter<I: IntoIterator<Item = VertexAddr>>(iter: I) -> Self {
        Self { plus: iter.into_iter().collect() }
    }
}

/// `ξ^x`: the configuration with the sign at `x` toggled.
pub fn flip(c: &Configuration, x: &VertexAddr) -> Configuration {
    let mut out = c.clone();
    if !out.remove(x) {
        out.insert(x.clone());
    }
    out
}

/// p-thinning: each `+` vertex survives independently with probability `p`.
///
/// The survival mark of `x` is the uniform draw keyed by
/// `(key, "thin", x)`, so thinnings of the same configuration at different
/// `p` are coupled: `p <= p'` implies `thin(c, p) ⊆ thin(c, p')`.
pub fn thin(c: &Configuration, p: f64, key: &StreamKey) -> Result<Configuration, ConfigError> {
    check_probability(p)?;
    let marks = key.child("thin");
    Ok(c.iter().filter(|x| marks.vertex(x).uniform() < p).cloned().collect())
}

fn check_probability(p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ConfigError::Probability(p))
    }
}

/// Sign of a vertex under a boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Free,
    FrozenPlus,
    FrozenMinus,
}

/// Vertices outside the region are frozen with the given sign.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    #[default]
    None,
    Plus {
        region: Region,
    },
    Minus {
        region: Region,
    },
}

impl BoundarySpec {
    pub fn plus(region: Region) -> Self {
        Self::Plus { region }
    }

    pub fn minus(region: Region) -> Self {
        Self::Minus { region }
    }

    pub fn site(&self, x: &VertexAddr) -> Site {
        match self {
            Self::None => Site::Free,
            Self::Plus { region } if !region.contains(x) => Site::FrozenPlus,
            Self::Minus { region } if !region.contains(x) => Site::FrozenMinus,
            _ => Site::Free,
        }
    }

    pub fn region(&self) -> Option<&Region> {
        match self {
            Self::None => None,
            Self::Plus { region } | Self::Minus { region } => Some(region),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }
}

/// Initial condition of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    // Braces so that unknown fields are still rejected.
    Origin {},
    #[serde(rename = "set")]
    ExplicitSet { vertices: Vec<VertexAddr> },
    /// Bernoulli(p) signs on `B_0(r)`: the product measure restricted to a ball.
    BernoulliBall { p: f64, r: u32 },
}

impl InitSpec {
    pub fn validate(&self, params: TreeParams, boundary: &BoundarySpec) -> Result<(), ConfigError> {
        match self {
            Self::Origin {} => check_free(boundary, &VertexAddr::origin()),
            Self::ExplicitSet { vertices } => vertices.iter().try_for_each(|x| {
                params.check(x)?;
                check_free(boundary, x)
            }),
            Self::BernoulliBall { p, .. } => check_probability(*p),
        }
    }
}

fn check_free(boundary: &BoundarySpec, x: &VertexAddr) -> Result<(), ConfigError> {
    match boundary.site(x) {
        Site::Free => Ok(()),
        _ => Err(ConfigError::FrozenInitialVertex(x.to_string())),
    }
}

/// Draws the initial configuration. Bernoulli signs are drawn from `rng` in
/// canonical vertex order.
pub fn realize_init<R: Rng + ?Sized>(
    spec: &InitSpec,
    params: TreeParams,
    rng: &mut R,
) -> Result<Configuration, ConfigError> {
    Ok(match spec {
        InitSpec::Origin {} => Configuration::singleton(VertexAddr::origin()),
        InitSpec::ExplicitSet { vertices } => {
            for x in vertices {
                params.check(x)?;
            }
            vertices.iter().cloned().collect()
        }
        InitSpec::BernoulliBall { p, r } => {
            check_probability(*p)?;
            let ball = enumerate_region(params, &Region::ball(VertexAddr::origin(), *r))?;
            bernoulli_on(&ball, *p, rng)
        }
    })
}

/// Independent Bernoulli(p) signs on `cells`, drawn in the given order.
pub fn bernoulli_on<R: Rng + ?Sized>(cells: &[VertexAddr], p: f64, rng: &mut R) -> Configuration {
    cells.iter().filter(|_| rng.random::<f64>() < p).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn addr(s: &str) -> VertexAddr {
        s.parse().unwrap()
    }

    #[test]
    fn flip_examples() {
        let o = VertexAddr::origin();
        let one = flip(&Configuration::empty(), &o);
        assert_eq!(one, Configuration::singleton(o.clone()));
        assert_eq!(flip(&one, &o), Configuration::empty());
    }

    #[test]
    fn thin_extremes() {
        let key = StreamKey::root(4);
        let c: Configuration = ["o", "u1", "u1/1", "u0/0.1"].iter().map(|s| addr(s)).collect();
        assert_eq!(thin(&c, 1.0, &key).unwrap(), c);
        assert!(thin(&c, 0.0, &key).unwrap().is_empty());
        assert!(thin(&c, 1.5, &key).is_err());
    }

    #[test]
    fn thin_binomial_mean() {
        let params = TreeParams::new(3).unwrap();
        let ball = crate::tree::ball(params, &VertexAddr::origin(), 9);
        let c: Configuration = ball.into_iter().take(1000).collect();
        assert_eq!(c.len(), 1000);
        let n = 400;
        let total: usize = (0..n)
            .map(|i| thin(&c, 0.25, &StreamKey::root(100).index(i)).unwrap().len())
            .sum();
        let mean = total as f64 / n as f64;
        let tol = 3.0 * (1000.0_f64 * 0.25 * 0.75).sqrt() / (n as f64).sqrt();
        assert!((mean - 250.0).abs() <= tol, "mean {mean}, tol {tol}");
    }

    #[test]
    fn init_examples() {
        let params = TreeParams::new(3).unwrap();
        let mut rng = StreamKey::root(1).stream();
        assert_eq!(
            realize_init(&InitSpec::Origin {}, params, &mut rng).unwrap(),
            Configuration::singleton(VertexAddr::origin())
        );
        assert!(realize_init(&InitSpec::BernoulliBall { p: 0.0, r: 3 }, params, &mut rng)
            .unwrap()
            .is_empty());
        let n = 20_000;
        let total: usize = (0..n)
            .map(|_| realize_init(&InitSpec::BernoulliBall { p: 0.5, r: 2 }, params, &mut rng).unwrap().len())
            .sum();
        // Var |result| = 10 * 0.25, so the mean has sd ≈ 0.011.
        let mean = total as f64 / n as f64;
        assert!((mean - 5.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn frozen_initial_vertices_rejected() {
        let params = TreeParams::new(3).unwrap();
        let boundary = BoundarySpec::minus(Region::subtree(addr("u0/1"), None));
        assert!(InitSpec::Origin {}.validate(params, &boundary).is_err());
        let ok = InitSpec::ExplicitSet { vertices: vec![addr("u0/1.1")] };
        assert!(ok.validate(params, &boundary).is_ok());
    }

    #[test]
    fn boundary_sites() {
        let b = BoundarySpec::plus(Region::ball(VertexAddr::origin(), 1));
        assert_eq!(b.site(&VertexAddr::origin()), Site::Free);
        assert_eq!(b.site(&addr("u2")), Site::FrozenPlus);
        assert_eq!(BoundarySpec::None.site(&addr("u2")), Site::Free);
    }

    #[test]
    fn json_forms() {
        let init: InitSpec = serde_json::from_str(r#"{"type": "origin"}"#).unwrap();
        assert_eq!(init, InitSpec::Origin {});
        let set: InitSpec = serde_json::from_str(r#"{"type": "set", "vertices": ["o", "u1/1"]}"#).unwrap();
        assert_eq!(set, InitSpec::ExplicitSet { vertices: vec![VertexAddr::origin(), addr("u1/1")] });
        let bb: InitSpec = serde_json::from_str(r#"{"type": "bernoulli_ball", "p": 0.3, "r": 6}"#).unwrap();
        assert_eq!(bb, InitSpec::BernoulliBall { p: 0.3, r: 6 });
        let b: BoundarySpec =
            serde_json::from_str(r#"{"type": "minus", "region": {"type": "subtree", "root": "o"}}"#).unwrap();
        assert_eq!(b, BoundarySpec::minus(Region::subtree(VertexAddr::origin(), None)));
        assert!(serde_json::from_str::<InitSpec>(r#"{"type": "origin", "extra": 1}"#).is_err());
        assert!(serde_json::from_str::<InitSpec>(r#"{"type": "set", "vertices": ["u2/0.1"]}"#).is_err());
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(members in proptest::collection::vec((0u32..4, proptest::collection::vec(1u8..2, 0..4)), 0..12),
                                 k in 0u32..4, w in proptest::collection::vec(1u8..2, 0..4)) {
            let c: Configuration = members.into_iter().map(|(k, w)| VertexAddr::new(k, w).unwrap()).collect();
            let x = VertexAddr::new(k, w).unwrap();
            prop_assert_eq!(flip(&flip(&c, &x), &x), c);
        }

        #[test]
        fn thinning_is_monotone_in_p(seed in any::<u64>(), p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let params = TreeParams::new(3).unwrap();
            let c: Configuration = crate::tree::ball(params, &VertexAddr::origin(), 4).into_iter().collect();
            let key = StreamKey::root(seed);
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            let a = thin(&c, lo, &key).unwrap();
            let b = thin(&c, hi, &key).unwrap();
            prop_assert!(a.is_subset(&b));
            prop_assert!(b.is_subset(&c));
        }
    }
}
