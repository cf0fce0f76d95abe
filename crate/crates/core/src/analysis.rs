//! Closed-form threshold bounds, martingale functionals and absorption
//! probabilities.

use serde::Serialize;

use crate::configs::Configuration;
use crate::error::AnalysisError;
use crate::tree::{height, neighbors, TreeParams, VertexAddr};

/// Bounds on the local and complete survival thresholds of the WB process
/// on the `d`-regular tree. Upper bounds may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub d: u32,
    pub lambda_l_lower: f64,
    pub lambda_l_upper: f64,
    pub lambda_c_upper: f64,
}

pub fn prop_bounds(d: u32) -> Result<Bounds, AnalysisError> {
    if d < 3 {
        return Err(AnalysisError::DegreeTooSmall(d));
    }
    let df = d as f64;
    let root = (df - 1.0).sqrt();
    let lambda_l_lower = df / (2.0 * root);
    let gap = (root - 4.0).max(0.0);
    let contact = if gap > 0.0 { 4.0 * df / gap } else { f64::INFINITY };
    let lambda_l_upper = (2.0 * df).min(contact);
    let lambda_c_upper = (df - 1.0).max(lambda_l_upper);
    Ok(Bounds { d, lambda_l_lower, lambda_l_upper, lambda_c_upper })
}

/// `Σ_{x ∈ c} α^{ρ(0,x)}`.
pub fn radial_weight(c: &Configuration, alpha: f64) -> f64 {
    c.sorted().iter().map(|x| alpha.powi(x.radius() as i32)).sum()
}

/// Generator of the WB process applied to [`radial_weight`]: the sum over
/// discordant edges `(u infected, v healthy)` of `λα^{ρ(0,v)} - α^{ρ(0,u)}`.
pub fn radial_drift(c: &Configuration, alpha: f64, lambda: f64, params: TreeParams) -> f64 {
    let mut total = 0.0;
    for u in c.sorted() {
        let fu = alpha.powi(u.radius() as i32);
        for v in neighbors(params, &u) {
            if !c.contains(&v) {
                total += lambda * alpha.powi(v.radius() as i32) - fu;
            }
        }
    }
    total
}

/// `Σ_{u ∈ U} α^{h(u)}` with `h` the height relative to the origin.
pub fn height_weight(set: &[VertexAddr], alpha: f64) -> f64 {
    set.iter().map(|u| alpha.powf(height(u) as f64)).sum()
}

/// `Σ_{v ∈ U, u ∉ U, u ∼ v} (λα^{h(u)} - α^{h(v)})`. Nonpositive for every
/// finite `U` exactly when [`quad_condition`] holds.
pub fn boundary_sum_height(set: &[VertexAddr], alpha: f64, lambda: f64, params: TreeParams) -> f64 {
    let members: std::collections::HashSet<&VertexAddr> = set.iter().collect();
    let f = |x: &VertexAddr| alpha.powf(height(x) as f64);
    let mut total = 0.0;
    for v in set {
        for u in neighbors(params, v) {
            if !members.contains(&u) {
                total += lambda * f(&u) - f(v);
            }
        }
    }
    total
}

/// `λ(d-1)α² - dα + λ <= 0`.
pub fn quad_condition(d: u32, lambda: f64, alpha: f64) -> bool {
    quad(d, lambda, alpha) <= 0.0
}

fn quad(d: u32, lambda: f64, alpha: f64) -> f64 {
    let df = d as f64;
    lambda * (df - 1.0) * alpha * alpha - df * alpha + lambda
}

/// The interval of `α` satisfying [`quad_condition`]; nonempty iff
/// `λ <= d/(2√(d-1))`.
pub fn alpha_window(d: u32, lambda: f64) -> Option<(f64, f64)> {
    let df = d as f64;
    let disc = df * df - 4.0 * lambda * lambda * (df - 1.0);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let denom = 2.0 * lambda * (df - 1.0);
    Some(((df - s) / denom, (df + s) / denom))
}

/// Probability that the walk on the integers stepping up with probability
/// `λ/(λ+1)` hits 0 before `n` when started at `k`. `n = None` means never
/// absorbed above.
pub fn gambler_ruin_absorb(lambda: f64, k: u64, n: Option<u64>) -> f64 {
    match n {
        None if lambda == 1.0 => 1.0,
        None => lambda.powi(-(k as i32)),
        Some(n) if lambda == 1.0 => (n - k) as f64 / n as f64,
        Some(n) => {
            let q = lambda.recip();
            let qn = q.powf(n as f64);
            (q.powf(k as f64) - qn) / (1.0 - qn)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::tree::{ball, parent, random_connected_set, sphere};
    use proptest::prelude::*;

    fn params(d: u32) -> TreeParams {
        TreeParams::new(d).unwrap()
    }

    #[test]
    fn bounds_examples() {
        let b = prop_bounds(3).unwrap();
        assert!((b.lambda_l_lower - 1.0606601717798212).abs() < 1e-12);
        assert_eq!(b.lambda_l_upper, 6.0);
        assert_eq!(b.lambda_c_upper, 6.0);
        let b = prop_bounds(18).unwrap();
        assert_eq!(b.lambda_l_upper, 36.0);
        assert_eq!(b.lambda_c_upper, 36.0);
        let b = prop_bounds(100).unwrap();
        // 400/(√99 - 4) ≈ 67.85 < 200
        assert!((b.lambda_l_upper - 400.0 / (99f64.sqrt() - 4.0)).abs() < 1e-9);
        assert_eq!(b.lambda_c_upper, 99.0);
        assert_eq!(prop_bounds(2), Err(AnalysisError::DegreeTooSmall(2)));
        for d in 3..=100 {
            let b = prop_bounds(d).unwrap();
            assert!(b.lambda_l_lower < b.lambda_l_upper);
            assert_eq!(b.lambda_l_lower, d as f64 / (2.0 * ((d - 1) as f64).sqrt()));
        }
    }

    #[test]
    fn radial_weight_examples() {
        let p = params(3);
        assert_eq!(radial_weight(&Configuration::empty(), 0.4), 0.0);
        assert_eq!(radial_weight(&Configuration::singleton(VertexAddr::origin()), 0.4), 1.0);
        let s: Configuration = sphere(p, &VertexAddr::origin(), 2).into_iter().collect();
        assert_eq!(s.len(), 6);
        assert!((radial_weight(&s, 0.4) - 0.96).abs() < 1e-12);
    }

    /// Generator applied to `f` by summing over single-vertex flips.
    fn drift_by_flips(c: &Configuration, alpha: f64, lambda: f64, p: TreeParams) -> f64 {
        let mut sites: Vec<VertexAddr> = c.sorted();
        for x in c.sorted() {
            sites.extend(neighbors(p, &x));
        }
        sites.sort();
        sites.dedup();
        sites
            .iter()
            .map(|x| {
                let nb = neighbors(p, x);
                let f = alpha.powi(x.radius() as i32);
                if c.contains(x) {
                    nb.iter().filter(|y| !c.contains(y)).count() as f64 * -f
                } else {
                    lambda * nb.iter().filter(|y| c.contains(y)).count() as f64 * f
                }
            })
            .sum()
    }

    #[test]
    fn radial_drift_examples() {
        let p = params(3);
        let o = Configuration::singleton(VertexAddr::origin());
        assert_eq!(radial_drift(&Configuration::empty(), 0.5, 2.0, p), 0.0);
        assert_eq!(radial_drift(&o, 1.0, 2.0, p), 3.0);
        assert!((radial_drift(&o, 0.5, 2.0, p) - drift_by_flips(&o, 0.5, 2.0, p)).abs() < 1e-12);
    }

    #[test]
    fn radial_drift_matches_one_step_simulation() {
        use crate::dynamics::WbSim;
        use crate::configs::BoundarySpec;
        let p = params(3);
        let c: Configuration = ["o", "u1", "u1/1", "u0/1.1"].iter().map(|s| s.parse().unwrap()).collect();
        let (alpha, lambda) = (0.7, 1.6);
        let mut sim = WbSim::new(p, BoundarySpec::None, lambda).unwrap();
        let mut rng = StreamKey::root(40).stream();
        let n = 200_000;
        let f0 = radial_weight(&c, alpha);
        sim.reset(&c).unwrap();
        let rate = sim.total_rate();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            sim.reset(&c).unwrap();
            sim.step(&mut rng).unwrap();
            let delta = radial_weight(&sim.config(), alpha) - f0;
            sum += delta;
            sum2 += delta * delta;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = radial_drift(&c, alpha, lambda, p) / rate;
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn boundary_sum_examples() {
        let p = params(3);
        let o = vec![VertexAddr::origin()];
        for (alpha, lambda) in [(0.5, 1.0), (0.7, 1.05), (1.3, 2.0)] {
            let expected = lambda * (1.0 / alpha + 2.0 * alpha) - 3.0;
            assert!((boundary_sum_height(&o, alpha, lambda, p) - expected).abs() < 1e-12);
            // Zero set of the single-vertex sum is the quadratic, after scaling by α.
            let q = quad(3, lambda, alpha);
            assert!((alpha * expected - q).abs() < 1e-12);
        }
        let u = ball(p, &VertexAddr::ray(2), 2);
        assert!(boundary_sum_height(&u, 1.0, 1.0, p).abs() < 1e-12);
        assert!((height_weight(&o, 0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_window_examples() {
        let (lo, hi) = alpha_window(3, 1.0).unwrap();
        assert!((lo - 0.5).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        assert!(quad_condition(3, 1.0, 1.0));
        assert!(alpha_window(3, 1.2).is_none());
        assert!(alpha_window(4, 1.3).is_none());
        for d in 3..30 {
            let edge = d as f64 / (2.0 * ((d - 1) as f64).sqrt());
            assert!(alpha_window(d, edge * (1.0 - 1e-9)).is_some());
            assert!(alpha_window(d, edge * (1.0 + 1e-9)).is_none());
        }
    }

    /// First-step linear system for the absorption probability, solved by
    /// the tridiagonal (Thomas) algorithm.
    fn ruin_by_linear_system(lambda: f64, k: u64, n: u64) -> f64 {
        let up = lambda / (lambda + 1.0);
        let down = 1.0 - up;
        // h_i - up h_{i+1} - down h_{i-1} = 0 for 0 < i < n, h_0 = 1, h_n = 0.
        let m = (n - 1) as usize;
        let mut diag = vec![1.0; m];
        let mut rhs = vec![0.0; m];
        rhs[0] = down;
        let c = vec![-up; m];
        for i in 1..m {
            let w = -down / diag[i - 1];
            diag[i] -= w * c[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut h = vec![0.0; m];
        h[m - 1] = rhs[m - 1] / diag[m - 1];
        for i in (0..m - 1).rev() {
            h[i] = (rhs[i] - c[i] * h[i + 1]) / diag[i];
        }
        h[(k - 1) as usize]
    }

    #[test]
    fn gambler_ruin_examples() {
        assert_eq!(gambler_ruin_absorb(2.0, 1, None), 0.5);
        assert!((gambler_ruin_absorb(1.0, 1, Some(10)) - 0.9).abs() < 1e-15);
        assert!((gambler_ruin_absorb(2.0, 1, Some(10)) - 0.4995112414467253).abs() < 1e-12);
        assert!((gambler_ruin_absorb(2.0, 1, Some(20)) - 0.49999952316).abs() < 1e-10);
        for (lambda, k, n) in [(2.0, 1, 10), (1.5, 3, 12), (1.0, 4, 9), (3.0, 2, 20), (1.01, 5, 40)] {
            let a = gambler_ruin_absorb(lambda, k, Some(n));
            let b = ruin_by_linear_system(lambda, k, n);
            assert!((a - b).abs() < 1e-10, "{lambda} {k} {n}: {a} vs {b}");
        }
        let mut prev = 0.0;
        for n in 2..60 {
            let v = gambler_ruin_absorb(1.7, 1, Some(n));
            assert!(v >= prev);
            prev = v;
        }
        assert!((prev - 1.0 / 1.7).abs() < 1e-12);
    }

    #[test]
    fn boundary_sum_is_nonpositive_on_random_connected_sets() {
        let mut rng = StreamKey::root(41).stream();
        use rand::Rng;
        for i in 0..10_000u32 {
            let d = 3 + i % 4;
            let p = params(d);
            let lmax = d as f64 / (2.0 * ((d - 1) as f64).sqrt());
            let lambda = 1.0 + rng.random::<f64>() * (lmax - 1.0);
            let (lo, hi) = alpha_window(d, lambda).unwrap();
            let alpha = lo + rng.random::<f64>() * (hi - lo);
            let root = ball(p, &VertexAddr::origin(), 2)[rng.random_range(0..1 + 3 * (d as usize))].clone();
            let size = rng.random_range(1..=12);
            let u = random_connected_set(p, &root, size, Some(4), &mut rng);
            let s = boundary_sum_height(&u, alpha, lambda, p);
            assert!(s <= 1e-9 * u.len() as f64 * d as f64, "{s}");
        }
    }

    #[test]
    fn leaf_removal_identity() {
        let mut rng = StreamKey::root(42).stream();
        use rand::Rng;
        let p = params(3);
        for _ in 0..2_000 {
            let lambda = 1.0 + rng.random::<f64>() * 2.0;
            let alpha = 0.2 + rng.random::<f64>() * 2.0;
            let u = random_connected_set(p, &VertexAddr::origin(), rng.random_range(2..10), Some(4), &mut rng);
            let members: std::collections::HashSet<_> = u.iter().cloned().collect();
            for (i, w) in u.iter().enumerate() {
                let inside: Vec<VertexAddr> = neighbors(p, w).into_iter().filter(|y| members.contains(y)).collect();
                if inside.len() != 1 {
                    continue;
                }
                let rest: Vec<VertexAddr> = u.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x.clone()).collect();
                let f = |x: &VertexAddr| alpha.powf(height(x) as f64);
                let whole = boundary_sum_height(&u, alpha, lambda, p);
                let split = boundary_sum_height(&rest, alpha, lambda, p)
                    + boundary_sum_height(std::slice::from_ref(w), alpha, lambda, p);
                let link = (lambda - 1.0) * (f(w) + f(&inside[0]));
                assert!((whole + link - split).abs() < 1e-9 * (1.0 + split.abs()));
                assert!(whole <= split + link + 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn radial_drift_nonnegative_in_window(
            seed in any::<u64>(), lambda in 1.0f64..4.0, t in 0.0f64..=1.0, size in 1usize..15, d in 3u32..6
        ) {
            let p = params(d);
            let alpha = lambda.recip() + t * (lambda - lambda.recip());
            let mut rng = StreamKey::root(seed).stream();
            let c: Configuration = random_connected_set(p, &VertexAddr::origin(), size, Some(5), &mut rng).into_iter().collect();
            let drift = radial_drift(&c, alpha, lambda, p);
            prop_assert!(drift >= -1e-12 * (d as f64) * c.len() as f64);
            let oracle = drift_by_flips(&c, alpha, lambda, p);
            prop_assert!((drift - oracle).abs() < 1e-9 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn height_is_used_not_radius() {
        // The parent of the origin has height -1 but radius 1.
        let up = parent(&VertexAddr::origin());
        assert!((height_weight(std::slice::from_ref(&up), 2.0) - 0.5).abs() < 1e-15);
    }
}
