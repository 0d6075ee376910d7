//! Monte Carlo check of the physics-restricted sample-complexity bound on a
//! finite hypothesis class.
//!
//! Inputs are cells on `rays x bins` polar grid around a BS, bin 0 nearest.
//! A hypothesis is any blocked/clear lookup table over the cells (a bitmask).
//! The data loss is the 0/1 label mismatch at the sampled cell. The physics
//! loss at a sampled cell is 1 when the hypothesis calls the cell blocked but
//! the next cell out on the same ray clear, since a shadow cannot end behind
//! a blocker. The planted truth is a per-ray threshold, which satisfies both.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacConfig {
    pub rays: usize,
    pub bins: usize,
    pub epsilon0: f64,
    pub epsilon1: f64,
    pub delta: f64,
    pub trials: usize,
    /// Random planted configurations checked besides the default one.
    pub configs: usize,
    pub seed: u64,
    pub max_hypotheses: u64,
}

impl Default for PacConfig {
    fn default() -> Self {
        PacConfig {
            rays: 3,
            bins: 4,
            epsilon0: 0.2,
            epsilon1: 0.1,
            delta: 0.05,
            trials: 200,
            configs: 20,
            seed: 7,
            max_hypotheses: 1 << 20,
        }
    }
}

impl PacConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !(self.epsilon0 >= 0.0) || !open(self.epsilon1) || !open(self.delta) {
            return Err(Error::Config("pac needs epsilon0 >= 0 and epsilon1, delta in (0, 1)".into()));
        }
        if self.rays == 0 || self.bins == 0 || self.trials == 0 {
            return Err(Error::Config("pac rays, bins and trials must be > 0".into()));
        }
        let cells = self.rays * self.bins;
        if cells > 30 || (1u64 << cells) > self.max_hypotheses {
            return Err(Error::Config(format!(
                "2^{cells} hypotheses exceed the enumeration budget of {}",
                self.max_hypotheses
            )));
        }
        Ok(())
    }
}

/// One planted problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteClass {
    pub rays: usize,
    pub bins: usize,
    /// Sampling probability of each cell.
    pub p: Vec<f64>,
    pub theta_star: u32,
    /// Restricts the class to these tables; every table when absent.
    pub members: Option<Vec<u32>>,
}

/// Per-ray threshold table: bins at or beyond `t[r]` are blocked.
pub fn threshold_table(rays: usize, bins: usize, t: &[usize]) -> u32 {
    let mut h = 0u32;
    for r in 0..rays {
        for b in t[r]..bins {
            h |= 1 << (r * bins + b);
        }
    }
    h
}

impl FiniteClass {
    pub fn new(rays: usize, bins: usize, p: Vec<f64>, theta_star: u32) -> Result<Self> {
        let cells = rays * bins;
        if p.len() != cells || p.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("cell probabilities must be positive, one per cell".into()));
        }
        let z: f64 = p.iter().sum();
        let class = FiniteClass { rays, bins, p: p.iter().map(|v| v / z).collect(), theta_star, members: None };
        if class.violations(theta_star) != 0 {
            return Err(Error::Config("planted hypothesis breaks the physics rule".into()));
        }
        Ok(class)
    }

    /// Uniform cells with a random planted threshold per ray.
    pub fn planted(rays: usize, bins: usize, rng: &mut impl Rng) -> Result<Self> {
        let t: Vec<usize> = (0..rays).map(|_| rng.random_range(0..=bins)).collect();
        FiniteClass::new(rays, bins, vec![1.0; rays * bins], threshold_table(rays, bins, &t))
    }

    /// Random cell weights in [0.2, 1] and a random planted threshold per ray.
    pub fn random(rays: usize, bins: usize, rng: &mut impl Rng) -> Result<Self> {
        let p = (0..rays * bins).map(|_| rng.random_range(0.2..=1.0)).collect();
        let t: Vec<usize> = (0..rays).map(|_| rng.random_range(0..=bins)).collect();
        FiniteClass::new(rays, bins, p, threshold_table(rays, bins, &t))
    }

    pub fn cells(&self) -> usize {
        self.rays * self.bins
    }

    pub fn n_hypotheses(&self) -> u64 {
        match &self.members {
            Some(m) => m.len() as u64,
            None => 1u64 << self.cells(),
        }
    }

    pub fn hypotheses(&self) -> Vec<u32> {
        match &self.members {
            Some(m) => m.clone(),
            None => (0..1u32 << self.cells()).collect(),
        }
    }

    /// Cells where `h` breaks the rule: blocked with a clear successor.
    pub fn violations(&self, h: u32) -> u32 {
        let mut v = 0u32;
        for r in 0..self.rays {
            for b in 0..self.bins - 1 {
                let x = r * self.bins + b;
                if h >> x & 1 == 1 && h >> (x + 1) & 1 == 0 {
                    v |= 1 << x;
                }
            }
        }
        v
    }

    fn mass(&self, mask: u32) -> f64 {
        (0..self.cells()).filter(|x| mask >> x & 1 == 1).map(|x| self.p[x]).sum()
    }

    /// Expected data loss (true error).
    pub fn true_error(&self, h: u32) -> f64 {
        self.mass(h ^ self.theta_star)
    }

    /// Expected physics loss.
    pub fn physics_loss(&self, h: u32) -> f64 {
        self.mass(self.violations(h))
    }
}

/// `(|Θ(ε0)|, |Θ|)` by brute force.
pub fn enumerate_restricted_class(class: &FiniteClass, epsilon0: f64, max_hypotheses: u64) -> Result<(u64, u64)> {
    let n = class.n_hypotheses();
    if n > max_hypotheses {
        return Err(Error::Config(format!("{n} hypotheses exceed the enumeration budget of {max_hypotheses}")));
    }
    let kept = class.hypotheses().into_iter().filter(|&h| class.physics_loss(h) <= epsilon0).count() as u64;
    Ok((kept, n))
}

/// Smallest sample count the bound guarantees for a class of `class_size`.
pub fn required_samples(class_size: u64, epsilon1: f64, delta: f64) -> Result<u64> {
    if !(epsilon1 > 0.0) {
        return Err(Error::Domain(format!("epsilon1 must be > 0, got {epsilon1}")));
    }
    if !(delta > 0.0 && delta <= 1.0) || class_size == 0 {
        return Err(Error::Domain(format!("need delta in (0, 1] and a nonempty class, got {delta}, {class_size}")));
    }
    let m = ((class_size as f64).ln() + (1.0 / delta).ln()) / epsilon1;
    Ok(m.max(0.0).ceil() as u64)
}

/// Which consistent hypothesis a trial keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// First in bit order.
    Lexicographic,
    /// Largest true error.
    WorstCase,
}

/// Fraction of `trials` whose selected consistent hypothesis has true error at
/// most `epsilon1`. With `physics_filter` off only the data loss filters.
pub fn monte_carlo_verify(
    class: &FiniteClass,
    m: u64,
    epsilon1: f64,
    trials: usize,
    selection: Selection,
    physics_filter: bool,
    seed: u64,
) -> Result<f64> {
    let dist = WeightedIndex::new(&class.p).map_err(|e| Error::Config(e.to_string()))?;
    let hyps = class.hypotheses();
    let err: Vec<f64> = hyps.iter().map(|&h| class.true_error(h)).collect();
    let viol: Vec<u32> = hyps.iter().map(|&h| class.violations(h)).collect();
    let mut ok = 0usize;
    for t in 0..trials {
        let mut rng = seed::rng(seed, &[tag::PAC, t as u64]);
        let seen = (0..m).fold(0u32, |s, _| s | 1 << dist.sample(&mut rng));
        let consistent = (0..hyps.len())
            .filter(|&i| (hyps[i] ^ class.theta_star) & seen == 0 && (!physics_filter || viol[i] & seen == 0));
        let chosen = match selection {
            Selection::Lexicographic => consistent.min_by_key(|&i| hyps[i].reverse_bits()),
            Selection::WorstCase => consistent.max_by(|&a, &b| err[a].total_cmp(&err[b])),
        };
        if chosen.is_some_and(|i| err[i] <= epsilon1) {
            ok += 1;
        }
    }
    Ok(ok as f64 / trials as f64)
}

/// Lowest success count still within two binomial standard deviations of
/// `(1 - delta) * trials`.
pub fn success_floor(delta: f64, trials: usize) -> f64 {
    let n = trials as f64;
    (1.0 - delta) * n - 2.0 * (n * delta * (1.0 - delta)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub rays: usize,
    pub bins: usize,
    pub n_hypotheses: u64,
    pub restricted_class_size: u64,
    pub m: u64,
    pub success_lexicographic: f64,
    pub success_worst_case: f64,
    /// Same `m`, physics filter off.
    pub unfiltered_success_lexicographic: f64,
    pub unfiltered_success_worst_case: f64,
    /// Samples the bound asks for without the physics restriction.
    pub unrestricted_m: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacReport {
    pub epsilon0: f64,
    pub epsilon1: f64,
    pub delta: f64,
    pub trials: usize,
    /// Success rate a run must reach.
    pub success_floor_rate: f64,
    pub default_class: ClassReport,
    pub random_classes: Vec<ClassReport>,
    /// `|Θ(ε0)|` over a grid of `ε0` for the default class.
    pub restricted_sizes: Vec<(f64, u64)>,
    pub all_pass: bool,
}

pub fn verify_class(class: &FiniteClass, cfg: &PacConfig, seed: u64) -> Result<ClassReport> {
    let (kept, total) = enumerate_restricted_class(class, cfg.epsilon0, cfg.max_hypotheses)?;
    let m = required_samples(kept, cfg.epsilon1, cfg.delta)?;
    let run = |sel, filter| monte_carlo_verify(class, m, cfg.epsilon1, cfg.trials, sel, filter, seed);
    Ok(ClassReport {
        rays: class.rays,
        bins: class.bins,
        n_hypotheses: total,
        restricted_class_size: kept,
        m,
        success_lexicographic: run(Selection::Lexicographic, true)?,
        success_worst_case: run(Selection::WorstCase, true)?,
        unfiltered_success_lexicographic: run(Selection::Lexicographic, false)?,
        unfiltered_success_worst_case: run(Selection::WorstCase, false)?,
        unrestricted_m: required_samples(total, cfg.epsilon1, cfg.delta)?,
    })
}

/// Grid shapes with the same number of cells as `rays x bins`.
fn shapes(cells: usize) -> Vec<(usize, usize)> {
    (1..=cells).filter(|r| cells % r == 0).map(|r| (r, cells / r)).collect()
}

pub fn run_pac(cfg: &PacConfig) -> Result<PacReport> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &[tag::PAC]);
    let class = FiniteClass::planted(cfg.rays, cfg.bins, &mut rng)?;
    let default_class = verify_class(&class, cfg, cfg.seed)?;
    let grid = shapes(cfg.rays * cfg.bins);
    let mut random_classes = Vec::with_capacity(cfg.configs);
    for i in 0..cfg.configs {
        let (r, b) = grid[i % grid.len()];
        let c = FiniteClass::random(r, b, &mut rng)?;
        random_classes.push(verify_class(&c, cfg, seed::derive_seed(cfg.seed, &[tag::PAC, i as u64 + 1]))?);
    }
    let mut restricted_sizes = Vec::new();
    for k in 0..=20 {
        let e0 = k as f64 / 20.0;
        restricted_sizes.push((e0, enumerate_restricted_class(&class, e0, cfg.max_hypotheses)?.0));
    }
    let floor = success_floor(cfg.delta, cfg.trials) / cfg.trials as f64;
    let passes = |c: &ClassReport| c.success_lexicographic >= floor && c.success_worst_case >= floor;
    let all_pass = passes(&default_class) && random_classes.iter().all(passes);
    Ok(PacReport {
        epsilon0: cfg.epsilon0,
        epsilon1: cfg.epsilon1,
        delta: cfg.delta,
        trials: cfg.trials,
        success_floor_rate: floor,
        default_class,
        random_classes,
        restricted_sizes,
        all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_class() -> FiniteClass {
        FiniteClass::new(3, 4, vec![1.0; 12], threshold_table(3, 4, &[1, 4, 2])).unwrap()
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(required_samples(1024, 0.1, 0.05).unwrap(), 100);
        assert_eq!(required_samples(1, 0.1, 1.0).unwrap(), 0);
        let extra = (2f64.ln() / 0.1).ceil() as u64;
        let (a, b) = (required_samples(1000, 0.1, 0.05).unwrap(), required_samples(2000, 0.1, 0.05).unwrap());
        assert!(b - a == extra || b - a == extra - 1);
        assert!(matches!(required_samples(10, 0.0, 0.05), Err(Error::Domain(_))));
    }

    #[test]
    fn vacuous_threshold_keeps_everything() {
        let c = default_class();
        assert_eq!(enumerate_restricted_class(&c, 1.0, 1 << 20).unwrap(), (4096, 4096));
    }

    #[test]
    fn zero_threshold_keeps_the_threshold_family() {
        // Independent count: a ray of `b` bins admits `b + 1` monotone tables.
        for (r, b) in [(3, 4), (4, 3), (2, 6), (12, 1)] {
            let c = FiniteClass::new(r, b, vec![1.0; 12], 0).unwrap();
            let (kept, _) = enumerate_restricted_class(&c, 0.0, 1 << 20).unwrap();
            assert_eq!(kept, ((b + 1) as u64).pow(r as u32));
        }
    }

    #[test]
    fn default_restricted_size_matches_hand_count() {
        // Uniform cells: a hypothesis is kept iff it has at most two
        // violations (2/12 <= 0.2 < 3/12). Count by direct listing per ray.
        let mut per_ray = [0u64; 4];
        for h in 0u32..16 {
            let v = (0..3).filter(|b| h >> b & 1 == 1 && h >> (b + 1) & 1 == 0).count();
            per_ray[v] += 1;
        }
        let mut total = 0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    if a + b + c <= 2 {
                        total += per_ray[a] * per_ray[b] * per_ray[c];
                    }
                }
            }
        }
        let (kept, _) = enumerate_restricted_class(&default_class(), 0.2, 1 << 20).unwrap();
        assert_eq!(kept, total);
    }

    #[test]
    fn budget_is_enforced() {
        let c = default_class();
        assert!(matches!(enumerate_restricted_class(&c, 0.2, 1000), Err(Error::Config(_))));
        let cfg = PacConfig { rays: 5, bins: 5, ..PacConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trivial_class_always_succeeds() {
        let mut c = FiniteClass::new(3, 4, vec![1.0; 12], threshold_table(3, 4, &[0, 2, 4])).unwrap();
        c.members = Some(vec![c.theta_star]);
        assert_eq!(enumerate_restricted_class(&c, 0.0, 1 << 20).unwrap(), (1, 1));
        for sel in [Selection::Lexicographic, Selection::WorstCase] {
            assert_eq!(monte_carlo_verify(&c, 0, 0.1, 50, sel, true, 3).unwrap(), 1.0);
        }
    }

    #[test]
    fn planted_truth_is_consistent() {
        let c = default_class();
        assert_eq!(c.true_error(c.theta_star), 0.0);
        assert_eq!(c.physics_loss(c.theta_star), 0.0);
        assert!(FiniteClass::new(1, 2, vec![1.0; 2], 0b01).is_err());
    }

    #[test]
    fn default_run_meets_the_bound() {
        let cfg = PacConfig { configs: 2, ..PacConfig::default() };
        let r = run_pac(&cfg).unwrap();
        assert!(r.all_pass, "{r:?}");
        assert!(r.default_class.m <= r.default_class.unrestricted_m);
        assert!(r.restricted_sizes.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    proptest! {
        #[test]
        fn restriction_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64, seed in 0u64..1000) {
            let c = FiniteClass::random(3, 4, &mut crate::seed::rng(seed, &[1])).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (small, _) = enumerate_restricted_class(&c, lo, 1 << 20).unwrap();
            let (large, _) = enumerate_restricted_class(&c, hi, 1 << 20).unwrap();
            prop_assert!(small <= large);
            prop_assert!(required_samples(small, 0.1, 0.05).unwrap() <= required_samples(large, 0.1, 0.05).unwrap());
        }
    }
}
