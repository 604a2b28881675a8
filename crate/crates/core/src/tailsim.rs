//! Scalar stochastic recurrences `X_t = A_t·X_{t−1} + B_t`: simulation,
//! contraction check, coupled forgetting, Hill tail-index estimation and
//! comparison with the Kesten moment root `E|A|^κ = 1`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{Error, Result};

pub const DIVERGENCE_LIMIT: f64 = 1e300;
pub const DEFAULT_BURN_IN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ADist {
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    LogNormal { mu: f64, sigma: f64 },
    /// `lo` with probability `p_lo`, otherwise `hi`.
    TwoPoint { lo: f64, hi: f64, p_lo: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BDist {
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrenceSpec {
    pub a: ADist,
    pub b: BDist,
    pub x0: f64,
    pub horizon: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl RecurrenceSpec {
    /// `A ~ U[0, 2]`, `B ≡ 1`: contractive with tail index 1.
    pub fn uniform_0_2(samples: usize, seed: u64) -> Self {
        RecurrenceSpec {
            a: ADist::Uniform { lo: 0.0, hi: 2.0 },
            b: BDist::Const(1.0),
            x0: 0.0,
            horizon: DEFAULT_BURN_IN + samples,
            burn_in: DEFAULT_BURN_IN,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon <= self.burn_in {
            return Err(Error::Config(format!(
                "horizon {} must exceed burn-in {}",
                self.horizon, self.burn_in
            )));
        }
        if !self.x0.is_finite() {
            return Err(Error::Config("x0 must be finite".into()));
        }
        let ok = match self.a {
            ADist::Const(c) => c.is_finite(),
            ADist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ADist::LogNormal { mu, sigma } => mu.is_finite() && sigma > 0.0 && sigma.is_finite(),
            ADist::TwoPoint { lo, hi, p_lo } => {
                lo.is_finite() && hi.is_finite() && (0.0..=1.0).contains(&p_lo)
            }
        };
        if !ok {
            return Err(Error::Config(format!("invalid A distribution {:?}", self.a)));
        }
        let ok = match self.b {
            BDist::Const(c) => c.is_finite(),
            BDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            BDist::Gaussian { mean, std } => mean.is_finite() && std > 0.0 && std.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("invalid B distribution {:?}", self.b)));
        }
        Ok(())
    }
}

/// Seeded source of `(A_t, B_t)` pairs.
struct Driver {
    rng: ChaCha8Rng,
    a: ADist,
    b: BDist,
}

impl Driver {
    fn new(spec: &RecurrenceSpec) -> Self {
        Driver {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            a: spec.a,
            b: spec.b,
        }
    }

    fn sample_a(&mut self) -> f64 {
        match self.a {
            ADist::Const(c) => c,
            ADist::Uniform { lo, hi } => self.rng.gen_range(lo..hi),
            ADist::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated").sample(&mut self.rng)
            }
            ADist::TwoPoint { lo, hi, p_lo } => {
                if self.rng.gen::<f64>() < p_lo {
                    lo
                } else {
                    hi
                }
            }
        }
    }

    fn sample_b(&mut self) -> f64 {
        match self.b {
            BDist::Const(c) => c,
            BDist::Uniform { lo, hi } => self.rng.gen_range(lo..hi),
            BDist::Gaussian { mean, std } => {
                Normal::new(mean, std).expect("validated").sample(&mut self.rng)
            }
        }
    }

    fn next(&mut self) -> (f64, f64) {
        let a = self.sample_a();
        let b = self.sample_b();
        (a, b)
    }
}

fn diverged(step: usize) -> Error {
    Error::Divergence {
        step,
        reason: format!(
            "|X| exceeded {DIVERGENCE_LIMIT:e}; the contraction condition E log|A| < 0 is violated"
        ),
    }
}

/// Signed trajectory `X_1..X_horizon`.
pub fn trajectory(spec: &RecurrenceSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut drv = Driver::new(spec);
    let mut x = spec.x0;
    let mut out = Vec::with_capacity(spec.horizon);
    for t in 1..=spec.horizon {
        let (a, b) = drv.next();
        x = a * x + b;
        if !(x.abs() <= DIVERGENCE_LIMIT) {
            return Err(diverged(t));
        }
        out.push(x);
    }
    Ok(out)
}

/// Post-burn-in `|X_t|` values.
pub fn simulate(spec: &RecurrenceSpec) -> Result<Vec<f64>> {
    let mut traj = trajectory(spec)?;
    traj.drain(..spec.burn_in);
    traj.iter_mut().for_each(|x| *x = x.abs());
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionEstimate {
    pub mean_log_a: f64,
    pub std_error: f64,
    /// Fraction of draws with `A = 0` (excluded from the mean).
    pub zero_mass: f64,
    /// Whether the value is exact rather than a Monte-Carlo estimate.
    pub exact: bool,
}

impl ContractionEstimate {
    pub fn is_stable(&self) -> bool {
        self.mean_log_a < 0.0
    }
}

/// Monte-Carlo estimate of `E log|A|` from `n` draws.
pub fn check_contraction(spec: &RecurrenceSpec, n: usize) -> Result<ContractionEstimate> {
    spec.validate()?;
    if let ADist::Const(c) = spec.a {
        let abs = c.abs();
        return Ok(ContractionEstimate {
            mean_log_a: abs.ln(),
            std_error: 0.0,
            zero_mass: if abs == 0.0 { 1.0 } else { 0.0 },
            exact: true,
        });
    }
    if n < 1000 {
        return Err(Error::Input(format!("need at least 1000 draws, got {n}")));
    }
    let mut drv = Driver::new(spec);
    let (mut sum, mut sumsq, mut zeros) = (0.0, 0.0, 0usize);
    for _ in 0..n {
        let a = drv.sample_a().abs();
        if a == 0.0 {
            zeros += 1;
            continue;
        }
        let l = a.ln();
        sum += l;
        sumsq += l * l;
    }
    let m = n - zeros;
    if m < 2 {
        return Ok(ContractionEstimate {
            mean_log_a: f64::NEG_INFINITY,
            std_error: 0.0,
            zero_mass: zeros as f64 / n as f64,
            exact: false,
        });
    }
    let mean = sum / m as f64;
    let var = (sumsq - m as f64 * mean * mean) / (m - 1) as f64;
    Ok(ContractionEstimate {
        mean_log_a: mean,
        std_error: (var.max(0.0) / m as f64).sqrt(),
        zero_mass: zeros as f64 / n as f64,
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forgetting {
    /// `|X_t − X'_t|` from the two coupled chains.
    pub gaps: Vec<f64>,
    /// `|x0 − x0'|·∏_{i≤t}|A_i|`.
    pub predicted: Vec<f64>,
}

impl Forgetting {
    /// First `t` (1-based) with gap below `tol`.
    pub fn first_below(&self, tol: f64) -> Option<usize> {
        self.gaps.iter().position(|&g| g < tol).map(|i| i + 1)
    }
}

/// Run two chains from `x0` and `x0_prime` on one shared noise stream.
pub fn forgetting_test(spec: &RecurrenceSpec, x0: f64, x0_prime: f64) -> Result<Forgetting> {
    spec.validate()?;
    let mut drv = Driver::new(spec);
    let (mut x, mut y) = (x0, x0_prime);
    let mut prod = (x0 - x0_prime).abs();
    let mut gaps = Vec::with_capacity(spec.horizon);
    let mut predicted = Vec::with_capacity(spec.horizon);
    for t in 1..=spec.horizon {
        let (a, b) = drv.next();
        x = a * x + b;
        y = a * y + b;
        if !(x.abs() <= DIVERGENCE_LIMIT && y.abs() <= DIVERGENCE_LIMIT) {
            return Err(diverged(t));
        }
        prod *= a.abs();
        gaps.push((x - y).abs());
        predicted.push(prod);
    }
    Ok(Forgetting { gaps, predicted })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub eta: f64,
    pub k: usize,
    pub n: usize,
    pub std_error: f64,
}

/// Hill estimator over the `k` largest of `|samples|`:
/// `η̂ = k / Σ_{i≤k} ln(x_(n−i+1) / x_(n−k))`.
pub fn hill_tail_index(samples: &[f64], k: usize) -> Result<TailEstimate> {
    let n = samples.len();
    if k < 10 {
        return Err(Error::Input(format!("k must be at least 10, got {k}")));
    }
    if k > n / 10 {
        return Err(Error::Input(format!("k = {k} exceeds n/10 = {}", n / 10)));
    }
    let mut abs: Vec<f64> = samples
        .iter()
        .map(|x| x.abs())
        .filter(|&x| x > 0.0)
        .collect();
    if let Some(bad) = abs.iter().find(|x| !x.is_finite()) {
        return Err(Error::Input(format!("non-finite sample {bad}")));
    }
    if abs.len() <= k {
        return Err(Error::Input(format!(
            "only {} nonzero samples, need more than k = {k}",
            abs.len()
        )));
    }
    abs.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    let threshold = abs[k];
    let sum: f64 = abs[..k].iter().map(|&x| (x / threshold).ln()).sum();
    if !(sum > 0.0) {
        return Err(Error::Input(
            "upper order statistics are all equal; tail index undefined".into(),
        ));
    }
    let eta = k as f64 / sum;
    Ok(TailEstimate {
        eta,
        k,
        n,
        std_error: eta / (k as f64).sqrt(),
    })
}

/// `ln E|A|^κ`, when it has a closed form.
pub fn log_moment(a: &ADist, kappa: f64) -> Option<f64> {
    match *a {
        ADist::Const(c) => Some(kappa * c.abs().ln()),
        ADist::Uniform { lo, hi } => {
            let f = |x: f64| x.signum() * x.abs().powf(kappa + 1.0) / (kappa + 1.0);
            Some(((f(hi) - f(lo)) / (hi - lo)).ln())
        }
        ADist::LogNormal { mu, sigma } => Some(kappa * mu + kappa * kappa * sigma * sigma / 2.0),
        ADist::TwoPoint { lo, hi, p_lo } => {
            Some((p_lo * lo.abs().powf(kappa) + (1.0 - p_lo) * hi.abs().powf(kappa)).ln())
        }
    }
}

/// Positive root of `E|A|^κ = 1` by bracketing and bisection. `None` when
/// no root exists (e.g. `|A| ≤ 1` almost surely, or no contraction).
pub fn kesten_index(a: &ADist) -> Option<f64> {
    let f = |k: f64| log_moment(a, k);
    // Near zero f has slope E log|A|; a root needs that slope to be negative.
    let probe = 1e-6;
    if !(f(probe)? < 0.0) {
        return None;
    }
    let mut lo = probe;
    let mut hi = 1.0;
    while f(hi)? <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

pub const DEFAULT_TAIL_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct KestenReport {
    pub estimate: TailEstimate,
    pub contraction: ContractionEstimate,
    pub target: Option<f64>,
    pub tolerance: f64,
}

impl KestenReport {
    /// `None` when there is no analytic target to compare with.
    pub fn pass(&self) -> Option<bool> {
        self.target
            .map(|t| (self.estimate.eta - t).abs() <= self.tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        let _ = writeln!(s, "eta_hat,{}", self.estimate.eta);
        let _ = writeln!(s, "std_error,{}", self.estimate.std_error);
        let _ = writeln!(s, "k,{}", self.estimate.k);
        let _ = writeln!(s, "n,{}", self.estimate.n);
        let _ = writeln!(s, "mean_log_a,{}", self.contraction.mean_log_a);
        let _ = writeln!(s, "mean_log_a_se,{}", self.contraction.std_error);
        match self.target {
            Some(t) => {
                let _ = writeln!(s, "target,{t}");
            }
            None => s.push_str("target,none\n"),
        }
        let _ = writeln!(s, "tolerance,{}", self.tolerance);
        let verdict = match self.pass() {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "no analytic target",
        };
        let _ = writeln!(s, "result,{verdict}");
        s
    }
}

/// Hill estimate for a contractive recurrence, next to the Kesten root when
/// one exists.
pub fn kesten_experiment(spec: &RecurrenceSpec, k: usize) -> Result<KestenReport> {
    let contraction = check_contraction(spec, 100_000)?;
    if !contraction.is_stable() {
        return Err(Error::Domain(format!(
            "contraction condition violated: E log|A| = {:.4} (se {:.4}) is not negative",
            contraction.mean_log_a, contraction.std_error
        )));
    }
    let samples = simulate(spec)?;
    let estimate = hill_tail_index(&samples, k)?;
    Ok(KestenReport {
        estimate,
        contraction,
        target: kesten_index(&spec.a),
        tolerance: DEFAULT_TAIL_TOLERANCE,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.628 * ((n + m) / (n * m)).sqrt()
}

pub fn trajectory_csv(values: &[f64], first_t: usize) -> String {
    let mut s = String::from("t,x\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{},{}", first_t + i, v);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(a: ADist, b: BDist, horizon: usize) -> RecurrenceSpec {
        RecurrenceSpec {
            a,
            b,
            x0: 0.0,
            horizon,
            burn_in: 0,
            seed: 1,
        }
    }

    #[test]
    fn degenerate_recurrences() {
        let t = trajectory(&spec(ADist::Const(0.0), BDist::Const(3.5), 10)).unwrap();
        assert!(t.iter().all(|&x| x == 3.5));
        let t = trajectory(&spec(ADist::Const(0.5), BDist::Const(1.0), 60)).unwrap();
        for x in &t[39..] {
            assert!((x - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let err = trajectory(&spec(ADist::Const(2.0), BDist::Const(1.0), 2000)).unwrap_err();
        match err {
            Error::Divergence { reason, .. } => assert!(reason.contains("E log|A| < 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_contraction_is_exact() {
        let c = check_contraction(&spec(ADist::Const(0.5), BDist::Const(1.0), 10), 0).unwrap();
        assert_eq!(c.mean_log_a, 0.5f64.ln());
        assert!(c.exact && c.is_stable());
        let c = check_contraction(&spec(ADist::Const(2.0), BDist::Const(1.0), 10), 0).unwrap();
        assert!(!c.is_stable());
        let c = check_contraction(&spec(ADist::Const(0.0), BDist::Const(1.0), 10), 0).unwrap();
        assert_eq!(c.zero_mass, 1.0);
        assert!(c.is_stable());
    }

    #[test]
    fn atom_at_zero_is_excluded_and_reported() {
        let s = spec(
            ADist::TwoPoint {
                lo: 0.0,
                hi: 0.5,
                p_lo: 0.3,
            },
            BDist::Const(1.0),
            10,
        );
        let c = check_contraction(&s, 20_000).unwrap();
        assert!((c.zero_mass - 0.3).abs() < 0.02);
        assert!((c.mean_log_a - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forgetting_closed_forms() {
        let s = spec(ADist::Const(0.5), BDist::Const(1.0), 40);
        let f = forgetting_test(&s, 0.0, 1.0).unwrap();
        for (t, g) in f.gaps.iter().enumerate() {
            assert_eq!(*g, 0.5f64.powi(t as i32 + 1));
        }
        let f = forgetting_test(&s, 0.7, 0.7).unwrap();
        assert!(f.gaps.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hill_input_errors() {
        let same = vec![2.0; 1000];
        assert!(matches!(hill_tail_index(&same, 50), Err(Error::Input(_))));
        assert!(hill_tail_index(&same, 5).is_err());
        assert!(hill_tail_index(&same, 101).is_err());
        let mut sparse = vec![0.0; 1000];
        sparse[0] = 1.0;
        assert!(hill_tail_index(&sparse, 50).is_err());
    }

    #[test]
    fn kesten_roots() {
        let k = kesten_index(&ADist::Uniform { lo: 0.0, hi: 2.0 }).unwrap();
        assert!((k - 1.0).abs() < 1e-9);
        assert!(kesten_index(&ADist::Const(0.5)).is_none());
        assert!(kesten_index(&ADist::Const(2.0)).is_none());
        let k = kesten_index(&ADist::LogNormal { mu: -0.5, sigma: 1.0 }).unwrap();
        assert!((k - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ks_statistic_basics() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b: Vec<f64> = (0..100).map(|i| i as f64 + 1000.0).collect();
        assert_eq!(ks_statistic(&a, &b), 1.0);
    }
}
