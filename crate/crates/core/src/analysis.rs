//! Metrics aggregation and exact analytic oracles.
//!
//! The oracles here are independent of the simulator: static resilience by
//! exhaustive subset enumeration, and a hypergeometric lost-object
//! calculator for correlated failures under uniform random placement. They
//! exist to cross-check simulation output, so they must never share code
//! with the repair path beyond the recoverability predicate itself.

use std::io;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::coding::{is_recoverable, CodeConfig, FragmentSet};
use crate::placement::ObjectId;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("exhaustive enumeration is limited to n <= {limit} fragments (got n={n}); use the Monte Carlo fallback with an explicit trial count")]
    EnumerationTooLarge { n: usize, limit: usize },
    #[error("theta must lie in (0, 1), got {0}")]
    BadTheta(f64),
}

/// One terminated repair (or a fragment declared lost).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairRecord {
    pub object: ObjectId,
    pub fragment: usize,
    pub strategy: &'static str,
    pub start_step: u64,
    pub end_step: u64,
    pub bytes: u64,
    pub fallback: bool,
    pub lost: bool,
}

impl RepairRecord {
    pub fn duration_steps(&self) -> u64 {
        self.end_step - self.start_step
    }
}

/// Append-only experiment log: per-repair records plus per-node upload
/// totals. Logs from independent replicas merge by concatenation.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub tau_seconds: f64,
    pub seed: u64,
    pub fingerprint: String,
    pub records: Vec<RepairRecord>,
    pub uploaded_per_node: Vec<u64>,
    pub objects_total: usize,
    pub objects_lost: usize,
    /// Last simulated step.
    pub steps: u64,
}

impl MetricsLog {
    pub fn new(tau_seconds: f64, seed: u64) -> Self {
        MetricsLog {
            tau_seconds,
            seed,
            ..MetricsLog::default()
        }
    }

    /// Completed repairs, excluding fragments that were declared lost.
    pub fn completed(&self) -> impl Iterator<Item = &RepairRecord> {
        self.records.iter().filter(|r| !r.lost)
    }

    /// Pools another replica's log into this one (ordered merge: call in
    /// replicate order for reproducible output).
    pub fn merge(&mut self, other: MetricsLog) {
        self.records.extend(other.records);
        self.uploaded_per_node.extend(other.uploaded_per_node);
        self.objects_total += other.objects_total;
        self.objects_lost += other.objects_lost;
        self.steps = self.steps.max(other.steps);
    }
}

/// Deterministic aggregate of one log.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub repairs: usize,
    pub lost_fragments: usize,
    pub fallbacks: usize,
    pub mean_steps: f64,
    pub median_steps: f64,
    pub mean_seconds: f64,
    pub mean_bytes_per_repair: f64,
    pub total_bytes: u64,
    pub loss_fraction: f64,
    /// Gini coefficient of per-node uploaded bytes; lower means a steeper
    /// upload CDF, i.e. better traffic balance.
    pub upload_gini: f64,
}

pub fn summarize(log: &MetricsLog) -> Summary {
    let mut durations: Vec<u64> = log.completed().map(|r| r.duration_steps()).collect();
    durations.sort_unstable();
    let repairs = durations.len();
    let total_steps: u64 = durations.iter().sum();
    let mean_steps = if repairs == 0 {
        0.0
    } else {
        total_steps as f64 / repairs as f64
    };
    let median_steps = match repairs {
        0 => 0.0,
        n if n % 2 == 1 => durations[n / 2] as f64,
        n => (durations[n / 2 - 1] + durations[n / 2]) as f64 / 2.0,
    };
    let total_bytes: u64 = log.completed().map(|r| r.bytes).sum();
    Summary {
        repairs,
        lost_fragments: log.records.iter().filter(|r| r.lost).count(),
        fallbacks: log.completed().filter(|r| r.fallback).count(),
        mean_steps,
        median_steps,
        mean_seconds: mean_steps * log.tau_seconds,
        mean_bytes_per_repair: if repairs == 0 {
            0.0
        } else {
            total_bytes as f64 / repairs as f64
        },
        total_bytes,
        loss_fraction: if log.objects_total == 0 {
            0.0
        } else {
            log.objects_lost as f64 / log.objects_total as f64
        },
        upload_gini: gini(&log.uploaded_per_node),
    }
}

/// Gini coefficient of a non-negative sample; 0 for perfectly uniform.
pub fn gini(values: &[u64]) -> f64 {
    let n = values.len();
    let total: u128 = values.iter().map(|&v| v as u128).sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted: Vec<u64> = values.to_vec();
    sorted.sort_unstable();
    let weighted: u128 = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as u128 + 1) * v as u128)
        .sum();
    (2.0 * weighted as f64) / (n as f64 * total as f64) - (n as f64 + 1.0) / n as f64
}

/// Probability of object retrieval as a function of the number s of
/// surviving fragment holders, with the exact subset counts behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResilienceCurve {
    n: usize,
    /// Per s: (recoverable s-subsets, total s-subsets).
    counts: Vec<(u64, u64)>,
}

impl ResilienceCurve {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn probability(&self, s: usize) -> f64 {
        let (good, total) = self.counts[s];
        good as f64 / total as f64
    }

    /// Fraction of s-survivor subsets that do not allow retrieval.
    pub fn unrecoverable_fraction(&self, s: usize) -> f64 {
        1.0 - self.probability(s)
    }

    pub fn counts(&self, s: usize) -> (u64, u64) {
        self.counts[s]
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..=self.n).map(|s| (s, self.probability(s)))
    }
}

const ENUMERATION_LIMIT: usize = 25;

/// Static resilience by enumerating all 2^n failure combinations.
///
/// MDS families shortcut to the closed form (any k fragments suffice);
/// structure-based families run the GF(2) rank oracle over every subset.
pub fn static_resilience(code: &CodeConfig) -> Result<ResilienceCurve, AnalysisError> {
    let n = code.n();
    if code.family().is_mds() {
        let counts = (0..=n)
            .map(|s| {
                let total = binomial(n as u64, s as u64);
                (if s >= code.k() { total } else { 0 }, total)
            })
            .collect();
        return Ok(ResilienceCurve { n, counts });
    }
    if n > ENUMERATION_LIMIT {
        return Err(AnalysisError::EnumerationTooLarge {
            n,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut counts = vec![(0u64, 0u64); n + 1];
    for bits in 0..(1u64 << n) {
        let set = FragmentSet::from_bits(bits as u32);
        let s = set.len();
        counts[s].1 += 1;
        if is_recoverable(code, set) {
            counts[s].0 += 1;
        }
    }
    Ok(ResilienceCurve { n, counts })
}

/// Monte Carlo fallback for codes too wide to enumerate: samples `trials`
/// subsets per survivor count.
pub fn static_resilience_monte_carlo(code: &CodeConfig, trials: u64, seed: u64) -> ResilienceCurve {
    let n = code.n();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let counts = (0..=n)
        .map(|s| {
            let mut good = 0u64;
            for _ in 0..trials {
                let picks = rand::seq::index::sample(&mut rng, n, s);
                let set: FragmentSet = picks.iter().collect();
                if is_recoverable(code, set) {
                    good += 1;
                }
            }
            (good, trials)
        })
        .collect();
    ResilienceCurve { n, counts }
}

/// Probability that an object is unrecoverable when a fraction theta of the
/// N nodes fail simultaneously, under uniform random placement.
///
/// Sums the hypergeometric probability that j of the object's n holders fall
/// into the failed set, weighted by the fraction of (n-j)-survivor subsets
/// the recoverability oracle rejects.
pub fn analytic_lost_fraction(
    code: &CodeConfig,
    n_nodes: usize,
    theta: f64,
) -> Result<f64, AnalysisError> {
    let curve = static_resilience(code)?;
    analytic_lost_fraction_from_curve(&curve, n_nodes, theta)
}

/// Same oracle, reusing a precomputed resilience curve.
pub fn analytic_lost_fraction_from_curve(
    curve: &ResilienceCurve,
    n_nodes: usize,
    theta: f64,
) -> Result<f64, AnalysisError> {
    if !(0.0..1.0).contains(&theta) {
        return Err(AnalysisError::BadTheta(theta));
    }
    let n = curve.n() as u64;
    let failed = failed_count(n_nodes, theta);
    let population = n_nodes as u64;
    let mut lost = 0.0;
    for j in 0..=n {
        let p = hypergeometric_pmf(population, failed, n, j);
        lost += p * curve.unrecoverable_fraction((n - j) as usize);
    }
    Ok(lost)
}

/// Monte Carlo counterpart of [`analytic_lost_fraction`]: draws object
/// placements over N nodes with the first `floor(theta * N)` failed and
/// applies the recoverability oracle directly.
pub fn simulate_lost_fraction(
    code: &CodeConfig,
    n_nodes: usize,
    theta: f64,
    draws: u64,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if !(0.0..1.0).contains(&theta) {
        return Err(AnalysisError::BadTheta(theta));
    }
    let failed = failed_count(n_nodes, theta) as usize;
    let n = code.n();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut lost = 0u64;
    for _ in 0..draws {
        let picks = rand::seq::index::sample(&mut rng, n_nodes, n);
        let live: FragmentSet = picks
            .iter()
            .enumerate()
            .filter(|&(_, node)| node >= failed)
            .map(|(frag, _)| frag)
            .collect();
        if !is_recoverable(code, live) {
            lost += 1;
        }
    }
    Ok(lost as f64 / draws as f64)
}

/// `floor(theta * N)` with a guard against the float representation of
/// theta nudging an exact product just below an integer.
pub fn failed_count(n_nodes: usize, theta: f64) -> u64 {
    (theta * n_nodes as f64 + 1e-9).floor() as u64
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k)
        .map(|i| (((n - i) as f64) / ((i + 1) as f64)).ln())
        .sum()
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

fn hypergeometric_pmf(population: u64, successes: u64, draws: u64, j: u64) -> f64 {
    if j > draws || j > successes || draws - j > population - successes {
        return 0.0;
    }
    (ln_binomial(successes, j) + ln_binomial(population - successes, draws - j)
        - ln_binomial(population, draws))
    .exp()
}

/// One point of the empirical per-node upload CDF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfPoint {
    pub node: usize,
    pub bytes: u64,
    pub cum_frac: f64,
}

/// Empirical CDF of per-node uploaded bytes, zeros included.
pub fn upload_cdf(log: &MetricsLog) -> Vec<CdfPoint> {
    let mut nodes: Vec<(usize, u64)> = log
        .uploaded_per_node
        .iter()
        .copied()
        .enumerate()
        .collect();
    nodes.sort_by_key(|&(node, bytes)| (bytes, node));
    let total = nodes.len() as f64;
    nodes
        .into_iter()
        .enumerate()
        .map(|(i, (node, bytes))| CdfPoint {
            node,
            bytes,
            cum_frac: (i + 1) as f64 / total,
        })
        .collect()
}

/// Plot-ready CSV emitters for the standard output schemas.
pub mod csv {
    use super::*;

    /// `s,probability`
    pub fn write_resilience(mut w: impl io::Write, curve: &ResilienceCurve) -> io::Result<()> {
        writeln!(w, "s,probability")?;
        for (s, p) in curve.points() {
            writeln!(w, "{s},{p}")?;
        }
        Ok(())
    }

    /// `node,bytes,cumfrac`
    pub fn write_cdf(mut w: impl io::Write, points: &[CdfPoint]) -> io::Result<()> {
        writeln!(w, "node,bytes,cumfrac")?;
        for p in points {
            writeln!(w, "{},{},{}", p.node, p.bytes, p.cum_frac)?;
        }
        Ok(())
    }

    /// `theta,analytic,simulated`
    pub fn write_lost(mut w: impl io::Write, rows: &[(f64, f64, f64)]) -> io::Result<()> {
        writeln!(w, "theta,analytic,simulated")?;
        for (theta, analytic, simulated) in rows {
            writeln!(w, "{theta},{analytic},{simulated}")?;
        }
        Ok(())
    }

    /// `object,fragment,strategy,start_step,end_step,bytes,fallback,lost`
    pub fn write_events(mut w: impl io::Write, log: &MetricsLog) -> io::Result<()> {
        writeln!(
            w,
            "object,fragment,strategy,start_step,end_step,bytes,fallback,lost"
        )?;
        for r in &log.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.object,
                r.fragment,
                r.strategy,
                r.start_step,
                r.end_step,
                r.bytes,
                r.fallback as u8,
                r.lost as u8
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::{CodeFamily, SrcStructure};

    fn mds(n: usize, k: usize) -> CodeConfig {
        CodeConfig::new(CodeFamily::Crgc, n, k, (k * 12) as u64).unwrap()
    }

    fn src_homomorphic(m: usize) -> CodeConfig {
        let s = SrcStructure::homomorphic(m).unwrap();
        let (n, k) = (s.n(), s.k());
        CodeConfig::with_structure(CodeFamily::Src, n, k, (k * 12) as u64, s).unwrap()
    }

    #[test]
    fn mds_resilience_is_a_step_function() {
        let curve = static_resilience(&mds(7, 4)).unwrap();
        assert_eq!(curve.probability(4), 1.0);
        assert_eq!(curve.probability(3), 0.0);
        assert_eq!(curve.probability(7), 1.0);
        assert_eq!(curve.probability(0), 0.0);
    }

    #[test]
    fn homomorphic_7_3_resilience() {
        let curve = static_resilience(&src_homomorphic(3)).unwrap();
        // The 7 rank-2 triples {x, y, x^y} are the only bad 3-subsets.
        assert_eq!(curve.counts(3), (28, 35));
        assert!((curve.probability(3) - 0.8).abs() < 1e-12);
        assert_eq!(curve.probability(7), 1.0);
        // Monotone non-decreasing in s.
        for s in 1..=7 {
            assert!(curve.probability(s) >= curve.probability(s - 1));
        }
    }

    #[test]
    fn monte_carlo_resilience_tracks_enumeration() {
        let code = src_homomorphic(3);
        let exact = static_resilience(&code).unwrap();
        let sampled = static_resilience_monte_carlo(&code, 20_000, 5);
        for s in 0..=7 {
            assert!(
                (exact.probability(s) - sampled.probability(s)).abs() < 0.02,
                "s={s}"
            );
        }
    }

    #[test]
    fn analytic_lost_fraction_reference_points() {
        // Exact two-decimal checks against the hypergeometric closed form.
        let p = analytic_lost_fraction(&mds(7, 4), 1000, 0.5).unwrap();
        assert!((p * 100.0 - 50.00).abs() < 0.005);
        let p = analytic_lost_fraction(&mds(7, 3), 1000, 0.4).unwrap();
        assert!((p * 100.0 - 9.55).abs() < 0.005);
        let p = analytic_lost_fraction(&mds(15, 5), 1000, 0.2).unwrap();
        assert!(p * 100.0 < 0.005, "rounds below two decimals");
    }

    #[test]
    fn monte_carlo_lost_fraction_agrees_with_the_oracle() {
        let code = mds(7, 4);
        for theta in [0.2, 0.5] {
            let exact = analytic_lost_fraction(&code, 1000, theta).unwrap();
            let mc = simulate_lost_fraction(&code, 1000, theta, 100_000, 11).unwrap();
            assert!((exact - mc).abs() < 0.005, "theta={theta}: {exact} vs {mc}");
        }
    }

    #[test]
    fn failed_count_is_float_safe() {
        assert_eq!(failed_count(1000, 0.3), 300);
        assert_eq!(failed_count(1000, 0.05), 50);
        assert_eq!(failed_count(7, 0.1), 0);
    }

    #[test]
    fn theta_bounds_are_enforced() {
        assert_eq!(
            analytic_lost_fraction(&mds(7, 4), 1000, 1.5),
            Err(AnalysisError::BadTheta(1.5))
        );
    }

    #[test]
    fn upload_cdf_includes_zero_uploaders() {
        let mut log = MetricsLog::new(1.0, 0);
        log.uploaded_per_node = vec![0, 300, 0, 100];
        let cdf = upload_cdf(&log);
        assert_eq!(cdf.len(), 4);
        assert_eq!(cdf[0].bytes, 0);
        assert_eq!(cdf[1].bytes, 0);
        assert_eq!(cdf[3].bytes, 300);
        assert!((cdf[3].cum_frac - 1.0).abs() < 1e-12);
        assert!((cdf[1].cum_frac - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gini_extremes() {
        assert_eq!(gini(&[5, 5, 5, 5]), 0.0);
        assert_eq!(gini(&[]), 0.0);
        assert_eq!(gini(&[0, 0, 0]), 0.0);
        // One node does all the work: (n-1)/n.
        assert!((gini(&[12, 0, 0, 0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn summarize_degenerate_cases() {
        let mut log = MetricsLog::new(0.5, 1);
        for i in 0..4 {
            log.records.push(RepairRecord {
                object: i,
                fragment: 0,
                strategy: "src",
                start_step: 0,
                end_step: 10,
                bytes: 20,
                fallback: false,
                lost: false,
            });
        }
        log.objects_total = 4;
        let s = summarize(&log);
        assert_eq!(s.mean_steps, s.median_steps);
        assert_eq!(s.mean_steps, 10.0);
        assert_eq!(s.mean_seconds, 5.0);
        assert_eq!(s.mean_bytes_per_repair, 20.0);
        assert_eq!(s.loss_fraction, 0.0);
    }

    #[test]
    fn csv_schemas() {
        let curve = static_resilience(&mds(7, 4)).unwrap();
        let mut buf = Vec::new();
        csv::write_resilience(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,probability\n"));
        assert_eq!(text.lines().count(), 9);

        let mut log = MetricsLog::new(1.0, 0);
        log.uploaded_per_node = vec![10, 0];
        log.records.push(RepairRecord {
            object: 3,
            fragment: 1,
            strategy: "rgc",
            start_step: 0,
            end_step: 5,
            bytes: 10,
            fallback: true,
            lost: false,
        });
        let mut buf = Vec::new();
        csv::write_events(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("3,1,rgc,0,5,10,1,0"));
        let mut buf = Vec::new();
        csv::write_cdf(&mut buf, &upload_cdf(&log)).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("node,bytes,cumfrac\n"));
    }
}
