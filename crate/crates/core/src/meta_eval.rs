//! Meta-evaluation: how metrics and judgment regimes order systems.
//!
//! Sampling sweeps derive one seed per task with
//! [`derive_seed`](crate::util::derive_seed)`(master, [stream, size_index, repeat])`
//! (stream 0 for micro triple samples, 1 for macro question samples), so
//! results do not depend on how rayon schedules the tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{Category, Direction, RelationId, RelationStats};
use crate::metrics::{
    evaluate, group_units, micro_units, unit_value, EvalConfig, EvalContext, Family, GroupBy, GroupKey, JudgmentSet,
    MetricId, MetricReport,
};
use crate::pooling::{qrels_at_depth, Pool};
use crate::ranking::RunSet;
use crate::util::{data_lines, derive_seed, read_file};

/// Default subsample sizes: 1%, 5%, 10%, 15%, ..., 95%.
pub fn default_sizes() -> Vec<f64> {
    let mut v = vec![0.01];
    v.extend((1..=19).map(|i| f64::from(i) * 0.05));
    v
}

pub const DEFAULT_REPEATS: usize = 50;
pub const DEFAULT_MAX_DEPTH: u32 = 10;

/// Kendall's τ-b between two paired value sequences. Larger values are
/// ranked first; flip the sign of lower-is-better metrics beforehand.
///
/// Runs in O(n log n): sort by `(x, y)`, then count the inversions left in
/// `y` with a merge sort.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Misaligned(format!("{} vs {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::TooFew {
            what: "systems",
            needed: 2,
            got: n,
        });
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as u64;
    let tie_pairs = |eq: &dyn Fn(usize, usize) -> bool| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for i in 1..n {
            if eq(i - 1, i) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let n1 = tie_pairs(&|a, b| pairs[a].0 == pairs[b].0);
    let n3 = tie_pairs(&|a, b| pairs[a].0 == pairs[b].0 && pairs[a].1 == pairs[b].1);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = count_inversions(&mut ys);
    // `ys` is now sorted, so y-ties are adjacent.
    let n2 = tie_pairs(&|a, b| ys[a] == ys[b]);

    // concordant − discordant
    let s = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    tau_b(s, n0, n1, n2)
}

/// τ-b from the pair statistic and tie counts.
fn tau_b(s: i64, n0: u64, n1: u64, n2: u64) -> Result<f64> {
    if n1 == n0 || n2 == n0 {
        return Err(Error::UndefinedTau);
    }
    Ok(s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt())
}

/// Stable merge sort returning the number of strictly inverted pairs.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mut buf = v.to_vec();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if v[j] < v[i] {
                    buf[k] = v[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    buf[k] = v[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
            k += mid - i;
            buf[k..k + hi - j].copy_from_slice(&v[j..hi]);
            lo = hi;
        }
        v.copy_from_slice(&buf);
        width *= 2;
    }
    swaps
}

/// Whether larger metric values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

impl Orientation {
    pub fn of(metric: MetricId) -> Self {
        if metric.lower_is_better() {
            Orientation::LowerIsBetter
        } else {
            Orientation::HigherIsBetter
        }
    }

    fn goodness(self, v: f64) -> f64 {
        match self {
            Orientation::HigherIsBetter => v,
            Orientation::LowerIsBetter => -v,
        }
    }
}

/// τ-b between the orderings that two value maps induce on the same systems.
pub fn kendall_tau(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
    orientation_a: Orientation,
    orientation_b: Orientation,
) -> Result<f64> {
    if !a.keys().eq(b.keys()) {
        let ka: BTreeSet<_> = a.keys().collect();
        let kb: BTreeSet<_> = b.keys().collect();
        let diff: Vec<_> = ka.symmetric_difference(&kb).map(|s| s.as_str()).collect();
        return Err(Error::KeyMismatch(diff.join(", ")));
    }
    let x: Vec<f64> = a.values().map(|&v| orientation_a.goodness(v)).collect();
    let y: Vec<f64> = b.values().map(|&v| orientation_b.goodness(v)).collect();
    kendall_tau_b(&x, &y)
}

/// Systems ordered best-first by one metric under one judgment regime.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemRanking {
    pub metric: MetricId,
    pub regime: String,
    pub entries: Vec<(String, f64)>,
}

impl SystemRanking {
    pub fn from_values(metric: MetricId, regime: impl Into<String>, values: BTreeMap<String, f64>) -> Self {
        let o = Orientation::of(metric);
        let mut entries: Vec<(String, f64)> = values.into_iter().collect();
        // Ties fall back to tag order; τ-b works on the values, not on this order.
        entries.sort_by(|a, b| o.goodness(b.1).total_cmp(&o.goodness(a.1)).then_with(|| a.0.cmp(&b.0)));
        SystemRanking {
            metric,
            regime: regime.into(),
            entries,
        }
    }

    pub fn values(&self) -> BTreeMap<String, f64> {
        self.entries.iter().cloned().collect()
    }

    pub fn systems(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(s, _)| s.as_str())
    }
}

pub fn rank_systems(reports: &[MetricReport], metric: MetricId, regime: &str) -> Result<SystemRanking> {
    let mut values = BTreeMap::new();
    for r in reports {
        values.insert(r.system.clone(), r.value(metric)?);
    }
    Ok(SystemRanking::from_values(metric, regime, values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub metric: MetricId,
    pub regimes: (String, String),
    /// `None` when either ranking puts every system in one tie.
    pub tau: Option<f64>,
    pub n_systems: usize,
}

impl fmt::Display for CorrelationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t", self.metric, self.regimes.0, self.regimes.1, self.n_systems)?;
        fmt_tau(f, self.tau)
    }
}

fn fmt_tau(f: &mut dyn fmt::Write, tau: Option<f64>) -> fmt::Result {
    match tau {
        Some(t) => write!(f, "{t:.6}"),
        None => f.write_str("NA"),
    }
}

fn tau_text(tau: Option<f64>) -> String {
    let mut s = String::new();
    fmt_tau(&mut s, tau).expect("writing to a string");
    s
}

fn undefined_is_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(t) => Ok(Some(t)),
        Err(Error::UndefinedTau) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn correlate(a: &SystemRanking, b: &SystemRanking) -> Result<CorrelationReport> {
    let tau = undefined_is_none(kendall_tau(
        &a.values(),
        &b.values(),
        Orientation::of(a.metric),
        Orientation::of(b.metric),
    ))?;
    Ok(CorrelationReport {
        metric: a.metric,
        regimes: (a.regime.clone(), b.regime.clone()),
        tau,
        n_systems: a.entries.len(),
    })
}

/// Evaluates every run and returns one merged (micro + macro) report per run.
pub fn evaluate_all(ctx: &EvalContext, runs: &[RunSet], judgments: &JudgmentSet, cfg: &EvalConfig) -> Result<Vec<MetricReport>> {
    runs.par_iter()
        .map(|run| {
            let (mut micro, macro_) = evaluate(ctx, run, judgments, cfg)?;
            micro.merge(macro_);
            Ok(micro)
        })
        .collect()
}

/// Metrics present in every report, in canonical order.
pub fn common_metrics(reports: &[MetricReport]) -> Vec<MetricId> {
    let mut it = reports.iter();
    let Some(first) = it.next() else { return Vec::new() };
    let mut keep: BTreeSet<MetricId> = first.values.keys().copied().collect();
    for r in it {
        keep.retain(|m| r.values.contains_key(m));
    }
    keep.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub depth: u32,
    pub report: CorrelationReport,
}

/// τ between the sparse-label ranking and the ranking under the labels a
/// depth-`d` pool would have produced, for every metric and depth.
pub fn depth_sweep(
    ctx: &EvalContext,
    runs: &[RunSet],
    pool: &Pool,
    judgments: &JudgmentSet,
    cfg: &EvalConfig,
    depths: &[u32],
) -> Result<Vec<SweepPoint>> {
    let sparse = ctx.sparse_judgments();
    let base = evaluate_all(ctx, runs, &sparse, cfg)?;
    let metrics = common_metrics(&base);
    let base_rankings: Vec<SystemRanking> = metrics
        .iter()
        .map(|&m| rank_systems(&base, m, "sparse"))
        .collect::<Result<_>>()?;
    let per_depth: Vec<Vec<SweepPoint>> = depths
        .par_iter()
        .map(|&d| {
            let labels = qrels_at_depth(pool, judgments, d)?;
            let reports = evaluate_all(ctx, runs, &labels, cfg)?;
            let regime = format!("depth-{d}");
            base_rankings
                .iter()
                .map(|b| {
                    let r = rank_systems(&reports, b.metric, &regime)?;
                    Ok(SweepPoint {
                        depth: d,
                        report: correlate(b, &r)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut points: Vec<SweepPoint> = per_depth.into_iter().flatten().collect();
    points.sort_by(|a, b| a.report.metric.cmp(&b.report.metric).then(a.depth.cmp(&b.depth)));
    Ok(points)
}

/// `metric<TAB>depth<TAB>tau` curve rows.
pub fn write_sweep(points: &[SweepPoint], out: &mut dyn Write) -> std::io::Result<()> {
    for p in points {
        writeln!(out, "{}\t{}\t{}", p.report.metric, p.depth, tau_text(p.report.tau))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityPoint {
    pub metric: MetricId,
    pub size: f64,
    /// Mean τ over repeats whose τ is defined.
    pub mean_tau: Option<f64>,
    /// Repeats contributing to the mean.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub seed: u64,
    pub repeats: usize,
    pub points: Vec<StabilityPoint>,
}

impl StabilityReport {
    pub fn get(&self, metric: MetricId, size: f64) -> Option<&StabilityPoint> {
        self.points.iter().find(|p| p.metric == metric && p.size == size)
    }

    /// `metric<TAB>size<TAB>mean_tau` curve rows.
    pub fn write(&self, out: &mut dyn Write) -> std::io::Result<()> {
        for p in &self.points {
            writeln!(out, "{}\t{}\t{}", p.metric, p.size, tau_text(p.mean_tau))?;
        }
        Ok(())
    }
}

/// Per-unit vectors of one family, grouped into sampling units.
struct UnitTable {
    metrics: Vec<MetricId>,
    systems: Vec<String>,
    /// `values[metric][system][unit]`
    values: Vec<Vec<Vec<f64>>>,
    /// Units of each sampling group, ascending.
    groups: Vec<Vec<usize>>,
}

impl UnitTable {
    fn build(reports: &[MetricReport], family: Family) -> Result<Option<Self>> {
        let metrics: Vec<MetricId> = common_metrics(reports).into_iter().filter(|m| m.family == family).collect();
        if metrics.is_empty() {
            return Ok(None);
        }
        let ids = &reports[0].unit_ids;
        for r in reports {
            if &r.unit_ids != ids {
                return Err(Error::Misaligned(format!("{} has different {family:?} units", r.system)));
            }
        }
        if ids.is_empty() {
            return Err(Error::Empty(format!("{family:?} evaluation units")));
        }
        let values = metrics
            .iter()
            .map(|&m| reports.iter().map(|r| r.unit_values(m).map(<[f64]>::to_vec)).collect())
            .collect::<Result<_>>()?;
        Ok(Some(UnitTable {
            metrics,
            systems: reports.iter().map(|r| r.system.clone()).collect(),
            values,
            groups: sampling_groups(ids),
        }))
    }

    /// Mean of each system over the given units, in index order.
    fn means(&self, metric: usize, units: &[usize]) -> BTreeMap<String, f64> {
        self.systems
            .iter()
            .zip(&self.values[metric])
            .map(|(s, v)| {
                let sum: f64 = units.iter().map(|&u| v[u]).sum();
                (s.clone(), sum / units.len() as f64)
            })
            .collect()
    }
}

/// Micro units `t<i>:<direction>` of one test triple share a group; every
/// other unit is a group of its own.
fn sampling_groups(ids: &[String]) -> Vec<Vec<usize>> {
    let mut by_triple: BTreeMap<&str, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        match id.strip_prefix('t').and_then(|r| r.split_once(':')) {
            Some((t, _)) if t.bytes().all(|b| b.is_ascii_digit()) => {
                let g = *by_triple.entry(t).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(i);
            }
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn sample_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Mean τ between full-set and subsample rankings per metric and size.
/// Micro metrics sample test triples, macro metrics sample scored questions.
pub fn subsample_stability(
    ctx: &EvalContext,
    runs: &[RunSet],
    judgments: &JudgmentSet,
    cfg: &EvalConfig,
    sizes: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be at least 1".into()));
    }
    if let Some(s) = sizes.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
        return Err(Error::Invalid(format!("sample size {s} is outside (0, 1]")));
    }
    let mut micro_reports = Vec::new();
    let mut macro_reports = Vec::new();
    for run in runs {
        let (mi, ma) = evaluate(ctx, run, judgments, cfg)?;
        micro_reports.push(mi);
        macro_reports.push(ma);
    }
    let tables: Vec<(u64, UnitTable)> = [(0u64, micro_reports, Family::Micro), (1, macro_reports, Family::Macro)]
        .into_iter()
        .filter_map(|(stream, reps, fam)| UnitTable::build(&reps, fam).transpose().map(|t| t.map(|t| (stream, t))))
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    for (stream, table) in &tables {
        let all: Vec<usize> = (0..table.values[0][0].len()).collect();
        let full: Vec<BTreeMap<String, f64>> = (0..table.metrics.len()).map(|m| table.means(m, &all)).collect();
        let tasks: Vec<(usize, usize)> = (0..sizes.len()).flat_map(|s| (0..repeats).map(move |r| (s, r))).collect();
        // taus[task][metric]
        let taus: Vec<Vec<Option<f64>>> = tasks
            .par_iter()
            .map(|&(si, r)| {
                let k = sample_size(sizes[si], table.groups.len());
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[*stream, si as u64, r as u64]));
                let mut chosen = sample(&mut rng, table.groups.len(), k).into_vec();
                chosen.sort_unstable();
                let units: Vec<usize> = chosen.iter().flat_map(|&g| table.groups[g].iter().copied()).collect();
                (0..table.metrics.len())
                    .map(|m| {
                        let o = Orientation::of(table.metrics[m]);
                        undefined_is_none(kendall_tau(&full[m], &table.means(m, &units), o, o))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (m, &metric) in table.metrics.iter().enumerate() {
            for (si, &size) in sizes.iter().enumerate() {
                let defined: Vec<f64> = (0..repeats).filter_map(|r| taus[si * repeats + r][m]).collect();
                if defined.len() < repeats {
                    log::warn!(
                        "{metric} at size {size}: τ undefined in {} of {repeats} repeats",
                        repeats - defined.len()
                    );
                }
                points.push(StabilityPoint {
                    metric,
                    size,
                    mean_tau: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                    repeats: defined.len(),
                });
            }
        }
    }
    points.sort_by(|a, b| a.metric.cmp(&b.metric).then(a.size.total_cmp(&b.size)));
    Ok(StabilityReport { seed, repeats, points })
}

/// Two-tailed p-value of the paired Student t-test on `x − y`.
///
/// Zero-variance conventions: all differences zero gives 1, a constant
/// non-zero difference gives 0.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Misaligned(format!("{} vs {} units", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::TooFew {
            what: "paired units",
            needed: 2,
            got: n,
        });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(1.0);
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if d.iter().all(|&v| v == d[0]) || var == 0.0 {
        return Ok(0.0);
    }
    let t = mean / (var / nf).sqrt();
    Ok(t_two_tailed(t, nf - 1.0))
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom, via the
/// regularized incomplete beta function.
pub fn t_two_tailed(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// How micro per-answer vectors are paired in significance tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pairing {
    /// One unit per evaluated answer (two per test triple).
    #[default]
    PerAnswer,
    /// Head and tail units of a test triple averaged into one.
    PerTriple,
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-answer" | "answer" => Ok(Pairing::PerAnswer),
            "per-triple" | "triple" => Ok(Pairing::PerTriple),
            _ => Err(Error::Invalid(format!("pairing {s:?} (expected per-answer or per-triple)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PValueCurve {
    pub metric: MetricId,
    /// `(system, system, p)` sorted by descending p.
    pub pairs: Vec<(String, String, f64)>,
    /// Mean p-value.
    pub area: f64,
}

impl PValueCurve {
    pub fn p_values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.2).collect()
    }

    /// `metric<TAB>pair_index<TAB>p` curve rows, 1-based index.
    pub fn write(&self, out: &mut dyn Write) -> std::io::Result<()> {
        for (i, (_, _, p)) in self.pairs.iter().enumerate() {
            writeln!(out, "{}\t{}\t{p:.10}", self.metric, i + 1)?;
        }
        Ok(())
    }
}

fn paired_vector(report: &MetricReport, metric: MetricId, pairing: Pairing) -> Result<Vec<f64>> {
    let v = report.unit_values(metric)?;
    if pairing == Pairing::PerAnswer || metric.family == Family::Macro {
        return Ok(v.to_vec());
    }
    Ok(sampling_groups(&report.unit_ids)
        .iter()
        .map(|g| g.iter().map(|&i| v[i]).sum::<f64>() / g.len() as f64)
        .collect())
}

/// Paired t-test p-values over every unordered pair of systems.
pub fn discriminative_power(reports: &[MetricReport], metric: MetricId, pairing: Pairing) -> Result<PValueCurve> {
    if reports.len() < 2 {
        return Err(Error::TooFew {
            what: "systems",
            needed: 2,
            got: reports.len(),
        });
    }
    for r in &reports[1..] {
        if r.unit_ids != reports[0].unit_ids {
            return Err(Error::Misaligned(format!(
                "units of {} differ from {}",
                r.system, reports[0].system
            )));
        }
    }
    let vectors: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| paired_vector(r, metric, pairing))
        .collect::<Result<_>>()?;
    let idx: Vec<(usize, usize)> = (0..reports.len())
        .flat_map(|i| (i + 1..reports.len()).map(move |j| (i, j)))
        .collect();
    let mut pairs: Vec<(String, String, f64)> = idx
        .par_iter()
        .map(|&(i, j)| {
            let p = paired_t_test(&vectors[i], &vectors[j])?;
            Ok((reports[i].system.clone(), reports[j].system.clone(), p))
        })
        .collect::<Result<_>>()?;
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (&a.0, &a.1).cmp(&(&b.0, &b.1))));
    let area = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
    Ok(PValueCurve { metric, pairs, area })
}

/// τ per (category/direction cell, micro metric) between sparse and complete labels.
pub type CategoryTable = BTreeMap<(Category, Direction), BTreeMap<MetricId, CorrelationReport>>;

pub fn category_correlation(
    ctx: &EvalContext,
    runs: &[RunSet],
    sparse: &JudgmentSet,
    complete: &JudgmentSet,
    cfg: &EvalConfig,
    stats: &BTreeMap<RelationId, RelationStats>,
) -> Result<CategoryTable> {
    let vocab = &ctx.splits.vocab;
    // cell -> regime -> system -> metric -> value
    type Cells = BTreeMap<GroupKey, BTreeMap<String, BTreeMap<MetricId, f64>>>;
    let mut regimes: [Cells; 2] = Default::default();
    for (slot, labels) in [sparse, complete].into_iter().enumerate() {
        let per_run: Vec<_> = runs
            .par_iter()
            .map(|run| micro_units(ctx, run, labels, cfg).map(|u| (run.tag.clone(), u)))
            .collect::<Result<_>>()?;
        for (tag, units) in per_run {
            for (key, us) in group_units(&units, GroupBy::CategoryDirection(stats), vocab) {
                let vals = cfg
                    .micro_metrics()
                    .into_iter()
                    .map(|m| {
                        let mean = us.iter().map(|u| unit_value(m.name, u.rank)).sum::<f64>() / us.len() as f64;
                        (m, mean)
                    })
                    .collect();
                regimes[slot].entry(key).or_default().insert(tag.clone(), vals);
            }
        }
    }
    let mut table = CategoryTable::new();
    for (key, sys_a) in &regimes[0] {
        let GroupKey::CategoryDirection(cat, dir) = key else { continue };
        let Some(sys_b) = regimes[1].get(key) else { continue };
        if sys_a.len() != runs.len() || sys_b.len() != runs.len() {
            continue;
        }
        let mut row = BTreeMap::new();
        for m in cfg.micro_metrics() {
            let pick = |s: &BTreeMap<String, BTreeMap<MetricId, f64>>| s.iter().map(|(t, v)| (t.clone(), v[&m])).collect();
            let a = SystemRanking::from_values(m, "sparse", pick(sys_a));
            let b = SystemRanking::from_values(m, "complete", pick(sys_b));
            row.insert(m, correlate(&a, &b)?);
        }
        table.insert((*cat, *dir), row);
    }
    Ok(table)
}

/// Matrix TSV: one row per category/direction cell, one column per metric;
/// absent cells are written as `NA`.
pub fn write_category_table(table: &CategoryTable, metrics: &[MetricId], out: &mut dyn Write) -> std::io::Result<()> {
    let head: Vec<String> = metrics.iter().map(ToString::to_string).collect();
    writeln!(out, "cell\t{}", head.join("\t"))?;
    for c in Category::ALL {
        for d in Direction::BOTH {
            let row = table.get(&(c, d));
            let cells: Vec<String> = metrics
                .iter()
                .map(|m| tau_text(row.and_then(|r| r.get(m)).and_then(|r| r.tau)))
                .collect();
            writeln!(out, "{c}/{d}\t{}", cells.join("\t"))?;
        }
    }
    Ok(())
}

/// Reads `system<TAB>metric<TAB>value` rows into one report per system.
pub fn load_report_table(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let mut by_system: BTreeMap<String, MetricReport> = BTreeMap::new();
    for (ln, line) in data_lines(&text) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::malformed(path, ln, "expected system<TAB>metric<TAB>value"));
        }
        let metric: MetricId = f[1].parse()?;
        let value: f64 = f[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::malformed(path, ln, "bad metric value"))?;
        let r = by_system.entry(f[0].to_owned()).or_insert_with(|| MetricReport {
            system: f[0].to_owned(),
            ..Default::default()
        });
        r.values.insert(metric, value);
    }
    Ok(by_system.into_values().collect())
}
