//! Acceptance suite: one PASS/FAIL line per criterion, each with its
//! runtime budget. Runs without the libtest harness so the lines are always
//! printed; the process exits non-zero when any criterion fails.

// `ensure!` negates comparisons on purpose so NaN fails a check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{baseline_runs, campaign_fixture, judgment, SyntheticGraph};
use kgeval::annotation::{
    AnnotationTask, Campaign, CampaignManifest, CampaignStore, CarriedLabel, Role, TaskState, Verdict,
};
use kgeval::error::Error;
use kgeval::kg::{
    kl_divergence, Category, Direction, GraphSplits, Qid, QuestionKey, RelationDistribution, RelationId,
    RelationStats, Smoothing, Vocab,
};
use kgeval::meta_eval::{depth_sweep, kendall_tau_b, paired_t_test, subsample_stability, write_sweep};
use kgeval::metrics::{
    macro_eval, macro_questions, micro_aggregate, micro_eval, micro_units, unit_value, EvalConfig, EvalContext,
    FilterRegime, JudgmentEntry, JudgmentSet, Label, MetricId, MetricName, MicroUnits, Provenance,
};
use kgeval::pooling::{
    build_pool, filter_trivial, qrels_at_depth, trivial_rule, Pool, PoolEntry, PoolQuestion, PoolStatus, TrivialRule,
    TypeProfile,
};
use kgeval::ranking::{baseline_run, load_run, BaselineMode, Completeness, RankedList, RunData, RunFormat, RunSet};

type Outcome = Result<Status, String>;

enum Status {
    Pass(String),
    Skip(String),
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

#[derive(Clone, Copy, PartialEq)]
enum Tally {
    Passed,
    Skipped,
    Failed,
}

fn run_criterion(name: &str, budget: Duration, f: fn() -> Outcome) -> Tally {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let secs = elapsed.as_secs_f64();
    match result {
        Ok(Ok(Status::Pass(detail))) if elapsed <= budget => {
            println!("PASS  {name}: {detail} ({secs:.2} s)");
            Tally::Passed
        }
        Ok(Ok(Status::Pass(detail))) => {
            println!("FAIL  {name}: {detail}, but took {secs:.2} s (budget {} s)", budget.as_secs());
            Tally::Failed
        }
        Ok(Ok(Status::Skip(why))) => {
            println!("SKIP  {name}: {why}");
            Tally::Skipped
        }
        Ok(Err(why)) => {
            println!("FAIL  {name}: {why} ({secs:.2} s)");
            Tally::Failed
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            println!("FAIL  {name}: panic: {msg}");
            Tally::Failed
        }
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("trec_eval compatibility", 5, trec_eval_compatibility),
        ("relation-weighted micro identity", 10, micro_identity),
        ("sparsity mechanism", 1, sparsity_mechanism),
        ("Kendall tau oracle", 5, kendall_oracle),
        ("t-test oracle", 10, t_test_oracle),
        ("depth-sweep monotonicity and determinism", 30, depth_sweep_criterion),
        ("stability harness", 60, stability_harness),
        ("pooling arithmetic", 1, pooling_arithmetic),
        ("annotation state machine", 1, annotation_state_machine),
        ("ingestion check", 10, ingestion_check),
    ];
    let tallies: Vec<Tally> = criteria
        .iter()
        .map(|&(name, secs, f)| run_criterion(name, Duration::from_secs(secs), f))
        .collect();
    let count = |t| tallies.iter().filter(|&&x| x == t).count();
    println!(
        "acceptance: {} passed, {} skipped, {} failed",
        count(Tally::Passed),
        count(Tally::Skipped),
        count(Tally::Failed)
    );
    if count(Tally::Failed) == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// trec_eval compatibility

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/trec")
}

fn trec_eval_compatibility() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut checked = 0;
    for pair in ["pair1", "pair2", "pair3"] {
        let dir = fixture_dir().join(pair);
        let splits = ok(GraphSplits::load(dir.join("train.txt"), dir.join("valid.txt"), dir.join("test.txt")))?;
        let ctx = EvalContext::new(splits);
        let run = ok(load_run(dir.join("run.txt"), RunFormat::Ranked, &ctx.questions, &ctx.splits.vocab))?;
        let qrels = ok(JudgmentSet::load_qrels(dir.join("qrels.txt")))?;
        let expected: serde_json::Value =
            ok(serde_json::from_str(&ok(std::fs::read_to_string(dir.join("expected.json")))?))?;

        let (questions, _) = ok(macro_questions(&ctx, &run, &qrels))?;
        let per_query = expected["per_query"].as_object().ok_or("expected.json lacks per_query")?;
        ensure!(
            questions.len() == per_query.len(),
            "{pair}: {} scored questions, reference has {}",
            questions.len(),
            per_query.len()
        );
        let pairs = [
            ("recip_rank", MetricName::Mrr),
            ("map_cut_20", MetricName::Map20),
            ("ndcg_cut_20", MetricName::Ndcg20),
        ];
        for q in &questions {
            let reference = &per_query[&q.qid.to_string()];
            for (measure, name) in pairs {
                let want = reference[measure].as_f64().ok_or(format!("{pair}: no {measure} for {}", q.qid))?;
                let got = q.value(name);
                ensure!((got - want).abs() <= TOL, "{pair} {} {measure}: {got} vs reference {want}", q.qid);
                checked += 1;
            }
        }
        let report = ok(macro_eval(&ctx, &run, &qrels, &[1]))?;
        for (measure, id) in [
            ("recip_rank", MetricId::MACRO_MRR),
            ("map_cut_20", MetricId::MAP20),
            ("ndcg_cut_20", MetricId::NDCG20),
        ] {
            let want = expected["aggregate"][measure].as_f64().ok_or("missing aggregate")?;
            let got = ok(report.value(id))?;
            ensure!((got - want).abs() <= TOL, "{pair} aggregate {measure}: {got} vs reference {want}");
        }
    }
    Ok(Status::Pass(format!("3 fixture pairs, {checked} per-query values within 1e-4")))
}

// ---------------------------------------------------------------------------
// Relation-weighted micro aggregation equals the plain average

fn micro_identity() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1d);
    let metrics = [MetricName::Mr, MetricName::Mrr, MetricName::Hits(1), MetricName::Hits(3), MetricName::Hits(10)];
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let total = rng.gen_range(20..=1000);
        let relations = rng.gen_range(1..=50);
        let entities = rng.gen_range(10..=120);
        let graph = SyntheticGraph::generate(1000 + i, total, entities, relations, 0.3, 0.0);
        let ctx = EvalContext::new(graph.splits());
        let run = ok(baseline_run(&ctx.splits, &ctx.questions, BaselineMode::Random { seed: i }))?;
        let units = ok(micro_units(&ctx, &run, &ctx.sparse_judgments(), &EvalConfig::default()))?;
        ensure!(
            units.len() == 2 * ctx.splits.test.len(),
            "split {i}: {} units for {} test triples",
            units.len(),
            ctx.splits.test.len()
        );
        for m in metrics {
            let plain = units.iter().map(|u| unit_value(m, u.rank)).sum::<f64>() / units.len() as f64;
            let weighted = micro_aggregate(&units, m, None);
            let diff = (plain - weighted).abs();
            worst = worst.max(diff);
            ensure!(diff <= TOL, "split {i} {m:?}: weighted {weighted} vs plain {plain}");
        }
    }
    Ok(Status::Pass(format!("100 splits, max deviation {worst:.1e}")))
}

// ---------------------------------------------------------------------------
// Sparse judgments hide the difference made by an unlabelled true answer

fn full_list(q: Qid, order: &[&str], vocab: &Vocab) -> Result<RankedList, String> {
    let n = order.len();
    let entries = order
        .iter()
        .enumerate()
        .map(|(i, e)| (vocab.entity(e).expect("known entity"), (n - i) as f64))
        .collect();
    ok(RankedList::new(q, entries, Completeness::Full, vocab))
}

fn sparsity_mechanism() -> Outcome {
    let train = [("a", "r", "b"), ("c", "r", "d"), ("h", "s", "y"), ("z", "s", "w"), ("x", "s", "w")];
    let test = [("h", "r", "t")];
    let ctx = EvalContext::new(ok(GraphSplits::from_names(&train, &[], &test))?);
    let vocab = &ctx.splits.vocab;
    let t = ctx.splits.test[0];
    let tail_q = ctx.questions.qid_of(&QuestionKey::of(Direction::Tail, &t)).ok_or("tail question")?;
    let head_q = ctx.questions.qid_of(&QuestionKey::of(Direction::Head, &t)).ok_or("head question")?;

    // `x` is a true tail of (h, r, ?) that the test split does not contain.
    // Both systems rank `t` first; they differ only in where `x` goes.
    let head_order = ["h", "a", "b", "c", "d", "t", "x", "y", "z", "w"];
    let system = |tag: &str, tail_order: [&str; 10]| -> Result<RunSet, String> {
        let mut lists = BTreeMap::new();
        lists.insert(tail_q, full_list(tail_q, &tail_order, vocab)?);
        lists.insert(head_q, full_list(head_q, &head_order, vocab)?);
        Ok(RunSet {
            tag: tag.into(),
            data: RunData::Ranked(lists),
        })
    };
    let high = system("x-high", ["t", "x", "a", "b", "c", "d", "h", "y", "z", "w"])?;
    let low = system("x-low", ["t", "a", "b", "c", "d", "h", "y", "z", "w", "x"])?;

    let sparse = ctx.sparse_judgments();
    let mut complete = sparse.clone();
    ok(complete.insert(
        tail_q,
        "x",
        JudgmentEntry {
            label: Label::Positive,
            provenance: Provenance::Annotated,
            depth: 2,
        },
    ))?;
    let cfg = EvalConfig {
        units: MicroUnits::AllPositives,
        regime: FilterRegime::Inclusive,
        ..Default::default()
    };
    let mrr = |run: &RunSet, j: &JudgmentSet| -> Result<f64, String> {
        ok(ok(micro_eval(&ctx, run, j, &cfg))?.value(MetricId::MICRO_MRR))
    };
    let (s_high, s_low) = (mrr(&high, &sparse)?, mrr(&low, &sparse)?);
    let (c_high, c_low) = (mrr(&high, &complete)?, mrr(&low, &complete)?);
    ensure!(s_high == s_low, "sparse Micro MRR differs: {s_high} vs {s_low}");
    ensure!(c_high != c_low, "complete Micro MRR identical: {c_high}");
    ensure!(c_high > c_low, "hidden-positive-high system scores lower: {c_high} vs {c_low}");
    Ok(Status::Pass(format!(
        "sparse {s_high:.4} = {s_low:.4}; complete {c_high:.4} > {c_low:.4}"
    )))
}

// ---------------------------------------------------------------------------
// Kendall τ-b against pair enumeration

fn brute_force_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut s, mut n1, mut n2) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let b = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            s += a * b;
            n1 += u64::from(a == 0);
            n2 += u64::from(b == 0);
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    if n1 == n0 || n2 == n0 {
        return None;
    }
    Some(s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt())
}

fn kendall_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a);
    let (mut with_ties, mut undefined) = (0, 0);
    for i in 0..1000 {
        let n = rng.gen_range(2..=10);
        let ties = i % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if ties {
                (0..n).map(|_| f64::from(rng.gen_range(0..4))).collect()
            } else {
                let mut v: Vec<f64> = (0..n).map(|k| k as f64).collect();
                v.shuffle(rng);
                v
            }
        };
        let (x, y) = (draw(&mut rng), draw(&mut rng));
        let oracle = brute_force_tau(&x, &y);
        match (kendall_tau_b(&x, &y), oracle) {
            (Ok(got), Some(want)) => ensure!(got == want, "case {i}: {got} vs brute force {want} for {x:?} {y:?}"),
            (Err(Error::UndefinedTau), None) => undefined += 1,
            (got, want) => return Err(format!("case {i}: {got:?} vs brute force {want:?} for {x:?} {y:?}")),
        }
        with_ties += usize::from(ties);

        if !ties {
            let rev: Vec<f64> = x.iter().map(|v| -v).collect();
            ensure!(ok(kendall_tau_b(&x, &x))? == 1.0, "tau(A, A) != 1 for {x:?}");
            ensure!(ok(kendall_tau_b(&x, &rev))? == -1.0, "tau(A, reverse A) != -1 for {x:?}");
        }
    }
    Ok(Status::Pass(format!(
        "1000 rankings ({with_ties} with ties, {undefined} undefined on both sides) match exactly"
    )))
}

// ---------------------------------------------------------------------------
// Paired t-test against numerical integration of the t density

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = C[1..].iter().enumerate().fold(C[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

fn t_density(u: f64, df: f64) -> f64 {
    let log_norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (log_norm - (df + 1.0) / 2.0 * (1.0 + u * u / df).ln()).exp()
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = (a + b) / 2.0;
        let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f((a + b) / 2.0));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Two-tailed p by integrating the density over [0, |t|].
fn t_oracle(t: f64, df: f64) -> f64 {
    let f = |u: f64| t_density(u, df);
    let mut central = 0.0;
    let mut lo = 0.0;
    // unit-width panels keep the peaked density well resolved
    while lo < t.abs() {
        let hi = (lo + 1.0).min(t.abs());
        central += adaptive_simpson(&f, lo, hi, 1e-14);
        lo = hi;
    }
    (1.0 - 2.0 * central).max(0.0)
}

fn t_test_oracle() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.gen_range(5..=500);
        let shift = rng.gen_range(-0.2..0.2);
        let noise = rng.gen_range(0.05..1.0);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + shift + noise * (rng.gen::<f64>() - 0.5)).collect();

        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let nf = n as f64;
        let mean = d.iter().sum::<f64>() / nf;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let t = mean / (sd / nf.sqrt());
        let want = t_oracle(t, nf - 1.0);
        let got = ok(paired_t_test(&x, &y))?;
        let diff = (got - want).abs();
        worst = worst.max(diff);
        ensure!(diff <= TOL, "case {case} (n={n}, t={t:.4}): p {got} vs oracle {want}");
    }
    Ok(Status::Pass(format!("200 paired vectors, max deviation {worst:.1e}")))
}

// ---------------------------------------------------------------------------
// Depth sweep

fn in_pool(threads: usize, f: impl FnOnce() -> Result<Vec<u8>, String> + Send) -> Result<Vec<u8>, String> {
    let pool = ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build())?;
    pool.install(f)
}

fn depth_sweep_criterion() -> Outcome {
    let fx = campaign_fixture(0x5eed);
    let mut previous: Option<JudgmentSet> = None;
    for d in 0..=fx.pool.depth {
        let q = ok(qrels_at_depth(&fx.pool, &fx.complete, d))?;
        if let Some(prev) = &previous {
            for (qid, e, j) in prev.iter() {
                let later = q.get(qid, e).ok_or(format!("{qid} {e} present at depth {} but not {d}", d - 1))?;
                ensure!(later.label == j.label, "{qid} {e} changes label between depths {} and {d}", d - 1);
            }
        }
        previous = Some(q);
    }
    let full = previous.expect("at least one depth");
    let labels = |j: &JudgmentSet| j.iter().map(|(q, e, x)| (q, e.to_owned(), x.label)).collect::<Vec<_>>();
    ensure!(labels(&full) == labels(&fx.complete), "depth = pool depth does not reproduce the complete labels");

    let cfg = EvalConfig::default();
    let depths: Vec<u32> = (0..=fx.pool.depth).collect();
    let sweep = |threads| {
        in_pool(threads, || {
            let points = ok(depth_sweep(&fx.ctx, &fx.runs, &fx.pool, &fx.complete, &cfg, &depths))?;
            let mut out = Vec::new();
            ok(write_sweep(&points, &mut out))?;
            Ok(out)
        })
    };
    let serial = sweep(1)?;
    let parallel = sweep(4)?;
    let again = sweep(4)?;
    ensure!(serial == parallel, "serial and parallel sweep output differ");
    ensure!(parallel == again, "two parallel sweeps differ");
    let text = String::from_utf8(serial).map_err(|e| e.to_string())?;
    for line in text.lines().filter(|l| l.split('\t').nth(1) == Some("0")) {
        ensure!(line.ends_with("\t1.000000"), "sparse vs depth-0 tau is not 1: {line}");
    }
    let c = fx.pool.counts();
    Ok(Status::Pass(format!(
        "{} pool entries ({} pending, {} trivial), 11 depths nested, {} sweep bytes identical serial/parallel",
        fx.pool.len(),
        c.pending,
        c.trivial,
        text.len()
    )))
}

// ---------------------------------------------------------------------------
// Stability harness

fn stability_harness() -> Outcome {
    let graph = SyntheticGraph::generate(0x51ab, 6000, 300, 30, 1000.0 / 6000.0, 0.0);
    let ctx = EvalContext::new(graph.splits());
    ensure!(ctx.splits.test.len() == 1000, "fixture has {} test triples", ctx.splits.test.len());
    let runs = baseline_runs(&ctx);
    let judgments = ctx.sparse_judgments();
    let cfg = EvalConfig::default();
    let sizes: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();

    let timed = Instant::now();
    let report = ok(subsample_stability(&ctx, &runs, &judgments, &cfg, &sizes, 50, 42))?;
    let elapsed = timed.elapsed();

    let metrics: BTreeSet<MetricId> = report.points.iter().map(|p| p.metric).collect();
    ensure!(metrics.len() == cfg.micro_metrics().len() + cfg.macro_metrics().len(), "metrics missing: {metrics:?}");
    for &m in &metrics {
        let p = report.get(m, 1.0).ok_or(format!("{m}: no point at size 1.0"))?;
        ensure!(p.mean_tau == Some(1.0), "{m}: mean tau {:?} at size 1.0", p.mean_tau);
    }
    let bytes = |threads| {
        in_pool(threads, || {
            let r = ok(subsample_stability(&ctx, &runs, &judgments, &cfg, &sizes, 50, 42))?;
            let mut out = Vec::new();
            ok(r.write(&mut out))?;
            Ok(out)
        })
    };
    let mut first = Vec::new();
    ok(report.write(&mut first))?;
    ensure!(bytes(1)? == first, "single-threaded report differs");
    ensure!(bytes(3)? == first, "three-threaded report differs");
    ensure!(elapsed <= Duration::from_secs(60), "50 x 10 run took {:.1} s", elapsed.as_secs_f64());
    Ok(Status::Pass(format!(
        "{} metrics at tau 1.0 for size 100%, reports identical at 1/3/default threads, 50 x 10 in {:.1} s",
        metrics.len(),
        elapsed.as_secs_f64()
    )))
}

// ---------------------------------------------------------------------------
// Pooling arithmetic

fn pooling_arithmetic() -> Outcome {
    let graph = SyntheticGraph::generate(0x9001, 400, 30, 6, 0.1, 0.0);
    let ctx = EvalContext::new(graph.splits());
    let runs = baseline_runs(&ctx);
    let seeds: BTreeSet<Qid> = ctx.questions.iter().map(|(q, _)| q.qid).collect();
    let keys = |p: &Pool| p.entries.keys().cloned().collect::<BTreeSet<_>>();
    let mut by_systems: Option<BTreeSet<(Qid, String)>> = None;
    for s in 1..=runs.len() {
        let mut by_depth: Option<BTreeSet<(Qid, String)>> = None;
        for d in 1..=10u32 {
            let pool = ok(build_pool(&ctx, &seeds, &runs[..s], d))?;
            let bound = seeds.len() * s * d as usize;
            ensure!(pool.len() <= bound, "{s} systems depth {d}: {} entries > bound {bound}", pool.len());
            let k = keys(&pool);
            if let Some(prev) = &by_depth {
                ensure!(prev.is_subset(&k), "{s} systems: pool shrinks from depth {} to {d}", d - 1);
            }
            if d == 10 {
                if let Some(prev) = &by_systems {
                    ensure!(prev.is_subset(&k), "depth 10: pool shrinks from {} to {s} systems", s - 1);
                }
                by_systems = Some(k.clone());
            }
            by_depth = Some(k);
        }
    }

    // One case per category x direction for the mapping rules, and the
    // type rule for each slot (consistent, inconsistent, unprofiled).
    let mut types = TypeProfile::default();
    for rel in ["r11", "r1n", "rn1", "rnn"] {
        types.insert(rel, Direction::Head, "fits");
        types.insert(rel, Direction::Tail, "fits");
    }
    use Category::*;
    use Direction::*;
    use TrivialRule::*;
    let table: [(&str, Category, Direction, &str, Option<TrivialRule>); 12] = [
        ("r11", OneToOne, Head, "fits", Some(HeadOfSingleHeaded)),
        ("r1n", OneToMany, Head, "fits", Some(HeadOfSingleHeaded)),
        ("rn1", ManyToOne, Head, "fits", None),
        ("rnn", ManyToMany, Head, "fits", None),
        ("r11", OneToOne, Tail, "fits", Some(TailOfSingleTailed)),
        ("r1n", OneToMany, Tail, "fits", None),
        ("rn1", ManyToOne, Tail, "fits", Some(TailOfSingleTailed)),
        ("rnn", ManyToMany, Tail, "fits", None),
        ("rnn", ManyToMany, Head, "misfit", Some(TypeMismatch)),
        ("rnn", ManyToMany, Tail, "misfit", Some(TypeMismatch)),
        ("r11", OneToOne, Head, "misfit", Some(TypeMismatch)),
        ("unprofiled", ManyToMany, Tail, "misfit", None),
    ];
    let mut vocab = Vocab::default();
    let mut stats = BTreeMap::new();
    let mut pool = Pool {
        questions: BTreeMap::new(),
        originals: BTreeMap::new(),
        entries: BTreeMap::new(),
        systems: vec!["s".into()],
        depth: 1,
    };
    for (i, &(rel, cat, dir, entity, want)) in table.iter().enumerate() {
        let q = PoolQuestion {
            direction: dir,
            anchor: "anchor".into(),
            relation: rel.into(),
        };
        let got = trivial_rule(&q, entity, Some(cat), &types);
        ensure!(got == want, "case {i} ({rel} {cat} {dir} {entity}): {got:?}, expected {want:?}");

        let relation: RelationId = vocab.intern_relation(rel);
        stats.entry(relation).or_insert(RelationStats {
            relation,
            test_count: 1,
            avg_tails_per_head: 1.into(),
            avg_heads_per_tail: 1.into(),
            category: cat,
        });
        let qid = Qid(i as u32 + 1);
        pool.questions.insert(qid, q);
        pool.originals.insert(qid, BTreeSet::from(["answer".to_owned()]));
        for (entity, status) in [(entity, PoolStatus::Pending), ("answer", PoolStatus::Judged(Label::Positive))] {
            pool.entries.insert(
                (qid, entity.to_owned()),
                PoolEntry {
                    qid,
                    entity: entity.to_owned(),
                    ranks: BTreeMap::from([("s".to_owned(), 1)]),
                    min_depth: 1,
                    status,
                },
            );
        }
    }
    let filtered = filter_trivial(&pool, &stats, &vocab, &types);
    for (i, &(.., entity, want)) in table.iter().enumerate() {
        let qid = Qid(i as u32 + 1);
        let status = filtered.entries[&(qid, entity.to_owned())].status;
        let expected = if want.is_some() { PoolStatus::TrivialNegative } else { PoolStatus::Pending };
        ensure!(status == expected, "case {i}: filtered status {status:?}, expected {expected:?}");
        let original = filtered.entries[&(qid, "answer".to_owned())].status;
        ensure!(original == PoolStatus::Judged(Label::Positive), "case {i}: original answer became {original:?}");
    }

    // Trivial entries reach the exported judgments as negatives.
    let tasks: Vec<AnnotationTask> = kgeval::pooling::render_tasks(
        &filtered,
        &kgeval::pooling::TemplateSet::default(),
        &kgeval::pooling::EntityLabels::default(),
    );
    let manifest = CampaignManifest::from_pool(&filtered, tasks, vec!["A".into(), "B".into()], vec!["wikipedia.org".into()]);
    let mut campaign = ok(Campaign::new(manifest))?;
    let ids: Vec<u32> = campaign.tasks().iter().map(|t| t.task_id).collect();
    for id in ids {
        ok(campaign.submit(judgment(id, "A", Verdict::Yes, Role::Primary)))?;
        ok(campaign.submit(judgment(id, "B", Verdict::Yes, Role::Primary)))?;
    }
    let exported = ok(campaign.export_judgments())?;
    let mut trivial = 0;
    for e in filtered.entries.values().filter(|e| e.status == PoolStatus::TrivialNegative) {
        let j = exported.get(e.qid, &e.entity).ok_or(format!("trivial {} {} missing", e.qid, e.entity))?;
        ensure!(j.label == Label::Negative, "trivial {} {} exported as {:?}", e.qid, e.entity, j.label);
        ensure!(j.provenance == Provenance::TrivialFiltered, "trivial {} {} has provenance {:?}", e.qid, e.entity, j.provenance);
        trivial += 1;
    }
    Ok(Status::Pass(format!(
        "60 pools within bound and nested; 12 rule cases; {trivial} trivial entries exported as negatives"
    )))
}

// ---------------------------------------------------------------------------
// Annotation state machine

fn ten_task_manifest() -> CampaignManifest {
    CampaignManifest {
        tasks: (1..=10)
            .map(|id| AnnotationTask {
                task_id: id,
                qid: Qid(1),
                entity: format!("e{id}"),
                entity_label: format!("e{id}"),
                triple: ["anchor".into(), "r".into(), format!("e{id}")],
                question_text: format!("is (anchor, r, e{id}) a true fact?"),
                fallback: true,
                min_depth: 1,
            })
            .collect(),
        roster: vec!["A".into(), "B".into(), "C".into()],
        allowlist: vec!["wikipedia.org".into()],
        carried: vec![CarriedLabel {
            qid: Qid(1),
            entity: "answer".into(),
            label: Label::Positive,
            provenance: Provenance::Original,
            depth: 0,
        }],
    }
}

fn annotation_state_machine() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let mut store = ok(CampaignStore::create(dir.path(), ten_task_manifest()))?;
    let state = |s: &CampaignStore, id| s.campaign().state(id).map_err(|e| e.to_string());

    ensure!(state(&store, 1)? == TaskState::Unassigned, "fresh task not unassigned");
    ok(store.submit(judgment(1, "A", Verdict::Yes, Role::Primary)))?;
    ensure!(state(&store, 1)? == TaskState::Assigned(vec!["A".into()]), "one primary judgment: {:?}", state(&store, 1)?);
    ok(store.submit(judgment(1, "B", Verdict::Yes, Role::Primary)))?;
    ensure!(state(&store, 1)? == TaskState::Resolved(Label::Positive), "yes+yes: {:?}", state(&store, 1)?);

    ok(store.submit(judgment(2, "A", Verdict::Yes, Role::Primary)))?;
    ok(store.submit(judgment(2, "B", Verdict::No, Role::Primary)))?;
    ensure!(state(&store, 2)? == TaskState::Conflicted, "yes+no: {:?}", state(&store, 2)?);
    ensure!(store.campaign().conflicts().len() == 1, "conflict list");
    ensure!(
        store.submit(judgment(2, "A", Verdict::No, Role::Adjudicator)).is_err(),
        "a primary annotator adjudicated their own conflict"
    );
    ok(store.submit(judgment(2, "C", Verdict::No, Role::Adjudicator)))?;
    ensure!(state(&store, 2)? == TaskState::Resolved(Label::Negative), "adjudicated: {:?}", state(&store, 2)?);

    let before = store.campaign().log().len();
    let mut off_list = judgment(3, "A", Verdict::Yes, Role::Primary);
    off_list.source_url = "https://www.example.com/fact".into();
    ensure!(matches!(store.submit(off_list), Err(Error::Rejected(_))), "off-allowlist source accepted");
    let mut lookalike = judgment(3, "A", Verdict::Yes, Role::Primary);
    lookalike.source_url = "https://notwikipedia.org/fact".into();
    ensure!(store.submit(lookalike).is_err(), "look-alike host accepted");
    ensure!(
        store.submit(judgment(1, "A", Verdict::No, Role::Primary)).is_err(),
        "duplicate judgment accepted"
    );
    ensure!(store.campaign().log().len() == before, "rejected judgments were logged");

    for id in 3..=10 {
        ok(store.submit(judgment(id, "A", Verdict::No, Role::Primary)))?;
        ok(store.submit(judgment(id, "B", Verdict::No, Role::Primary)))?;
    }
    let agreement = ok(store.campaign().agreement())?;
    ensure!(agreement.double_judged == 10, "double-judged {}", agreement.double_judged);
    ensure!(agreement.rate == 0.9, "agreement {}", agreement.rate);
    ensure!(store.campaign().progress().pending == 0, "tasks left pending");

    // Replay from the log, in memory and from disk.
    let live = store.campaign();
    let replayed = ok(Campaign::replay(live.manifest().clone(), live.log().to_vec()))?;
    let reopened = ok(CampaignStore::open(dir.path()))?;
    for other in [&replayed, reopened.campaign()] {
        for id in 1..=10 {
            ensure!(other.state(id).ok() == live.state(id).ok(), "task {id}: replayed state differs");
        }
        ensure!(other.progress() == live.progress(), "replayed progress differs");
        ensure!(other.agreement().ok() == live.agreement().ok(), "replayed agreement differs");
        ensure!(
            other.export_judgments().ok() == live.export_judgments().ok(),
            "replayed export differs"
        );
    }
    let exported = ok(live.export_judgments())?;
    ensure!(exported.len() == 11 && exported.positive_count() == 2, "export: {} labels", exported.len());
    Ok(Status::Pass(format!(
        "states, rejections and replay exact; agreement {} on 10 tasks",
        agreement.rate
    )))
}

// ---------------------------------------------------------------------------
// Ingestion of the published data (only when supplied)

pub const DATA_ENV: &str = "KGC_EVAL_DATA_DIR";

fn ingestion_check() -> Outcome {
    let Some(root) = std::env::var_os(DATA_ENV).map(PathBuf::from) else {
        return Ok(Status::Skip(format!("{DATA_ENV} not set")));
    };
    let fb = root.join("FB15k-237");
    let splits = ok(GraphSplits::load(fb.join("train.txt"), fb.join("valid.txt"), fb.join("test.txt")))?;
    ensure!(splits.test.len() == 20_466, "FB15k-237 test split has {} triples", splits.test.len());

    let labelled = ok(std::fs::read_to_string(root.join("FB-Test-S-C.tsv")))?;
    let (mut total, mut pos, mut neg) = (0usize, 0usize, 0usize);
    for (i, line) in labelled.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        ensure!(f.len() == 4, "FB-Test-S-C.tsv:{}: expected 4 columns", i + 1);
        match ok(f[3].trim().parse::<Label>())? {
            Label::Positive => pos += 1,
            Label::Negative => neg += 1,
        }
        total += 1;
    }
    ensure!(
        (total, pos, neg) == (22_492, 2_738, 19_754),
        "FB-Test-S-C: {total} triples / {pos} positives / {neg} negatives"
    );

    let dist = |name: &str| -> Result<RelationDistribution, String> {
        let triples = ok(GraphSplits::load_triples_named(root.join(name)))?;
        let mut counts: HashMap<String, u64> = HashMap::new();
        for (_, p, _) in triples {
            *counts.entry(p).or_default() += 1;
        }
        ok(RelationDistribution::from_counts(counts))
    };
    let kld = ok(kl_divergence(&dist("FB-Test-S.txt")?, &dist("FB-Test-O.txt")?, Smoothing::default()))?;
    ensure!((kld - 0.0889).abs() <= 0.005, "KLD(FB-Test-S || FB-Test-O) = {kld:.4}");
    Ok(Status::Pass(format!(
        "20466 test triples; {total}/{pos}/{neg} labels; KLD {kld:.4}"
    )))
}
