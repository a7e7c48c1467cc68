use std::collections::BTreeSet;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use kgeval::annotation::{Campaign, CampaignManifest, CampaignStore, Judgment, DEFAULT_ALLOWLIST};
use kgeval::kg::{
    classify_relations, default_category_threshold, kl_divergence, GraphSplits, Qid, Rational, RelationDistribution,
    Smoothing, DEFAULT_KLD_EPSILON,
};
use kgeval::meta_eval::{
    category_correlation, common_metrics, correlate, default_sizes, depth_sweep, discriminative_power, evaluate_all,
    load_report_table, rank_systems, subsample_stability, write_category_table, write_sweep, Pairing, DEFAULT_REPEATS,
};
use kgeval::metrics::{
    export_trec, grouped_micro_eval, reweighted_micro_eval, write_report_table, write_unit_vectors, EvalConfig,
    EvalContext, GroupBy, JudgmentSet, MetricId, MetricReport, DEFAULT_KS,
};
use kgeval::pooling::{build_pool, filter_trivial, render_tasks, EntityLabels, Pool, TemplateSet, TypeProfile};
use kgeval::ranking::{baseline_run, load_run, BaselineMode, RunFormat, RunSet};
use kgeval::util::{data_lines, read_file, write_file};

use crate::config::{parse_depths, usage, ExperimentConfig};
use crate::{AnnotateCommand, Command, DistCommand, MetaCommand, PoolCommand};

struct Session {
    cfg: ExperimentConfig,
    seed: u64,
    header: String,
}

pub fn run(command: Command, mut cfg: ExperimentConfig) -> Result<()> {
    let seed = cfg.resolve_seed()?;
    if let Some(n) = cfg.parsed::<usize>("threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    for line in cfg.render().lines() {
        log::info!("config {line}");
    }
    let header = cfg.header(seed);
    let s = Session { cfg, seed, header };
    match command {
        Command::Evaluate => s.evaluate(),
        Command::Baseline => s.baseline(),
        Command::Questions => s.questions(),
        Command::Pool(PoolCommand::Build) => s.pool_build(),
        Command::Pool(PoolCommand::Filter) => s.pool_filter(),
        Command::Pool(PoolCommand::Render) => s.pool_render(),
        Command::Annotate(AnnotateCommand::Serve) => s.annotate_serve(),
        Command::Annotate(AnnotateCommand::Import) => s.annotate_import(),
        Command::Annotate(AnnotateCommand::Export) => s.annotate_export(),
        Command::Annotate(AnnotateCommand::Agreement) => s.annotate_agreement(),
        Command::Meta(MetaCommand::Tau) => s.meta_tau(),
        Command::Meta(MetaCommand::DepthSweep) => s.meta_depth_sweep(),
        Command::Meta(MetaCommand::Stability) => s.meta_stability(),
        Command::Meta(MetaCommand::Power) => s.meta_power(),
        Command::Meta(MetaCommand::Categories) => s.meta_categories(),
        Command::Dist(DistCommand::Kld) => s.dist_kld(),
        Command::Dist(DistCommand::Counts) => s.dist_counts(),
    }
}

type Body<'a> = Box<dyn FnOnce(&mut dyn Write) -> io::Result<()> + 'a>;

impl Session {
    /// Writes a headed artifact to `path`, or to stdout when `None`.
    fn emit(&self, path: Option<&Path>, body: Body<'_>) -> Result<()> {
        let with_header = |w: &mut dyn Write| {
            w.write_all(self.header.as_bytes())?;
            body(w)
        };
        match path {
            Some(p) => write_file(p, with_header)?,
            None => {
                let stdout = io::stdout();
                let mut lock = stdout.lock();
                with_header(&mut lock)?;
                lock.flush()?;
            }
        }
        Ok(())
    }

    fn out(&self) -> Option<PathBuf> {
        self.cfg.path("out")
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.cfg.require_path("out")
    }

    fn input(&self, key: &str) -> Result<PathBuf> {
        let p = self.cfg.require_path(key)?;
        if !p.exists() {
            bail!("input `{key}` not found: {}", p.display());
        }
        Ok(p)
    }

    fn splits(&self) -> Result<GraphSplits> {
        let (tr, va, te) = (self.input("train")?, self.input("valid")?, self.input("test")?);
        Ok(GraphSplits::load(tr, va, te)?)
    }

    fn context(&self) -> Result<EvalContext> {
        let ctx = EvalContext::new(self.splits()?);
        log::info!(
            "loaded {} test triples, {} questions, {} entities",
            ctx.splits.test.len(),
            ctx.questions.len(),
            ctx.splits.vocab.num_entities()
        );
        Ok(ctx)
    }

    fn runs(&self, ctx: &EvalContext) -> Result<Vec<RunSet>> {
        let paths = self.cfg.list("runs");
        if paths.is_empty() {
            return Err(usage("missing required input `runs` (flag --runs or config key)"));
        }
        let format: RunFormat = self.cfg.parsed_or("run_format", RunFormat::Ranked)?;
        let mut tags = BTreeSet::new();
        let mut runs = Vec::new();
        for p in paths {
            let run = load_run(&p, format, &ctx.questions, &ctx.splits.vocab).with_context(|| format!("run {p}"))?;
            if !tags.insert(run.tag.clone()) {
                bail!("two runs share the system tag {}", run.tag);
            }
            runs.push(run);
        }
        Ok(runs)
    }

    /// `judgments`, else `qrels`, else the original test answers.
    fn judgments(&self, ctx: &EvalContext) -> Result<JudgmentSet> {
        if self.cfg.get("judgments").is_some() {
            Ok(JudgmentSet::load_tsv(self.input("judgments")?)?)
        } else if self.cfg.get("qrels").is_some() {
            Ok(JudgmentSet::load_qrels(self.input("qrels")?)?)
        } else {
            log::info!("no judgments given; using the original test answers");
            Ok(ctx.sparse_judgments())
        }
    }

    fn require_judgments(&self, ctx: &EvalContext) -> Result<JudgmentSet> {
        if self.cfg.get("judgments").is_none() && self.cfg.get("qrels").is_none() {
            return Err(usage("missing required input `judgments` (complete labels)"));
        }
        self.judgments(ctx)
    }

    fn eval_config(&self) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        Ok(EvalConfig {
            ties: self.cfg.parsed_or("ties", d.ties)?,
            ks: self.cfg.parsed_list("ks")?.unwrap_or_else(|| DEFAULT_KS.to_vec()),
            regime: self.cfg.parsed_or("regime", d.regime)?,
            units: self.cfg.parsed_or("micro_units", d.units)?,
        })
    }

    fn metrics_filter(&self) -> Result<Option<Vec<MetricId>>> {
        self.cfg.parsed_list("metrics")
    }

    fn threshold(&self) -> Result<Rational> {
        let Some(s) = self.cfg.get("category_threshold") else {
            return Ok(default_category_threshold());
        };
        let bad = || usage(format!("bad category_threshold `{s}` (use a fraction like 3/2)"));
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        Ok(Rational::new(n, d))
    }

    fn evaluate(&self) -> Result<()> {
        let ctx = self.context()?;
        let runs = self.runs(&ctx)?;
        let judgments = self.judgments(&ctx)?;
        let ecfg = self.eval_config()?;
        let mut reports = evaluate_all(&ctx, &runs, &judgments, &ecfg)?;
        if let Some(keep) = self.metrics_filter()? {
            for r in &mut reports {
                r.values.retain(|m, _| keep.contains(m));
                r.units.retain(|m, _| keep.contains(m));
            }
        }
        let out = self.out();
        let report_path = out.as_ref().map(|d| d.join("report.tsv"));
        self.emit(report_path.as_deref(), Box::new(|w| write_report_table(&reports, w)))?;
        if let Some(dir) = &out {
            write_unit_vectors(&reports, dir.join("units"), &self.header)?;
        }

        if let Some(g) = self.cfg.get("group_by") {
            let stats;
            let by = match g {
                "relation" => GroupBy::Relation,
                "category" => {
                    stats = classify_relations(&ctx.splits, self.threshold()?)?;
                    GroupBy::CategoryDirection(&stats)
                }
                _ => return Err(usage(format!("group_by must be relation or category, got `{g}`"))),
            };
            let mut rows = Vec::new();
            for run in &runs {
                for (key, rep) in grouped_micro_eval(&ctx, run, &judgments, &ecfg, by)? {
                    for (m, v) in &rep.values {
                        rows.push(format!("{}\t{key}\t{m}\t{v:.6}\t{}", run.tag, rep.unit_ids.len()));
                    }
                }
            }
            let path = out.as_ref().map(|d| d.join("groups.tsv"));
            self.emit(
                path.as_deref(),
                Box::new(move |w| {
                    writeln!(w, "# system\tgroup\tmetric\tvalue\tunits")?;
                    rows.iter().try_for_each(|r| writeln!(w, "{r}"))
                }),
            )?;
        }

        if self.cfg.get("weights").is_some() {
            let weights = load_weights(&self.input("weights")?)?;
            let mut re = Vec::new();
            for run in &runs {
                re.push(reweighted_micro_eval(&ctx, run, &judgments, &ecfg, &weights)?);
            }
            let path = out.as_ref().map(|d| d.join("reweighted.tsv"));
            self.emit(path.as_deref(), Box::new(|w| write_report_table(&re, w)))?;
        }

        if let Some(dir) = self.cfg.path("trec_export") {
            export_trec(&ctx, &judgments, &runs, dir)?;
        }
        Ok(())
    }

    fn baseline(&self) -> Result<()> {
        let splits = self.splits()?;
        let ctx = EvalContext::new(splits);
        let mode = match self.cfg.get("mode").unwrap_or("frequency") {
            "frequency" => BaselineMode::Frequency,
            "random" => BaselineMode::Random { seed: self.seed },
            "oracle-noise" | "oracle" => BaselineMode::OracleNoise {
                seed: self.seed,
                swap_rate: self.cfg.parsed_or("swap_rate", 0.0)?,
            },
            m => return Err(usage(format!("unknown baseline mode `{m}`"))),
        };
        let mut run = baseline_run(&ctx.splits, &ctx.questions, mode)?;
        if let Some(t) = self.cfg.get("tag") {
            run.tag = t.to_owned();
        }
        // Run files stay headerless so external TREC tools can read them.
        let vocab = &ctx.splits.vocab;
        match self.out() {
            Some(p) => run.save_trec(vocab, p)?,
            None => {
                let mut lock = io::stdout().lock();
                run.write_trec(vocab, &mut lock)?;
            }
        }
        Ok(())
    }

    fn questions(&self) -> Result<()> {
        let ctx = self.context()?;
        self.emit(
            self.out().as_deref(),
            Box::new(|mut w| ctx.questions.write_mapping(&ctx.splits.vocab, &mut w)),
        )
    }

    fn pool_build(&self) -> Result<()> {
        let ctx = self.context()?;
        let runs = self.runs(&ctx)?;
        let depth: u32 = self.cfg.parsed_or("pool_depth", 10)?;
        let seeds: BTreeSet<Qid> = match self.cfg.get("seed_questions") {
            Some(_) => {
                let path = self.input("seed_questions")?;
                let text = read_file(&path)?;
                data_lines(&text)
                    .map(|(ln, l)| {
                        l.trim()
                            .parse()
                            .map_err(|_| anyhow::anyhow!("{}:{ln}: bad qid `{l}`", path.display()))
                    })
                    .collect::<Result<_>>()?
            }
            None => ctx.questions.iter().map(|(q, _)| q.qid).collect(),
        };
        let pool = build_pool(&ctx, &seeds, &runs, depth)?;
        let c = pool.counts();
        log::info!(
            "pool: {} entries ({} pending, {} already positive)",
            pool.len(),
            c.pending,
            c.judged_positive
        );
        self.emit(self.out().as_deref(), Box::new(|w| pool.write(w)))
    }

    fn pool_filter(&self) -> Result<()> {
        let ctx = self.context()?;
        let pool = Pool::load(self.input("pool")?, &ctx)?;
        let types = match self.cfg.get("types") {
            Some(_) => TypeProfile::load(self.input("types")?)?,
            None => TypeProfile::derive(&ctx.splits),
        };
        let stats = classify_relations(&ctx.splits, self.threshold()?)?;
        let filtered = filter_trivial(&pool, &stats, &ctx.splits.vocab, &types);
        let c = filtered.counts();
        log::info!("filtered pool: {} trivial negatives, {} pending", c.trivial, c.pending);
        self.emit(self.out().as_deref(), Box::new(|w| filtered.write(w)))
    }

    fn pool_render(&self) -> Result<()> {
        let ctx = self.context()?;
        let pool = Pool::load(self.input("pool")?, &ctx)?;
        let templates = match self.cfg.get("templates") {
            Some(_) => TemplateSet::load(self.input("templates")?)?,
            None => TemplateSet::default(),
        };
        let labels = match self.cfg.get("labels") {
            Some(_) => EntityLabels::load(self.input("labels")?)?,
            None => EntityLabels::default(),
        };
        let roster = self.cfg.list("roster");
        if roster.is_empty() {
            return Err(usage("missing required input `roster` (comma-separated annotator ids)"));
        }
        let mut allowlist = self.cfg.list("allowlist");
        if allowlist.is_empty() {
            allowlist = DEFAULT_ALLOWLIST.iter().map(|s| s.to_string()).collect();
        }
        let dir = self.cfg.require_path("campaign")?;
        if dir.join("campaign.json").exists() {
            bail!("{} already holds a campaign; refusing to overwrite", dir.display());
        }
        let tasks = render_tasks(&pool, &templates, &labels);
        let fallback = tasks.iter().filter(|t| t.fallback).count();
        if fallback > 0 {
            log::warn!("{fallback} tasks use the fallback question template");
        }
        let n = tasks.len();
        let manifest = CampaignManifest::from_pool(&pool, tasks, roster, allowlist);
        CampaignStore::create(&dir, manifest)?;
        println!("tasks\t{n}");
        println!("fallback\t{fallback}");
        Ok(())
    }

    fn annotate_serve(&self) -> Result<()> {
        let store = CampaignStore::open(self.input("campaign")?)?;
        let addr: SocketAddr = self.cfg.parsed_or("addr", SocketAddr::from(([127, 0, 0, 1], 8080)))?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .context("starting async runtime")?;
        rt.block_on(kgeval_server::serve(addr, store))
            .with_context(|| format!("serving on {addr}"))
    }

    fn annotate_import(&self) -> Result<()> {
        let mut store = CampaignStore::open(self.input("campaign")?)?;
        let batch = self.input("batch")?;
        let rows = kgeval::annotation::read_batch(&batch)?;
        // Dry run first so a bad row leaves the log untouched.
        let mut trial: Campaign = store.campaign().clone();
        let mut judgments = Vec::with_capacity(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            let role = trial.role_for(r.task_id).with_context(|| format!("batch row {}", i + 1))?;
            let j = Judgment {
                task_id: r.task_id,
                annotator: r.annotator,
                label: r.label,
                source_url: r.source_url,
                timestamp: r.timestamp,
                role,
            };
            trial.submit(j.clone()).with_context(|| format!("batch row {}", i + 1))?;
            judgments.push(j);
        }
        let n = judgments.len();
        for j in judgments {
            store.submit(j)?;
        }
        let p = store.campaign().progress();
        println!("imported\t{n}");
        println!("pending\t{}", p.pending);
        println!("conflicted\t{}", p.conflicted);
        println!("resolved\t{}", p.resolved);
        Ok(())
    }

    fn annotate_export(&self) -> Result<()> {
        let store = CampaignStore::open(self.input("campaign")?)?;
        let judgments = store.campaign().export_judgments()?;
        let dir = self.out_dir()?;
        self.emit(Some(&dir.join("judgments.tsv")), Box::new(|w| judgments.write_tsv(w)))?;
        write_file(dir.join("qrels.txt"), |w| judgments.write_qrels(w))?;
        println!("entries\t{}", judgments.len());
        println!("positives\t{}", judgments.positive_count());
        println!("negatives\t{}", judgments.negative_count());
        Ok(())
    }

    fn annotate_agreement(&self) -> Result<()> {
        let store = CampaignStore::open(self.input("campaign")?)?;
        let a = store.campaign().agreement()?;
        self.emit(
            self.out().as_deref(),
            Box::new(|w| {
                writeln!(w, "double_judged\t{}", a.double_judged)?;
                writeln!(w, "agreeing\t{}", a.agreeing)?;
                writeln!(w, "rate\t{:.6}", a.rate)?;
                writeln!(w, "conflicts\t{}", a.conflicts)?;
                for (who, n) in &a.per_annotator {
                    writeln!(w, "judgments:{who}\t{n}")?;
                }
                Ok(())
            }),
        )
    }

    fn meta_tau(&self) -> Result<()> {
        let a = load_report_table(self.input("a")?)?;
        let b = load_report_table(self.input("b")?)?;
        let metrics = match self.metrics_filter()? {
            Some(m) => m,
            None => {
                let both: Vec<MetricReport> = a.iter().chain(&b).cloned().collect();
                common_metrics(&both)
            }
        };
        if metrics.is_empty() {
            bail!("the two report tables share no metric");
        }
        let mut rows = Vec::new();
        for m in metrics {
            let ra = rank_systems(&a, m, "a")?;
            let rb = rank_systems(&b, m, "b")?;
            let c = correlate(&ra, &rb)?;
            rows.push((m, c.tau));
        }
        self.emit(
            self.out().as_deref(),
            Box::new(move |w| {
                for (m, tau) in rows {
                    match tau {
                        Some(t) => writeln!(w, "{m}\t{t:.6}")?,
                        None => writeln!(w, "{m}\tNA")?,
                    }
                }
                Ok(())
            }),
        )
    }

    fn meta_depth_sweep(&self) -> Result<()> {
        let ctx = self.context()?;
        let runs = self.runs(&ctx)?;
        let pool = Pool::load(self.input("pool")?, &ctx)?;
        let judgments = self.require_judgments(&ctx)?;
        let depths = match self.cfg.get("depths") {
            Some(s) => parse_depths(s)?,
            None => (1..=pool.depth).collect(),
        };
        let mut points = depth_sweep(&ctx, &runs, &pool, &judgments, &self.eval_config()?, &depths)?;
        if let Some(keep) = self.metrics_filter()? {
            points.retain(|p| keep.contains(&p.report.metric));
        }
        self.emit(self.out().as_deref(), Box::new(|w| write_sweep(&points, w)))
    }

    fn meta_stability(&self) -> Result<()> {
        let ctx = self.context()?;
        let runs = self.runs(&ctx)?;
        let judgments = self.judgments(&ctx)?;
        let sizes = self.cfg.parsed_list("sizes")?.unwrap_or_else(default_sizes);
        let repeats = self.cfg.parsed_or("repeats", DEFAULT_REPEATS)?;
        let mut report = subsample_stability(&ctx, &runs, &judgments, &self.eval_config()?, &sizes, repeats, self.seed)?;
        if let Some(keep) = self.metrics_filter()? {
            report.points.retain(|p| keep.contains(&p.metric));
        }
        self.emit(self.out().as_deref(), Box::new(|w| report.write(w)))
    }

    fn meta_power(&self) -> Result<()> {
        let ctx = self.context()?;
        let runs = self.runs(&ctx)?;
        let judgments = self.judgments(&ctx)?;
        let pairing: Pairing = self.cfg.parsed_or("pairing", Pairing::PerAnswer)?;
        let ecfg = self.eval_config()?;
        let mut micro = Vec::new();
        let mut macro_ = Vec::new();
        for run in &runs {
            let (mi, ma) = kgeval::metrics::evaluate(&ctx, run, &judgments, &ecfg)?;
            micro.push(mi);
            macro_.push(ma);
        }
        let mut metrics: Vec<MetricId> = common_metrics(&micro);
        metrics.extend(common_metrics(&macro_));
        if let Some(keep) = self.metrics_filter()? {
            metrics.retain(|m| keep.contains(m));
        }
        let mut curves = Vec::new();
        for m in metrics {
            let reports = if m.family == kgeval::metrics::Family::Micro { &micro } else { &macro_ };
            curves.push(discriminative_power(reports, m, pairing)?);
        }
        self.emit(
            self.out().as_deref(),
            Box::new(|w| {
                for c in &curves {
                    writeln!(w, "# area\t{}\t{:.10}", c.metric, c.area)?;
                }
                curves.iter().try_for_each(|c| c.write(w))
            }),
        )
    }

    fn meta_categories(&self) -> Result<()> {
        let ctx = self.context()?;
        let runs = self.runs(&ctx)?;
        let complete = self.require_judgments(&ctx)?;
        let sparse = ctx.sparse_judgments();
        let ecfg = self.eval_config()?;
        let stats = classify_relations(&ctx.splits, self.threshold()?)?;
        let table = category_correlation(&ctx, &runs, &sparse, &complete, &ecfg, &stats)?;
        let metrics = match self.metrics_filter()? {
            Some(m) => m,
            None => ecfg.micro_metrics(),
        };
        self.emit(
            self.out().as_deref(),
            Box::new(|w| write_category_table(&table, &metrics, w)),
        )
    }

    fn dist_kld(&self) -> Result<()> {
        let sample = triple_distribution(&self.input("sample")?)?;
        let reference = triple_distribution(&self.input("reference")?)?;
        let eps: f64 = self.cfg.parsed_or("kld_epsilon", DEFAULT_KLD_EPSILON)?;
        let smoothing = if eps == 0.0 { Smoothing::None } else { Smoothing::Epsilon(eps) };
        let kl = kl_divergence(&sample, &reference, smoothing)?;
        self.emit(self.out().as_deref(), Box::new(move |w| writeln!(w, "kld\t{kl:.6}")))
    }

    fn dist_counts(&self) -> Result<()> {
        let triples = GraphSplits::load_triples_named(self.input("triples")?)?;
        let mut counts = std::collections::BTreeMap::<String, u64>::new();
        for (_, p, _) in triples {
            *counts.entry(p).or_default() += 1;
        }
        self.emit(
            self.out().as_deref(),
            Box::new(move |w| counts.iter().try_for_each(|(r, n)| writeln!(w, "{r}\t{n}"))),
        )
    }
}

fn triple_distribution(path: &Path) -> Result<RelationDistribution> {
    let triples = GraphSplits::load_triples_named(path)?;
    let mut counts = std::collections::BTreeMap::<String, u64>::new();
    for (_, p, _) in triples {
        *counts.entry(p).or_default() += 1;
    }
    RelationDistribution::from_counts(counts).with_context(|| format!("relation distribution of {}", path.display()))
}

fn load_weights(path: &Path) -> Result<RelationDistribution> {
    let text = read_file(path)?;
    let mut w = Vec::new();
    for (ln, line) in data_lines(&text) {
        let (r, x) = line
            .split_once('\t')
            .ok_or_else(|| anyhow::anyhow!("{}:{ln}: expected relation<TAB>weight", path.display()))?;
        let x: f64 = x
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| anyhow::anyhow!("{}:{ln}: bad weight `{x}`", path.display()))?;
        w.push((r.to_owned(), x));
    }
    Ok(RelationDistribution::from_weights(w)?)
}
