//! Synthetic graphs, runs and campaigns shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgeval::annotation::{Campaign, CampaignManifest, Judgment, Role, Verdict};
use kgeval::kg::{classify_relations, default_category_threshold, GraphSplits};
use kgeval::metrics::{EvalContext, JudgmentSet};
use kgeval::pooling::{build_pool, filter_trivial, render_tasks, EntityLabels, Pool, TemplateSet, TypeProfile};
use kgeval::ranking::{baseline_run, BaselineMode, RunSet};

pub type NamedTriple = (String, String, String);

/// A random graph cut into train/valid/test plus held-back true triples
/// that no split contains.
pub struct SyntheticGraph {
    pub train: Vec<NamedTriple>,
    pub valid: Vec<NamedTriple>,
    pub test: Vec<NamedTriple>,
    pub hidden: BTreeSet<NamedTriple>,
}

impl SyntheticGraph {
    /// `total` distinct triples over `entities` entities and `relations`
    /// relations. Relations draw heads and tails from pools of varying
    /// width so all four mapping categories occur.
    pub fn generate(seed: u64, total: usize, entities: usize, relations: usize, test_share: f64, hidden_share: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pools: Vec<(Vec<usize>, Vec<usize>)> = (0..relations)
            .map(|_| {
                let width = |rng: &mut ChaCha8Rng| {
                    let w = if rng.gen_bool(0.5) { entities } else { (entities / 8).max(2) };
                    let mut all: Vec<usize> = (0..entities).collect();
                    all.shuffle(rng);
                    all.truncate(w);
                    all
                };
                (width(&mut rng), width(&mut rng))
            })
            .collect();
        let mut seen = BTreeSet::new();
        let mut triples = Vec::new();
        let mut attempts = 0;
        while triples.len() < total && attempts < total * 50 {
            attempts += 1;
            let r = rng.gen_range(0..relations);
            let (heads, tails) = &pools[r];
            let s = heads[rng.gen_range(0..heads.len())];
            let o = tails[rng.gen_range(0..tails.len())];
            let t = (format!("e{s}"), format!("r{r}"), format!("e{o}"));
            if seen.insert(t.clone()) {
                triples.push(t);
            }
        }
        let n = triples.len();
        let n_test = ((n as f64 * test_share).round() as usize).max(1);
        let n_hidden = (n as f64 * hidden_share).round() as usize;
        let n_valid = n / 20;
        let test = triples.split_off(n - n_test);
        let hidden: BTreeSet<NamedTriple> = triples.split_off(triples.len() - n_hidden).into_iter().collect();
        let valid = triples.split_off(triples.len() - n_valid);
        SyntheticGraph {
            train: triples,
            valid,
            test,
            hidden,
        }
    }

    pub fn splits(&self) -> GraphSplits {
        fn refs(v: &[NamedTriple]) -> Vec<(&str, &str, &str)> {
            v.iter().map(|(s, p, o)| (s.as_str(), p.as_str(), o.as_str())).collect()
        }
        GraphSplits::from_names(&refs(&self.train), &refs(&self.valid), &refs(&self.test))
            .expect("synthetic splits are consistent")
    }
}

/// Six systems of clearly different quality.
pub fn baseline_runs(ctx: &EvalContext) -> Vec<RunSet> {
    [
        BaselineMode::Frequency,
        BaselineMode::Random { seed: 1 },
        BaselineMode::OracleNoise { seed: 2, swap_rate: 0.9 },
        BaselineMode::OracleNoise { seed: 3, swap_rate: 0.6 },
        BaselineMode::OracleNoise { seed: 4, swap_rate: 0.3 },
        BaselineMode::OracleNoise { seed: 5, swap_rate: 0.05 },
    ]
    .into_iter()
    .map(|m| baseline_run(&ctx.splits, &ctx.questions, m).expect("baseline run"))
    .collect()
}

pub fn url(annotator: &str, task: u32) -> String {
    format!("https://en.wikipedia.org/wiki/{annotator}_{task}")
}

pub fn judgment(task_id: u32, annotator: &str, label: Verdict, role: Role) -> Judgment {
    Judgment {
        task_id,
        annotator: annotator.into(),
        label,
        source_url: url(annotator, task_id),
        timestamp: 1_700_000_000_000 + i64::from(task_id),
        role,
    }
}

/// A pooled, filtered and fully annotated campaign: two truthful primary
/// annotators per task, labelling against the graph's hidden triples.
pub struct CampaignFixture {
    pub graph: SyntheticGraph,
    pub ctx: EvalContext,
    pub runs: Vec<RunSet>,
    pub pool: Pool,
    pub complete: JudgmentSet,
}

pub fn campaign_fixture(seed: u64) -> CampaignFixture {
    let graph = SyntheticGraph::generate(seed, 700, 40, 8, 0.1, 0.15);
    let ctx = EvalContext::new(graph.splits());
    let runs = baseline_runs(&ctx);
    let seeds: BTreeSet<_> = ctx.questions.iter().map(|(q, _)| q.qid).collect();
    let raw = build_pool(&ctx, &seeds, &runs, 10).expect("pool");
    let stats = classify_relations(&ctx.splits, default_category_threshold()).expect("stats");
    let pool = filter_trivial(&raw, &stats, &ctx.splits.vocab, &TypeProfile::derive(&ctx.splits));
    let tasks = render_tasks(&pool, &TemplateSet::default(), &EntityLabels::default());
    let manifest = CampaignManifest::from_pool(
        &pool,
        tasks,
        vec!["A".into(), "B".into(), "C".into()],
        vec!["wikipedia.org".into()],
    );
    let mut campaign = Campaign::new(manifest).expect("campaign");
    let truths: Vec<(u32, Verdict)> = campaign
        .tasks()
        .iter()
        .map(|t| {
            let [s, p, o] = t.triple.clone();
            let v = if graph.hidden.contains(&(s, p, o)) { Verdict::Yes } else { Verdict::No };
            (t.task_id, v)
        })
        .collect();
    for (id, v) in truths {
        campaign.submit(judgment(id, "A", v, Role::Primary)).expect("primary A");
        campaign.submit(judgment(id, "B", v, Role::Primary)).expect("primary B");
    }
    let complete = campaign.export_judgments().expect("all tasks resolved");
    CampaignFixture {
        graph,
        ctx,
        runs,
        pool,
        complete,
    }
}
