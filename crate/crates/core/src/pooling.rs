//! Judgment pools built from the top of several system runs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::annotation::AnnotationTask;
use crate::error::{Error, Result};
use crate::kg::{Category, Direction, GraphSplits, Qid, RelationId, RelationStats, Vocab};
use crate::metrics::{JudgmentEntry, JudgmentSet, Label, Provenance};
use crate::metrics::EvalContext;
use crate::ranking::{filtered_candidates, RunSet};
use crate::util::{data_lines, read_file, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolStatus {
    Pending,
    TrivialNegative,
    Judged(Label),
}

impl PoolStatus {
    pub fn token(self) -> &'static str {
        match self {
            PoolStatus::Pending => "pending",
            PoolStatus::TrivialNegative => "trivial-negative",
            PoolStatus::Judged(Label::Positive) => "judged:positive",
            PoolStatus::Judged(Label::Negative) => "judged:negative",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pending" => PoolStatus::Pending,
            "trivial-negative" => PoolStatus::TrivialNegative,
            "judged:positive" => PoolStatus::Judged(Label::Positive),
            "judged:negative" => PoolStatus::Judged(Label::Negative),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub qid: Qid,
    pub entity: String,
    /// Best (smallest) rank at which each system returned the entity.
    pub ranks: BTreeMap<String, u32>,
    pub min_depth: u32,
    pub status: PoolStatus,
}

/// Seed question as seen by annotators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolQuestion {
    pub direction: Direction,
    pub anchor: String,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub questions: BTreeMap<Qid, PoolQuestion>,
    /// Original test answers of each seed question.
    pub originals: BTreeMap<Qid, BTreeSet<String>>,
    pub entries: BTreeMap<(Qid, String), PoolEntry>,
    pub systems: Vec<String>,
    pub depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolCounts {
    pub pending: usize,
    pub trivial: usize,
    pub judged_positive: usize,
    pub judged_negative: usize,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> PoolCounts {
        let mut c = PoolCounts::default();
        for e in self.entries.values() {
            match e.status {
                PoolStatus::Pending => c.pending += 1,
                PoolStatus::TrivialNegative => c.trivial += 1,
                PoolStatus::Judged(Label::Positive) => c.judged_positive += 1,
                PoolStatus::Judged(Label::Negative) => c.judged_negative += 1,
            }
        }
        c
    }

    /// Rows `qid<TAB>entity<TAB>min_depth<TAB>status<TAB>tag:rank,...`,
    /// preceded by `# pool-depth` and `# pool-systems` comment lines.
    pub fn write(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "# pool-depth\t{}", self.depth)?;
        writeln!(out, "# pool-systems\t{}", self.systems.join(","))?;
        for e in self.entries.values() {
            let contrib: Vec<String> = e.ranks.iter().map(|(t, r)| format!("{t}:{r}")).collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.qid,
                e.entity,
                e.min_depth,
                e.status.token(),
                contrib.join(",")
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, |w| self.write(w))
    }

    /// Reads a pool export. Question metadata and original answers come from `ctx`.
    pub fn load(path: impl AsRef<Path>, ctx: &EvalContext) -> Result<Self> {
        let path = path.as_ref();
        let text = read_file(path)?;
        let mut depth = None;
        let mut systems = Vec::new();
        for line in text.lines().filter(|l| l.starts_with("# pool-")) {
            if let Some(d) = line.strip_prefix("# pool-depth\t") {
                depth = d.trim().parse().ok();
            } else if let Some(s) = line.strip_prefix("# pool-systems\t") {
                systems = s.split(',').filter(|t| !t.is_empty()).map(str::to_owned).collect();
            }
        }
        let depth = depth.ok_or_else(|| Error::malformed(path, 1, "missing `# pool-depth` header"))?;
        let mut entries = BTreeMap::new();
        let mut seeds = BTreeSet::new();
        for (ln, line) in data_lines(&text) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::malformed(path, ln, "expected 5 tab-separated fields"));
            }
            let bad = |what: &str| Error::malformed(path, ln, format!("bad {what}"));
            let qid: Qid = f[0].parse().map_err(|_| bad("qid"))?;
            if !ctx.questions.contains(qid) {
                return Err(Error::UnknownQuestion(f[0].to_owned()));
            }
            let min_depth: u32 = f[2].parse().map_err(|_| bad("min_depth"))?;
            let status = PoolStatus::parse(f[3]).ok_or_else(|| bad("status"))?;
            let mut ranks = BTreeMap::new();
            for c in f[4].split(',').filter(|c| !c.is_empty()) {
                let (t, r) = c.rsplit_once(':').ok_or_else(|| bad("contributing system"))?;
                ranks.insert(t.to_owned(), r.parse().map_err(|_| bad("contributing rank"))?);
            }
            seeds.insert(qid);
            entries.insert(
                (qid, f[1].to_owned()),
                PoolEntry {
                    qid,
                    entity: f[1].to_owned(),
                    ranks,
                    min_depth,
                    status,
                },
            );
        }
        let (questions, originals) = seed_metadata(ctx, &seeds);
        Ok(Pool {
            questions,
            originals,
            entries,
            systems,
            depth,
        })
    }
}

fn seed_metadata(
    ctx: &EvalContext,
    seeds: &BTreeSet<Qid>,
) -> (BTreeMap<Qid, PoolQuestion>, BTreeMap<Qid, BTreeSet<String>>) {
    let vocab = &ctx.splits.vocab;
    let mut questions = BTreeMap::new();
    let mut originals = BTreeMap::new();
    for &qid in seeds {
        if let Some((q, a)) = ctx.questions.get(qid) {
            questions.insert(
                qid,
                PoolQuestion {
                    direction: q.direction,
                    anchor: vocab.entity_name(q.anchor).to_owned(),
                    relation: vocab.relation_name(q.relation).to_owned(),
                },
            );
            originals.insert(qid, a.answers.iter().map(|&e| vocab.entity_name(e).to_owned()).collect());
        }
    }
    (questions, originals)
}

/// Unions the top-`depth` macro-filtered candidates of every run for every
/// seed question.
pub fn build_pool(ctx: &EvalContext, seeds: &BTreeSet<Qid>, runs: &[RunSet], depth: u32) -> Result<Pool> {
    if depth == 0 {
        return Err(Error::Invalid("pool depth must be at least 1".into()));
    }
    let mut tags = HashSet::new();
    for r in runs {
        if !tags.insert(r.tag.as_str()) {
            return Err(Error::Invalid(format!("duplicate system tag {}", r.tag)));
        }
    }
    for &q in seeds {
        if !ctx.questions.contains(q) {
            return Err(Error::UnknownQuestion(q.to_string()));
        }
        for r in runs {
            r.require_list(q)?;
        }
    }
    let vocab = &ctx.splits.vocab;
    let (questions, originals) = seed_metadata(ctx, seeds);
    let empty = HashSet::new();
    let seed_list: Vec<Qid> = seeds.iter().copied().collect();
    let per_question: Vec<Vec<PoolEntry>> = seed_list
        .par_iter()
        .map(|&q| {
            let filter = ctx.macro_filter.get(q).unwrap_or(&empty);
            let answers = &originals[&q];
            let mut found: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
            for run in runs {
                let list = filtered_candidates(run.list(q).expect("checked above"), filter);
                for (i, &(e, _)) in list.entries().iter().take(depth as usize).enumerate() {
                    found
                        .entry(vocab.entity_name(e).to_owned())
                        .or_default()
                        .entry(run.tag.clone())
                        .or_insert(i as u32 + 1);
                }
            }
            found
                .into_iter()
                .map(|(entity, ranks)| {
                    let min_depth = *ranks.values().min().expect("at least one contributor");
                    let status = if answers.contains(&entity) {
                        PoolStatus::Judged(Label::Positive)
                    } else {
                        PoolStatus::Pending
                    };
                    PoolEntry {
                        qid: q,
                        entity,
                        ranks,
                        min_depth,
                        status,
                    }
                })
                .collect()
        })
        .collect();
    let entries = per_question
        .into_iter()
        .flatten()
        .map(|e| ((e.qid, e.entity.clone()), e))
        .collect();
    Ok(Pool {
        questions,
        originals,
        entries,
        systems: runs.iter().map(|r| r.tag.clone()).collect(),
        depth,
    })
}

/// Admissible entities per relation slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypeProfile {
    heads: HashMap<String, HashSet<String>>,
    tails: HashMap<String, HashSet<String>>,
}

impl TypeProfile {
    /// An entity fits a slot iff it fills that slot of the relation in train.
    pub fn derive(splits: &GraphSplits) -> Self {
        let v = &splits.vocab;
        let mut p = TypeProfile::default();
        for t in &splits.train {
            let r = v.relation_name(t.p);
            p.heads.entry(r.to_owned()).or_default().insert(v.entity_name(t.s).to_owned());
            p.tails.entry(r.to_owned()).or_default().insert(v.entity_name(t.o).to_owned());
        }
        p
    }

    /// Reads `relation<TAB>head|tail<TAB>entity` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_file(path)?;
        let mut p = TypeProfile::default();
        for (ln, line) in data_lines(&text) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::malformed(path, ln, "expected relation<TAB>slot<TAB>entity"));
            }
            let slot: Direction = f[1].parse().map_err(|_| Error::malformed(path, ln, "slot must be head or tail"))?;
            p.insert(f[0], slot, f[2]);
        }
        Ok(p)
    }

    pub fn insert(&mut self, relation: &str, slot: Direction, entity: &str) {
        let m = match slot {
            Direction::Head => &mut self.heads,
            Direction::Tail => &mut self.tails,
        };
        m.entry(relation.to_owned()).or_default().insert(entity.to_owned());
    }

    /// `None` when the profile has no information about the relation slot.
    pub fn admits(&self, relation: &str, slot: Direction, entity: &str) -> Option<bool> {
        let m = match slot {
            Direction::Head => &self.heads,
            Direction::Tail => &self.tails,
        };
        m.get(relation).map(|s| s.contains(entity))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrivialRule {
    /// Entity does not fit the relation's slot.
    TypeMismatch,
    /// Head question on a 1-1 or 1-N relation.
    HeadOfSingleHeaded,
    /// Tail question on a 1-1 or N-1 relation.
    TailOfSingleTailed,
}

/// First trivial-negative rule matching a pooled entity, if any.
pub fn trivial_rule(
    question: &PoolQuestion,
    entity: &str,
    category: Option<Category>,
    types: &TypeProfile,
) -> Option<TrivialRule> {
    if types.admits(&question.relation, question.direction, entity) == Some(false) {
        return Some(TrivialRule::TypeMismatch);
    }
    match (question.direction, category?) {
        (Direction::Head, Category::OneToOne | Category::OneToMany) => Some(TrivialRule::HeadOfSingleHeaded),
        (Direction::Tail, Category::OneToOne | Category::ManyToOne) => Some(TrivialRule::TailOfSingleTailed),
        _ => None,
    }
}

/// Marks pending entries matched by a trivial rule as trivial negatives.
/// Judged entries are never touched.
pub fn filter_trivial(
    pool: &Pool,
    stats: &BTreeMap<RelationId, RelationStats>,
    vocab: &Vocab,
    types: &TypeProfile,
) -> Pool {
    let categories: HashMap<&str, Category> = stats
        .values()
        .map(|s| (vocab.relation_name(s.relation), s.category))
        .collect();
    let mut out = pool.clone();
    for e in out.entries.values_mut() {
        if e.status != PoolStatus::Pending {
            continue;
        }
        let Some(q) = pool.questions.get(&e.qid) else { continue };
        let cat = categories.get(q.relation.as_str()).copied();
        if trivial_rule(q, &e.entity, cat, types).is_some() {
            e.status = PoolStatus::TrivialNegative;
        }
    }
    out
}

pub const FALLBACK_PATTERN: &str = "is ({subject}, {relation}, {object}) a true fact?";

/// Natural-language patterns per relation.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    patterns: BTreeMap<String, String>,
    fallback: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            patterns: BTreeMap::new(),
            fallback: FALLBACK_PATTERN.to_owned(),
        }
    }
}

fn check_pattern(relation: &str, pattern: &str) -> Result<()> {
    for ph in ["{subject}", "{object}"] {
        let n = pattern.matches(ph).count();
        if n != 1 {
            return Err(Error::BadTemplate {
                relation: relation.to_owned(),
                reason: format!("{ph} appears {n} times"),
            });
        }
    }
    Ok(())
}

impl TemplateSet {
    pub fn insert(&mut self, relation: &str, pattern: &str) -> Result<()> {
        check_pattern(relation, pattern)?;
        self.patterns.insert(relation.to_owned(), pattern.to_owned());
        Ok(())
    }

    pub fn with_fallback(mut self, pattern: &str) -> Result<Self> {
        check_pattern("<fallback>", pattern)?;
        self.fallback = pattern.to_owned();
        Ok(self)
    }

    /// Reads `relation<TAB>pattern` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_file(path)?;
        let mut t = TemplateSet::default();
        for (ln, line) in data_lines(&text) {
            let (rel, pat) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(path, ln, "expected relation<TAB>pattern"))?;
            t.insert(rel, pat)?;
        }
        Ok(t)
    }

    /// Returns the question text and whether the fallback pattern was used.
    pub fn render(&self, subject: &str, relation: &str, object: &str) -> (String, bool) {
        let (pattern, fallback) = match self.patterns.get(relation) {
            Some(p) => (p.as_str(), false),
            None => (self.fallback.as_str(), true),
        };
        let text = pattern
            .replace("{subject}", subject)
            .replace("{object}", object)
            .replace("{relation}", relation);
        (text, fallback)
    }
}

/// Display names from `entity<TAB>label` lines; raw ids when absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityLabels(HashMap<String, String>);

impl EntityLabels {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_file(path)?;
        let mut m = HashMap::new();
        for (ln, line) in data_lines(&text) {
            let (e, l) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(path, ln, "expected entity<TAB>label"))?;
            m.insert(e.to_owned(), l.to_owned());
        }
        Ok(EntityLabels(m))
    }

    pub fn insert(&mut self, entity: &str, label: &str) {
        self.0.insert(entity.to_owned(), label.to_owned());
    }

    pub fn get<'a>(&'a self, entity: &'a str) -> &'a str {
        self.0.get(entity).map_or(entity, String::as_str)
    }
}

/// One annotation task per pending pool entry, in (qid, entity) order.
pub fn render_tasks(pool: &Pool, templates: &TemplateSet, labels: &EntityLabels) -> Vec<AnnotationTask> {
    let mut tasks = Vec::new();
    for e in pool.entries.values().filter(|e| e.status == PoolStatus::Pending) {
        let Some(q) = pool.questions.get(&e.qid) else { continue };
        let (s, o) = match q.direction {
            Direction::Head => (e.entity.as_str(), q.anchor.as_str()),
            Direction::Tail => (q.anchor.as_str(), e.entity.as_str()),
        };
        let (text, fallback) = templates.render(labels.get(s), &q.relation, labels.get(o));
        tasks.push(AnnotationTask {
            task_id: tasks.len() as u32 + 1,
            qid: e.qid,
            entity: e.entity.clone(),
            entity_label: labels.get(&e.entity).to_owned(),
            triple: [s.to_owned(), q.relation.clone(), o.to_owned()],
            question_text: text,
            fallback,
            min_depth: e.min_depth,
        });
    }
    tasks
}

/// Judgments as they would have been with a pool of depth `d`: original
/// labels plus pool entries first contributed at rank ≤ `d`. Every pending
/// pool entry must be labelled in `judgments`.
pub fn qrels_at_depth(pool: &Pool, judgments: &JudgmentSet, d: u32) -> Result<JudgmentSet> {
    if d > pool.depth {
        return Err(Error::DepthOutOfRange { depth: d, max: pool.depth });
    }
    let pending = pool
        .entries
        .values()
        .filter(|e| e.status == PoolStatus::Pending && judgments.get(e.qid, &e.entity).is_none())
        .count();
    if pending > 0 {
        return Err(Error::PendingEntries(pending));
    }
    let mut out = JudgmentSet::default();
    for (q, e, j) in judgments.iter() {
        let depth = match j.provenance {
            Provenance::Original => 0,
            _ => pool.entries.get(&(q, e.to_owned())).map_or(j.depth, |p| p.min_depth),
        };
        if depth <= d {
            out.insert(q, e, JudgmentEntry { depth, ..*j })?;
        }
    }
    Ok(out)
}
