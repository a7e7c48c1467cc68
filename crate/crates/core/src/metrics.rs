//! Micro (per-answer) and macro (per-question) metrics.
//!
//! Micro metrics average a function of the filtered rank over every
//! (question, answer) evaluation. They are aggregated per relation and then
//! combined with the relation's share of the evaluations as weight, which
//! equals the plain average; replacing the weights gives the reweighted
//! variant. Macro metrics treat each aggregated question as a query and
//! follow `trec_eval` semantics for `recip_rank`, `map_cut.20` and
//! `ndcg_cut.20` with binary gains.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    aggregate_questions, Category, Direction, EntityId, GraphSplits, Qid, QuestionKey, QuestionSet, RelationDistribution,
    RelationId, RelationStats,
};
use crate::ranking::{filtered_candidates, rank_excluding, FilterSets, RunData, RunSet, TiePolicy};
use crate::util::{data_lines, read_file, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "yes" | "1" => Ok(Label::Positive),
            "negative" | "no" | "0" => Ok(Label::Negative),
            _ => Err(Error::Invalid(format!("label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Original,
    Annotated,
    TrivialFiltered,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Annotated => "annotated",
            Provenance::TrivialFiltered => "trivial-filtered",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Provenance::Original),
            "annotated" => Ok(Provenance::Annotated),
            "trivial-filtered" => Ok(Provenance::TrivialFiltered),
            _ => Err(Error::Invalid(format!("provenance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentEntry {
    pub label: Label,
    pub provenance: Provenance,
    /// Pool depth at which the pair entered; 0 for original labels.
    pub depth: u32,
}

/// Labels per (question, entity). Entities are kept as identifier strings
/// so judgments can be exchanged without a loaded vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JudgmentSet {
    labels: BTreeMap<(Qid, String), JudgmentEntry>,
}

impl JudgmentSet {
    /// Original answers of every question, labelled positive at depth 0.
    pub fn from_answers(questions: &QuestionSet, vocab: &crate::kg::Vocab) -> Self {
        let mut labels = BTreeMap::new();
        for (q, a) in questions.iter() {
            for &e in &a.answers {
                labels.insert(
                    (q.qid, vocab.entity_name(e).to_owned()),
                    JudgmentEntry {
                        label: Label::Positive,
                        provenance: Provenance::Original,
                        depth: 0,
                    },
                );
            }
        }
        JudgmentSet { labels }
    }

    pub fn insert(&mut self, qid: Qid, entity: impl Into<String>, entry: JudgmentEntry) -> Result<()> {
        let entity = entity.into();
        if self.labels.contains_key(&(qid, entity.clone())) {
            return Err(Error::DuplicatePair {
                qid: qid.to_string(),
                entity,
            });
        }
        self.labels.insert((qid, entity), entry);
        Ok(())
    }

    pub fn get(&self, qid: Qid, entity: &str) -> Option<&JudgmentEntry> {
        self.labels.get(&(qid, entity.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Qid, &str, &JudgmentEntry)> {
        self.labels.iter().map(|((q, e), j)| (*q, e.as_str(), j))
    }

    pub fn for_question(&self, qid: Qid) -> impl Iterator<Item = (&str, &JudgmentEntry)> {
        self.labels
            .range((qid, String::new())..(Qid(qid.0 + 1), String::new()))
            .map(|((_, e), j)| (e.as_str(), j))
    }

    pub fn positives(&self, qid: Qid) -> impl Iterator<Item = &str> {
        self.for_question(qid)
            .filter(|(_, j)| j.label == Label::Positive)
            .map(|(e, _)| e)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.values().filter(|j| j.label == Label::Positive).count()
    }

    pub fn negative_count(&self) -> usize {
        self.len() - self.positive_count()
    }

    /// Keeps entries that entered at depth ≤ `depth`.
    pub fn up_to_depth(&self, depth: u32) -> JudgmentSet {
        JudgmentSet {
            labels: self
                .labels
                .iter()
                .filter(|(_, j)| j.depth <= depth)
                .map(|(k, j)| (k.clone(), *j))
                .collect(),
        }
    }

    /// Keeps entries of the given questions.
    pub fn restrict(&self, keep: &BTreeSet<Qid>) -> JudgmentSet {
        JudgmentSet {
            labels: self
                .labels
                .iter()
                .filter(|((q, _), _)| keep.contains(q))
                .map(|(k, j)| (k.clone(), *j))
                .collect(),
        }
    }

    /// Native lossless format: `qid<TAB>entity<TAB>label<TAB>provenance<TAB>depth`.
    pub fn write_tsv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        for ((q, e), j) in &self.labels {
            writeln!(out, "{q}\t{e}\t{}\t{}\t{}", j.label.name(), j.provenance.name(), j.depth)?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, |w| self.write_tsv(w))
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_file(path)?;
        let mut set = JudgmentSet::default();
        for (ln, line) in data_lines(&text) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::malformed(path, ln, "expected 5 tab-separated fields"));
            }
            let bad = |what: &str| Error::malformed(path, ln, format!("bad {what}"));
            let qid: Qid = f[0].parse().map_err(|_| bad("qid"))?;
            let entry = JudgmentEntry {
                label: f[2].parse().map_err(|_| bad("label"))?,
                provenance: f[3].parse().map_err(|_| bad("provenance"))?,
                depth: f[4].parse().map_err(|_| bad("depth"))?,
            };
            set.insert(qid, f[1], entry)?;
        }
        Ok(set)
    }

    /// TREC qrels: `qid 0 entity rel`.
    pub fn write_qrels(&self, out: &mut dyn Write) -> std::io::Result<()> {
        for ((q, e), j) in &self.labels {
            let rel = u8::from(j.label == Label::Positive);
            writeln!(out, "{q} 0 {e} {rel}")?;
        }
        Ok(())
    }

    /// Reads TREC qrels. Provenance is not stored in qrels; positives are
    /// read as original and negatives as annotated, all at depth 0.
    pub fn load_qrels(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_file(path)?;
        let mut set = JudgmentSet::default();
        for (ln, line) in data_lines(&text) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::malformed(path, ln, "expected `qid 0 entity rel`"));
            }
            let qid: Qid = f[0].parse().map_err(|_| Error::malformed(path, ln, "bad qid"))?;
            let label = match f[3] {
                "0" => Label::Negative,
                "1" => Label::Positive,
                other => return Err(Error::malformed(path, ln, format!("relevance {other:?} not in {{0,1}}"))),
            };
            let provenance = match label {
                Label::Positive => Provenance::Original,
                Label::Negative => Provenance::Annotated,
            };
            set.insert(qid, f[2], JudgmentEntry { label, provenance, depth: 0 })?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    Mr,
    Mrr,
    Hits(u32),
    Map20,
    Ndcg20,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetricId {
    pub family: Family,
    pub name: MetricName,
}

impl MetricId {
    pub const MICRO_MR: MetricId = MetricId::micro(MetricName::Mr);
    pub const MICRO_MRR: MetricId = MetricId::micro(MetricName::Mrr);
    pub const MACRO_MRR: MetricId = MetricId::macro_(MetricName::Mrr);
    pub const MAP20: MetricId = MetricId::macro_(MetricName::Map20);
    pub const NDCG20: MetricId = MetricId::macro_(MetricName::Ndcg20);

    pub const fn micro(name: MetricName) -> Self {
        MetricId {
            family: Family::Micro,
            name,
        }
    }

    pub const fn macro_(name: MetricName) -> Self {
        MetricId {
            family: Family::Macro,
            name,
        }
    }

    pub fn new(family: Family, name: MetricName) -> Result<Self> {
        match (family, name) {
            (Family::Macro, MetricName::Mr) | (Family::Micro, MetricName::Map20 | MetricName::Ndcg20) => {
                Err(Error::BadMetric(format!("{family:?} {name:?}")))
            }
            (_, MetricName::Hits(0)) => Err(Error::BadMetric("Hits@0".into())),
            _ => Ok(MetricId { family, name }),
        }
    }

    pub fn lower_is_better(&self) -> bool {
        self.name == MetricName::Mr
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            Family::Micro => "micro",
            Family::Macro => "macro",
        };
        match self.name {
            MetricName::Mr => write!(f, "{fam}.MR"),
            MetricName::Mrr => write!(f, "{fam}.MRR"),
            MetricName::Hits(k) => write!(f, "{fam}.Hits@{k}"),
            MetricName::Map20 => write!(f, "{fam}.MAP@20"),
            MetricName::Ndcg20 => write!(f, "{fam}.nDCG@20"),
        }
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadMetric(s.to_owned());
        let (fam, name) = s.split_once('.').ok_or_else(bad)?;
        let family = match fam.to_ascii_lowercase().as_str() {
            "micro" => Family::Micro,
            "macro" => Family::Macro,
            _ => return Err(bad()),
        };
        let lname = name.to_ascii_lowercase();
        let name = match lname.as_str() {
            "mr" => MetricName::Mr,
            "mrr" => MetricName::Mrr,
            "map@20" => MetricName::Map20,
            "ndcg@20" => MetricName::Ndcg20,
            _ => match lname.strip_prefix("hits@") {
                Some(k) => MetricName::Hits(k.parse().map_err(|_| bad())?),
                None => return Err(bad()),
            },
        };
        MetricId::new(family, name)
    }
}

/// Metric values for one system, with the per-unit values they aggregate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub system: String,
    pub values: BTreeMap<MetricId, f64>,
    pub units: BTreeMap<MetricId, Vec<f64>>,
    /// Unit labels aligned with every vector in `units`.
    pub unit_ids: Vec<String>,
    /// Macro questions skipped for having no positives.
    pub excluded: usize,
}

impl MetricReport {
    pub fn value(&self, m: MetricId) -> Result<f64> {
        self.values
            .get(&m)
            .copied()
            .ok_or_else(|| Error::MissingMetric(format!("{m} for {}", self.system)))
    }

    pub fn unit_values(&self, m: MetricId) -> Result<&[f64]> {
        self.units
            .get(&m)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingMetric(format!("{m} for {}", self.system)))
    }

    /// Adds the metrics of another report for the same system and units.
    pub fn merge(&mut self, other: MetricReport) {
        self.values.extend(other.values);
        self.units.extend(other.units);
        if self.unit_ids.is_empty() {
            self.unit_ids = other.unit_ids;
        }
        self.excluded += other.excluded;
    }
}

/// Writes `system<TAB>metric<TAB>value` lines with six decimals.
pub fn write_report_table(reports: &[MetricReport], out: &mut dyn Write) -> std::io::Result<()> {
    for r in reports {
        for (m, v) in &r.values {
            writeln!(out, "{}\t{m}\t{v:.6}", r.system)?;
        }
    }
    Ok(())
}

/// Writes one `unit<TAB>value` file per (system, metric) below `dir`.
pub fn write_unit_vectors(reports: &[MetricReport], dir: impl AsRef<Path>, header: &str) -> Result<()> {
    let dir = dir.as_ref();
    for r in reports {
        for (m, v) in &r.units {
            let ids = if r.unit_ids.len() == v.len() { &r.unit_ids } else { continue };
            let path = dir.join(&r.system).join(format!("{m}.tsv"));
            write_file(&path, |w| {
                w.write_all(header.as_bytes())?;
                for (id, x) in ids.iter().zip(v) {
                    writeln!(w, "{id}\t{x:.6}")?;
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}

/// Whether micro filters include positives added by annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterRegime {
    /// Known graph triples plus every judged positive of the question.
    #[default]
    Inclusive,
    /// Known graph triples only.
    GraphOnly,
}

impl FromStr for FilterRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inclusive" => Ok(FilterRegime::Inclusive),
            "graph-only" | "original" => Ok(FilterRegime::GraphOnly),
            _ => Err(Error::Invalid(format!("filter regime {s:?}"))),
        }
    }
}

/// Which (question, answer) pairs are micro evaluation units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MicroUnits {
    /// Both directions of every test triple.
    #[default]
    TestTriples,
    /// Test triples plus every judged positive of a test question.
    AllPositives,
}

impl FromStr for MicroUnits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test-triples" => Ok(MicroUnits::TestTriples),
            "all-positives" => Ok(MicroUnits::AllPositives),
            _ => Err(Error::Invalid(format!("micro units {s:?}"))),
        }
    }
}

pub const DEFAULT_KS: [u32; 3] = [1, 3, 10];
pub const MACRO_CUTOFF: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ties: TiePolicy,
    pub ks: Vec<u32>,
    pub regime: FilterRegime,
    pub units: MicroUnits,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ties: TiePolicy::Mean,
            ks: DEFAULT_KS.to_vec(),
            regime: FilterRegime::Inclusive,
            units: MicroUnits::TestTriples,
        }
    }
}

impl EvalConfig {
    pub fn micro_metrics(&self) -> Vec<MetricId> {
        let mut v = vec![MetricId::MICRO_MR, MetricId::MICRO_MRR];
        v.extend(self.ks.iter().map(|&k| MetricId::micro(MetricName::Hits(k))));
        v
    }

    pub fn macro_metrics(&self) -> Vec<MetricId> {
        let mut v = vec![MetricId::MACRO_MRR];
        v.extend(self.ks.iter().map(|&k| MetricId::macro_(MetricName::Hits(k))));
        v.extend([MetricId::MAP20, MetricId::NDCG20]);
        v
    }
}

/// Splits, test questions and filter sets shared by every evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub splits: GraphSplits,
    pub questions: QuestionSet,
    pub micro_filter: FilterSets,
    pub macro_filter: FilterSets,
}

impl EvalContext {
    pub fn new(splits: GraphSplits) -> Self {
        let questions = aggregate_questions(&splits.test, &splits.vocab);
        let micro_filter = FilterSets::micro_filter(&splits, &questions);
        let macro_filter = FilterSets::macro_filter(&splits, &questions);
        EvalContext {
            splits,
            questions,
            micro_filter,
            macro_filter,
        }
    }

    /// Judgments holding only the original test answers.
    pub fn sparse_judgments(&self) -> JudgmentSet {
        JudgmentSet::from_answers(&self.questions, &self.splits.vocab)
    }

    fn qid_for(&self, d: Direction, t: &crate::kg::Triple) -> Qid {
        self.questions
            .qid_of(&QuestionKey::of(d, t))
            .expect("every test triple has both questions")
    }
}

/// One micro evaluation: an answer of a question with its filtered rank.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroUnit {
    /// Index into the test split, `None` for annotated positives.
    pub triple_index: Option<usize>,
    pub direction: Direction,
    pub qid: Qid,
    pub relation: RelationId,
    pub answer: EntityId,
    pub rank: f64,
}

impl MicroUnit {
    pub fn label(&self, vocab: &crate::kg::Vocab) -> String {
        match self.triple_index {
            Some(i) => format!("t{i}:{}", self.direction),
            None => format!("{}:{}", self.qid, vocab.entity_name(self.answer)),
        }
    }
}

pub fn unit_value(metric: MetricName, rank: f64) -> f64 {
    match metric {
        MetricName::Mr => rank,
        MetricName::Mrr => 1.0 / rank,
        MetricName::Hits(k) => f64::from(u8::from(rank <= f64::from(k))),
        MetricName::Map20 | MetricName::Ndcg20 => f64::NAN,
    }
}

/// Resolves the filtered rank of every micro unit of `run`.
pub fn micro_units(ctx: &EvalContext, run: &RunSet, judgments: &JudgmentSet, cfg: &EvalConfig) -> Result<Vec<MicroUnit>> {
    let vocab = &ctx.splits.vocab;
    let mut extra: HashMap<Qid, HashSet<EntityId>> = HashMap::new();
    if cfg.regime == FilterRegime::Inclusive || cfg.units == MicroUnits::AllPositives {
        for (q, e, j) in judgments.iter() {
            if j.label == Label::Positive && ctx.questions.contains(q) {
                if let Some(id) = vocab.entity(e) {
                    extra.entry(q).or_default().insert(id);
                }
            }
        }
    }
    let empty = HashSet::new();

    let mut targets: Vec<(Option<usize>, Direction, Qid, RelationId, EntityId)> = Vec::new();
    for (i, t) in ctx.splits.test.iter().enumerate() {
        for d in Direction::BOTH {
            targets.push((Some(i), d, ctx.qid_for(d, t), t.p, d.target(t)));
        }
    }
    if cfg.units == MicroUnits::AllPositives {
        for (q, answers) in ctx.questions.iter() {
            let mut added: Vec<EntityId> = extra
                .get(&q.qid)
                .into_iter()
                .flatten()
                .copied()
                .filter(|e| !answers.answers.contains(e))
                .collect();
            added.sort_by(|a, b| vocab.entity_name(*a).cmp(vocab.entity_name(*b)));
            targets.extend(added.into_iter().map(|e| (None, q.direction, q.qid, q.relation, e)));
        }
    }

    let mut units = Vec::with_capacity(targets.len());
    let mut failures: Vec<String> = Vec::new();
    for (triple_index, direction, qid, relation, answer) in targets {
        let known = ctx.micro_filter.get(qid).unwrap_or(&empty);
        let added = match cfg.regime {
            FilterRegime::Inclusive => extra.get(&qid).unwrap_or(&empty),
            FilterRegime::GraphOnly => &empty,
        };
        let rank = match &run.data {
            RunData::Ranked(lists) => match lists.get(&qid) {
                Some(list) => rank_excluding(
                    list,
                    answer,
                    cfg.ties,
                    |e| e != answer && (known.contains(&e) || added.contains(&e)),
                    vocab,
                ),
                None => Err(Error::MissingList {
                    tag: run.tag.clone(),
                    qid: qid.to_string(),
                }),
            },
            RunData::TargetRanks(table) => table
                .get(&(qid, answer))
                .copied()
                .ok_or_else(|| Error::Invalid("no target rank".into())),
        };
        match rank {
            Ok(rank) => units.push(MicroUnit {
                triple_index,
                direction,
                qid,
                relation,
                answer,
                rank,
            }),
            Err(Error::Contract(msg)) => return Err(Error::Contract(msg)),
            Err(_) => failures.push(format!("{qid}:{}", vocab.entity_name(answer))),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Unresolvable {
            count: failures.len(),
            examples: failures.iter().take(5).cloned().collect::<Vec<_>>().join(", "),
        });
    }
    Ok(units)
}

/// Relation-weighted micro aggregation. With `weights = None` each relation
/// weighs its share of the units, which reproduces the plain average.
pub fn micro_aggregate(units: &[MicroUnit], metric: MetricName, weights: Option<&HashMap<RelationId, f64>>) -> f64 {
    let mut per_rel: BTreeMap<RelationId, (usize, f64)> = BTreeMap::new();
    for u in units {
        let acc = per_rel.entry(u.relation).or_default();
        acc.0 += 1;
        acc.1 += unit_value(metric, u.rank);
    }
    let total = units.len() as f64;
    per_rel
        .iter()
        .map(|(r, &(n, sum))| {
            let w = match weights {
                Some(w) => w.get(r).copied().unwrap_or(0.0),
                None => n as f64 / total,
            };
            w * (sum / n as f64)
        })
        .sum()
}

fn micro_report(
    system: &str,
    units: &[MicroUnit],
    cfg: &EvalConfig,
    weights: Option<&HashMap<RelationId, f64>>,
    vocab: &crate::kg::Vocab,
) -> MetricReport {
    let mut report = MetricReport {
        system: system.to_owned(),
        unit_ids: units.iter().map(|u| u.label(vocab)).collect(),
        ..Default::default()
    };
    for m in cfg.micro_metrics() {
        report.values.insert(m, micro_aggregate(units, m.name, weights));
        report
            .units
            .insert(m, units.iter().map(|u| unit_value(m.name, u.rank)).collect());
    }
    report
}

pub fn micro_eval(ctx: &EvalContext, run: &RunSet, judgments: &JudgmentSet, cfg: &EvalConfig) -> Result<MetricReport> {
    let units = micro_units(ctx, run, judgments, cfg)?;
    if units.is_empty() {
        return Err(Error::Empty("micro evaluation set".into()));
    }
    Ok(micro_report(&run.tag, &units, cfg, None, &ctx.splits.vocab))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Relation(String),
    CategoryDirection(Category, Direction),
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Relation(r) => f.write_str(r),
            GroupKey::CategoryDirection(c, d) => write!(f, "{c}/{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GroupBy<'a> {
    Relation,
    CategoryDirection(&'a BTreeMap<RelationId, RelationStats>),
}

/// Partitions already resolved micro units into groups.
pub fn group_units(
    units: &[MicroUnit],
    group_by: GroupBy<'_>,
    vocab: &crate::kg::Vocab,
) -> BTreeMap<GroupKey, Vec<MicroUnit>> {
    let mut groups: BTreeMap<GroupKey, Vec<MicroUnit>> = BTreeMap::new();
    for u in units {
        let key = match group_by {
            GroupBy::Relation => Some(GroupKey::Relation(vocab.relation_name(u.relation).to_owned())),
            GroupBy::CategoryDirection(stats) => stats
                .get(&u.relation)
                .map(|s| GroupKey::CategoryDirection(s.category, u.direction)),
        };
        if let Some(k) = key {
            groups.entry(k).or_default().push(u.clone());
        }
    }
    if let GroupBy::CategoryDirection(_) = group_by {
        for c in Category::ALL {
            for d in Direction::BOTH {
                if !groups.contains_key(&GroupKey::CategoryDirection(c, d)) {
                    log::debug!("group {c}/{d} has no evaluations; omitted");
                }
            }
        }
    }
    groups
}

/// Micro metrics restricted to each group of evaluations.
pub fn grouped_micro_eval(
    ctx: &EvalContext,
    run: &RunSet,
    judgments: &JudgmentSet,
    cfg: &EvalConfig,
    group_by: GroupBy<'_>,
) -> Result<BTreeMap<GroupKey, MetricReport>> {
    let units = micro_units(ctx, run, judgments, cfg)?;
    Ok(group_units(&units, group_by, &ctx.splits.vocab)
        .into_iter()
        .map(|(k, us)| {
            let rep = micro_report(&run.tag, &us, cfg, None, &ctx.splits.vocab);
            (k, rep)
        })
        .collect())
}

/// Micro metrics with each relation's share replaced by `weights`.
pub fn reweighted_micro_eval(
    ctx: &EvalContext,
    run: &RunSet,
    judgments: &JudgmentSet,
    cfg: &EvalConfig,
    weights: &RelationDistribution,
) -> Result<MetricReport> {
    let vocab = &ctx.splits.vocab;
    let units = micro_units(ctx, run, judgments, cfg)?;
    let present: BTreeSet<RelationId> = units.iter().map(|u| u.relation).collect();
    let mut w = HashMap::new();
    for &r in &present {
        let name = vocab.relation_name(r);
        let x = weights
            .get(name)
            .ok_or_else(|| Error::WeightMismatch(format!("no weight for relation {name}")))?;
        w.insert(r, x);
    }
    for (name, x) in weights.iter() {
        let evaluated = vocab.relation(name).is_some_and(|r| present.contains(&r));
        if x > 0.0 && !evaluated {
            return Err(Error::WeightMismatch(format!(
                "weight {x} on relation {name} which has no evaluations"
            )));
        }
    }
    Ok(micro_report(&run.tag, &units, cfg, Some(&w), vocab))
}

/// Per-question values of the macro metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroQuestion {
    pub qid: Qid,
    /// 1-based position of the first relevant candidate, if any.
    pub first_relevant: Option<usize>,
    pub ap20: f64,
    pub ndcg20: f64,
}

impl MacroQuestion {
    pub fn value(&self, metric: MetricName) -> f64 {
        match metric {
            MetricName::Mrr => self.first_relevant.map_or(0.0, |r| 1.0 / r as f64),
            MetricName::Hits(k) => f64::from(u8::from(self.first_relevant.is_some_and(|r| r <= k as usize))),
            MetricName::Map20 => self.ap20,
            MetricName::Ndcg20 => self.ndcg20,
            MetricName::Mr => f64::NAN,
        }
    }
}

/// Scores a ranked candidate sequence against a relevant set the way
/// `trec_eval` does, with `num_rel` taken from the judgments.
pub fn score_ranking(qid: Qid, relevant: impl Fn(usize) -> bool, len: usize, num_rel: usize) -> MacroQuestion {
    let mut first = None;
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut dcg = 0.0;
    for i in 0..len {
        if !relevant(i) {
            continue;
        }
        let rank = i + 1;
        first.get_or_insert(rank);
        if rank <= MACRO_CUTOFF {
            hits += 1;
            ap += hits as f64 / rank as f64;
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let ideal: f64 = (1..=num_rel.min(MACRO_CUTOFF))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    MacroQuestion {
        qid,
        first_relevant: first,
        ap20: if num_rel > 0 { ap / num_rel as f64 } else { 0.0 },
        ndcg20: if ideal > 0.0 { dcg / ideal } else { 0.0 },
    }
}

/// Per-question macro results, skipping questions without positives.
/// Returns the scored questions and the number skipped.
pub fn macro_questions(ctx: &EvalContext, run: &RunSet, judgments: &JudgmentSet) -> Result<(Vec<MacroQuestion>, usize)> {
    let vocab = &ctx.splits.vocab;
    let empty = HashSet::new();
    let mut out = Vec::with_capacity(ctx.questions.len());
    let mut excluded = 0usize;
    for (q, _) in ctx.questions.iter() {
        let filter = ctx.macro_filter.get(q.qid).unwrap_or(&empty);
        let positives: HashSet<&str> = judgments
            .positives(q.qid)
            .filter(|e| vocab.entity(e).is_none_or(|id| !filter.contains(&id)))
            .collect();
        if positives.is_empty() {
            excluded += 1;
            continue;
        }
        let list = filtered_candidates(run.require_list(q.qid)?, filter);
        let entries = list.entries();
        out.push(score_ranking(
            q.qid,
            |i| positives.contains(vocab.entity_name(entries[i].0)),
            entries.len(),
            positives.len(),
        ));
    }
    if excluded > 0 {
        log::warn!("{}: {excluded} questions without positives excluded from macro metrics", run.tag);
    }
    Ok((out, excluded))
}

pub fn macro_eval(ctx: &EvalContext, run: &RunSet, judgments: &JudgmentSet, ks: &[u32]) -> Result<MetricReport> {
    let (qs, excluded) = macro_questions(ctx, run, judgments)?;
    if qs.is_empty() {
        return Err(Error::Empty("macro evaluation set (no question has positives)".into()));
    }
    let cfg = EvalConfig {
        ks: ks.to_vec(),
        ..Default::default()
    };
    let mut report = MetricReport {
        system: run.tag.clone(),
        unit_ids: qs.iter().map(|q| q.qid.to_string()).collect(),
        excluded,
        ..Default::default()
    };
    for m in cfg.macro_metrics() {
        let v: Vec<f64> = qs.iter().map(|q| q.value(m.name)).collect();
        report.values.insert(m, v.iter().sum::<f64>() / v.len() as f64);
        report.units.insert(m, v);
    }
    Ok(report)
}

/// Micro and macro reports for one run, merged.
pub fn evaluate(ctx: &EvalContext, run: &RunSet, judgments: &JudgmentSet, cfg: &EvalConfig) -> Result<(MetricReport, MetricReport)> {
    let micro = micro_eval(ctx, run, judgments, cfg)?;
    let macro_ = match run.data {
        RunData::Ranked(_) => macro_eval(ctx, run, judgments, &cfg.ks)?,
        RunData::TargetRanks(_) => MetricReport {
            system: run.tag.clone(),
            ..Default::default()
        },
    };
    Ok((micro, macro_))
}

/// Writes `qrels.txt` and one `<tag>.run` file of macro-filtered lists per run.
pub fn export_trec(ctx: &EvalContext, judgments: &JudgmentSet, runs: &[RunSet], out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    let vocab = &ctx.splits.vocab;
    let keep: BTreeSet<Qid> = ctx.questions.iter().map(|(q, _)| q.qid).collect();
    let mut exported = judgments.restrict(&keep);
    exported.labels.retain(|(q, e), _| {
        vocab
            .entity(e)
            .is_none_or(|id| !ctx.macro_filter.contains(*q, id))
    });
    write_file(out_dir.join("qrels.txt"), |w| exported.write_qrels(w))?;
    for run in runs {
        let filtered = ctx.macro_filter.apply(run);
        filtered.save_trec(vocab, out_dir.join(format!("{}.run", run.tag)))?;
    }
    Ok(())
}
