//! System runs, the filtered setting and per-answer ranks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, GraphSplits, Qid, QuestionKey, QuestionSet, Vocab};
use crate::util::{data_lines, derive_seed, read_file, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completeness {
    Full,
    Truncated(usize),
}

/// Candidates for one question, best first.
///
/// Entries are ordered by score descending; equal scores are ordered by
/// entity identifier descending, which is the order the reference
/// `trec_eval` tool uses when it re-sorts a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub question: Qid,
    entries: Vec<(EntityId, f64)>,
    pub completeness: Completeness,
}

impl RankedList {
    pub fn new(
        question: Qid,
        mut entries: Vec<(EntityId, f64)>,
        completeness: Completeness,
        vocab: &Vocab,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(e, s) in &entries {
            if !s.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite score {s} for {} on {question}",
                    vocab.entity_name(e)
                )));
            }
            if !seen.insert(e) {
                return Err(Error::DuplicatePair {
                    qid: question.to_string(),
                    entity: vocab.entity_name(e).to_owned(),
                });
            }
        }
        entries.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| vocab.entity_name(b.0).cmp(vocab.entity_name(a.0)))
        });
        Ok(RankedList {
            question,
            entries,
            completeness,
        })
    }

    pub fn entries(&self) -> &[(EntityId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score_of(&self, e: EntityId) -> Option<f64> {
        self.entries.iter().find(|(x, _)| *x == e).map(|&(_, s)| s)
    }

    pub fn is_truncated(&self) -> bool {
        matches!(self.completeness, Completeness::Truncated(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    #[default]
    Mean,
    Optimistic,
    Pessimistic,
}

impl TiePolicy {
    pub fn name(self) -> &'static str {
        match self {
            TiePolicy::Mean => "mean",
            TiePolicy::Optimistic => "optimistic",
            TiePolicy::Pessimistic => "pessimistic",
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TiePolicy::Mean),
            "optimistic" => Ok(TiePolicy::Optimistic),
            "pessimistic" => Ok(TiePolicy::Pessimistic),
            _ => Err(Error::Invalid(format!("tie policy {s:?}"))),
        }
    }
}

/// Filtered rank of `target`, ignoring every entity for which `excluded`
/// holds. Mean ranks may be half-integers; they are exact in `f64`.
pub(crate) fn rank_excluding(
    list: &RankedList,
    target: EntityId,
    ties: TiePolicy,
    excluded: impl Fn(EntityId) -> bool,
    vocab: &Vocab,
) -> Result<f64> {
    let Some(score) = list.score_of(target) else {
        return Err(match list.completeness {
            Completeness::Truncated(depth) => Error::RankBeyondDepth {
                qid: list.question.to_string(),
                entity: vocab.entity_name(target).to_owned(),
                depth,
            },
            Completeness::Full => Error::Contract(format!(
                "{} missing from a full list for {}",
                vocab.entity_name(target),
                list.question
            )),
        });
    };
    let (mut above, mut tied) = (0u64, 0u64);
    for &(e, s) in &list.entries {
        if e == target || excluded(e) {
            continue;
        }
        if s > score {
            above += 1;
        } else if s == score {
            tied += 1;
        }
    }
    let base = 1.0 + above as f64;
    Ok(match ties {
        TiePolicy::Optimistic => base,
        TiePolicy::Pessimistic => base + tied as f64,
        TiePolicy::Mean => base + tied as f64 / 2.0,
    })
}

/// Rank of `target` after removing `filter` from the candidates.
pub fn filtered_rank(
    list: &RankedList,
    target: EntityId,
    filter: &HashSet<EntityId>,
    ties: TiePolicy,
    vocab: &Vocab,
) -> Result<f64> {
    if filter.contains(&target) {
        return Err(Error::Contract(format!(
            "target {} is in its own filter for {}",
            vocab.entity_name(target),
            list.question
        )));
    }
    rank_excluding(list, target, ties, |e| filter.contains(&e), vocab)
}

/// Removes filtered entities, keeping order and completeness.
pub fn filtered_candidates(list: &RankedList, filter: &HashSet<EntityId>) -> RankedList {
    RankedList {
        question: list.question,
        entries: list
            .entries
            .iter()
            .filter(|(e, _)| !filter.contains(e))
            .copied()
            .collect(),
        completeness: list.completeness,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunFormat {
    Ranked,
    TargetRanks,
}

impl FromStr for RunFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranked" | "trec" => Ok(RunFormat::Ranked),
            "target-ranks" => Ok(RunFormat::TargetRanks),
            _ => Err(Error::Invalid(format!("run format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunData {
    Ranked(BTreeMap<Qid, RankedList>),
    /// System-reported filtered ranks keyed by (question, answer).
    TargetRanks(BTreeMap<(Qid, EntityId), f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    pub tag: String,
    pub data: RunData,
}

impl RunSet {
    pub fn format(&self) -> RunFormat {
        match self.data {
            RunData::Ranked(_) => RunFormat::Ranked,
            RunData::TargetRanks(_) => RunFormat::TargetRanks,
        }
    }

    pub fn list(&self, qid: Qid) -> Option<&RankedList> {
        match &self.data {
            RunData::Ranked(m) => m.get(&qid),
            RunData::TargetRanks(_) => None,
        }
    }

    pub fn require_list(&self, qid: Qid) -> Result<&RankedList> {
        self.list(qid).ok_or_else(|| Error::MissingList {
            tag: self.tag.clone(),
            qid: qid.to_string(),
        })
    }

    pub fn lists(&self) -> impl Iterator<Item = &RankedList> {
        let m = match &self.data {
            RunData::Ranked(m) => Some(m),
            RunData::TargetRanks(_) => None,
        };
        m.into_iter().flat_map(|m| m.values())
    }

    /// Writes the run in TREC format: `qid Q0 entity rank score tag`.
    pub fn write_trec(&self, vocab: &Vocab, out: &mut dyn Write) -> std::io::Result<()> {
        for list in self.lists() {
            write_trec_list(list, &self.tag, vocab, out)?;
        }
        Ok(())
    }

    pub fn save_trec(&self, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, |w| self.write_trec(vocab, w))
    }
}

pub(crate) fn write_trec_list(list: &RankedList, tag: &str, vocab: &Vocab, out: &mut dyn Write) -> std::io::Result<()> {
    for (i, &(e, s)) in list.entries.iter().enumerate() {
        writeln!(
            out,
            "{} Q0 {} {} {} {}",
            list.question,
            vocab.entity_name(e),
            i + 1,
            s,
            tag
        )?;
    }
    Ok(())
}

/// Loads a run file. Ranked runs have their order re-derived from scores;
/// a rank column that disagrees is reported as a warning.
pub fn load_run(path: impl AsRef<Path>, format: RunFormat, questions: &QuestionSet, vocab: &Vocab) -> Result<RunSet> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let stem_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let lookup_qid = |s: &str| -> Result<Qid> {
        let q: Qid = s.parse()?;
        if !questions.contains(q) {
            return Err(Error::UnknownQuestion(s.to_owned()));
        }
        Ok(q)
    };
    let lookup_entity = |s: &str| vocab.entity(s).ok_or_else(|| Error::UnknownEntity(s.to_owned()));

    match format {
        RunFormat::TargetRanks => {
            let mut table = BTreeMap::new();
            for (ln, line) in data_lines(&text) {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(Error::malformed(path, ln, "expected qid<TAB>entity<TAB>rank"));
                }
                let q = lookup_qid(f[0])?;
                let e = lookup_entity(f[1])?;
                let rank: f64 = f[2]
                    .parse()
                    .ok()
                    .filter(|r: &f64| r.is_finite() && *r >= 1.0)
                    .ok_or_else(|| Error::malformed(path, ln, format!("bad rank {:?}", f[2])))?;
                if table.insert((q, e), rank).is_some() {
                    return Err(Error::DuplicatePair {
                        qid: f[0].to_owned(),
                        entity: f[1].to_owned(),
                    });
                }
            }
            Ok(RunSet {
                tag: stem_tag,
                data: RunData::TargetRanks(table),
            })
        }
        RunFormat::Ranked => {
            let mut raw: BTreeMap<Qid, Vec<(EntityId, f64, u64)>> = BTreeMap::new();
            let mut seen: HashSet<(Qid, EntityId)> = HashSet::new();
            let mut tag: Option<String> = None;
            for (ln, line) in data_lines(&text) {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 6 {
                    return Err(Error::malformed(path, ln, "expected `qid Q0 entity rank score tag`"));
                }
                let q = lookup_qid(f[0])?;
                let e = lookup_entity(f[2])?;
                let rank: u64 = f[3]
                    .parse()
                    .map_err(|_| Error::malformed(path, ln, format!("bad rank {:?}", f[3])))?;
                let score: f64 = f[4]
                    .parse()
                    .ok()
                    .filter(|s: &f64| s.is_finite())
                    .ok_or_else(|| Error::malformed(path, ln, format!("non-numeric score {:?}", f[4])))?;
                if !seen.insert((q, e)) {
                    return Err(Error::DuplicatePair {
                        qid: f[0].to_owned(),
                        entity: f[2].to_owned(),
                    });
                }
                match &tag {
                    None => tag = Some(f[5].to_owned()),
                    Some(t) if t != f[5] => {
                        log::warn!("{}:{ln}: tag {} differs from {t}", path.display(), f[5]);
                    }
                    _ => {}
                }
                raw.entry(q).or_default().push((e, score, rank));
            }
            let universe = vocab.num_entities();
            let mut lists = BTreeMap::new();
            let mut mismatched = 0usize;
            for (q, rows) in raw {
                let completeness = if rows.len() == universe {
                    Completeness::Full
                } else {
                    Completeness::Truncated(rows.len())
                };
                let given: HashMap<EntityId, u64> = rows.iter().map(|&(e, _, r)| (e, r)).collect();
                let list = RankedList::new(q, rows.into_iter().map(|(e, s, _)| (e, s)).collect(), completeness, vocab)?;
                mismatched += list
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(i, (e, _))| given[e] != *i as u64 + 1)
                    .count();
                lists.insert(q, list);
            }
            if mismatched > 0 {
                log::warn!(
                    "{}: {mismatched} rank column values disagree with score order; using scores",
                    path.display()
                );
            }
            Ok(RunSet {
                tag: tag.unwrap_or(stem_tag),
                data: RunData::Ranked(lists),
            })
        }
    }
}

/// Known positives per question, used as the exclusion sets of the filtered setting.
#[derive(Debug, Clone, Default)]
pub struct FilterSets {
    known: HashMap<Qid, HashSet<EntityId>>,
}

impl FilterSets {
    /// Entities observed for each question in train ∪ valid (macro filter).
    pub fn macro_filter(splits: &GraphSplits, questions: &QuestionSet) -> Self {
        Self::from_triples(splits.train.iter().chain(&splits.valid), questions)
    }

    /// Entities observed for each question anywhere in the graph (micro filter base).
    pub fn micro_filter(splits: &GraphSplits, questions: &QuestionSet) -> Self {
        Self::from_triples(splits.all_triples(), questions)
    }

    fn from_triples<'a>(triples: impl Iterator<Item = &'a crate::kg::Triple>, questions: &QuestionSet) -> Self {
        let mut known: HashMap<Qid, HashSet<EntityId>> = HashMap::new();
        for t in triples {
            for d in Direction::BOTH {
                if let Some(q) = questions.qid_of(&QuestionKey::of(d, t)) {
                    known.entry(q).or_default().insert(d.target(t));
                }
            }
        }
        FilterSets { known }
    }

    pub fn get(&self, qid: Qid) -> Option<&HashSet<EntityId>> {
        self.known.get(&qid)
    }

    pub fn contains(&self, qid: Qid, e: EntityId) -> bool {
        self.known.get(&qid).is_some_and(|s| s.contains(&e))
    }

    pub fn add(&mut self, qid: Qid, e: EntityId) {
        self.known.entry(qid).or_default().insert(e);
    }

    /// Macro-filtered copy of a ranked run.
    pub fn apply(&self, run: &RunSet) -> RunSet {
        let data = match &run.data {
            RunData::Ranked(m) => RunData::Ranked(
                m.iter()
                    .map(|(q, l)| {
                        let filtered = match self.known.get(q) {
                            Some(f) => filtered_candidates(l, f),
                            None => l.clone(),
                        };
                        (*q, filtered)
                    })
                    .collect(),
            ),
            other => other.clone(),
        };
        RunSet {
            tag: run.tag.clone(),
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMode {
    /// Candidates ordered by how often they answer (relation, direction) in train.
    Frequency,
    Random { seed: u64 },
    /// True answers first, then `swap_rate`-probability adjacent swaps down the list.
    OracleNoise { seed: u64, swap_rate: f64 },
}

impl BaselineMode {
    pub fn default_tag(&self) -> String {
        match self {
            BaselineMode::Frequency => "frequency".into(),
            BaselineMode::Random { seed } => format!("random-{seed}"),
            BaselineMode::OracleNoise { seed, swap_rate } => format!("oracle-noise-{seed}-{swap_rate}"),
        }
    }
}

/// Synthetic system producing a full list over every entity for every question.
pub fn baseline_run(splits: &GraphSplits, questions: &QuestionSet, mode: BaselineMode) -> Result<RunSet> {
    let vocab = &splits.vocab;
    let mut by_name: Vec<EntityId> = vocab.entity_ids().collect();
    by_name.sort_by(|a, b| vocab.entity_name(*a).cmp(vocab.entity_name(*b)));
    let n = by_name.len();

    let mut freq_order: HashMap<(crate::kg::RelationId, Direction), Vec<EntityId>> = HashMap::new();
    if mode == BaselineMode::Frequency {
        let mut counts: HashMap<(crate::kg::RelationId, Direction), HashMap<EntityId, u64>> = HashMap::new();
        for t in &splits.train {
            for d in Direction::BOTH {
                *counts.entry((t.p, d)).or_default().entry(d.target(t)).or_default() += 1;
            }
        }
        for (q, _) in questions.iter() {
            let key = (q.relation, q.direction);
            freq_order.entry(key).or_insert_with(|| {
                let c = counts.get(&key);
                let mut order = by_name.clone();
                // stable sort keeps name order among equal counts
                order.sort_by_key(|e| std::cmp::Reverse(c.and_then(|c| c.get(e)).copied().unwrap_or(0)));
                order
            });
        }
    }
    if let BaselineMode::OracleNoise { swap_rate, .. } = mode {
        if !(0.0..=1.0).contains(&swap_rate) {
            return Err(Error::Invalid(format!("swap rate {swap_rate} outside [0, 1]")));
        }
    }

    let mut lists = BTreeMap::new();
    for (q, answers) in questions.iter() {
        let order: Vec<EntityId> = match mode {
            BaselineMode::Frequency => freq_order[&(q.relation, q.direction)].clone(),
            BaselineMode::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[q.qid.0 as u64]));
                let mut order = by_name.clone();
                order.shuffle(&mut rng);
                order
            }
            BaselineMode::OracleNoise { seed, swap_rate } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[q.qid.0 as u64]));
                let mut truth: Vec<EntityId> = answers.answers.iter().copied().collect();
                truth.sort_by(|a, b| vocab.entity_name(*a).cmp(vocab.entity_name(*b)));
                let mut rest: Vec<EntityId> =
                    by_name.iter().copied().filter(|e| !answers.answers.contains(e)).collect();
                rest.shuffle(&mut rng);
                truth.extend(rest);
                if swap_rate > 0.0 {
                    for i in 0..truth.len().saturating_sub(1) {
                        if rng.gen::<f64>() < swap_rate {
                            truth.swap(i, i + 1);
                        }
                    }
                }
                truth
            }
        };
        let entries = order
            .into_iter()
            .enumerate()
            .map(|(i, e)| (e, (n - i) as f64))
            .collect();
        lists.insert(q.qid, RankedList::new(q.qid, entries, Completeness::Full, vocab)?);
    }
    Ok(RunSet {
        tag: mode.default_tag(),
        data: RunData::Ranked(lists),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::aggregate_questions;

    fn vocab_with(names: &[&str]) -> (Vocab, Vec<EntityId>) {
        let mut v = Vocab::default();
        let ids = names.iter().map(|n| v.intern_entity(n)).collect();
        (v, ids)
    }

    fn list(v: &Vocab, ids: &[EntityId], scores: &[f64]) -> RankedList {
        RankedList::new(
            Qid(1),
            ids.iter().copied().zip(scores.iter().copied()).collect(),
            Completeness::Full,
            v,
        )
        .unwrap()
    }

    #[test]
    fn sorted_by_score() {
        let (v, e) = vocab_with(&["e1", "e2", "e3"]);
        let l = list(&v, &[e[2], e[0], e[1]], &[0.1, 0.9, 0.5]);
        let order: Vec<_> = l.entries().iter().map(|(x, _)| *x).collect();
        assert_eq!(order, vec![e[0], e[1], e[2]]);
    }

    #[test]
    fn filtered_entities_above_are_skipped() {
        let (v, e) = vocab_with(&["a", "b", "c", "d", "t", "z"]);
        let l = list(&v, &e, &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let filter: HashSet<_> = [e[0], e[2]].into_iter().collect();
        assert_eq!(filtered_rank(&l, e[4], &HashSet::new(), TiePolicy::Mean, &v).unwrap(), 5.0);
        assert_eq!(filtered_rank(&l, e[4], &filter, TiePolicy::Mean, &v).unwrap(), 3.0);
    }

    #[test]
    fn tie_policies() {
        let (v, e) = vocab_with(&["t", "x", "y", "low"]);
        let l = list(&v, &e, &[1.0, 1.0, 1.0, 0.0]);
        let none = HashSet::new();
        assert_eq!(filtered_rank(&l, e[0], &none, TiePolicy::Mean, &v).unwrap(), 2.0);
        assert_eq!(filtered_rank(&l, e[0], &none, TiePolicy::Optimistic, &v).unwrap(), 1.0);
        assert_eq!(filtered_rank(&l, e[0], &none, TiePolicy::Pessimistic, &v).unwrap(), 3.0);
    }

    #[test]
    fn target_in_filter_or_beyond_depth() {
        let (v, e) = vocab_with(&["a", "b", "c"]);
        let l = list(&v, &e[..2], &[2.0, 1.0]);
        let f: HashSet<_> = [e[0]].into_iter().collect();
        assert!(matches!(
            filtered_rank(&l, e[0], &f, TiePolicy::Mean, &v),
            Err(Error::Contract(_))
        ));
        let t = RankedList::new(Qid(1), vec![(e[0], 1.0)], Completeness::Truncated(1), &v).unwrap();
        assert!(matches!(
            filtered_rank(&t, e[2], &HashSet::new(), TiePolicy::Mean, &v),
            Err(Error::RankBeyondDepth { depth: 1, .. })
        ));
    }

    #[test]
    fn candidate_filtering() {
        let (v, e) = vocab_with(&["e1", "e2", "e3"]);
        let l = list(&v, &e, &[3.0, 2.0, 1.0]);
        let f: HashSet<_> = [e[1]].into_iter().collect();
        let out = filtered_candidates(&l, &f);
        assert_eq!(out.entries().iter().map(|x| x.0).collect::<Vec<_>>(), vec![e[0], e[2]]);
        assert_eq!(filtered_candidates(&l, &HashSet::new()), l);
        let all: HashSet<_> = e.iter().copied().collect();
        assert!(filtered_candidates(&l, &all).is_empty());
    }

    #[test]
    fn duplicate_entity_rejected() {
        let (v, e) = vocab_with(&["a"]);
        let r = RankedList::new(Qid(1), vec![(e[0], 1.0), (e[0], 0.5)], Completeness::Full, &v);
        assert!(matches!(r, Err(Error::DuplicatePair { .. })));
    }

    #[test]
    fn frequency_baseline_orders_by_train_counts() {
        let mut train = Vec::new();
        let heads: Vec<String> = (0..13).map(|i| format!("h{i}")).collect();
        for (i, h) in heads.iter().enumerate() {
            let o = if i < 10 { "x" } else { "y" };
            train.push((h.as_str(), "p", o));
        }
        let g = GraphSplits::from_names(&train, &[], &[("q", "p", "w")]).unwrap();
        let qs = aggregate_questions(&g.test, &g.vocab);
        let run = baseline_run(&g, &qs, BaselineMode::Frequency).unwrap();
        let tail_q = qs
            .iter()
            .find(|(q, _)| q.direction == Direction::Tail)
            .unwrap()
            .0
            .qid;
        let order: Vec<&str> = run
            .list(tail_q)
            .unwrap()
            .entries()
            .iter()
            .map(|(e, _)| g.vocab.entity_name(*e))
            .collect();
        assert_eq!(&order[..2], &["x", "y"]);
    }
}
