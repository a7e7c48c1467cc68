//! Knowledge-graph splits, triple questions and relation statistics.
//!
//! Entities and relations are interned into dense ids in file order
//! (train, then valid, then test). Anything that must be stable across
//! differently ordered inputs, such as question ids, is derived from the
//! identifier strings rather than from the interned ids.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexSet;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

/// Interned entity and relation identifiers.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    entities: IndexSet<String>,
    relations: IndexSet<String>,
}

impl Vocab {
    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(i) = self.entities.get_index_of(name) {
            return EntityId(i as u32);
        }
        let (i, _) = self.entities.insert_full(name.to_owned());
        EntityId(i as u32)
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(i) = self.relations.get_index_of(name) {
            return RelationId(i as u32);
        }
        let (i, _) = self.relations.insert_full(name.to_owned());
        RelationId(i as u32)
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get_index_of(name).map(|i| EntityId(i as u32))
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relations.get_index_of(name).map(|i| RelationId(i as u32))
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.0 as usize]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.0 as usize]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.relations.len() as u32).map(RelationId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub s: EntityId,
    pub p: RelationId,
    pub o: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Train/valid/test triples over a shared vocabulary.
#[derive(Debug, Clone, Default)]
pub struct GraphSplits {
    pub vocab: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

struct RawLine<'a> {
    line: usize,
    fields: [&'a str; 3],
}

fn parse_triple_lines<'a>(path: &Path, text: &'a str) -> Result<Vec<RawLine<'a>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split('\t');
        let fields = match (it.next(), it.next(), it.next(), it.next()) {
            (Some(s), Some(p), Some(o), None) if !s.is_empty() && !p.is_empty() && !o.is_empty() => {
                [s, p, o]
            }
            _ => {
                return Err(Error::malformed(
                    path,
                    i + 1,
                    "expected three non-empty tab-separated fields",
                ))
            }
        };
        out.push(RawLine { line: i + 1, fields });
    }
    Ok(out)
}

impl GraphSplits {
    /// Loads the three split files. Duplicates within a split and triples
    /// shared between splits are rejected.
    pub fn load(train: impl AsRef<Path>, valid: impl AsRef<Path>, test: impl AsRef<Path>) -> Result<Self> {
        let paths = [train.as_ref(), valid.as_ref(), test.as_ref()];
        let mut texts = Vec::with_capacity(3);
        for p in paths {
            texts.push(fs::read_to_string(p).map_err(|e| Error::io(p, e))?);
        }
        let mut parsed = Vec::with_capacity(3);
        for (p, t) in paths.iter().zip(&texts) {
            parsed.push(parse_triple_lines(p, t)?);
        }
        let [tr, va, te]: [Vec<RawLine>; 3] = parsed.try_into().ok().expect("three splits");
        Self::build(
            tr.iter().map(|r| (r.line, r.fields)),
            va.iter().map(|r| (r.line, r.fields)),
            te.iter().map(|r| (r.line, r.fields)),
        )
    }

    /// Builds splits from in-memory `(subject, relation, object)` names.
    pub fn from_names<'a>(
        train: &[(&'a str, &'a str, &'a str)],
        valid: &[(&'a str, &'a str, &'a str)],
        test: &[(&'a str, &'a str, &'a str)],
    ) -> Result<Self> {
        let conv = |v: &[(&'a str, &'a str, &'a str)]| -> Vec<(usize, [&'a str; 3])> {
            v.iter().enumerate().map(|(i, &(s, p, o))| (i + 1, [s, p, o])).collect()
        };
        Self::build(conv(train), conv(valid), conv(test))
    }

    fn build<'a>(
        train: impl IntoIterator<Item = (usize, [&'a str; 3])>,
        valid: impl IntoIterator<Item = (usize, [&'a str; 3])>,
        test: impl IntoIterator<Item = (usize, [&'a str; 3])>,
    ) -> Result<Self> {
        let mut vocab = Vocab::default();
        let mut owner: HashMap<Triple, Split> = HashMap::new();
        let mut intern = |split: Split,
                          lines: &mut dyn Iterator<Item = (usize, [&'a str; 3])>,
                          vocab: &mut Vocab|
         -> Result<Vec<Triple>> {
            let mut out = Vec::new();
            for (line, [s, p, o]) in lines {
                let t = Triple {
                    s: vocab.intern_entity(s),
                    p: vocab.intern_relation(p),
                    o: vocab.intern_entity(o),
                };
                match owner.get(&t) {
                    Some(&prev) if prev == split => {
                        return Err(Error::DuplicateTriple {
                            split: split.name(),
                            line,
                            triple: format!("({s}, {p}, {o})"),
                        })
                    }
                    Some(&prev) => {
                        return Err(Error::SplitOverlap {
                            triple: format!("({s}, {p}, {o})"),
                            first: prev.name(),
                            second: split.name(),
                        })
                    }
                    None => {
                        owner.insert(t, split);
                    }
                }
                out.push(t);
            }
            Ok(out)
        };
        let train = intern(Split::Train, &mut train.into_iter(), &mut vocab)?;
        let valid = intern(Split::Valid, &mut valid.into_iter(), &mut vocab)?;
        let test = intern(Split::Test, &mut test.into_iter(), &mut vocab)?;
        Ok(GraphSplits {
            vocab,
            train,
            valid,
            test,
        })
    }

    pub fn split(&self, which: Split) -> &[Triple] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn describe(&self, t: &Triple) -> String {
        format!(
            "({}, {}, {})",
            self.vocab.entity_name(t.s),
            self.vocab.relation_name(t.p),
            self.vocab.entity_name(t.o)
        )
    }

    /// Reads a triple file as raw names, e.g. a reference split that is only
    /// used for its relation distribution.
    pub fn load_triples_named(path: impl AsRef<Path>) -> Result<Vec<(String, String, String)>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(parse_triple_lines(path, &text)?
            .into_iter()
            .map(|r| (r.fields[0].to_owned(), r.fields[1].to_owned(), r.fields[2].to_owned()))
            .collect())
    }
}

/// Which slot of a triple is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Head,
    Tail,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Head, Direction::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Head => "head",
            Direction::Tail => "tail",
        }
    }

    /// The entity a question in this direction asks for.
    pub fn target(self, t: &Triple) -> EntityId {
        match self {
            Direction::Head => t.s,
            Direction::Tail => t.o,
        }
    }

    /// The entity a question in this direction keeps.
    pub fn anchor(self, t: &Triple) -> EntityId {
        match self {
            Direction::Head => t.o,
            Direction::Tail => t.s,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Direction::Head),
            "tail" => Ok(Direction::Tail),
            _ => Err(Error::Invalid(format!("direction {s:?}"))),
        }
    }
}

/// Question id, printed as `q` followed by a zero-padded 7-digit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Qid(pub u32);

impl fmt::Display for Qid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{:07}", self.0)
    }
}

impl FromStr for Qid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('q')
            .filter(|d| d.len() >= 7 && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse().ok())
            .map(Qid)
            .ok_or_else(|| Error::UnknownQuestion(s.to_owned()))
    }
}

impl From<Qid> for String {
    fn from(q: Qid) -> String {
        q.to_string()
    }
}

impl TryFrom<String> for Qid {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuestionKey {
    pub direction: Direction,
    pub anchor: EntityId,
    pub relation: RelationId,
}

impl QuestionKey {
    pub fn of(direction: Direction, t: &Triple) -> Self {
        QuestionKey {
            direction,
            anchor: direction.anchor(t),
            relation: t.p,
        }
    }

    /// Rebuilds the triple obtained by putting `answer` into the masked slot.
    pub fn complete(&self, answer: EntityId) -> Triple {
        match self.direction {
            Direction::Head => Triple {
                s: answer,
                p: self.relation,
                o: self.anchor,
            },
            Direction::Tail => Triple {
                s: self.anchor,
                p: self.relation,
                o: answer,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TripleQuestion {
    pub qid: Qid,
    pub direction: Direction,
    pub anchor: EntityId,
    pub relation: RelationId,
}

impl TripleQuestion {
    pub fn key(&self) -> QuestionKey {
        QuestionKey {
            direction: self.direction,
            anchor: self.anchor,
            relation: self.relation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSet {
    pub question: Qid,
    pub answers: BTreeSet<EntityId>,
}

/// Aggregated questions with their answer sets, indexed by qid and key.
#[derive(Debug, Clone, Default)]
pub struct QuestionSet {
    items: Vec<(TripleQuestion, AnswerSet)>,
    by_key: HashMap<QuestionKey, usize>,
}

impl QuestionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(TripleQuestion, AnswerSet)> {
        self.items.iter()
    }

    pub fn get(&self, qid: Qid) -> Option<&(TripleQuestion, AnswerSet)> {
        self.position(qid).map(|i| &self.items[i])
    }

    pub fn lookup(&self, key: &QuestionKey) -> Option<&(TripleQuestion, AnswerSet)> {
        self.by_key.get(key).map(|&i| &self.items[i])
    }

    pub fn qid_of(&self, key: &QuestionKey) -> Option<Qid> {
        self.lookup(key).map(|(q, _)| q.qid)
    }

    /// Restricts to the given qids, keeping the original ids.
    pub fn subset(&self, keep: &BTreeSet<Qid>) -> QuestionSet {
        let mut out = QuestionSet::default();
        for item in &self.items {
            if keep.contains(&item.0.qid) {
                out.by_key.insert(item.0.key(), out.items.len());
                out.items.push(item.clone());
            }
        }
        out
    }

    pub fn contains(&self, qid: Qid) -> bool {
        self.position(qid).is_some()
    }

    fn position(&self, qid: Qid) -> Option<usize> {
        // qids are dense from 1 in a full set; subsets fall back to a search
        let guess = (qid.0 as usize).checked_sub(1)?;
        if self.items.get(guess).is_some_and(|(q, _)| q.qid == qid) {
            return Some(guess);
        }
        self.items.binary_search_by_key(&qid, |(q, _)| q.qid).ok()
    }

    /// Writes `qid<TAB>direction<TAB>anchor<TAB>relation` lines sorted by qid.
    pub fn write_mapping(&self, vocab: &Vocab, out: &mut impl Write) -> std::io::Result<()> {
        for (q, _) in &self.items {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                q.qid,
                q.direction,
                vocab.entity_name(q.anchor),
                vocab.relation_name(q.relation)
            )?;
        }
        Ok(())
    }

    pub fn save_mapping(&self, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_mapping(vocab, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads a question mapping file into `(qid, direction, anchor, relation)` rows.
pub fn read_mapping(path: impl AsRef<Path>) -> Result<Vec<(Qid, Direction, String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::malformed(path, i + 1, "expected 4 tab-separated fields"));
        }
        let qid = f[0]
            .parse()
            .map_err(|_| Error::malformed(path, i + 1, format!("bad qid {:?}", f[0])))?;
        let dir = f[1]
            .parse()
            .map_err(|_| Error::malformed(path, i + 1, format!("bad direction {:?}", f[1])))?;
        rows.push((qid, dir, f[2].to_owned(), f[3].to_owned()));
    }
    Ok(rows)
}

/// Converts every triple into a head and a tail question, merging identical
/// questions. Qids follow the order of (relation, direction, anchor) names.
pub fn aggregate_questions(split: &[Triple], vocab: &Vocab) -> QuestionSet {
    let mut groups: HashMap<QuestionKey, BTreeSet<EntityId>> = HashMap::new();
    for t in split {
        for d in Direction::BOTH {
            groups.entry(QuestionKey::of(d, t)).or_default().insert(d.target(t));
        }
    }
    let mut keys: Vec<QuestionKey> = groups.keys().copied().collect();
    keys.sort_by(|a, b| {
        vocab
            .relation_name(a.relation)
            .cmp(vocab.relation_name(b.relation))
            .then(a.direction.cmp(&b.direction))
            .then_with(|| vocab.entity_name(a.anchor).cmp(vocab.entity_name(b.anchor)))
    });
    let mut set = QuestionSet::default();
    for (i, key) in keys.into_iter().enumerate() {
        let qid = Qid(i as u32 + 1);
        let answers = groups.remove(&key).unwrap_or_default();
        set.by_key.insert(key, i);
        set.items.push((
            TripleQuestion {
                qid,
                direction: key.direction,
                anchor: key.anchor,
                relation: key.relation,
            },
            AnswerSet { question: qid, answers },
        ));
    }
    set
}

/// Relation mapping category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::OneToOne,
        Category::OneToMany,
        Category::ManyToOne,
        Category::ManyToMany,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::OneToOne => "1-1",
            Category::OneToMany => "1-N",
            Category::ManyToOne => "N-1",
            Category::ManyToMany => "N-N",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type Rational = Ratio<u64>;

pub fn default_category_threshold() -> Rational {
    Ratio::new(3, 2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationStats {
    pub relation: RelationId,
    pub test_count: usize,
    pub avg_tails_per_head: Rational,
    pub avg_heads_per_tail: Rational,
    pub category: Category,
}

/// Classifies every relation that occurs in any split. Averages are taken
/// over train ∪ valid ∪ test; a value equal to the threshold counts as "1".
pub fn classify_relations(
    splits: &GraphSplits,
    threshold: Rational,
) -> Result<BTreeMap<RelationId, RelationStats>> {
    if *threshold.numer() == 0 {
        return Err(Error::Invalid("category threshold must be positive".into()));
    }
    #[derive(Default)]
    struct Acc {
        n: u64,
        heads: HashSet<EntityId>,
        tails: HashSet<EntityId>,
        test: usize,
    }
    let mut acc: BTreeMap<RelationId, Acc> = BTreeMap::new();
    for t in splits.all_triples() {
        let a = acc.entry(t.p).or_default();
        a.n += 1;
        a.heads.insert(t.s);
        a.tails.insert(t.o);
    }
    for t in &splits.test {
        acc.entry(t.p).or_default().test += 1;
    }
    for r in splits.vocab.relation_ids() {
        if !acc.contains_key(&r) {
            log::warn!(
                "relation {} has no occurrences; excluded from classification",
                splits.vocab.relation_name(r)
            );
        }
    }
    Ok(acc
        .into_iter()
        .map(|(r, a)| {
            let tph = Ratio::new(a.n, a.heads.len() as u64);
            let hpt = Ratio::new(a.n, a.tails.len() as u64);
            let category = match (tph > threshold, hpt > threshold) {
                (false, false) => Category::OneToOne,
                (true, false) => Category::OneToMany,
                (false, true) => Category::ManyToOne,
                (true, true) => Category::ManyToMany,
            };
            (
                r,
                RelationStats {
                    relation: r,
                    test_count: a.test,
                    avg_tails_per_head: tph,
                    avg_heads_per_tail: hpt,
                    category,
                },
            )
        })
        .collect())
}

/// Probability of each relation, keyed by relation name so distributions
/// from separately loaded files can be compared.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelationDistribution {
    probs: BTreeMap<String, f64>,
}

impl RelationDistribution {
    pub fn from_counts<S: AsRef<str>>(counts: impl IntoIterator<Item = (S, u64)>) -> Result<Self> {
        let counts: Vec<(String, u64)> = counts
            .into_iter()
            .map(|(k, v)| (k.as_ref().to_owned(), v))
            .collect();
        let total: u64 = counts.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return Err(Error::Empty("relation counts".into()));
        }
        let mut probs = BTreeMap::new();
        for (k, c) in counts {
            *probs.entry(k).or_insert(0.0) += c as f64 / total as f64;
        }
        Ok(RelationDistribution { probs })
    }

    /// Builds a distribution from explicit weights, normalising them to sum to one.
    pub fn from_weights<S: AsRef<str>>(weights: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let mut probs = BTreeMap::new();
        for (k, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("weight {w} for {}", k.as_ref())));
            }
            *probs.entry(k.as_ref().to_owned()).or_insert(0.0) += w;
        }
        let total: f64 = probs.values().sum();
        if total <= 0.0 {
            return Err(Error::Empty("relation weights".into()));
        }
        probs.values_mut().for_each(|v| *v /= total);
        Ok(RelationDistribution { probs })
    }

    pub fn get(&self, relation: &str) -> Option<f64> {
        self.probs.get(relation).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Number of relations with non-zero probability.
    pub fn support_size(&self) -> usize {
        self.probs.values().filter(|&&p| p > 0.0).count()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn relation_counts<'a>(
    split: impl IntoIterator<Item = &'a Triple>,
    vocab: &Vocab,
) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for t in split {
        *counts.entry(vocab.relation_name(t.p).to_owned()).or_insert(0) += 1;
    }
    counts
}

pub fn relation_distribution(split: &[Triple], vocab: &Vocab) -> Result<RelationDistribution> {
    if split.is_empty() {
        return Err(Error::Empty("split".into()));
    }
    RelationDistribution::from_counts(relation_counts(split, vocab))
}

pub const DEFAULT_KLD_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    None,
    /// Adds the constant to every relation in the union of supports, then renormalises.
    Epsilon(f64),
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Epsilon(DEFAULT_KLD_EPSILON)
    }
}

/// KL(p ‖ q) in nats.
pub fn kl_divergence(p: &RelationDistribution, q: &RelationDistribution, smoothing: Smoothing) -> Result<f64> {
    let support: BTreeSet<&str> = p.probs.keys().chain(q.probs.keys()).map(String::as_str).collect();
    let (pv, qv): (Vec<f64>, Vec<f64>) = support
        .iter()
        .map(|r| (p.get(r).unwrap_or(0.0), q.get(r).unwrap_or(0.0)))
        .unzip();
    let (pv, qv) = match smoothing {
        Smoothing::None => (pv, qv),
        Smoothing::Epsilon(eps) => {
            let smooth = |v: Vec<f64>| {
                let total: f64 = v.iter().map(|x| x + eps).sum();
                v.into_iter().map(|x| (x + eps) / total).collect::<Vec<_>>()
            };
            (smooth(pv), smooth(qv))
        }
    };
    let mut kl = 0.0;
    for ((r, &pi), &qi) in support.iter().zip(&pv).zip(&qv) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::ZeroReference((*r).to_owned()));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn splits(test: &[(&'static str, &'static str, &'static str)]) -> GraphSplits {
        GraphSplits::from_names(&[], &[], test).unwrap()
    }

    #[test]
    fn aggregation_merges_shared_tail_question() {
        let g = splits(&[("Trump", "visited", "China"), ("Trump", "visited", "Japan")]);
        let qs = aggregate_questions(&g.test, &g.vocab);
        // 1 tail question + 2 head questions
        assert_eq!(qs.len(), 3);
        let key = QuestionKey {
            direction: Direction::Tail,
            anchor: g.vocab.entity("Trump").unwrap(),
            relation: g.vocab.relation("visited").unwrap(),
        };
        let (_, ans) = qs.lookup(&key).unwrap();
        let names: Vec<&str> = ans.answers.iter().map(|&e| g.vocab.entity_name(e)).collect();
        assert_eq!(names.len(), 2);
        assert!(names.contains(&"China") && names.contains(&"Japan"));
    }

    #[test]
    fn single_triple_gives_two_questions() {
        let g = splits(&[("a", "r", "b")]);
        let qs = aggregate_questions(&g.test, &g.vocab);
        assert_eq!(qs.len(), 2);
        assert!(qs.iter().all(|(_, a)| a.answers.len() == 1));
        // head sorts before tail under the same relation
        assert_eq!(qs.iter().next().unwrap().0.direction, Direction::Head);
        assert_eq!(qs.iter().next().unwrap().0.qid.to_string(), "q0000001");
    }

    #[test]
    fn shared_subject_relation() {
        // n = 3: one tail question with 3 answers, 3 head questions with 1 answer each
        let g = splits(&[("s", "r", "x"), ("s", "r", "y"), ("s", "r", "z")]);
        let qs = aggregate_questions(&g.test, &g.vocab);
        assert_eq!(qs.len(), 4);
        let tails: Vec<_> = qs.iter().filter(|(q, _)| q.direction == Direction::Tail).collect();
        assert_eq!(tails.len(), 1);
        assert_eq!(tails[0].1.answers.len(), 3);
        assert!(qs
            .iter()
            .filter(|(q, _)| q.direction == Direction::Head)
            .all(|(_, a)| a.answers.len() == 1));
    }

    #[test]
    fn qid_roundtrip_and_rejects_garbage() {
        assert_eq!("q0000042".parse::<Qid>().unwrap(), Qid(42));
        assert!("x0000042".parse::<Qid>().is_err());
        assert!("q42".parse::<Qid>().is_err());
    }

    #[test]
    fn categories_from_hand_counts() {
        let g = GraphSplits::from_names(
            &[("a", "r1", "x"), ("a", "r1", "y"), ("a", "r3", "x"), ("b", "r3", "x")],
            &[("b", "r1", "z"), ("c", "r3", "x")],
            &[("k", "r2", "m")],
        )
        .unwrap();
        let stats = classify_relations(&g, default_category_threshold()).unwrap();
        let r1 = &stats[&g.vocab.relation("r1").unwrap()];
        assert_eq!(r1.avg_tails_per_head, Ratio::new(3, 2));
        assert_eq!(r1.avg_heads_per_tail, Ratio::new(1, 1));
        assert_eq!(r1.category, Category::OneToOne);
        let r2 = &stats[&g.vocab.relation("r2").unwrap()];
        assert_eq!(r2.category, Category::OneToOne);
        assert_eq!(r2.test_count, 1);
        let r3 = &stats[&g.vocab.relation("r3").unwrap()];
        assert_eq!(r3.avg_heads_per_tail, Ratio::new(3, 1));
        assert_eq!(r3.category, Category::ManyToOne);
        let total: usize = stats.values().map(|s| s.test_count).sum();
        assert_eq!(total, g.test.len());
    }

    #[test]
    fn threshold_must_be_positive() {
        let g = splits(&[("a", "r", "b")]);
        assert!(classify_relations(&g, Ratio::new(0, 1)).is_err());
    }

    #[test]
    fn distribution_ratios() {
        let g = splits(&[("a", "r1", "b"), ("b", "r1", "c"), ("c", "r1", "d"), ("a", "r2", "d")]);
        let d = relation_distribution(&g.test, &g.vocab).unwrap();
        assert_eq!(d.get("r1"), Some(0.75));
        assert_eq!(d.get("r2"), Some(0.25));
        assert!(relation_distribution(&[], &g.vocab).is_err());
    }

    #[test]
    fn kl_closed_form() {
        let p = RelationDistribution::from_counts([("a", 1)]).unwrap();
        let q = RelationDistribution::from_counts([("a", 1), ("b", 1)]).unwrap();
        let kl = kl_divergence(&p, &q, Smoothing::None).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        let smoothed = kl_divergence(&p, &q, Smoothing::default()).unwrap();
        assert!((smoothed - std::f64::consts::LN_2).abs() < 1e-7);
        assert_eq!(kl_divergence(&q, &q, Smoothing::default()).unwrap(), 0.0);
    }

    #[test]
    fn kl_unsmoothed_zero_names_relation() {
        let p = RelationDistribution::from_counts([("a", 1), ("b", 1)]).unwrap();
        let q = RelationDistribution::from_counts([("a", 1)]).unwrap();
        match kl_divergence(&p, &q, Smoothing::None) {
            Err(Error::ZeroReference(r)) => assert_eq!(r, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(kl_divergence(&p, &q, Smoothing::default()).unwrap() > 0.0);
    }
}
