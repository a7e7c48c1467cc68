//! Judgment campaigns: double annotation, conflicts and adjudication.
//!
//! The campaign state is a pure function of its manifest and the ordered
//! judgment log. Every accepted judgment is appended to the log, and
//! [`Campaign::replay`] rebuilds the same state from scratch.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Qid;
use crate::metrics::{JudgmentEntry, JudgmentSet, Label, Provenance};
use crate::pooling::{Pool, PoolStatus};
use crate::util::{data_lines, read_file, write_file};

pub const DEFAULT_ALLOWLIST: [&str; 1] = ["wikipedia.org"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: u32,
    pub qid: Qid,
    pub entity: String,
    pub entity_label: String,
    /// Subject, relation and object identifiers of the candidate triple.
    pub triple: [String; 3],
    pub question_text: String,
    /// Set when no relation template existed.
    pub fallback: bool,
    pub min_depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    #[serde(alias = "positive")]
    Yes,
    #[serde(alias = "negative")]
    No,
}

impl From<Verdict> for Label {
    fn from(v: Verdict) -> Label {
        match v {
            Verdict::Yes => Label::Positive,
            Verdict::No => Label::Negative,
        }
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "yes" | "y" | "positive" | "1" => Ok(Verdict::Yes),
            "no" | "n" | "negative" | "0" => Ok(Verdict::No),
            _ => Err(Error::Invalid(format!("label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Primary,
    Adjudicator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: u32,
    pub annotator: String,
    pub label: Verdict,
    pub source_url: String,
    /// Unix milliseconds.
    pub timestamp: i64,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "lowercase")]
pub enum TaskState {
    Unassigned,
    /// Primary annotators who have judged so far (one).
    Assigned(Vec<String>),
    Conflicted,
    Resolved(Label),
}

/// A label carried into the exported judgments without annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarriedLabel {
    pub qid: Qid,
    pub entity: String,
    pub label: Label,
    pub provenance: Provenance,
    pub depth: u32,
}

/// Everything about a campaign except its judgment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub tasks: Vec<AnnotationTask>,
    pub roster: Vec<String>,
    pub allowlist: Vec<String>,
    pub carried: Vec<CarriedLabel>,
}

impl CampaignManifest {
    /// Carries original answers and trivial negatives of `pool` alongside `tasks`.
    pub fn from_pool(pool: &Pool, tasks: Vec<AnnotationTask>, roster: Vec<String>, allowlist: Vec<String>) -> Self {
        let mut carried = Vec::new();
        for (q, answers) in &pool.originals {
            for a in answers {
                carried.push(CarriedLabel {
                    qid: *q,
                    entity: a.clone(),
                    label: Label::Positive,
                    provenance: Provenance::Original,
                    depth: 0,
                });
            }
        }
        for e in pool.entries.values() {
            if e.status == PoolStatus::TrivialNegative {
                carried.push(CarriedLabel {
                    qid: e.qid,
                    entity: e.entity.clone(),
                    label: Label::Negative,
                    provenance: Provenance::TrivialFiltered,
                    depth: e.min_depth,
                });
            }
        }
        CampaignManifest {
            tasks,
            roster,
            allowlist,
            carried,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct TaskRecord {
    primaries: Vec<(String, Verdict)>,
    adjudication: Option<(String, Verdict)>,
}

impl TaskRecord {
    fn state(&self) -> TaskState {
        if let Some((_, v)) = &self.adjudication {
            return TaskState::Resolved((*v).into());
        }
        match self.primaries.as_slice() {
            [] => TaskState::Unassigned,
            [(a, _)] => TaskState::Assigned(vec![a.clone()]),
            [(_, x), (_, y)] if x == y => TaskState::Resolved((*x).into()),
            _ => TaskState::Conflicted,
        }
    }

    fn needs_primary(&self) -> bool {
        self.primaries.len() < 2 && self.adjudication.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub pending: usize,
    pub conflicted: usize,
    pub resolved: usize,
    pub agreement_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub double_judged: usize,
    pub agreeing: usize,
    pub rate: f64,
    pub conflicts: usize,
    /// Primary and adjudication judgments per annotator.
    pub per_annotator: BTreeMap<String, usize>,
}

/// Host is on the list or a subdomain of an entry.
pub fn host_allowed(url: &str, allowlist: &[String]) -> bool {
    let Ok(u) = url::Url::parse(url) else { return false };
    let Some(host) = u.host_str() else { return false };
    let host = host.to_ascii_lowercase();
    allowlist.iter().any(|a| {
        let a = a.to_ascii_lowercase();
        host == a || host.ends_with(&format!(".{a}"))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    manifest: CampaignManifest,
    roster: BTreeSet<String>,
    records: Vec<TaskRecord>,
    log: Vec<Judgment>,
}

impl Campaign {
    pub fn new(manifest: CampaignManifest) -> Result<Self> {
        for (i, t) in manifest.tasks.iter().enumerate() {
            if t.task_id != i as u32 + 1 {
                return Err(Error::Invalid(format!(
                    "task ids must run 1..=n in order; found {} at position {}",
                    t.task_id,
                    i + 1
                )));
            }
        }
        let roster: BTreeSet<String> = manifest.roster.iter().cloned().collect();
        if roster.len() < 3 {
            log::warn!("roster has {} annotators; adjudication needs a third", roster.len());
        }
        Ok(Campaign {
            records: vec![TaskRecord::default(); manifest.tasks.len()],
            roster,
            manifest,
            log: Vec::new(),
        })
    }

    /// Rebuilds a campaign by re-applying `log` in order.
    pub fn replay(manifest: CampaignManifest, log: impl IntoIterator<Item = Judgment>) -> Result<Self> {
        let mut c = Campaign::new(manifest)?;
        for j in log {
            c.submit(j)?;
        }
        Ok(c)
    }

    pub fn manifest(&self) -> &CampaignManifest {
        &self.manifest
    }

    pub fn log(&self) -> &[Judgment] {
        &self.log
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.manifest.tasks
    }

    pub fn task(&self, id: u32) -> Result<&AnnotationTask> {
        self.manifest
            .tasks
            .get((id as usize).wrapping_sub(1))
            .ok_or(Error::UnknownTask(id))
    }

    fn record(&self, id: u32) -> Result<&TaskRecord> {
        self.task(id)?;
        Ok(&self.records[id as usize - 1])
    }

    pub fn state(&self, id: u32) -> Result<TaskState> {
        Ok(self.record(id)?.state())
    }

    fn check_annotator(&self, annotator: &str) -> Result<()> {
        if self.roster.contains(annotator) {
            Ok(())
        } else {
            Err(Error::UnknownAnnotator(annotator.to_owned()))
        }
    }

    /// Lowest-id task still needing a primary judgment that `annotator` has not judged.
    pub fn assign(&self, annotator: &str) -> Result<Option<&AnnotationTask>> {
        self.check_annotator(annotator)?;
        Ok(self
            .records
            .iter()
            .position(|r| r.needs_primary() && r.primaries.iter().all(|(a, _)| a != annotator))
            .map(|i| &self.manifest.tasks[i]))
    }

    /// Checks a judgment against the current state without applying it.
    pub fn validate(&self, j: &Judgment) -> Result<()> {
        let rec = self.record(j.task_id)?;
        self.check_annotator(&j.annotator)?;
        if j.source_url.trim().is_empty() {
            return Err(Error::Rejected("source_url is required".into()));
        }
        if !host_allowed(&j.source_url, &self.manifest.allowlist) {
            return Err(Error::Rejected(format!("source {} is not on the verified-source list", j.source_url)));
        }
        match j.role {
            Role::Primary => {
                if rec.primaries.iter().any(|(a, _)| *a == j.annotator) {
                    return Err(Error::Rejected(format!(
                        "{} already judged task {}",
                        j.annotator, j.task_id
                    )));
                }
                if !rec.needs_primary() {
                    return Err(Error::Rejected(format!("task {} already has two primary judgments", j.task_id)));
                }
            }
            Role::Adjudicator => {
                if rec.state() != TaskState::Conflicted {
                    return Err(Error::Rejected(format!("task {} is not conflicted", j.task_id)));
                }
                if rec.primaries.iter().any(|(a, _)| *a == j.annotator) {
                    return Err(Error::Rejected(format!(
                        "{} judged task {} and cannot adjudicate it",
                        j.annotator, j.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Validates, logs and applies a judgment; returns the task's new state.
    pub fn submit(&mut self, j: Judgment) -> Result<TaskState> {
        self.validate(&j)?;
        let rec = &mut self.records[j.task_id as usize - 1];
        match j.role {
            Role::Primary => rec.primaries.push((j.annotator.clone(), j.label)),
            Role::Adjudicator => rec.adjudication = Some((j.annotator.clone(), j.label)),
        }
        let state = rec.state();
        self.log.push(j);
        Ok(state)
    }

    /// Role for a new judgment on `task_id`: adjudication iff the task is conflicted.
    pub fn role_for(&self, task_id: u32) -> Result<Role> {
        Ok(match self.state(task_id)? {
            TaskState::Conflicted => Role::Adjudicator,
            _ => Role::Primary,
        })
    }

    pub fn conflicts(&self) -> Vec<(&AnnotationTask, Vec<(String, Verdict, String)>)> {
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.state() != TaskState::Conflicted {
                continue;
            }
            let task = &self.manifest.tasks[i];
            let judged = self
                .log
                .iter()
                .filter(|j| j.task_id == task.task_id && j.role == Role::Primary)
                .map(|j| (j.annotator.clone(), j.label, j.source_url.clone()))
                .collect();
            out.push((task, judged));
        }
        out
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress {
            pending: 0,
            conflicted: 0,
            resolved: 0,
            agreement_rate: self.agreement().ok().map(|a| a.rate),
        };
        for r in &self.records {
            match r.state() {
                TaskState::Resolved(_) => p.resolved += 1,
                TaskState::Conflicted => p.conflicted += 1,
                _ => p.pending += 1,
            }
        }
        p
    }

    /// Raw agreement between the two primary judgments of each task.
    pub fn agreement(&self) -> Result<AgreementReport> {
        let mut double = 0;
        let mut agree = 0;
        for r in &self.records {
            if let [(_, x), (_, y)] = r.primaries.as_slice() {
                double += 1;
                agree += usize::from(x == y);
            }
        }
        if double == 0 {
            return Err(Error::NoDoubleJudgments);
        }
        let mut per_annotator = BTreeMap::new();
        for j in &self.log {
            *per_annotator.entry(j.annotator.clone()).or_insert(0) += 1;
        }
        Ok(AgreementReport {
            double_judged: double,
            agreeing: agree,
            rate: agree as f64 / double as f64,
            conflicts: double - agree,
            per_annotator,
        })
    }

    /// Resolved labels merged with carried original positives and trivial negatives.
    pub fn export_judgments(&self) -> Result<JudgmentSet> {
        let unresolved = self
            .records
            .iter()
            .filter(|r| !matches!(r.state(), TaskState::Resolved(_)))
            .count();
        if unresolved > 0 {
            return Err(Error::Unresolved(unresolved));
        }
        let mut set = JudgmentSet::default();
        for c in &self.manifest.carried {
            set.insert(
                c.qid,
                c.entity.clone(),
                JudgmentEntry {
                    label: c.label,
                    provenance: c.provenance,
                    depth: c.depth,
                },
            )?;
        }
        for (t, r) in self.manifest.tasks.iter().zip(&self.records) {
            let TaskState::Resolved(label) = r.state() else { unreachable!() };
            set.insert(
                t.qid,
                t.entity.clone(),
                JudgmentEntry {
                    label,
                    provenance: Provenance::Annotated,
                    depth: t.min_depth,
                },
            )?;
        }
        Ok(set)
    }
}

/// A row of the batch judgment file: `task_id<TAB>annotator<TAB>label<TAB>source_url`,
/// with an optional fifth column holding a unix-millisecond timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRow {
    pub task_id: u32,
    pub annotator: String,
    pub label: Verdict,
    pub source_url: String,
    pub timestamp: i64,
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<BatchRow>> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (ln, line) in data_lines(&text) {
        let f: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&f.len()) {
            return Err(Error::malformed(path, ln, "expected task_id, annotator, label, source_url"));
        }
        let bad = |what: &str| Error::malformed(path, ln, format!("bad {what}"));
        rows.push(BatchRow {
            task_id: f[0].parse().map_err(|_| bad("task id"))?,
            annotator: f[1].to_owned(),
            label: f[2].parse().map_err(|_| bad("label"))?,
            source_url: f[3].to_owned(),
            timestamp: match f.get(4) {
                Some(t) => t.parse().map_err(|_| bad("timestamp"))?,
                None => 0,
            },
        });
    }
    Ok(rows)
}

const MANIFEST: &str = "campaign.json";
const LOG: &str = "judgments.jsonl";
const SNAPSHOT: &str = "snapshot.json";

#[derive(Serialize)]
struct Snapshot {
    log_length: usize,
    progress: Progress,
    states: BTreeMap<u32, TaskState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    agreement: Option<AgreementReport>,
}

/// A campaign persisted in a directory: manifest, append-only log and a
/// snapshot that is rewritten after every accepted judgment.
#[derive(Debug)]
pub struct CampaignStore {
    dir: PathBuf,
    campaign: Campaign,
}

impl CampaignStore {
    pub fn create(dir: impl AsRef<Path>, manifest: CampaignManifest) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let campaign = Campaign::new(manifest)?;
        let text = serde_json::to_string_pretty(campaign.manifest())?;
        write_file(dir.join(MANIFEST), |w| writeln!(w, "{text}"))?;
        write_file(dir.join(LOG), |_| Ok(()))?;
        let store = CampaignStore { dir, campaign };
        store.write_snapshot()?;
        Ok(store)
    }

    /// Loads the manifest and replays the log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest: CampaignManifest = serde_json::from_str(&read_file(dir.join(MANIFEST))?)?;
        let log_path = dir.join(LOG);
        let mut log = Vec::new();
        if log_path.exists() {
            let f = fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&log_path, e))?;
                if !line.trim().is_empty() {
                    log.push(serde_json::from_str(&line)?);
                }
            }
        }
        Ok(CampaignStore {
            campaign: Campaign::replay(manifest, log)?,
            dir,
        })
    }

    pub fn campaign(&self) -> &Campaign {
        &self.campaign
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn submit(&mut self, j: Judgment) -> Result<TaskState> {
        self.campaign.validate(&j)?;
        let line = serde_json::to_string(&j)?;
        let path = self.dir.join(LOG);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").and_then(|_| f.sync_data()).map_err(|e| Error::io(&path, e))?;
        let state = self.campaign.submit(j)?;
        self.write_snapshot()?;
        Ok(state)
    }

    fn write_snapshot(&self) -> Result<()> {
        let c = &self.campaign;
        let snap = Snapshot {
            log_length: c.log().len(),
            progress: c.progress(),
            states: c
                .tasks()
                .iter()
                .map(|t| (t.task_id, c.state(t.task_id).expect("own task")))
                .collect(),
            agreement: c.agreement().ok(),
        };
        let text = serde_json::to_string_pretty(&snap)?;
        write_file(self.dir.join(SNAPSHOT), |w| writeln!(w, "{text}"))
    }
}
