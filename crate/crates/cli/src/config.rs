//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// An invalid invocation: bad flag, unknown key, missing required input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("a", "first report table for `meta tau`"),
    ("addr", "listen address for `annotate serve`"),
    ("allowlist", "comma-separated verified source hosts"),
    ("b", "second report table for `meta tau`"),
    ("batch", "batch judgment TSV for `annotate import`"),
    ("campaign", "campaign directory"),
    ("category_threshold", "relation category threshold, e.g. 3/2"),
    ("depths", "pool depths, `1..10` or a comma list"),
    ("group_by", "extra grouped micro report: relation or category"),
    ("judgments", "judgment file (qid, entity, label, provenance, depth)"),
    ("kld_epsilon", "KL smoothing constant; 0 disables smoothing"),
    ("ks", "comma-separated Hits@K cut-offs"),
    ("labels", "entity display labels (entity<TAB>label)"),
    ("metrics", "comma-separated metric names to report"),
    ("micro_units", "test-triples or all-positives"),
    ("mode", "baseline mode: frequency, random, oracle-noise"),
    ("out", "output file or directory"),
    ("pairing", "micro t-test units: per-answer or per-triple"),
    ("pool", "pool file"),
    ("pool_depth", "pooling depth"),
    ("qrels", "TREC qrels file used as judgments"),
    ("reference", "reference triple file for `dist kld`"),
    ("regime", "micro filter regime: inclusive or graph-only"),
    ("repeats", "subsample repeats per size"),
    ("roster", "comma-separated annotator ids"),
    ("run_format", "ranked or target-ranks"),
    ("runs", "comma-separated run files"),
    ("sample", "sample triple file for `dist kld`"),
    ("seed", "master seed (falls back to KGC_EVAL_SEED)"),
    ("seed_questions", "file of qids to pool (default: all test questions)"),
    ("sizes", "comma-separated subsample fractions"),
    ("swap_rate", "oracle-noise baseline swap probability"),
    ("tag", "system tag for generated runs"),
    ("templates", "relation question templates (relation<TAB>pattern)"),
    ("test", "test split"),
    ("threads", "worker threads (default: all cores)"),
    ("ties", "tie policy: mean, optimistic or pessimistic"),
    ("train", "train split"),
    ("trec_export", "directory for qrels and run files in TREC format"),
    ("triples", "triple file for `dist counts`"),
    ("types", "relation slot type profile (relation<TAB>head|tail<TAB>entity)"),
    ("valid", "validation split"),
    ("weights", "relation weights (relation<TAB>weight) for reweighted micro metrics"),
];

pub const SEED_ENV: &str = "KGC_EVAL_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(usage(format!("unknown configuration key `{key}`")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key=value", i + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.values.insert(key.to_owned(), value.to_owned());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| usage(format!("missing required input `{key}` (flag --{} or config key)", flag(key))))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("bad value for `{key}` ({v}): {e}"))))
            .transpose()
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect())
            .unwrap_or_default()
    }

    pub fn parsed_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        if self.get(key).is_none() {
            return Ok(None);
        }
        self.list(key)
            .iter()
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("bad value in `{key}` ({v}): {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Digest of every key that can influence results; `threads` is left
    /// out because output is identical at any parallelism degree.
    pub fn hash(&self) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| k.as_str() != "threads")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The seed from the config, else `KGC_EVAL_SEED`, else 0. The
    /// resolved value is written back so it enters the hash.
    pub fn resolve_seed(&mut self) -> Result<u64> {
        if self.get("seed").is_none() {
            let env = std::env::var(SEED_ENV).unwrap_or_else(|_| "0".into());
            self.set("seed", env.trim())?;
        }
        Ok(self.parsed("seed")?.expect("set above"))
    }

    /// Comment header opening every artifact.
    pub fn header(&self, seed: u64) -> String {
        format!(
            "# kgeval {}\n# config-sha256 {}\n# seed {seed}\n",
            env!("CARGO_PKG_VERSION"),
            self.hash()
        )
    }
}

/// Command-line spelling of a key.
pub fn flag(key: &str) -> String {
    key.replace('_', "-")
}

/// Parses `1..10` (inclusive) or `1,2,5`.
pub fn parse_depths(s: &str) -> Result<Vec<u32>> {
    let bad = || usage(format!("bad depth range `{s}` (use 1..10 or 1,2,5)"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}
