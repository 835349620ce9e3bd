//! Tab-separated manifests and label sidecars.
//!
//! A manifest lists `path<TAB>samples<TAB>split` per clip, with paths
//! relative to the manifest's directory. A label file lists
//! `path<TAB>label`; its header names the label kind.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::metrics::KeyLabel;

const MANIFEST_HEADER: &str = "path\tsamples\tsplit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(CoreError::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub samples: u64,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.path.is_empty() || r.path.contains('\t') || r.path.contains('\n') {
                return Err(CoreError::invalid(format!("bad manifest path `{}`", r.path)));
            }
            if r.samples == 0 {
                return Err(CoreError::invalid(format!("{}: duration must be positive", r.path)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(CoreError::invalid(format!("duplicate manifest path `{}`", r.path)));
            }
        }
        Ok(Self {
            root: root.into(),
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(CoreError::format(path, format!("expected header `{MANIFEST_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |d: &str| CoreError::format(path, format!("line {}: {d}", i + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(bad("expected 2 or 3 tab-separated columns"));
            }
            let samples = cols[1].parse().map_err(|_| bad("samples is not an integer"))?;
            let split = match cols.get(2) {
                None | Some(&"") => None,
                Some(s) => Some(s.parse().map_err(|_| bad("unknown split"))?),
            };
            rows.push(ManifestRow {
                path: cols[0].to_string(),
                samples,
                split,
            });
        }
        Manifest::new(root, rows).map_err(|e| CoreError::format(path, e.to_string()))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for r in &self.rows {
            let split = r.split.map_or("", Split::as_str);
            s.push_str(&format!("{}\t{}\t{}\n", r.path, r.samples, split));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| CoreError::io(path, e))
    }

    /// SHA-256 of the serialized rows, independent of where the corpus lives.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn audio_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    /// Rows in `split`; rows without a split tag count as training data.
    pub fn rows_in(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows
            .iter()
            .filter(|r| r.split.unwrap_or(Split::Train) == split)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Multiclass,
    /// Tag bitsets over `n_tags` tags, written as hex.
    Multilabel { n_tags: usize },
    Regression,
    Beat,
    Key,
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelKind::Multiclass => write!(f, "multiclass"),
            LabelKind::Multilabel { n_tags } => write!(f, "multilabel:{n_tags}"),
            LabelKind::Regression => write!(f, "regression"),
            LabelKind::Beat => write!(f, "beat"),
            LabelKind::Key => write!(f, "key"),
        }
    }
}

impl FromStr for LabelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(LabelKind::Multiclass),
            "regression" => Ok(LabelKind::Regression),
            "beat" => Ok(LabelKind::Beat),
            "key" => Ok(LabelKind::Key),
            _ => {
                let n = s
                    .strip_prefix("multilabel:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| (1..=64).contains(&n))
                    .ok_or_else(|| CoreError::invalid(format!("unknown label kind `{s}`")))?;
                Ok(LabelKind::Multilabel { n_tags: n })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskLabel {
    Class(u32),
    Tags(u64),
    Pair(f64, f64),
    Beats(Vec<f64>),
    Key(KeyLabel),
}

impl TaskLabel {
    pub fn kind_matches(&self, kind: LabelKind) -> bool {
        matches!(
            (self, kind),
            (TaskLabel::Class(_), LabelKind::Multiclass)
                | (TaskLabel::Tags(_), LabelKind::Multilabel { .. })
                | (TaskLabel::Pair(..), LabelKind::Regression)
                | (TaskLabel::Beats(_), LabelKind::Beat)
                | (TaskLabel::Key(_), LabelKind::Key)
        )
    }

    pub fn encode(&self, kind: LabelKind) -> String {
        match self {
            TaskLabel::Class(c) => c.to_string(),
            TaskLabel::Tags(bits) => {
                let width = match kind {
                    LabelKind::Multilabel { n_tags } => n_tags.div_ceil(4),
                    _ => 1,
                };
                format!("{bits:0width$x}")
            }
            TaskLabel::Pair(a, b) => format!("{a} {b}"),
            TaskLabel::Beats(ts) => ts.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
            TaskLabel::Key(k) => k.to_string(),
        }
    }

    pub fn parse(s: &str, kind: LabelKind) -> Result<Self> {
        let bad = || CoreError::invalid(format!("`{s}` is not a valid {kind} label"));
        let floats = || -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad))
                .collect()
        };
        match kind {
            LabelKind::Multiclass => s.trim().parse().map(TaskLabel::Class).map_err(|_| bad()),
            LabelKind::Multilabel { n_tags } => {
                let bits = u64::from_str_radix(s.trim(), 16).map_err(|_| bad())?;
                if n_tags < 64 && bits >> n_tags != 0 {
                    return Err(bad());
                }
                Ok(TaskLabel::Tags(bits))
            }
            LabelKind::Regression => match floats()?.as_slice() {
                [a, b] => Ok(TaskLabel::Pair(*a, *b)),
                _ => Err(bad()),
            },
            LabelKind::Beat => {
                let ts = floats()?;
                if ts.iter().any(|&t| t < 0.0) || ts.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(bad());
                }
                Ok(TaskLabel::Beats(ts))
            }
            LabelKind::Key => s.parse().map(TaskLabel::Key),
        }
    }
}

/// Labels keyed by manifest path.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile {
    pub kind: LabelKind,
    pub labels: BTreeMap<String, TaskLabel>,
}

impl LabelFile {
    pub fn new(kind: LabelKind) -> Self {
        Self {
            kind,
            labels: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, label: TaskLabel) -> Result<()> {
        let path = path.into();
        if !label.kind_matches(self.kind) {
            return Err(CoreError::invalid(format!("{path}: label is not of kind {}", self.kind)));
        }
        if self.labels.insert(path.clone(), label).is_some() {
            return Err(CoreError::invalid(format!("duplicate label for {path}")));
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&TaskLabel> {
        self.labels
            .get(path)
            .ok_or_else(|| CoreError::Mismatch(format!("no label for manifest path {path}")))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("path\t{}\n", self.kind);
        for (p, l) in &self.labels {
            s.push_str(&format!("{p}\t{}\n", l.encode(self.kind)));
        }
        s
    }

    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let kind = match lines.next().and_then(|(_, h)| h.strip_prefix("path\t")) {
            Some(k) => k.parse().map_err(|e: CoreError| CoreError::format(origin, e.to_string()))?,
            None => return Err(CoreError::format(origin, "expected header `path<TAB>kind`")),
        };
        let mut out = LabelFile::new(kind);
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |d: String| CoreError::format(origin, format!("line {}: {d}", i + 1));
            let (p, l) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `path<TAB>label`".into()))?;
            let label = TaskLabel::parse(l, kind).map_err(|e| bad(e.to_string()))?;
            out.insert(p, label).map_err(|e| bad(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| CoreError::io(path, e))
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    /// Checks that every manifest row has a label.
    pub fn check_covers(&self, manifest: &Manifest) -> Result<()> {
        for r in manifest.rows() {
            self.get(&r.path)?;
        }
        Ok(())
    }
}
