//! Corpus manifests, label files and in-memory sessions.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dapf::{feature_rows, read_feature_matrix};
use crate::error::{DapaError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One session entry as written in the manifest; paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub id: String,
    pub domain: String,
    pub target_features: PathBuf,
    pub partner_features: PathBuf,
    pub target_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub version: u32,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub sessions: Vec<SessionEntry>,
}

/// A validated session with resolved paths and its frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub domain: String,
    pub split: Split,
    pub target_features: PathBuf,
    pub partner_features: PathBuf,
    pub target_labels: PathBuf,
    pub partner_labels: Option<PathBuf>,
    pub fps: Option<f64>,
    pub frame_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    /// Alphabetical union of declared and used domains.
    pub domains: Vec<String>,
    pub records: Vec<SessionRecord>,
}

/// A fully loaded session. Target and partner matrices are pre-aligned
/// frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub x_t: Tensor<f32>,
    pub x_p: Tensor<f32>,
    pub labels: Vec<f64>,
}

impl Session {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.x_t.cols()
    }

    /// Checks the alignment invariants of a session built in memory.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| DapaError::Ingestion {
            session: self.id.clone(),
            message,
        };
        if self.x_t.shape().len() != 2 || self.x_p.shape().len() != 2 {
            return Err(fail("feature tensors must be matrices".into()));
        }
        if self.x_t.rows() != self.x_p.rows() {
            return Err(fail(format!(
                "target has {} frames, partner has {}",
                self.x_t.rows(),
                self.x_p.rows()
            )));
        }
        if self.x_t.cols() != self.x_p.cols() {
            return Err(fail(format!(
                "target has {} features, partner has {}",
                self.x_t.cols(),
                self.x_p.cols()
            )));
        }
        if self.labels.len() != self.x_t.rows() {
            return Err(fail(format!(
                "{} labels for {} frames",
                self.labels.len(),
                self.x_t.rows()
            )));
        }
        if let Some(i) = self.labels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(fail(format!("label {} at frame {i} outside [0, 1]", self.labels[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sessions: Vec<Session>,
}

impl Corpus {
    pub fn new(sessions: Vec<Session>) -> Result<Self> {
        let corpus = Self { sessions };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.sessions {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(DapaError::Ingestion {
                    session: s.id.clone(),
                    message: "duplicate session id".into(),
                });
            }
        }
        if let Some(first) = self.sessions.first() {
            let d = first.feature_dim();
            if let Some(s) = self.sessions.iter().find(|s| s.feature_dim() != d) {
                return Err(DapaError::Ingestion {
                    session: s.id.clone(),
                    message: format!("{} features, corpus uses {d}", s.feature_dim()),
                });
            }
        }
        Ok(())
    }

    /// Alphabetical list of the domains present.
    pub fn domains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.sessions.iter().map(|s| s.domain.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.sessions.first().map(Session::feature_dim)
    }

    pub fn frames(&self) -> usize {
        self.sessions.iter().map(Session::frames).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Sessions of one split, in corpus order.
    pub fn split(&self, split: Split) -> Corpus {
        Corpus {
            sessions: self.sessions.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses a label file: one decimal per line, every value in `[0, 1]`.
/// Trailing blank lines are allowed; interior blank lines are not.
pub fn read_labels(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| DapaError::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let used = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |i| i + 1);
    lines[..used]
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let v: f64 = line.trim().parse().map_err(|_| {
                DapaError::format(path, format!("line {}: '{}' is not a number", i + 1, line.trim()))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(DapaError::format(
                    path,
                    format!("line {}: label {v} outside [0, 1]", i + 1),
                ));
            }
            Ok(v)
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 12);
    for v in labels {
        text.push_str(&format!("{v}\n"));
    }
    fs::write(path, text).map_err(|e| DapaError::io(path, e))
}

fn ingestion(session: &str, err: DapaError) -> DapaError {
    DapaError::Ingestion {
        session: session.to_string(),
        message: err.to_string(),
    }
}

/// Reads and validates a manifest. Every referenced file must exist, target
/// and partner row counts must agree with the label count, and labels must
/// lie in `[0, 1]`. Records keep manifest order.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| DapaError::io(path, e))?;
    let file: ManifestFile =
        toml::from_str(&text).map_err(|e| DapaError::format(path, e.to_string()))?;
    if file.version != MANIFEST_VERSION {
        return Err(DapaError::format(
            path,
            format!("manifest version {} is not supported (expected {MANIFEST_VERSION})", file.version),
        ));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let declared: BTreeSet<&str> = file.domains.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(file.sessions.len());
    for e in &file.sessions {
        let fail = |message: String| DapaError::Ingestion {
            session: e.id.clone(),
            message,
        };
        if !seen.insert(e.id.as_str()) {
            return Err(fail("duplicate session id".into()));
        }
        if !declared.is_empty() && !declared.contains(e.domain.as_str()) {
            return Err(fail(format!("domain '{}' is not declared in the domains list", e.domain)));
        }
        let target_features = resolve(base, &e.target_features);
        let partner_features = resolve(base, &e.partner_features);
        let target_labels = resolve(base, &e.target_labels);
        let partner_labels = e.partner_labels.as_ref().map(|p| resolve(base, p));
        for p in [&target_features, &partner_features, &target_labels]
            .into_iter()
            .chain(partner_labels.as_ref())
        {
            if !p.is_file() {
                return Err(fail(format!("missing file {}", p.display())));
            }
        }
        let rows_t = feature_rows(&target_features).map_err(|err| ingestion(&e.id, err))?;
        let rows_p = feature_rows(&partner_features).map_err(|err| ingestion(&e.id, err))?;
        let labels = read_labels(&target_labels).map_err(|err| ingestion(&e.id, err))?;
        if rows_t != rows_p || rows_t != labels.len() {
            return Err(fail(format!(
                "row-count mismatch: target features {rows_t}, partner features {rows_p}, labels {}",
                labels.len()
            )));
        }
        if let Some(p) = &partner_labels {
            let pl = read_labels(p).map_err(|err| ingestion(&e.id, err))?;
            if pl.len() != rows_t {
                return Err(fail(format!("partner labels have {} rows, expected {rows_t}", pl.len())));
            }
        }
        records.push(SessionRecord {
            session_id: e.id.clone(),
            domain: e.domain.clone(),
            split: e.split.unwrap_or_default(),
            target_features,
            partner_features,
            target_labels,
            partner_labels,
            fps: e.fps,
            frame_count: rows_t,
        });
    }
    let domains: BTreeSet<String> = file
        .domains
        .iter()
        .cloned()
        .chain(records.iter().map(|r| r.domain.clone()))
        .collect();
    Ok(Manifest {
        path: path.to_path_buf(),
        domains: domains.into_iter().collect(),
        records,
    })
}

pub fn load_session(rec: &SessionRecord) -> Result<Session> {
    let wrap = |err| ingestion(&rec.session_id, err);
    let session = Session {
        id: rec.session_id.clone(),
        domain: rec.domain.clone(),
        split: rec.split,
        x_t: read_feature_matrix(&rec.target_features).map_err(wrap)?,
        x_p: read_feature_matrix(&rec.partner_features).map_err(wrap)?,
        labels: read_labels(&rec.target_labels).map_err(wrap)?,
    };
    session.validate()?;
    Ok(session)
}

pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = load_manifest(manifest_path)?;
    let sessions = manifest.records.iter().map(load_session).collect::<Result<Vec<_>>>()?;
    Corpus::new(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dapf::write_dapf;

    fn write_session(dir: &Path, id: &str, n: usize, d: usize, labels: &[f64]) {
        let t = Tensor::from_fn(&[n, d], |i| i as f32);
        write_dapf(&dir.join(format!("{id}_t.dapf")), &t).unwrap();
        write_dapf(&dir.join(format!("{id}_p.dapf")), &t).unwrap();
        write_labels(&dir.join(format!("{id}.txt")), labels).unwrap();
    }

    fn entry(id: &str, domain: &str) -> String {
        format!(
            "[[sessions]]\nid = \"{id}\"\ndomain = \"{domain}\"\ntarget_features = \"{id}_t.dapf\"\npartner_features = \"{id}_p.dapf\"\ntarget_labels = \"{id}.txt\"\n"
        )
    }

    #[test]
    fn two_domains_alphabetical() {
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), "s1", 3, 2, &[0.0, 0.5, 1.0]);
        write_session(dir.path(), "s2", 2, 2, &[0.2, 0.3]);
        let text = format!("version = 1\n{}{}", entry("s1", "zeta"), entry("s2", "alpha"));
        let m = dir.path().join("manifest.toml");
        fs::write(&m, text).unwrap();
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.domains, vec!["alpha", "zeta"]);
        assert_eq!(man.records[0].session_id, "s1");
        assert_eq!(man.records[0].frame_count, 3);
        let corpus = load_corpus(&m).unwrap();
        assert_eq!(corpus.domains(), vec!["alpha", "zeta"]);
        assert_eq!(corpus.sessions[1].labels, vec![0.2, 0.3]);
    }

    #[test]
    fn empty_session_list_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.toml");
        fs::write(&m, "version = 1\n").unwrap();
        let corpus = load_corpus(&m).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.domains().is_empty());
    }

    #[test]
    fn rejects_bad_label_with_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), "s1", 3, 2, &[0.0, 0.5, 1.0]);
        fs::write(dir.path().join("s1.txt"), "0.1\n1.3\n0.2\n").unwrap();
        let m = dir.path().join("manifest.toml");
        fs::write(&m, format!("version = 1\n{}", entry("s1", "a"))).unwrap();
        let e = load_manifest(&m).unwrap_err().to_string();
        assert!(e.contains("s1") && e.contains("line 2") && e.contains("s1.txt") && e.contains("1.3"), "{e}");
    }

    #[test]
    fn rejects_missing_file_and_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), "s1", 3, 2, &[0.0, 0.5]);
        let m = dir.path().join("manifest.toml");
        fs::write(&m, format!("version = 1\n{}", entry("s1", "a"))).unwrap();
        let e = load_manifest(&m).unwrap_err();
        assert!(matches!(e, DapaError::Ingestion { ref session, .. } if session == "s1"));
        assert!(e.to_string().contains("row-count mismatch"));

        fs::remove_file(dir.path().join("s1_p.dapf")).unwrap();
        let e = load_manifest(&m).unwrap_err().to_string();
        assert!(e.contains("missing file") && e.contains("s1_p.dapf"), "{e}");
    }

    #[test]
    fn rejects_unknown_keys_undeclared_domains_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), "s1", 2, 2, &[0.0, 0.5]);
        let m = dir.path().join("manifest.toml");
        fs::write(&m, "version = 1\nextra = 3\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(DapaError::Format { .. })));
        fs::write(&m, format!("version = 1\ndomains = [\"b\"]\n{}", entry("s1", "a"))).unwrap();
        assert!(load_manifest(&m).unwrap_err().to_string().contains("not declared"));
        fs::write(&m, format!("version = 1\n{}{}", entry("s1", "a"), entry("s1", "a"))).unwrap();
        assert!(load_manifest(&m).unwrap_err().to_string().contains("duplicate"));
        fs::write(&m, "version = 7\n").unwrap();
        assert!(load_manifest(&m).is_err());
    }

    #[test]
    fn label_parsing_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        fs::write(&p, "0.5\n1\n0\n\n\n").unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![0.5, 1.0, 0.0]);
        fs::write(&p, "0.5\n\n0.2\n").unwrap();
        assert!(read_labels(&p).unwrap_err().to_string().contains("line 2"));
        fs::write(&p, "-0.01\n").unwrap();
        assert!(read_labels(&p).is_err());
        fs::write(&p, "NaN\n").unwrap();
        assert!(read_labels(&p).is_err());
        let vals = vec![0.1, 1.0 / 3.0, 0.123456789012345];
        write_labels(&p, &vals).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vals);
    }
}
