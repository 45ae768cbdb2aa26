//! Concordance correlation, corpus evaluation and prediction export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::CCC_DEGENERATE_EPS;
use crate::data::{segment_windows, stitch_predictions, Corpus, Session, WindowScheme};
use crate::error::{DapaError, Result};
use crate::model::DapaModel;
use crate::scalar::Scalar;

/// A CCC value; `degenerate` is set when the denominator fell below
/// `1e-12` and the value was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ccc {
    pub value: f64,
    pub degenerate: bool,
}

/// Running means and co-moments (Welford), merged in a single pass.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        let dx = x - self.mx;
        let dy = y - self.my;
        let w = (self.n - 1.0) / self.n;
        self.mx += dx / self.n;
        self.my += dy / self.n;
        self.sxx += w * dx * dx;
        self.syy += w * dy * dy;
        // Symmetric in (x, y), so swapping the arguments is bit-exact.
        self.sxy += w * (dx * dy);
    }
}

/// Lin's concordance correlation with population statistics:
/// `2 cov / (var_x + var_y + (mean_x - mean_y)^2)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<Ccc> {
    if x.len() != y.len() {
        return Err(DapaError::Usage(format!(
            "CCC needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(DapaError::Usage(format!("CCC needs at least 2 frames, got {}", x.len())));
    }
    let mut m = Moments::default();
    x.iter().zip(y).for_each(|(&a, &b)| m.push(a, b));
    let n = m.n;
    let den = m.sxx / n + m.syy / n + (m.mx - m.my).powi(2);
    if den < CCC_DEGENERATE_EPS {
        return Ok(Ccc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Ccc {
        value: (2.0 * m.sxy / n / den).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mut m = Moments::default();
    x.iter().zip(y).for_each(|(&a, &b)| m.push(a, b));
    let den = (m.sxx * m.syy).sqrt();
    if den < 1e-300 {
        0.0
    } else {
        m.sxy / den
    }
}

/// Frame-wise scores of one session, in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPrediction {
    pub session_id: String,
    pub dataset: String,
    pub prediction: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionScore {
    pub session_id: String,
    pub dataset: String,
    pub frames: usize,
    pub ccc: Ccc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScore {
    pub frames: usize,
    pub sessions: usize,
    pub ccc: Ccc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    /// Pooled over the concatenated frames of each dataset.
    pub datasets: BTreeMap<String, DatasetScore>,
    /// Unweighted mean of the dataset CCCs.
    pub global: f64,
    pub sessions: Vec<SessionScore>,
}

impl EvalReport {
    /// Scores already-stitched predictions. Sessions shorter than 2 frames
    /// get no session score but still count toward their dataset.
    pub fn from_predictions(model: &str, preds: &[SessionPrediction]) -> Result<Self> {
        let mut pooled: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        let mut sessions = Vec::with_capacity(preds.len());
        for p in preds {
            if p.prediction.len() != p.truth.len() {
                return Err(DapaError::Consistency(format!(
                    "session '{}' has {} predictions for {} labels",
                    p.session_id,
                    p.prediction.len(),
                    p.truth.len()
                )));
            }
            if p.truth.len() >= 2 {
                sessions.push(SessionScore {
                    session_id: p.session_id.clone(),
                    dataset: p.dataset.clone(),
                    frames: p.truth.len(),
                    ccc: ccc(&p.prediction, &p.truth)?,
                });
            }
            let e = pooled.entry(&p.dataset).or_default();
            e.0.extend_from_slice(&p.prediction);
            e.1.extend_from_slice(&p.truth);
            e.2 += 1;
        }
        if pooled.is_empty() {
            return Err(DapaError::Usage("nothing to evaluate".into()));
        }
        let datasets: BTreeMap<String, DatasetScore> = pooled
            .into_iter()
            .map(|(name, (x, y, n))| {
                Ok((
                    name.to_string(),
                    DatasetScore {
                        frames: y.len(),
                        sessions: n,
                        ccc: ccc(&x, &y)?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let global = datasets.values().map(|d| d.ccc.value).sum::<f64>() / datasets.len() as f64;
        Ok(Self {
            model: model.to_string(),
            datasets,
            global,
            sessions,
        })
    }

    /// One header row (`model`, datasets, `global`) and one value row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for name in self.datasets.keys() {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",global\n");
        out.push_str(&self.model);
        for d in self.datasets.values() {
            let _ = write!(out, ",{:.6}", d.ccc.value);
        }
        let _ = writeln!(out, ",{:.6}", self.global);
        out
    }

    pub fn sessions_csv(&self) -> String {
        let mut out = String::from("session_id,dataset,frames,ccc,degenerate\n");
        for s in &self.sessions {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{}",
                s.session_id, s.dataset, s.frames, s.ccc.value, s.ccc.degenerate
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.datasets.keys().map(String::len).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>9}  {:>8}", "dataset", "ccc", "frames", "sessions");
        for (name, d) in &self.datasets {
            let flag = if d.ccc.degenerate { " (degenerate)" } else { "" };
            let _ = writeln!(
                out,
                "{name:<width$}  {:>8.4}  {:>9}  {:>8}{flag}",
                d.ccc.value, d.frames, d.sessions
            );
        }
        let _ = writeln!(out, "{:<width$}  {:>8.4}", "global", self.global);
        out
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DapaError::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()),
            ("sessions.csv", self.sessions_csv()),
            ("report.txt", self.to_text()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| DapaError::io(&p, e))?;
        }
        Ok(())
    }
}

/// Eval-mode prediction for every frame of a session: segment, run every
/// window, stitch the cores.
pub fn predict_session<T: Scalar>(
    model: &DapaModel<T>,
    session: &Session,
    scheme: &WindowScheme,
) -> Result<Vec<f64>> {
    let windows = segment_windows::<T>(session, scheme)?;
    let preds = windows
        .iter()
        .map(|w| Ok(model.predict(&w.x_t, &w.x_p, &w.domain)?.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut map = stitch_predictions(
        windows.iter().zip(&preds).map(|(w, p)| (&w.origin, p.as_slice())),
        scheme,
    )?;
    let out = map
        .remove(&session.id)
        .ok_or_else(|| DapaError::Consistency(format!("no predictions for session '{}'", session.id)))?;
    Ok(out.into_iter().map(Scalar::as_f64).collect())
}

/// Predicts every session (in parallel, collected in corpus order) and
/// groups them into datasets via `dataset_of`.
pub fn predict_corpus<T: Scalar>(
    model: &DapaModel<T>,
    corpus: &Corpus,
    scheme: &WindowScheme,
    dataset_of: &(dyn Fn(&Session) -> String + Sync),
) -> Result<Vec<SessionPrediction>> {
    corpus
        .sessions
        .par_iter()
        .map(|s| {
            Ok(SessionPrediction {
                session_id: s.id.clone(),
                dataset: dataset_of(s),
                prediction: predict_session(model, s, scheme)?,
                truth: s.labels.clone(),
            })
        })
        .collect()
}

pub fn evaluate_corpus<T: Scalar>(
    model: &DapaModel<T>,
    corpus: &Corpus,
    scheme: &WindowScheme,
    dataset_of: &(dyn Fn(&Session) -> String + Sync),
    name: &str,
) -> Result<EvalReport> {
    EvalReport::from_predictions(name, &predict_corpus(model, corpus, scheme, dataset_of)?)
}

/// `session_id,frame,prediction,truth` rows covering every frame in order.
pub fn predictions_csv(preds: &[SessionPrediction]) -> String {
    let mut out = String::from("session_id,frame,prediction,truth\n");
    for p in preds {
        for (f, (y, t)) in p.prediction.iter().zip(&p.truth).enumerate() {
            let _ = writeln!(out, "{},{f},{y},{t}", p.session_id);
        }
    }
    out
}

pub fn export_predictions<T: Scalar>(
    model: &DapaModel<T>,
    session: &Session,
    scheme: &WindowScheme,
    out_path: &Path,
) -> Result<()> {
    let pred = SessionPrediction {
        session_id: session.id.clone(),
        dataset: session.domain.clone(),
        prediction: predict_session(model, session, scheme)?,
        truth: session.labels.clone(),
    };
    fs::write(out_path, predictions_csv(std::slice::from_ref(&pred))).map_err(|e| DapaError::io(out_path, e))
}
