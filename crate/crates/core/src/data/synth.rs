//! Seeded synthetic dyadic corpora.
//!
//! Each session has a smooth target latent `e_t` in `[0, 1]` (a min-max
//! normalised sum of slow sinusoids) and a partner latent
//! `coupling * e_t + (1 - coupling) * e'_t` with `e'` independent. Features of
//! both participants are one corpus-wide random linear lift of
//! `[latent - 0.5, DIFF_GAIN * (latent_t - latent_{t-1})]` plus Gaussian
//! noise (optionally AR(1) in time). Labels are a per-domain monotone warp
//! `offset + scale * e^gamma`, optionally quantised to a few levels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dapf::write_dapf;
use super::manifest::{write_labels, Corpus, ManifestFile, Session, SessionEntry, Split, MANIFEST_VERSION};
use crate::error::{DapaError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const DIFF_GAIN: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStyle {
    Continuous,
    /// Labels rounded to `quantize_levels` evenly spaced values.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub sessions_per_domain: usize,
    pub frames_per_session: usize,
    pub feature_dim: usize,
    /// Sinusoids summed per latent.
    pub latent_components: usize,
    pub min_period: f64,
    pub max_period: f64,
    pub coupling: f64,
    pub noise: f64,
    /// AR(1) coefficient of the feature noise; 0 gives white noise.
    pub noise_correlation: f64,
    /// Probability that a span of one participant's features carries noise
    /// only; drawn independently per span and per participant.
    pub occlusion_rate: f64,
    pub occlusion_span: usize,
    pub annotation: AnnotationStyle,
    pub quantize_levels: usize,
    /// 0 gives every domain the identity warp; 1 spreads offsets and exponents.
    pub warp_spread: f64,
    /// Trailing sessions of each domain assigned to the test split.
    pub test_sessions_per_domain: usize,
    /// Sessions before those assigned to the validation split.
    pub val_sessions_per_domain: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 2,
            sessions_per_domain: 4,
            frames_per_session: 500,
            feature_dim: 16,
            latent_components: 3,
            min_period: 80.0,
            max_period: 400.0,
            coupling: 0.9,
            noise: 0.05,
            noise_correlation: 0.0,
            occlusion_rate: 0.0,
            occlusion_span: 48,
            annotation: AnnotationStyle::Continuous,
            quantize_levels: 5,
            warp_spread: 1.0,
            test_sessions_per_domain: 0,
            val_sessions_per_domain: 0,
            seed: 40,
        }
    }
}

/// `offset + scale * e^gamma`; monotone increasing and inside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainWarp {
    pub offset: f64,
    pub scale: f64,
    pub gamma: f64,
}

impl DomainWarp {
    pub fn apply(&self, e: f64) -> f64 {
        (self.offset + self.scale * e.clamp(0.0, 1.0).powf(self.gamma)).clamp(0.0, 1.0)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DapaError::Config(format!("synthetic spec: {m}")));
        if self.num_domains == 0 || self.sessions_per_domain == 0 || self.frames_per_session == 0 {
            return bad("domains, sessions and frames must be positive");
        }
        if self.feature_dim == 0 || self.latent_components == 0 {
            return bad("feature_dim and latent_components must be positive");
        }
        if !(self.min_period > 0.0 && self.max_period >= self.min_period) {
            return bad("periods must satisfy 0 < min_period <= max_period");
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad("coupling must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.noise_correlation) {
            return bad("noise_correlation must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || self.occlusion_span == 0 {
            return bad("occlusion_rate must lie in [0, 1] and occlusion_span be positive");
        }
        if self.annotation == AnnotationStyle::Step && self.quantize_levels < 2 {
            return bad("step annotation needs at least 2 levels");
        }
        if !(0.0..=1.0).contains(&self.warp_spread) {
            return bad("warp_spread must lie in [0, 1]");
        }
        if self.test_sessions_per_domain + self.val_sessions_per_domain >= self.sessions_per_domain {
            return bad("every domain needs at least one training session");
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        (0..self.num_domains).map(|d| format!("domain{d:02}")).collect()
    }

    /// Offsets spread over `[0, 0.35 * spread]`, exponents over
    /// `[2^-spread, 2^spread]`, alternating so neighbouring domains differ in
    /// both.
    pub fn domain_warps(&self) -> Vec<DomainWarp> {
        let k = self.num_domains;
        (0..k)
            .map(|d| {
                let u = if k == 1 { 0.5 } else { d as f64 / (k - 1) as f64 };
                let v = if k == 1 { 0.5 } else { ((d * 2) % k) as f64 / (k - 1) as f64 };
                let offset = 0.35 * self.warp_spread * u;
                DomainWarp {
                    offset,
                    scale: 1.0 - 0.35 * self.warp_spread,
                    gamma: 2f64.powf(self.warp_spread * (2.0 * v - 1.0)),
                }
            })
            .collect()
    }

    fn split_of(&self, index: usize) -> Split {
        let n = self.sessions_per_domain;
        if index >= n - self.test_sessions_per_domain {
            Split::Test
        } else if index >= n - self.test_sessions_per_domain - self.val_sessions_per_domain {
            Split::Val
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub session: Session,
    pub target_latent: Vec<f64>,
    pub partner_latent: Vec<f64>,
    pub partner_labels: Vec<f64>,
}

fn smooth_latent(spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..spec.latent_components)
        .map(|_| {
            let amp = rng.uniform_range(0.5, 1.0);
            let period = rng.uniform_range(spec.min_period, spec.max_period);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            (amp, period, phase)
        })
        .collect();
    let raw: Vec<f64> = (0..spec.frames_per_session)
        .map(|t| {
            comps
                .iter()
                .map(|(a, p, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Lift matrix `D x 2` with unit-norm columns, shared by the whole corpus.
fn lift_matrix(spec: &SyntheticSpec) -> Vec<[f64; 2]> {
    let mut rng = RngStream::new(spec.seed).derive(0x11f7);
    let mut cols = [vec![0.0; spec.feature_dim], vec![0.0; spec.feature_dim]];
    for c in &mut cols {
        c.iter_mut().for_each(|v| *v = rng.normal());
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        c.iter_mut().for_each(|v| *v /= norm);
    }
    (0..spec.feature_dim).map(|i| [cols[0][i], cols[1][i]]).collect()
}

/// `true` on frames whose signal is removed.
fn occlusion_mask(spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<bool> {
    let n = spec.frames_per_session;
    if spec.occlusion_rate == 0.0 {
        return vec![false; n];
    }
    let mut mask = Vec::with_capacity(n);
    while mask.len() < n {
        let hidden = rng.uniform() < spec.occlusion_rate;
        let len = spec.occlusion_span.min(n - mask.len());
        mask.extend(std::iter::repeat_n(hidden, len));
    }
    mask
}

fn lift(
    spec: &SyntheticSpec,
    a: &[[f64; 2]],
    latent: &[f64],
    occluded: &[bool],
    rng: &mut RngStream,
) -> Tensor<f32> {
    let (n, d) = (latent.len(), spec.feature_dim);
    let rho = spec.noise_correlation;
    let innovation = spec.noise * (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = (0..d).map(|_| spec.noise * rng.normal()).collect();
    let mut data = Vec::with_capacity(n * d);
    for t in 0..n {
        let level = latent[t] - 0.5;
        let diff = DIFF_GAIN * if t == 0 { 0.0 } else { latent[t] - latent[t - 1] };
        if t > 0 {
            for z in noise.iter_mut() {
                *z = rho * *z + innovation * rng.normal();
            }
        }
        let gain = if occluded[t] { 0.0 } else { 1.0 };
        for (row, z) in a.iter().zip(&noise) {
            data.push((gain * (row[0] * level + row[1] * diff) + z) as f32);
        }
    }
    Tensor::new(vec![n, d], data).expect("lifted features match their shape")
}

fn annotate(spec: &SyntheticSpec, warp: &DomainWarp, latent: &[f64]) -> Vec<f64> {
    latent
        .iter()
        .map(|&e| {
            let y = warp.apply(e);
            match spec.annotation {
                AnnotationStyle::Continuous => y,
                AnnotationStyle::Step => {
                    let steps = (spec.quantize_levels - 1) as f64;
                    (y * steps).round() / steps
                }
            }
        })
        .collect()
}

/// Builds every session in memory; fully determined by `spec.seed`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<SyntheticSession>> {
    spec.validate()?;
    let a = lift_matrix(spec);
    let warps = spec.domain_warps();
    let names = spec.domain_names();
    let root = RngStream::new(spec.seed);
    let mut out = Vec::with_capacity(spec.num_domains * spec.sessions_per_domain);
    for (d, (name, warp)) in names.iter().zip(&warps).enumerate() {
        for i in 0..spec.sessions_per_domain {
            let base = root.derive_path(&[d as u64, i as u64]);
            let target_latent = smooth_latent(spec, &mut base.derive(1));
            let independent = smooth_latent(spec, &mut base.derive(2));
            let partner_latent: Vec<f64> = target_latent
                .iter()
                .zip(&independent)
                .map(|(e, f)| spec.coupling * e + (1.0 - spec.coupling) * f)
                .collect();
            let occ_t = occlusion_mask(spec, &mut base.derive(5));
            let occ_p = occlusion_mask(spec, &mut base.derive(6));
            let x_t = lift(spec, &a, &target_latent, &occ_t, &mut base.derive(3));
            let x_p = lift(spec, &a, &partner_latent, &occ_p, &mut base.derive(4));
            let labels = annotate(spec, warp, &target_latent);
            let partner_labels = annotate(spec, warp, &partner_latent);
            out.push(SyntheticSession {
                session: Session {
                    id: format!("{name}_s{i:03}"),
                    domain: name.clone(),
                    split: spec.split_of(i),
                    x_t,
                    x_p,
                    labels,
                },
                target_latent,
                partner_latent,
                partner_labels,
            });
        }
    }
    Ok(out)
}

pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    Corpus::new(synthesize(spec)?.into_iter().map(|s| s.session).collect())
}

/// Counts reported after writing a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub domains: usize,
    pub sessions: usize,
    pub frames: usize,
    /// Mean Pearson correlation of target and partner latents at lag 0.
    pub latent_correlation: f64,
}

/// Writes DAPF features, label files and `manifest.toml` under `out_dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthSummary> {
    let sessions = synthesize(spec)?;
    let feat_dir = out_dir.join("features");
    let label_dir = out_dir.join("labels");
    for dir in [out_dir, &feat_dir, &label_dir] {
        fs::create_dir_all(dir).map_err(|e| DapaError::io(dir, e))?;
    }
    let mut entries = Vec::with_capacity(sessions.len());
    let mut corr = 0.0;
    for s in &sessions {
        let id = &s.session.id;
        let rel = |dir: &str, file: String| PathBuf::from(dir).join(file);
        let entry = SessionEntry {
            id: id.clone(),
            domain: s.session.domain.clone(),
            target_features: rel("features", format!("{id}_target.dapf")),
            partner_features: rel("features", format!("{id}_partner.dapf")),
            target_labels: rel("labels", format!("{id}_target.txt")),
            partner_labels: Some(rel("labels", format!("{id}_partner.txt"))),
            fps: Some(25.0),
            split: Some(s.session.split),
        };
        write_dapf(&out_dir.join(&entry.target_features), &s.session.x_t)?;
        write_dapf(&out_dir.join(&entry.partner_features), &s.session.x_p)?;
        write_labels(&out_dir.join(&entry.target_labels), &s.session.labels)?;
        write_labels(&out_dir.join(entry.partner_labels.as_ref().expect("set above")), &s.partner_labels)?;
        corr += crate::metrics::pearson(&s.target_latent, &s.partner_latent);
        entries.push(entry);
    }
    let manifest = ManifestFile {
        version: MANIFEST_VERSION,
        domains: spec.domain_names(),
        sessions: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| DapaError::Config(e.to_string()))?;
    let path = out_dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| DapaError::io(&path, e))?;
    Ok(SynthSummary {
        manifest: path,
        domains: spec.num_domains,
        sessions: sessions.len(),
        frames: sessions.iter().map(|s| s.session.frames()).sum(),
        latent_correlation: corr / sessions.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_corpus;
    use crate::metrics::pearson;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_domains: 2,
            sessions_per_domain: 3,
            frames_per_session: 300,
            feature_dim: 6,
            test_sessions_per_domain: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn full_coupling_copies_latent() {
        let s = synthesize(&SyntheticSpec { coupling: 1.0, ..small() }).unwrap();
        for x in &s {
            assert_eq!(x.target_latent, x.partner_latent);
        }
    }

    #[test]
    fn coupling_raises_latent_correlation() {
        let mean_corr = |k: f64| {
            let s = synthesize(&SyntheticSpec { coupling: k, ..small() }).unwrap();
            s.iter().map(|x| pearson(&x.target_latent, &x.partner_latent)).sum::<f64>() / s.len() as f64
        };
        let (hi, lo) = (mean_corr(0.9), mean_corr(0.0));
        assert!(hi > lo + 0.5, "{hi} vs {lo}");
        assert!(hi > 0.8);
    }

    #[test]
    fn occlusion_blanks_whole_spans_without_touching_labels() {
        let spec = SyntheticSpec { noise: 0.0, occlusion_rate: 0.5, occlusion_span: 25, ..small() };
        let plain = synthesize(&SyntheticSpec { occlusion_rate: 0.0, ..spec.clone() }).unwrap();
        let occluded = synthesize(&spec).unwrap();
        let mut blank_spans = 0;
        for (a, b) in plain.iter().zip(&occluded) {
            assert_eq!(a.session.labels, b.session.labels);
            for span in 0..spec.frames_per_session / 25 {
                let rows = span * 25..(span + 1) * 25;
                let blank: Vec<bool> = rows.map(|r| b.session.x_t.row(r).iter().all(|&v| v == 0.0)).collect();
                assert!(blank.iter().all(|&z| z == blank[0]), "span {span} partly blanked");
                if blank[0] {
                    blank_spans += 1;
                } else {
                    assert_eq!(a.session.x_t.row(span * 25), b.session.x_t.row(span * 25));
                }
            }
        }
        let total = occluded.len() * spec.frames_per_session / 25;
        assert!(blank_spans > total / 4 && blank_spans < 3 * total / 4, "{blank_spans} of {total}");
        assert!(synthesize(&SyntheticSpec { occlusion_span: 0, ..spec }).is_err());
    }

    #[test]
    fn labels_and_latents_stay_in_unit_interval() {
        for annotation in [AnnotationStyle::Continuous, AnnotationStyle::Step] {
            let s = synthesize(&SyntheticSpec { annotation, num_domains: 4, ..small() }).unwrap();
            for x in &s {
                assert!(x.target_latent.iter().chain(&x.session.labels).all(|v| (0.0..=1.0).contains(v)));
                x.session.validate().unwrap();
                if annotation == AnnotationStyle::Step {
                    assert!(x.session.labels.iter().all(|v| ((v * 4.0).round() - v * 4.0).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn warps_are_monotone_and_distinct() {
        let spec = SyntheticSpec { num_domains: 3, ..small() };
        let w = spec.domain_warps();
        for warp in &w {
            let ys: Vec<f64> = (0..=100).map(|i| warp.apply(i as f64 / 100.0)).collect();
            assert!(ys.windows(2).all(|p| p[1] >= p[0]));
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let gap: f64 = (0..=20)
                    .map(|t| (w[i].apply(t as f64 / 20.0) - w[j].apply(t as f64 / 20.0)).abs())
                    .sum::<f64>()
                    / 21.0;
                assert!(gap > 0.05, "domains {i} and {j} differ by {gap}");
            }
        }
        let flat = SyntheticSpec { warp_spread: 0.0, ..spec }.domain_warps();
        assert!(flat.iter().all(|w| w.apply(0.3) == 0.3));
    }

    #[test]
    fn splits_follow_counts() {
        let spec = SyntheticSpec { sessions_per_domain: 5, val_sessions_per_domain: 1, test_sessions_per_domain: 2, ..small() };
        let s = synthesize(&spec).unwrap();
        let splits: Vec<Split> = s[..5].iter().map(|x| x.session.split).collect();
        assert_eq!(splits, [Split::Train, Split::Train, Split::Val, Split::Test, Split::Test]);
        assert!(SyntheticSpec { test_sessions_per_domain: 3, ..small() }.validate().is_err());
    }

    #[test]
    fn ar_noise_keeps_variance() {
        let spec = SyntheticSpec {
            noise: 0.5,
            noise_correlation: 0.9,
            frames_per_session: 20000,
            feature_dim: 1,
            sessions_per_domain: 1,
            num_domains: 1,
            test_sessions_per_domain: 0,
            ..small()
        };
        let a = [[0.0, 0.0]];
        let x = lift(&spec, &a, &vec![0.5; 20000], &vec![false; 20000], &mut RngStream::new(3));
        let var = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 20000.0;
        assert!((var - 0.25).abs() < 0.05, "{var}");
        let lag1 = x.data().windows(2).map(|p| p[0] as f64 * p[1] as f64).sum::<f64>() / 19999.0 / var;
        assert!((lag1 - 0.9).abs() < 0.03, "{lag1}");
    }

    #[test]
    fn disk_corpus_is_deterministic_and_loadable() {
        let spec = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = generate_synthetic_corpus(&spec, a.path()).unwrap();
        generate_synthetic_corpus(&spec, b.path()).unwrap();
        assert_eq!(sa.domains, 2);
        assert_eq!(sa.sessions, 6);
        for rel in ["manifest.toml", "features/domain00_s000_target.dapf", "labels/domain01_s002_partner.txt"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        let loaded = load_corpus(&sa.manifest).unwrap();
        assert_eq!(loaded, synthetic_corpus(&spec).unwrap());
        assert_eq!(loaded.domains(), vec!["domain00", "domain01"]);
    }
}
