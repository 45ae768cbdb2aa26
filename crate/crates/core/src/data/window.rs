//! Sliding windows with a scored core and unscored context on both sides,
//! and the inverse stitching of per-window predictions.
//!
//! A session of `N` frames is edge padded: `context` copies of frame 0 in
//! front and copies of frame `N - 1` at the back, enough for
//! `W = ceil(N / core)` windows. Window `k` spans padded positions
//! `[k * core, k * core + len)` and its core is real frames
//! `[k * core, k * core + core)`, so every real frame is in exactly one core.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::Session;
use crate::error::{DapaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowScheme {
    pub core: usize,
    pub context: usize,
}

impl Default for WindowScheme {
    fn default() -> Self {
        Self { core: 32, context: 32 }
    }
}

impl WindowScheme {
    pub fn new(core: usize, context: usize) -> Result<Self> {
        if core == 0 {
            return Err(DapaError::Config("window core length must be positive".into()));
        }
        Ok(Self { core, context })
    }

    /// Frames per window, `core + 2 * context`.
    pub fn len(&self) -> usize {
        self.core + 2 * self.context
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_windows(&self, frames: usize) -> usize {
        frames.div_ceil(self.core)
    }

    /// Source frame of position `pos` in window `k` after edge padding.
    pub fn source_frame(&self, frames: usize, k: usize, pos: usize) -> usize {
        (k * self.core + pos).saturating_sub(self.context).min(frames - 1)
    }

    /// `true` on the positions of window `k` that are real core frames.
    pub fn core_mask(&self, frames: usize, k: usize) -> Vec<bool> {
        let real = self.core_len(frames, k);
        (0..self.len())
            .map(|p| p >= self.context && p < self.context + real)
            .collect()
    }

    /// Real frames in the core of window `k` (smaller only for the last).
    pub fn core_len(&self, frames: usize, k: usize) -> usize {
        self.core.min(frames.saturating_sub(k * self.core))
    }
}

/// Where a window's core lands in its session.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WindowOrigin {
    pub session_id: String,
    pub core_start: usize,
    pub core_len: usize,
    pub session_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample<T> {
    pub x_t: Tensor<T>,
    pub x_p: Tensor<T>,
    pub y: Vec<T>,
    pub core_mask: Vec<bool>,
    pub domain: String,
    pub origin: WindowOrigin,
}

impl<T: Scalar> WindowSample<T> {
    /// Labels on the core positions, in frame order.
    pub fn core_labels(&self) -> impl Iterator<Item = T> + '_ {
        self.y.iter().zip(&self.core_mask).filter(|(_, &m)| m).map(|(&v, _)| v)
    }
}

fn gather_rows<T: Scalar>(src: &Tensor<f32>, rows: &[usize]) -> Tensor<T> {
    let d = src.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend(src.row(r).iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![rows.len(), d], data).expect("gathered rows match their shape")
}

/// Cuts a session into overlapping windows, ordered by core start.
pub fn segment_windows<T: Scalar>(session: &Session, scheme: &WindowScheme) -> Result<Vec<WindowSample<T>>> {
    let n = session.frames();
    if n == 0 {
        return Err(DapaError::Usage(format!("session '{}' has no frames", session.id)));
    }
    session.validate()?;
    Ok((0..scheme.num_windows(n))
        .map(|k| {
            let rows: Vec<usize> = (0..scheme.len()).map(|p| scheme.source_frame(n, k, p)).collect();
            WindowSample {
                x_t: gather_rows(&session.x_t, &rows),
                x_p: gather_rows(&session.x_p, &rows),
                y: rows.iter().map(|&r| T::from_f64_lossy(session.labels[r])).collect(),
                core_mask: scheme.core_mask(n, k),
                domain: session.domain.clone(),
                origin: WindowOrigin {
                    session_id: session.id.clone(),
                    core_start: k * scheme.core,
                    core_len: scheme.core_len(n, k),
                    session_frames: n,
                },
            }
        })
        .collect())
}

/// Reassembles per-session sequences from per-window predictions (one value
/// per window position). Window order does not matter; overlapping or
/// missing core frames are a consistency error.
pub fn stitch_predictions<'a, T, I>(windows: I, scheme: &WindowScheme) -> Result<BTreeMap<String, Vec<T>>>
where
    T: Copy + 'a,
    I: IntoIterator<Item = (&'a WindowOrigin, &'a [T])>,
{
    let mut out: BTreeMap<String, (Vec<Option<T>>, usize)> = BTreeMap::new();
    for (origin, pred) in windows {
        if pred.len() != scheme.len() {
            return Err(DapaError::Consistency(format!(
                "window of session '{}' at {} has {} predictions, expected {}",
                origin.session_id,
                origin.core_start,
                pred.len(),
                scheme.len()
            )));
        }
        let (slots, _) = out
            .entry(origin.session_id.clone())
            .or_insert_with(|| (vec![None; origin.session_frames], origin.session_frames));
        if slots.len() != origin.session_frames {
            return Err(DapaError::Consistency(format!(
                "session '{}' reported with {} and {} frames",
                origin.session_id,
                slots.len(),
                origin.session_frames
            )));
        }
        if origin.core_start + origin.core_len > slots.len() || origin.core_len > scheme.core {
            return Err(DapaError::Consistency(format!(
                "core [{}, {}) of session '{}' exceeds its {} frames",
                origin.core_start,
                origin.core_start + origin.core_len,
                origin.session_id,
                slots.len()
            )));
        }
        for j in 0..origin.core_len {
            let slot = &mut slots[origin.core_start + j];
            if slot.is_some() {
                return Err(DapaError::Consistency(format!(
                    "frame {} of session '{}' is covered by two windows",
                    origin.core_start + j,
                    origin.session_id
                )));
            }
            *slot = Some(pred[scheme.context + j]);
        }
    }
    out.into_iter()
        .map(|(id, (slots, _))| {
            let missing = slots.iter().position(Option::is_none);
            match missing {
                Some(f) => Err(DapaError::Consistency(format!(
                    "frame {f} of session '{id}' is not covered by any window"
                ))),
                None => Ok((id, slots.into_iter().flatten().collect())),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Split;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn session(n: usize, seed: u64) -> Session {
        let mut rng = RngStream::new(seed);
        Session {
            id: format!("s{seed}"),
            domain: "d".into(),
            split: Split::Train,
            x_t: Tensor::from_fn(&[n, 2], |i| i as f32),
            x_p: Tensor::from_fn(&[n, 2], |i| -(i as f32)),
            labels: (0..n).map(|_| rng.uniform()).collect(),
        }
    }

    fn round_trip(s: &Session, scheme: &WindowScheme) -> Vec<f64> {
        let w = segment_windows::<f64>(s, scheme).unwrap();
        let mut map = stitch_predictions(w.iter().map(|w| (&w.origin, w.y.as_slice())), scheme).unwrap();
        map.remove(&s.id).unwrap()
    }

    #[test]
    fn thirty_two_frames_make_one_window() {
        let s = session(32, 1);
        let w = segment_windows::<f32>(&s, &WindowScheme::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].x_t.shape(), &[96, 2]);
        assert_eq!(w[0].core_mask.iter().filter(|&&m| m).count(), 32);
        assert!(w[0].core_mask[32..64].iter().all(|&m| m));
        // Leading context replicates frame 0, trailing context frame 31.
        assert_eq!(w[0].x_t.row(0), s.x_t.row(0));
        assert_eq!(w[0].x_t.row(95), s.x_t.row(31));
        assert_eq!(w[0].x_t.row(40), s.x_t.row(8));
        assert_eq!(round_trip(&s, &WindowScheme::default()), s.labels);
    }

    #[test]
    fn ninety_six_frames_make_three_windows() {
        let s = session(96, 2);
        let w = segment_windows::<f32>(&s, &WindowScheme::default()).unwrap();
        let starts: Vec<usize> = w.iter().map(|w| w.origin.core_start).collect();
        assert_eq!(starts, vec![0, 32, 64]);
        // The middle window sees frames 0..96 unpadded.
        assert_eq!(w[1].x_t.data(), gather_rows::<f32>(&s.x_t, &(0..96).collect::<Vec<_>>()).data());
    }

    #[test]
    fn short_and_ragged_tails() {
        let scheme = WindowScheme::default();
        let s = session(1, 3);
        let w = segment_windows::<f32>(&s, &scheme).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].core_mask.iter().filter(|&&m| m).count(), 1);
        assert!(w[0].core_mask[32]);
        let s = session(33, 4);
        let w = segment_windows::<f32>(&s, &scheme).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].origin.core_len, 1);
    }

    #[test]
    fn empty_session_is_rejected() {
        let s = session(0, 5);
        assert!(segment_windows::<f32>(&s, &WindowScheme::default()).is_err());
    }

    #[test]
    fn stitch_is_order_independent_and_checks_coverage() {
        let scheme = WindowScheme::default();
        let s = session(150, 6);
        let w = segment_windows::<f64>(&s, &scheme).unwrap();
        let rev = stitch_predictions(w.iter().rev().map(|w| (&w.origin, w.y.as_slice())), &scheme).unwrap();
        assert_eq!(rev[&s.id], s.labels);

        let missing = stitch_predictions(w.iter().skip(1).map(|w| (&w.origin, w.y.as_slice())), &scheme);
        assert!(matches!(missing, Err(DapaError::Consistency(m)) if m.contains("frame 0")));
        let twice = stitch_predictions(
            w.iter().chain(std::iter::once(&w[0])).map(|w| (&w.origin, w.y.as_slice())),
            &scheme,
        );
        assert!(matches!(twice, Err(DapaError::Consistency(m)) if m.contains("two windows")));
    }

    #[test]
    fn single_window_output_is_core_slice() {
        let scheme = WindowScheme::new(4, 2).unwrap();
        let origin = WindowOrigin {
            session_id: "x".into(),
            core_start: 0,
            core_len: 3,
            session_frames: 3,
        };
        let pred = [9.0, 9.0, 1.0, 2.0, 3.0, 8.0, 9.0, 9.0];
        let out = stitch_predictions([(&origin, &pred[..])], &scheme).unwrap();
        assert_eq!(out["x"], vec![1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn partition_and_round_trip(n in 1usize..=500, seed in 0u64..1000) {
            let scheme = WindowScheme::default();
            let s = session(n, seed);
            let w = segment_windows::<f64>(&s, &scheme).unwrap();
            let mut count = vec![0usize; n];
            for win in &w {
                prop_assert_eq!(win.x_t.rows(), 96);
                for (p, &m) in win.core_mask.iter().enumerate() {
                    if m {
                        let f = win.origin.core_start + p - scheme.context;
                        prop_assert_eq!(scheme.source_frame(n, win.origin.core_start / 32, p), f);
                        count[f] += 1;
                    }
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
            for pair in w.windows(2) {
                prop_assert_eq!(pair[1].origin.core_start - pair[0].origin.core_start, 32);
            }
            prop_assert_eq!(round_trip(&s, &scheme), s.labels);
        }
    }
}
