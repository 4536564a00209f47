//! Synthetic visual bugs and their ground-truth transition labels.
//!
//! Single-frame bugs (artefact, flicker, splits) corrupt one frame `f`, making
//! transitions `f-1` and `f` anomalous. A freeze halts the game for `L` extra
//! frames (the timeline after it shifts by `L` and is truncated back to the
//! original length) and labels the `L` self-transitions anomalous. A freeze
//! with frame skip holds the picture for `L-1` frames while the game keeps
//! running: the self-transitions are normal and only the jump back to the
//! live game is anomalous.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Trajectory;

/// Placement attempts per event before it is dropped.
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnomalyType {
    VisualArtefact,
    Flicker,
    Freeze,
    FreezeSkip,
    SplitHorizontal,
    SplitVertical,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 6] = [
        AnomalyType::VisualArtefact,
        AnomalyType::Flicker,
        AnomalyType::Freeze,
        AnomalyType::FreezeSkip,
        AnomalyType::SplitHorizontal,
        AnomalyType::SplitVertical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::VisualArtefact => "VisualArtefact",
            AnomalyType::Flicker => "Flicker",
            AnomalyType::Freeze => "Freeze",
            AnomalyType::FreezeSkip => "FreezeSkip",
            AnomalyType::SplitHorizontal => "SplitHorizontal",
            AnomalyType::SplitVertical => "SplitVertical",
        }
    }

    fn is_freeze(self) -> bool {
        matches!(self, AnomalyType::Freeze | AnomalyType::FreezeSkip)
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyType {
    type Err = Error;

    /// Accepts the canonical names and kebab/snake case spellings, e.g.
    /// `freeze-skip`, `split_horizontal`, `artefact`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        Ok(match key.as_str() {
            "visualartefact" | "visualartifact" | "artefact" | "artifact" | "va" => {
                AnomalyType::VisualArtefact
            }
            "flicker" | "flickering" => AnomalyType::Flicker,
            "freeze" => AnomalyType::Freeze,
            "freezeskip" | "fskip" | "skip" => AnomalyType::FreezeSkip,
            "splithorizontal" | "sh" => AnomalyType::SplitHorizontal,
            "splitvertical" | "sv" => AnomalyType::SplitVertical,
            _ => return Err(Error::InvalidInput(format!("unknown anomaly type `{s}`"))),
        })
    }
}

/// Ground truth for transition `t` (frame `t` to frame `t + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionLabel {
    pub t: usize,
    pub anomalous: bool,
    #[serde(rename = "type")]
    pub anomaly_type: Option<AnomalyType>,
}

impl TransitionLabel {
    pub fn normal(t: usize) -> Self {
        Self {
            t,
            anomalous: false,
            anomaly_type: None,
        }
    }

    pub fn anomaly(t: usize, kind: AnomalyType) -> Self {
        Self {
            t,
            anomalous: true,
            anomaly_type: Some(kind),
        }
    }
}

pub fn all_normal_labels(frames: usize) -> Vec<TransitionLabel> {
    (0..frames.saturating_sub(1)).map(TransitionLabel::normal).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    /// Expected events per frame.
    pub rate: f64,
    pub types: BTreeSet<AnomalyType>,
    pub freeze_min: usize,
    pub freeze_max: usize,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            rate: 0.01,
            types: AnomalyType::ALL.into_iter().collect(),
            freeze_min: 2,
            freeze_max: 8,
            seed: 0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "injection rate {} outside (0, 0.5)",
                self.rate
            )));
        }
        if self.types.is_empty() {
            return Err(Error::InvalidConfig("no anomaly types enabled".into()));
        }
        if self.freeze_min < 2 || self.freeze_max < self.freeze_min {
            return Err(Error::InvalidConfig(format!(
                "freeze duration range [{}, {}] is invalid",
                self.freeze_min, self.freeze_max
            )));
        }
        Ok(())
    }
}

/// One placed bug. `start` is the corrupted frame for single-frame bugs and
/// the last live frame before the freeze for the two freeze kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub kind: AnomalyType,
    pub start: usize,
    pub duration: usize,
}

impl Event {
    /// First and last frame whose transitions this event determines.
    fn footprint(&self) -> (usize, usize) {
        match self.kind {
            AnomalyType::Freeze => (self.start, self.start + self.duration + 1),
            AnomalyType::FreezeSkip => (self.start, self.start + self.duration),
            _ => (self.start - 1, self.start + 1),
        }
    }

    /// Valid range of `start` in a trajectory of `len` frames.
    fn start_range(kind: AnomalyType, duration: usize, len: usize) -> Option<(usize, usize)> {
        let (lo, hi) = match kind {
            AnomalyType::Freeze => (0, len.checked_sub(duration + 2)?),
            AnomalyType::FreezeSkip => (0, len.checked_sub(duration + 1)?),
            _ => (1, len.checked_sub(2)?),
        };
        (lo <= hi).then_some((lo, hi))
    }

    pub fn labeled_transitions(&self) -> usize {
        match self.kind {
            AnomalyType::Freeze => self.duration,
            AnomalyType::FreezeSkip => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Injection {
    pub trajectory: Trajectory,
    pub labels: Vec<TransitionLabel>,
    pub events: Vec<Event>,
    pub warnings: Vec<String>,
}

/// Draw non-overlapping events for a trajectory of `len` frames: one
/// Bernoulli(rate) trial per frame decides how many, each gets a uniform
/// type and a uniform position, resampled on collision.
pub fn sample_events(
    len: usize,
    config: &InjectionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Event>, Vec<String>)> {
    config.validate()?;
    let mut warnings = Vec::new();
    let count = (0..len).filter(|_| rng.random_bool(config.rate)).count();
    if count == 0 && config.rate * (len as f64) < 1.0 {
        warnings.push(format!(
            "expected {:.2} events over {len} frames and none were sampled",
            config.rate * len as f64
        ));
    }
    let types: Vec<AnomalyType> = config.types.iter().copied().collect();
    let mut occupied = vec![false; len];
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = *types.choose(rng).expect("types validated non-empty");
        let duration = if kind.is_freeze() {
            rng.random_range(config.freeze_min..=config.freeze_max)
        } else {
            1
        };
        let Some((lo, hi)) = Event::start_range(kind, duration, len) else {
            warnings.push(format!("trajectory too short for a {kind} event"));
            continue;
        };
        let placed = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| {
            let ev = Event {
                kind,
                start: rng.random_range(lo..=hi),
                duration,
            };
            let (a, b) = ev.footprint();
            (!occupied[a..=b].iter().any(|&o| o)).then_some(ev)
        });
        match placed {
            Some(ev) => {
                let (a, b) = ev.footprint();
                occupied[a..=b].fill(true);
                events.push(ev);
            }
            None => warnings.push(format!("no free slot for a {kind} event; dropped")),
        }
    }
    events.sort_by_key(|e| e.start);
    Ok((events, warnings))
}

/// Corrupt a trajectory according to `config`.
pub fn inject(trajectory: &Trajectory, config: &InjectionConfig) -> Result<Injection> {
    if trajectory.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "trajectory `{}` has {} frames; injection needs at least 10",
            trajectory.id,
            trajectory.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (events, warnings) = sample_events(trajectory.len(), config, &mut rng)?;
    for w in &warnings {
        log::warn!("{}: {w}", trajectory.id);
    }
    let (corrupted, labels) = apply_events(trajectory, &events, &mut rng);
    Ok(Injection {
        trajectory: corrupted,
        labels,
        events,
        warnings,
    })
}

/// Apply sorted, non-overlapping events. Positions refer to the corrupted
/// timeline.
pub fn apply_events(
    trajectory: &Trajectory,
    events: &[Event],
    rng: &mut ChaCha8Rng,
) -> (Trajectory, Vec<TransitionLabel>) {
    let len = trajectory.len();
    let (h, w) = (trajectory.height, trajectory.width);
    let original = &trajectory.frames;
    let mut frames: Vec<Vec<u8>> = Vec::with_capacity(len);
    let mut labels = all_normal_labels(len);
    let mut shift = 0usize;
    let mut pending = events.iter().peekable();

    while frames.len() < len {
        let i = frames.len();
        let Some(ev) = pending.next_if(|e| e.start == i) else {
            frames.push(original[i - shift].clone());
            continue;
        };
        match ev.kind {
            AnomalyType::Freeze => {
                let held = original[i - shift].clone();
                for (t, label) in labels.iter_mut().enumerate().skip(i).take(ev.duration) {
                    *label = TransitionLabel::anomaly(t, ev.kind);
                }
                frames.extend(std::iter::repeat_n(held, ev.duration + 1));
                shift += ev.duration;
            }
            AnomalyType::FreezeSkip => {
                let held = original[i - shift].clone();
                frames.extend(std::iter::repeat_n(held, ev.duration));
                let resume = i + ev.duration - 1;
                labels[resume] = TransitionLabel::anomaly(resume, ev.kind);
            }
            kind => {
                let src = &original[i - shift];
                frames.push(corrupt_frame(kind, src, h, w, rng));
                labels[i - 1] = TransitionLabel::anomaly(i - 1, kind);
                labels[i] = TransitionLabel::anomaly(i, kind);
            }
        }
    }
    frames.truncate(len);

    let mut out = trajectory.clone();
    out.frames = frames;
    (out, labels)
}

fn corrupt_frame(kind: AnomalyType, src: &[u8], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    match kind {
        AnomalyType::Flicker => vec![0; src.len()],
        AnomalyType::SplitHorizontal => split_horizontal(src, h, w),
        AnomalyType::SplitVertical => split_vertical(src, h, w),
        AnomalyType::VisualArtefact => loop {
            let out = visual_artefact(src, h, w, rng);
            if out != src {
                break out;
            }
        },
        AnomalyType::Freeze | AnomalyType::FreezeSkip => unreachable!("freezes span frames"),
    }
}

/// Swap the top and bottom halves (rows rotated by `h / 2`).
pub fn split_horizontal(src: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = src.to_vec();
    out.rotate_left((h / 2) * w);
    out
}

/// Swap the left and right halves of every row.
pub fn split_vertical(src: &[u8], _h: usize, w: usize) -> Vec<u8> {
    let mut out = src.to_vec();
    for row in out.chunks_mut(w) {
        row.rotate_left(w / 2);
    }
    out
}

/// Overdraw 1 to 3 random axis-aligned rectangles or one-pixel lines at
/// random intensities in [32, 255].
pub fn visual_artefact(src: &[u8], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = src.to_vec();
    for _ in 0..rng.random_range(1..=3) {
        let value: u8 = rng.random_range(32..=255);
        let (rh, rw) = match rng.random_range(0..3) {
            0 => (rng.random_range(2..=(h / 4).max(2)), rng.random_range(2..=(w / 4).max(2))),
            1 => (1, rng.random_range((w / 4).max(1)..=w)),
            _ => (rng.random_range((h / 4).max(1)..=h), 1),
        };
        let top = rng.random_range(0..=h - rh.min(h));
        let left = rng.random_range(0..=w - rw.min(w));
        for y in top..(top + rh).min(h) {
            out[y * w + left..y * w + (left + rw).min(w)].fill(value);
        }
    }
    out
}

fn classify_single(corrupt: &[u8], source: &[u8], h: usize, w: usize) -> AnomalyType {
    if corrupt.iter().all(|&p| p == 0) {
        AnomalyType::Flicker
    } else if corrupt == split_horizontal(source, h, w) {
        AnomalyType::SplitHorizontal
    } else if corrupt == split_vertical(source, h, w) {
        AnomalyType::SplitVertical
    } else {
        AnomalyType::VisualArtefact
    }
}

/// Reconstruct the expected labels from the corrupted and original frames
/// alone, or `None` if the corruption does not follow the injection rules.
pub fn expected_labels(corrupted: &Trajectory, original: &Trajectory) -> Result<Option<Vec<TransitionLabel>>> {
    let len = corrupted.len();
    if original.len() != len || corrupted.height != original.height || corrupted.width != original.width {
        return Err(Error::InvalidInput(format!(
            "corrupted trajectory ({} frames of {}x{}) does not match original ({} frames of {}x{})",
            len, corrupted.height, corrupted.width, original.len(), original.height, original.width
        )));
    }
    let (h, w) = (original.height, original.width);
    let c = &corrupted.frames;
    let o = &original.frames;
    if c[0] != o[0] {
        return Ok(None);
    }
    let mut labels = all_normal_labels(len);
    // invariant: c[i] == o[src]
    let (mut i, mut src) = (0usize, 0usize);
    while i + 1 < len {
        if src + 1 < len && c[i + 1] == o[src + 1] {
            i += 1;
            src += 1;
            continue;
        }
        if c[i + 1] == c[i] {
            let mut end = i + 1;
            while end + 1 < len && c[end + 1] == c[i] {
                end += 1;
            }
            if end + 1 == len {
                return Ok(None);
            }
            let run = end - i;
            let next = &c[end + 1];
            if src + 1 < len && *next == o[src + 1] {
                for (t, label) in labels.iter_mut().enumerate().take(end).skip(i) {
                    *label = TransitionLabel::anomaly(t, AnomalyType::Freeze);
                }
                src += 1;
            } else if src + run + 1 < len && *next == o[src + run + 1] {
                labels[end] = TransitionLabel::anomaly(end, AnomalyType::FreezeSkip);
                src += run + 1;
            } else {
                return Ok(None);
            }
            i = end + 1;
            continue;
        }
        if i + 2 >= len || src + 2 >= len || c[i + 2] != o[src + 2] {
            return Ok(None);
        }
        let kind = classify_single(&c[i + 1], &o[src + 1], h, w);
        labels[i] = TransitionLabel::anomaly(i, kind);
        labels[i + 1] = TransitionLabel::anomaly(i + 1, kind);
        i += 2;
        src += 2;
    }
    Ok(Some(labels))
}

/// True iff `labels` are exactly the labels the injection rules assign to
/// the differences between `corrupted` and `original`.
pub fn verify_labels(
    corrupted: &Trajectory,
    original: &Trajectory,
    labels: &[TransitionLabel],
) -> Result<bool> {
    if labels.len() + 1 != corrupted.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} frames",
            labels.len(),
            corrupted.len()
        )));
    }
    Ok(expected_labels(corrupted, original)?.is_some_and(|want| want == labels))
}
