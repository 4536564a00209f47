//! Anomaly scores and the summary statistics reported over them.
//!
//! A transition's score is the squared distance between the embeddings of its
//! two frames. Over a dataset this module reports the spread of normal scores
//! beyond the margin (UDS), how often a one-step displacement exceeds a
//! `j`-step one, and the per-type AUC of scores against injected labels.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, ScoreRow, StoredTrajectory};
use crate::error::{Error, Result};
use crate::game::Trajectory;
use crate::inject::{AnomalyType, TransitionLabel};
use crate::model::EmbeddingModel;
use crate::tensor::Scalar;

/// Step offsets reported for `Pr(Δ1 > Δj)`.
pub const RANK_SUM_OFFSETS: [usize; 5] = [2, 5, 10, 50, 100];

/// Δ values of one trajectory; entry `t` scores frame `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSeries {
    pub trajectory_id: String,
    pub values: Vec<f64>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Embed every frame of `trajectory`, checking its shape against the model.
pub fn embed_trajectory<T: Scalar>(
    model: &EmbeddingModel<T>,
    trajectory: &Trajectory,
) -> Result<Vec<Vec<T>>> {
    let c = model.config();
    if c.input_channels != 1 || c.input_height != trajectory.height || c.input_width != trajectory.width {
        return Err(Error::shape(format!(
            "trajectory `{}` has {}x{} frames, model expects {}x{}x{}",
            trajectory.id,
            trajectory.height,
            trajectory.width,
            c.input_channels,
            c.input_height,
            c.input_width
        )));
    }
    model.embed_frames(&trajectory.frame_refs())
}

/// `|e[t] - e[t + j]|^2` for every valid `t`.
pub fn displacements<T: Scalar>(embeddings: &[Vec<T>], j: usize) -> Vec<f64> {
    if j == 0 || embeddings.len() <= j {
        return Vec::new();
    }
    (0..embeddings.len() - j)
        .map(|t| sq_dist(&embeddings[t], &embeddings[t + j]))
        .collect()
}

pub fn score_transitions<T: Scalar>(
    model: &EmbeddingModel<T>,
    trajectory: &Trajectory,
) -> Result<DisplacementSeries> {
    if trajectory.len() < 2 {
        return Err(Error::EmptyTrajectory {
            id: trajectory.id.clone(),
            len: trajectory.len(),
        });
    }
    let embeddings = embed_trajectory(model, trajectory)?;
    Ok(DisplacementSeries {
        trajectory_id: trajectory.id.clone(),
        values: displacements(&embeddings, 1),
    })
}

/// Population standard deviation of `max(Δ - margin, 0)` pooled over all
/// series.
pub fn uds<'a, I>(series: I, margin: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let residuals: Vec<f64> = series
        .into_iter()
        .flatten()
        .map(|&d| (d - margin).max(0.0))
        .collect();
    if residuals.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "UDS needs at least 2 displacements, got {}",
            residuals.len()
        )));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidInput("non-finite displacement".into()));
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Mann-Whitney `U` of `first` against `second`: the number of pairs where the
/// first sample is larger, ties counting one half. Computed from mid-ranks.
fn mann_whitney_u(first: &[f64], second: &[f64]) -> Result<f64> {
    if first.is_empty() || second.is_empty() {
        return Err(Error::InvalidInput(format!(
            "rank statistic needs two non-empty samples, got {} and {}",
            first.len(),
            second.len()
        )));
    }
    if first.iter().chain(second).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in ranked sample".into()));
    }
    let mut pooled: Vec<(f64, bool)> = first
        .iter()
        .map(|&v| (v, true))
        .chain(second.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // ranks are 1-based; a tie group spanning positions i..k shares the rank
    // (i + 1 + k) / 2, kept doubled to stay in integers
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut k = i;
        while k < pooled.len() && pooled[k].0 == pooled[i].0 {
            k += 1;
        }
        let members = pooled[i..k].iter().filter(|p| p.1).count() as u128;
        doubled_rank_sum += members * (i as u128 + 1 + k as u128);
        i = k;
    }
    let n1 = first.len() as u128;
    let doubled_u = doubled_rank_sum - n1 * (n1 + 1);
    Ok(doubled_u as f64 / 2.0)
}

/// `Pr(a > b) + 0.5 Pr(a = b)` for `a` drawn from `deltas_1` and `b` from
/// `deltas_j`.
pub fn rank_sum_prob(deltas_1: &[f64], deltas_j: &[f64]) -> Result<f64> {
    let u = mann_whitney_u(deltas_1, deltas_j)?;
    Ok(u / (deltas_1.len() as f64 * deltas_j.len() as f64))
}

/// Area under the ROC curve with anomalous (`true`) as the positive class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &anomalous) in scores.iter().zip(labels) {
        if anomalous { pos.push(s) } else { neg.push(s) }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(format!(
            "AUC needs both classes, got {} anomalous and {} normal",
            pos.len(),
            neg.len()
        )));
    }
    rank_sum_prob(&pos, &neg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub anomalous: usize,
    pub normal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub margin: f64,
    pub uds: f64,
    /// Keyed by step offset `j`.
    pub rank_sum: BTreeMap<usize, f64>,
    pub auc: BTreeMap<AnomalyType, f64>,
    pub counts: BTreeMap<AnomalyType, TypeCounts>,
    pub normal_trajectories: usize,
    pub corrupted_trajectories: usize,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// One header line and one value line. Missing statistics are empty cells.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut header = vec!["uds".to_string()];
        let mut row = vec![self.uds.to_string()];
        for j in RANK_SUM_OFFSETS {
            header.push(format!("pr_delta1_gt_delta{j}"));
            row.push(self.rank_sum.get(&j).map(f64::to_string).unwrap_or_default());
        }
        for kind in AnomalyType::ALL {
            header.push(format!("auc_{}", kind.name()));
            row.push(self.auc.get(&kind).map(f64::to_string).unwrap_or_default());
        }
        writeln!(out, "{}", header.join(","))?;
        writeln!(out, "{}", row.join(","))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Per-type AUC over labelled transitions. Positives are the anomalous
/// transitions of one type, negatives every normal transition.
fn auc_by_type<'a, I>(labelled: I, warnings: &mut Vec<String>) -> Result<(BTreeMap<AnomalyType, f64>, BTreeMap<AnomalyType, TypeCounts>)>
where
    I: IntoIterator<Item = (f64, &'a TransitionLabel)>,
{
    let mut normal = Vec::new();
    let mut positives: BTreeMap<AnomalyType, Vec<f64>> = BTreeMap::new();
    for (score, label) in labelled {
        match (label.anomalous, label.anomaly_type) {
            (true, Some(kind)) => positives.entry(kind).or_default().push(score),
            (true, None) => {
                return Err(Error::InvalidInput(format!(
                    "anomalous transition {} has no type",
                    label.t
                )))
            }
            (false, _) => normal.push(score),
        }
    }
    let mut aucs = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (kind, scores) in positives {
        counts.insert(
            kind,
            TypeCounts {
                anomalous: scores.len(),
                normal: normal.len(),
            },
        );
        if normal.is_empty() {
            warnings.push(format!("no normal transitions to rank {kind} against"));
            continue;
        }
        aucs.insert(kind, rank_sum_prob(&scores, &normal)?);
    }
    Ok((aucs, counts))
}

fn labels_or_normal(stored: &StoredTrajectory) -> Vec<TransitionLabel> {
    stored
        .labels
        .clone()
        .unwrap_or_else(|| crate::inject::all_normal_labels(stored.trajectory.len()))
}

/// Score every transition of every trajectory, in the given order.
pub fn score_dataset<T: Scalar>(
    model: &EmbeddingModel<T>,
    trajectories: &[StoredTrajectory],
) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for stored in trajectories {
        let series = score_transitions(model, &stored.trajectory)?;
        let labels = labels_or_normal(stored);
        if labels.len() != series.values.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory `{}` has {} labels for {} transitions",
                series.trajectory_id,
                labels.len(),
                series.values.len()
            )));
        }
        rows.extend(series.values.iter().zip(&labels).map(|(&score, label)| ScoreRow {
            trajectory_id: series.trajectory_id.clone(),
            t: label.t,
            score,
            anomalous: label.anomalous,
            anomaly_type: label.anomaly_type,
        }));
    }
    Ok(rows)
}

/// Full report over loaded trajectories. UDS and rank-sum use uncorrupted
/// trajectories only; AUC uses corrupted ones only.
pub fn evaluate_trajectories<T: Scalar>(
    model: &EmbeddingModel<T>,
    trajectories: &[StoredTrajectory],
    margin: f64,
) -> Result<EvalReport> {
    if !(margin > 0.0) {
        return Err(Error::InvalidInput(format!("margin must be > 0, got {margin}")));
    }
    let mut warnings = Vec::new();
    let mut ordered: Vec<&StoredTrajectory> = trajectories.iter().collect();
    ordered.sort_by(|a, b| a.entry.id.cmp(&b.entry.id));

    let mut by_offset: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut one_step = Vec::new();
    let mut labelled = Vec::new();
    let (mut normal_count, mut corrupted_count) = (0, 0);
    for stored in ordered {
        let embeddings = embed_trajectory(model, &stored.trajectory)?;
        let deltas = displacements(&embeddings, 1);
        if stored.entry.corrupted {
            corrupted_count += 1;
            let labels = labels_or_normal(stored);
            if labels.len() != deltas.len() {
                return Err(Error::InvalidInput(format!(
                    "trajectory `{}` has {} labels for {} transitions",
                    stored.entry.id,
                    labels.len(),
                    deltas.len()
                )));
            }
            labelled.extend(deltas.into_iter().zip(labels));
        } else {
            normal_count += 1;
            for j in RANK_SUM_OFFSETS {
                by_offset.entry(j).or_default().extend(displacements(&embeddings, j));
            }
            one_step.extend(deltas);
        }
    }
    if normal_count == 0 {
        return Err(Error::InvalidInput(
            "dataset has no uncorrupted trajectories".into(),
        ));
    }
    let uds = uds([one_step.as_slice()], margin)?;
    let mut rank_sum = BTreeMap::new();
    for (j, deltas_j) in by_offset {
        if deltas_j.is_empty() {
            warnings.push(format!("trajectories too short for {j}-step displacements"));
            continue;
        }
        rank_sum.insert(j, rank_sum_prob(&one_step, &deltas_j)?);
    }
    let (auc, counts) = if corrupted_count == 0 {
        warnings.push("no corrupted trajectories; AUC not computed".into());
        Default::default()
    } else {
        auc_by_type(labelled.iter().map(|(s, l)| (*s, l)), &mut warnings)?
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(EvalReport {
        margin,
        uds,
        rank_sum,
        auc,
        counts,
        normal_trajectories: normal_count,
        corrupted_trajectories: corrupted_count,
        warnings,
    })
}

pub fn evaluate<T: Scalar>(
    model: &EmbeddingModel<T>,
    dataset_dir: &Path,
    margin: f64,
) -> Result<EvalReport> {
    let (_, trajectories) = load_dataset(dataset_dir)?;
    evaluate_trajectories(model, &trajectories, margin)
}

/// Report from a score table alone. Trajectories without any anomalous row
/// count as normal for UDS; rank-sum needs embeddings and is left empty.
pub fn evaluate_scores(rows: &[ScoreRow], margin: f64) -> Result<EvalReport> {
    if !(margin > 0.0) {
        return Err(Error::InvalidInput(format!("margin must be > 0, got {margin}")));
    }
    let mut grouped: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
    for row in rows {
        grouped.entry(&row.trajectory_id).or_default().push(row);
    }
    let mut warnings = vec!["rank-sum statistics need a model; skipped".to_string()];
    let mut normal_scores = Vec::new();
    let mut labelled = Vec::new();
    let (mut normal_count, mut corrupted_count) = (0, 0);
    for group in grouped.values_mut() {
        group.sort_by_key(|r| r.t);
        if group.iter().any(|r| r.anomalous) {
            corrupted_count += 1;
            labelled.extend(group.iter().map(|r| {
                (
                    r.score,
                    TransitionLabel {
                        t: r.t,
                        anomalous: r.anomalous,
                        anomaly_type: r.anomaly_type,
                    },
                )
            }));
        } else {
            normal_count += 1;
            normal_scores.extend(group.iter().map(|r| r.score));
        }
    }
    if normal_count == 0 {
        return Err(Error::InvalidInput("score table has no normal trajectories".into()));
    }
    let uds = uds([normal_scores.as_slice()], margin)?;
    let (auc, counts) = if corrupted_count == 0 {
        warnings.push("no corrupted trajectories; AUC not computed".into());
        Default::default()
    } else {
        auc_by_type(labelled.iter().map(|(s, l)| (*s, l)), &mut warnings)?
    };
    Ok(EvalReport {
        margin,
        uds,
        rank_sum: BTreeMap::new(),
        auc,
        counts,
        normal_trajectories: normal_count,
        corrupted_trajectories: corrupted_count,
        warnings,
    })
}
