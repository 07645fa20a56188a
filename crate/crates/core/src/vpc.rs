//! Voted prediction consistency: decoder layers act as voters, their
//! disagreement is penalized, and their agreement gates pseudo-labels for
//! unlabeled target samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, Point3, PointCloud};
use crate::head::vote_mean_var;
use crate::tape::{Graph, Var};

/// Point-wise mean of clouds in slot correspondence.
pub fn vote_mean(per_layer: &[&[Point3]]) -> Result<Vec<Point3>> {
    let first = per_layer
        .first()
        .ok_or_else(|| Error::invalid("vote needs at least one layer"))?;
    let n = first.len();
    if let Some(bad) = per_layer.iter().position(|l| l.len() != n) {
        return Err(Error::invalid(format!(
            "layer {bad} has {} points, expected {n}",
            per_layer[bad].len()
        )));
    }
    let l = per_layer.len() as f64;
    Ok((0..n)
        .map(|j| {
            let mut m = [0.0; 3];
            for layer in per_layer {
                for k in 0..3 {
                    m[k] += layer[j][k];
                }
            }
            m.map(|v| v / l)
        })
        .collect())
}

/// `(1/L) Σ_l CD(M_mean, Pred_l)` on plain clouds.
pub fn consistency_score(per_layer: &[&[Point3]]) -> Result<f64> {
    let mean = vote_mean(per_layer)?;
    let mut s = 0.0;
    for layer in per_layer {
        s += chamfer_distance(&mean, layer)?.raw;
    }
    Ok(s / per_layer.len() as f64)
}

/// Differentiable consistency loss over the per-layer predictions of one sample.
pub fn consistency_loss(g: &mut Graph, per_layer: &[Var]) -> Var {
    let mean = vote_mean_var(g, per_layer);
    consistency_loss_with_mean(g, mean, per_layer)
}

pub fn consistency_loss_with_mean(g: &mut Graph, mean: Var, per_layer: &[Var]) -> Var {
    let terms: Vec<Var> = per_layer.iter().map(|&p| g.chamfer(mean, p)).collect();
    let cat = g.concat_rows(&terms);
    g.mean(cat)
}

/// `p`-th percentile (linear interpolation between order statistics) of the
/// score window. Lower scores mean more agreement.
pub fn update_threshold(scores: &[f64], percentile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::config(
            "cannot set a threshold from an empty score window",
        ));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::config(format!(
            "percentile {percentile} outside [0, 100]"
        )));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub cloud: PointCloud,
    pub score: f64,
    pub epoch: usize,
}

/// Target sample id → newest accepted prediction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    entries: BTreeMap<String, PseudoLabel>,
}

impl PseudoLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PseudoLabel> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// One target prediction offered for harvesting. `cloud` holds plain values, so
/// nothing stored can carry gradients.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: String,
    pub score: f64,
    pub cloud: PointCloud,
}

/// Stores every candidate whose score is at most `tau`, replacing any older
/// entry for the same id. Returns how many were harvested.
pub fn harvest_pseudo_labels(
    candidates: Vec<Candidate>,
    tau: f64,
    epoch: usize,
    store: &mut PseudoLabelStore,
) -> usize {
    let mut n = 0;
    for c in candidates {
        if c.score <= tau {
            store.entries.insert(
                c.id,
                PseudoLabel {
                    cloud: c.cloud,
                    score: c.score,
                    epoch,
                },
            );
            n += 1;
        }
    }
    n
}

/// `CD(dense, stored label)` when `id` has a label, `None` otherwise.
pub fn pseudo_label_loss(
    g: &mut Graph,
    dense: Var,
    id: &str,
    store: &PseudoLabelStore,
) -> Option<Var> {
    let label = store.get(id)?;
    let t = g.constant(crate::tape::Tensor::from_points(&label.cloud));
    Some(g.chamfer(dense, t))
}
