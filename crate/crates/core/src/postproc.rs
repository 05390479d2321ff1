//! Turning boundary maps into a short list of scored proposals.
//!
//! Candidate boundaries are local peaks of the start/end probability curves
//! (or any position within `peak_ratio` of the curve maximum). Every start is
//! paired with every later end no more than `D` snippets away and scored by
//! `P_S[s] * P_E[e] * P_A[s][e - s]`. Redundant candidates are then removed
//! with greedy NMS or rescored with Gaussian Soft-NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bmm::BoundaryMaps;

/// A scored temporal interval, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub label: Option<String>,
}

impl Proposal {
    pub fn new(video_id: impl Into<String>, start: f64, end: f64, score: f64) -> Self {
        Self {
            video_id: video_id.into(),
            start,
            end,
            score,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Intersection over union of two intervals; 0 when they are disjoint.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending score, then earlier start, then shorter duration.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.duration().total_cmp(&b.duration()))
}

/// Indices that are strict local maxima (out-of-range neighbours count as
/// `-inf`) or reach `peak_ratio * max(P)`. Ascending, no duplicates.
pub fn select_boundaries(probs: &[f64], peak_ratio: f64) -> Vec<usize> {
    let Some(max) = probs.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let at = |i: isize| {
        if i < 0 || i as usize >= probs.len() {
            f64::NEG_INFINITY
        } else {
            probs[i as usize]
        }
    };
    (0..probs.len())
        .filter(|&i| {
            let p = probs[i];
            let peak = p > at(i as isize - 1) && p > at(i as isize + 1);
            peak || p >= peak_ratio * max
        })
        .collect()
}

/// Pairs every start with every later end within the map's maximum duration.
///
/// Snippet index `i` maps to time `i * delta / frame_rate`.
pub fn pair_and_score(
    video_id: &str,
    starts: &[usize],
    ends: &[usize],
    maps: &BoundaryMaps,
    delta: usize,
    frame_rate: f64,
) -> Vec<Proposal> {
    let unit = delta as f64 / frame_rate;
    let mut out = Vec::new();
    for &s in starts {
        for &e in ends {
            if e <= s || e - s > maps.max_duration() || !maps.is_valid(s, e - s) {
                continue;
            }
            let score = maps.start[s] * maps.end[e] * maps.actionness(s, e - s);
            out.push(Proposal::new(video_id, s as f64 * unit, e as f64 * unit, score));
        }
    }
    out
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the best remaining proposal (see [`rank_order`]) and
/// drops every other with IoU above `threshold` against it.
pub fn nms(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut ranked = proposals.to_vec();
    ranked.sort_by(rank_order);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in ranked {
        if kept
            .iter()
            .all(|k| temporal_iou(k.interval(), p.interval()) <= threshold)
        {
            kept.push(p);
        }
    }
    kept
}

/// [`nms`] applied separately to each label group (unlabeled proposals form
/// one group). Output keeps [`rank_order`].
pub fn nms_per_label(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut labels: Vec<Option<&String>> = proposals.iter().map(|p| p.label.as_ref()).collect();
    labels.sort();
    labels.dedup();
    let mut out = Vec::new();
    for label in labels {
        let group: Vec<Proposal> = proposals
            .iter()
            .filter(|p| p.label.as_ref() == label)
            .cloned()
            .collect();
        out.extend(nms(&group, threshold));
    }
    out.sort_by(rank_order);
    out
}

/// Soft-NMS with Gaussian decay `exp(-iou^2 / sigma)`.
///
/// Scores never increase; proposals whose score falls below `score_floor`
/// are dropped. Output is sorted by descending (decayed) score.
pub fn soft_nms(proposals: &[Proposal], sigma: f64, score_floor: f64) -> Vec<Proposal> {
    let mut pool: Vec<Proposal> = proposals.iter().filter(|p| p.score >= score_floor).cloned().collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len())
            .min_by(|&a, &b| rank_order(&pool[a], &pool[b]))
            .expect("non-empty");
        let top = pool.swap_remove(best);
        for p in &mut pool {
            let iou = temporal_iou(top.interval(), p.interval());
            p.score *= (-(iou * iou) / sigma).exp();
        }
        pool.retain(|p| p.score >= score_floor);
        out.push(top);
    }
    out
}

/// Which suppression runs after pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suppression {
    Nms,
    SoftNms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub method: Suppression,
    pub peak_ratio: f64,
    pub nms_threshold: f64,
    pub soft_sigma: f64,
    pub score_floor: f64,
    /// Proposals kept per video after suppression.
    pub max_proposals: usize,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            method: Suppression::SoftNms,
            peak_ratio: 0.5,
            nms_threshold: 0.65,
            soft_sigma: 0.5,
            score_floor: 1e-3,
            max_proposals: 100,
        }
    }
}

/// Full inference post-processing for one video.
pub fn proposals_from_maps(
    video_id: &str,
    maps: &BoundaryMaps,
    delta: usize,
    frame_rate: f64,
    cfg: &PostprocConfig,
) -> Vec<Proposal> {
    let starts = select_boundaries(&maps.start, cfg.peak_ratio);
    let ends = select_boundaries(&maps.end, cfg.peak_ratio);
    let candidates = pair_and_score(video_id, &starts, &ends, maps, delta, frame_rate);
    let mut kept = match cfg.method {
        Suppression::Nms => nms(&candidates, cfg.nms_threshold),
        Suppression::SoftNms => soft_nms(&candidates, cfg.soft_sigma, cfg.score_floor),
    };
    kept.truncate(cfg.max_proposals);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(start: f64, end: f64, score: f64) -> Proposal {
        Proposal::new("v", start, end, score)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou((0.0, 2.0), (0.0, 2.0)), 1.0);
        assert!((temporal_iou((0.0, 2.0), (1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(temporal_iou((0.0, 1.0), (1.0, 3.0)), 0.0);
    }

    #[test]
    fn boundary_selection_examples() {
        assert_eq!(select_boundaries(&[0.1, 0.9, 0.1], 0.5), vec![1]);
        assert_eq!(select_boundaries(&[0.9, 0.1, 0.1], 0.5), vec![0]);
        assert_eq!(select_boundaries(&[0.2, 0.2, 0.2], 0.5), vec![0, 1, 2]);
        assert_eq!(select_boundaries(&[0.3], 0.5), vec![0]);
        assert!(select_boundaries(&[], 0.5).is_empty());
    }

    fn maps_with(t: usize, d: usize) -> BoundaryMaps {
        BoundaryMaps::filled(t, d, 0.5)
    }

    #[test]
    fn pair_scores_are_the_triple_product() {
        let mut maps = maps_with(8, 4);
        maps.start[2] = 0.8;
        maps.end[5] = 0.9;
        maps.set_actionness(2, 3, 0.5);
        let out = pair_and_score("v", &[2], &[5], &maps, 16, 16.0);
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 0.36).abs() < 1e-12);
        assert_eq!((out[0].start, out[0].end), (2.0, 5.0));
    }

    #[test]
    fn pairs_respect_order_and_duration() {
        let maps = maps_with(10, 3);
        assert!(pair_and_score("v", &[5], &[2], &maps, 16, 16.0).is_empty());
        assert!(pair_and_score("v", &[1], &[5], &maps, 16, 16.0).is_empty());
        assert!(pair_and_score("v", &[], &[5], &maps, 16, 16.0).is_empty());
    }

    #[test]
    fn nms_examples() {
        let dup = [p(0.0, 2.0, 0.9), p(0.0, 2.0, 0.8)];
        for thr in [0.0, 0.3, 0.99] {
            let out = nms(&dup, thr);
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].score, 0.9);
        }
        let disjoint = [p(0.0, 1.0, 0.5), p(2.0, 3.0, 0.7)];
        assert_eq!(nms(&disjoint, 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_prefer_earlier_then_shorter() {
        let tied = [p(1.0, 3.0, 0.5), p(0.0, 3.0, 0.5), p(0.0, 2.0, 0.5)];
        let out = nms(&tied, 0.1);
        assert_eq!((out[0].start, out[0].end), (0.0, 2.0));
    }

    #[test]
    fn per_label_nms_keeps_overlaps_across_labels() {
        let xs = [
            p(0.0, 2.0, 0.9).with_label("a"),
            p(0.0, 2.0, 0.8).with_label("b"),
            p(0.0, 2.0, 0.7).with_label("a"),
        ];
        let out = nms_per_label(&xs, 0.5);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].label.as_deref(), Some("b"));
    }

    #[test]
    fn soft_nms_examples() {
        let disjoint = [p(0.0, 1.0, 0.9), p(2.0, 3.0, 0.8)];
        let out = soft_nms(&disjoint, 0.5, 1e-3);
        assert_eq!(out[1].score, 0.8);

        let dup = [p(0.0, 2.0, 0.9), p(0.0, 2.0, 0.8)];
        let out = soft_nms(&dup, 0.5, 1e-3);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
        assert!(((-2.0f64).exp() - 0.1353).abs() < 1e-4);

        let out = soft_nms(&dup, f64::INFINITY, 1e-3);
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn soft_nms_drops_below_floor() {
        let dup = [p(0.0, 2.0, 0.9), p(0.0, 2.0, 0.005)];
        let out = soft_nms(&dup, 0.5, 1e-3);
        assert_eq!(out.len(), 1);
    }
}
