//! Proposal and detection metrics: AR@AN, AUC of the AR-vs-AN curve and
//! mAP at temporal IoU thresholds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::VideoRecord;
use crate::postproc::{rank_order, temporal_iou, Proposal};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth contains no segments; recall is undefined")]
    EmptyGroundTruth,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

/// How AN caps the proposals of each video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capping {
    /// Keep the top `AN` proposals of every video.
    PerVideo,
    /// Keep the same fraction of every video's proposals, chosen so that the
    /// corpus keeps `AN` proposals per video on average.
    CorpusAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
    /// AN values reported individually.
    pub an_values: Vec<usize>,
    /// The AUC integrates AR over `AN = 1 ..= max_an`.
    pub max_an: usize,
    pub capping: Capping,
    pub map_tious: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_grid: default_tiou_grid(),
            an_values: vec![1, 10, 50, 100],
            max_an: 100,
            capping: Capping::PerVideo,
            map_tious: vec![0.5, 0.75, 0.95],
        }
    }
}

/// `0.50, 0.55, ..., 0.95`.
pub fn default_tiou_grid() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        if self.tiou_grid.is_empty() {
            return bad("tiou_grid is empty".into());
        }
        for &t in self.tiou_grid.iter().chain(&self.map_tious) {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("tIoU {t} outside (0, 1]"));
            }
        }
        if self.an_values.contains(&0) || !self.an_values.windows(2).all(|w| w[0] < w[1]) {
            return bad("an_values must be positive and strictly ascending".into());
        }
        if self.max_an == 0 {
            return bad("max_an must be at least 1".into());
        }
        Ok(())
    }
}

/// Proposals grouped by video, each group in [`rank_order`].
pub fn group_by_video(proposals: &[Proposal]) -> BTreeMap<&str, Vec<&Proposal>> {
    let mut map: BTreeMap<&str, Vec<&Proposal>> = BTreeMap::new();
    for p in proposals {
        map.entry(p.video_id.as_str()).or_default().push(p);
    }
    for group in map.values_mut() {
        group.sort_by(|a, b| rank_order(a, b));
    }
    map
}

fn ground_truth_count(gt: &[VideoRecord]) -> usize {
    gt.iter().map(|v| v.annotations.len()).sum()
}

/// Number of proposals kept per video for each AN in `an_values`.
fn kept_counts(
    grouped: &BTreeMap<&str, Vec<&Proposal>>,
    gt: &[VideoRecord],
    an: usize,
    capping: Capping,
) -> BTreeMap<String, usize> {
    let total: usize = gt
        .iter()
        .map(|v| grouped.get(v.video_id.as_str()).map_or(0, Vec::len))
        .sum();
    gt.iter()
        .map(|v| {
            let n = grouped.get(v.video_id.as_str()).map_or(0, Vec::len);
            let keep = match capping {
                Capping::PerVideo => n.min(an),
                Capping::CorpusAverage if total == 0 => 0,
                Capping::CorpusAverage => {
                    let ratio = an as f64 * gt.len() as f64 / total as f64;
                    ((n as f64 * ratio).floor() as usize).min(n)
                }
            };
            (v.video_id.clone(), keep)
        })
        .collect()
}

/// Best tIoU each ground-truth segment reaches among the first `keep`
/// proposals of its video, for every segment in `gt` order.
fn best_ious(grouped: &BTreeMap<&str, Vec<&Proposal>>, gt: &[VideoRecord], keep: &BTreeMap<String, usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(ground_truth_count(gt));
    for v in gt {
        let props = grouped.get(v.video_id.as_str()).map_or(&[][..], |p| &p[..]);
        let props = &props[..keep[&v.video_id]];
        for seg in &v.annotations {
            let best = props
                .iter()
                .map(|p| temporal_iou(p.interval(), (seg.start, seg.end)))
                .fold(0.0, f64::max);
            out.push(best);
        }
    }
    out
}

fn average_recall(best: &[f64], grid: &[f64]) -> f64 {
    let n = best.len() as f64;
    grid.iter()
        .map(|&t| best.iter().filter(|&&b| b >= t).count() as f64 / n)
        .sum::<f64>()
        / grid.len() as f64
}

/// Average recall at `an` proposals per video over the tIoU grid.
///
/// A ground-truth segment counts as recalled at threshold `t` when some kept
/// proposal of its video reaches tIoU `>= t`.
pub fn ar_at_an(
    proposals: &[Proposal],
    gt: &[VideoRecord],
    an: usize,
    grid: &[f64],
    capping: Capping,
) -> Result<f64, EvalError> {
    if ground_truth_count(gt) == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    if grid.is_empty() {
        return Err(EvalError::InvalidConfig("tiou_grid is empty".into()));
    }
    let grouped = group_by_video(proposals);
    let keep = kept_counts(&grouped, gt, an, capping);
    Ok(average_recall(&best_ious(&grouped, gt, &keep), grid))
}

/// AR at `AN = 1 ..= max_an`.
pub fn ar_curve(
    proposals: &[Proposal],
    gt: &[VideoRecord],
    max_an: usize,
    grid: &[f64],
    capping: Capping,
) -> Result<Vec<f64>, EvalError> {
    (1..=max_an)
        .map(|an| ar_at_an(proposals, gt, an, grid, capping))
        .collect()
}

/// Trapezoid area under an AR curve sampled at `AN = 1, 2, ...`, with AN
/// rescaled to `[0, 1]`, as a percentage. A single point gives `100 * AR`.
pub fn auc_from_curve(curve: &[f64]) -> f64 {
    match curve.len() {
        0 => 0.0,
        1 => 100.0 * curve[0],
        n => {
            let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
            100.0 * area / (n - 1) as f64
        }
    }
}

pub fn auc(
    proposals: &[Proposal],
    gt: &[VideoRecord],
    max_an: usize,
    grid: &[f64],
    capping: Capping,
) -> Result<f64, EvalError> {
    if max_an == 0 {
        return Err(EvalError::InvalidConfig("max_an must be at least 1".into()));
    }
    Ok(auc_from_curve(&ar_curve(proposals, gt, max_an, grid, capping)?))
}

/// All-point interpolated area under a precision-recall curve given as
/// `(precision, recall)` points in detection order.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut prec: Vec<f64> = points.iter().map(|p| p.0).collect();
    // Precision envelope: best precision at any recall to the right.
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (i, &(_, r)) in points.iter().enumerate() {
        if r > last_recall {
            ap += (r - last_recall) * prec[i];
            last_recall = r;
        }
    }
    ap
}

/// Per-class average precision at one tIoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub tiou: f64,
    pub map: f64,
    pub class_ap: BTreeMap<String, f64>,
    /// Classes predicted but absent from the ground truth; they contribute
    /// no AP term.
    pub unknown_classes: Vec<String>,
}

/// Mean AP over the classes present in the ground truth.
///
/// Detections of a class are taken in [`rank_order`]; each is matched to the
/// unmatched ground-truth segment of the same class and video with the
/// highest tIoU, provided it reaches `tiou`. Unlabeled proposals and
/// segments are ignored.
pub fn map_at_tiou(proposals: &[Proposal], gt: &[VideoRecord], tiou: f64) -> Result<MapResult, EvalError> {
    let mut gt_by_class: BTreeMap<&str, Vec<(&str, f64, f64)>> = BTreeMap::new();
    for v in gt {
        for seg in &v.annotations {
            if let Some(label) = &seg.label {
                gt_by_class
                    .entry(label.as_str())
                    .or_default()
                    .push((v.video_id.as_str(), seg.start, seg.end));
            }
        }
    }
    if gt_by_class.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let predicted: BTreeSet<&str> = proposals.iter().filter_map(|p| p.label.as_deref()).collect();
    let unknown_classes = predicted
        .iter()
        .filter(|c| !gt_by_class.contains_key(*c))
        .map(|c| c.to_string())
        .collect();

    let mut class_ap = BTreeMap::new();
    for (class, segments) in &gt_by_class {
        let mut dets: Vec<&Proposal> = proposals
            .iter()
            .filter(|p| p.label.as_deref() == Some(*class))
            .collect();
        dets.sort_by(|a, b| rank_order(a, b));
        let mut used = vec![false; segments.len()];
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(dets.len());
        for (k, d) in dets.iter().enumerate() {
            let best = segments
                .iter()
                .enumerate()
                .filter(|(j, s)| !used[*j] && s.0 == d.video_id)
                .map(|(j, s)| (j, temporal_iou(d.interval(), (s.1, s.2))))
                .filter(|&(_, iou)| iou >= tiou)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1;
            }
            points.push((tp as f64 / (k + 1) as f64, tp as f64 / segments.len() as f64));
        }
        class_ap.insert(class.to_string(), interpolated_ap(&points));
    }
    let map = class_ap.values().sum::<f64>() / class_ap.len() as f64;
    Ok(MapResult {
        tiou,
        map,
        class_ap,
        unknown_classes,
    })
}

/// mAP at every threshold of `grid` and their mean.
pub fn map_over_grid(
    proposals: &[Proposal],
    gt: &[VideoRecord],
    grid: &[f64],
) -> Result<(Vec<MapResult>, f64), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::InvalidConfig("mAP grid is empty".into()));
    }
    let results = grid
        .iter()
        .map(|&t| map_at_tiou(proposals, gt, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = results.iter().map(|r| r.map).sum::<f64>() / results.len() as f64;
    Ok((results, mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub num_videos: usize,
    pub num_ground_truths: usize,
    pub num_proposals: usize,
    /// `(AN, AR)` for each configured AN.
    pub ar: Vec<(usize, f64)>,
    /// AR at `AN = 1 ..= max_an`.
    pub ar_curve: Vec<f64>,
    pub auc: f64,
    /// Present when both proposals and ground truth carry labels.
    pub detection: Option<(Vec<MapResult>, f64)>,
}

pub fn evaluate(proposals: &[Proposal], gt: &[VideoRecord], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let curve = ar_curve(proposals, gt, cfg.max_an, &cfg.tiou_grid, cfg.capping)?;
    let ar = cfg
        .an_values
        .iter()
        .map(|&an| {
            let v = match curve.get(an - 1) {
                Some(&v) => v,
                None => ar_at_an(proposals, gt, an, &cfg.tiou_grid, cfg.capping)?,
            };
            Ok((an, v))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let labeled = proposals.iter().any(|p| p.label.is_some())
        && gt.iter().flat_map(|v| &v.annotations).any(|s| s.label.is_some());
    let detection = if labeled && !cfg.map_tious.is_empty() {
        Some(map_over_grid(proposals, gt, &cfg.map_tious)?)
    } else {
        None
    };
    Ok(EvalReport {
        config: cfg.clone(),
        num_videos: gt.len(),
        num_ground_truths: ground_truth_count(gt),
        num_proposals: proposals.len(),
        ar,
        auc: auc_from_curve(&curve),
        detection,
        ar_curve: curve,
    })
}

fn fmt_grid(grid: &[f64]) -> String {
    grid.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    /// Tab-separated `metric  config  value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let grid = fmt_grid(&self.config.tiou_grid);
        let capping = match self.config.capping {
            Capping::PerVideo => "per-video",
            Capping::CorpusAverage => "corpus-average",
        };
        let _ = writeln!(s, "# metric\tconfig\tvalue");
        let _ = writeln!(s, "videos\t-\t{}", self.num_videos);
        let _ = writeln!(s, "ground_truths\t-\t{}", self.num_ground_truths);
        let _ = writeln!(s, "proposals\t-\t{}", self.num_proposals);
        for (an, ar) in &self.ar {
            let _ = writeln!(s, "AR@{an}\ttiou={grid};capping={capping}\t{ar:.6}");
        }
        let _ = writeln!(
            s,
            "AUC\tmax_an={};tiou={grid};capping={capping}\t{:.6}",
            self.config.max_an, self.auc
        );
        if let Some((results, mean)) = &self.detection {
            for r in results {
                let _ = writeln!(s, "mAP@{}\t-\t{:.6}", r.tiou, r.map);
                for (class, ap) in &r.class_ap {
                    let _ = writeln!(s, "AP@{}\tclass={class}\t{ap:.6}", r.tiou);
                }
                for class in &r.unknown_classes {
                    let _ = writeln!(s, "unknown_class@{}\tclass={class}\tno ground truth", r.tiou);
                }
            }
            let _ = writeln!(s, "mAP\ttiou={}\t{mean:.6}", fmt_grid(&self.config.map_tious));
        }
        s
    }

    /// `an,ar` rows of the AR-vs-AN curve.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("an,ar\n");
        for (i, ar) in self.ar_curve.iter().enumerate() {
            let _ = writeln!(s, "{},{ar}", i + 1);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ActionSegment;

    fn video(id: &str, segs: &[(f64, f64)]) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            num_frames: 1600,
            frame_rate: 16.0,
            annotations: segs.iter().map(|&(s, e)| ActionSegment::new(s, e)).collect(),
        }
    }

    fn prop(id: &str, s: f64, e: f64, score: f64) -> Proposal {
        Proposal::new(id, s, e, score)
    }

    #[test]
    fn ground_truth_as_proposals_is_perfect() {
        let gt = vec![video("a", &[(1.0, 3.0), (5.0, 9.0)]), video("b", &[(0.0, 2.0)])];
        let props: Vec<Proposal> = gt
            .iter()
            .flat_map(|v| v.annotations.iter().map(|s| prop(&v.video_id, s.start, s.end, 0.9)))
            .collect();
        let grid = default_tiou_grid();
        assert_eq!(ar_at_an(&props, &gt, 2, &grid, Capping::PerVideo).unwrap(), 1.0);
        let ar1 = ar_at_an(&props, &gt, 1, &grid, Capping::PerVideo).unwrap();
        assert!((ar1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(auc(&props, &gt, 1, &grid, Capping::PerVideo).unwrap(), 100.0 * ar1);
        assert!(auc(&props, &gt, 100, &grid, Capping::PerVideo).unwrap() > 99.0);
    }

    #[test]
    fn empty_proposals_and_empty_ground_truth() {
        let gt = vec![video("a", &[(1.0, 3.0)])];
        assert_eq!(ar_at_an(&[], &gt, 10, &[0.5], Capping::PerVideo).unwrap(), 0.0);
        let none = vec![video("a", &[])];
        assert_eq!(
            ar_at_an(&[], &none, 10, &[0.5], Capping::PerVideo),
            Err(EvalError::EmptyGroundTruth)
        );
    }

    #[test]
    fn one_of_two_matched_at_point_six() {
        // [0, 10] vs [0, 6]: IoU 0.6.
        let gt = vec![video("a", &[(0.0, 10.0), (20.0, 30.0)])];
        let props = vec![prop("a", 0.0, 6.0, 0.9)];
        let ar = ar_at_an(&props, &gt, 10, &[0.5, 0.7], Capping::PerVideo).unwrap();
        assert_eq!(ar, 0.25);
    }

    #[test]
    fn auc_of_constant_curves() {
        assert_eq!(auc_from_curve(&[1.0; 100]), 100.0);
        assert!((auc_from_curve(&[0.5; 100]) - 50.0).abs() < 1e-12);
        assert_eq!(auc_from_curve(&[0.4]), 40.0);
    }

    fn labeled(id: &str, s: f64, e: f64, score: f64, c: &str) -> Proposal {
        prop(id, s, e, score).with_label(c)
    }

    #[test]
    fn hit_miss_hit_gives_five_sixths() {
        let mut v = video("a", &[(0.0, 2.0), (10.0, 12.0)]);
        v.annotations.iter_mut().for_each(|s| s.label = Some("x".into()));
        let props = vec![
            labeled("a", 0.0, 2.0, 0.9, "x"),
            labeled("a", 5.0, 6.0, 0.8, "x"),
            labeled("a", 10.0, 12.0, 0.7, "x"),
        ];
        let r = map_at_tiou(&props, &[v], 0.5).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_wrong_class_detections() {
        let mut v = video("a", &[(0.0, 2.0), (10.0, 12.0)]);
        v.annotations[0].label = Some("x".into());
        v.annotations[1].label = Some("y".into());
        let good = vec![labeled("a", 0.0, 2.0, 0.9, "x"), labeled("a", 10.0, 12.0, 0.8, "y")];
        for t in [0.5, 0.75, 0.95] {
            assert_eq!(map_at_tiou(&good, &[v.clone()], t).unwrap().map, 1.0);
        }
        let wrong = vec![labeled("a", 0.0, 2.0, 0.9, "y"), labeled("a", 10.0, 12.0, 0.8, "z")];
        let r = map_at_tiou(&wrong, &[v], 0.5).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.unknown_classes, vec!["z".to_string()]);
    }

    #[test]
    fn report_lists_every_metric() {
        let gt = vec![video("a", &[(1.0, 3.0)])];
        let props = vec![prop("a", 1.0, 3.0, 0.5)];
        let cfg = EvalConfig {
            max_an: 5,
            an_values: vec![1, 5],
            ..EvalConfig::default()
        };
        let r = evaluate(&props, &gt, &cfg).unwrap();
        let text = r.to_text();
        assert!(text.contains("AR@1\t") && text.contains("AR@5\t") && text.contains("AUC\t"));
        assert_eq!(r.curve_csv().lines().count(), 6);
        assert_eq!(r.auc, 100.0);
    }
}
