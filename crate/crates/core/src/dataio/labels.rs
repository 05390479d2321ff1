use serde::{Deserialize, Serialize};

use super::{DataError, VideoRecord};
use crate::postproc::temporal_iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Longest proposal, in snippets (`D`).
    pub max_duration: usize,
    /// Boundary region width as a fraction of the segment length; the
    /// width never drops below one snippet.
    pub boundary_ratio: f64,
    /// A `(start, duration)` cell is positive above this IoU.
    pub actionness_iou: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            max_duration: 32,
            boundary_ratio: 0.1,
            actionness_iou: 0.9,
        }
    }
}

/// Training targets for one video.
///
/// `actionness` is `T x D` row-major; column `d - 1` holds duration `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLabels {
    pub num_snippets: usize,
    pub max_duration: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub actionness: Vec<f64>,
}

impl GroundTruthLabels {
    pub fn zeros(num_snippets: usize, max_duration: usize) -> Self {
        Self {
            num_snippets,
            max_duration,
            start: vec![0.0; num_snippets],
            end: vec![0.0; num_snippets],
            actionness: vec![0.0; num_snippets * max_duration],
        }
    }

    /// Label of the proposal starting at snippet `i` spanning `d >= 1` snippets.
    pub fn actionness_at(&self, i: usize, d: usize) -> f64 {
        self.actionness[i * self.max_duration + d - 1]
    }

    pub fn is_valid_cell(&self, i: usize, d: usize) -> bool {
        d >= 1 && d <= self.max_duration && i + d <= self.num_snippets
    }
}

/// Fraction of `[lo, hi]` covered by `region`.
fn coverage(lo: f64, hi: f64, region: (f64, f64)) -> f64 {
    let inter = (hi.min(region.1) - lo.max(region.0)).max(0.0);
    inter / (hi - lo)
}

/// Builds start/end/actionness targets from annotated segments.
///
/// Boundary position `i` stands for time `i * unit` (`unit = delta /
/// frame_rate`) and owns the anchor interval `[(i - 0.5) unit, (i + 0.5)
/// unit]`. Each boundary of a segment is widened into a region of width
/// `max(unit, boundary_ratio * length)` centred on it; an anchor is positive
/// when more than half of it lies inside such a region. Cell `(i, d)` of the
/// actionness map is the interval `[i, i + d]` in snippet units and is
/// positive when its IoU with some segment exceeds `actionness_iou`.
pub fn generate_labels(
    record: &VideoRecord,
    num_snippets: usize,
    delta: usize,
    cfg: &LabelConfig,
) -> Result<GroundTruthLabels, DataError> {
    record.validate()?;
    if !(cfg.boundary_ratio > 0.0 && cfg.boundary_ratio <= 0.5) {
        return Err(DataError::InvalidArgument(format!(
            "boundary_ratio must lie in (0, 0.5], got {}",
            cfg.boundary_ratio
        )));
    }
    if cfg.max_duration == 0 || delta == 0 {
        return Err(DataError::InvalidArgument(
            "max_duration and delta must be positive".into(),
        ));
    }
    let unit = record.snippet_seconds(delta);
    let duration = record.duration();
    let (t, dmax) = (num_snippets, cfg.max_duration);
    let mut labels = GroundTruthLabels::zeros(t, dmax);

    for seg in &record.annotations {
        let (mut gs, mut ge) = (seg.start, seg.end);
        if ge > duration {
            log::warn!(
                "{}: segment [{gs}, {ge}] exceeds video duration {duration}; clamping",
                record.video_id
            );
            ge = duration;
            gs = gs.min(ge);
        }
        if ge <= gs {
            log::warn!("{}: segment collapsed after clamping; skipped", record.video_id);
            continue;
        }
        let width = unit.max(cfg.boundary_ratio * (ge - gs));
        let start_region = (gs - width / 2.0, gs + width / 2.0);
        let end_region = (ge - width / 2.0, ge + width / 2.0);
        for i in 0..t {
            let lo = (i as f64 - 0.5) * unit;
            let hi = (i as f64 + 0.5) * unit;
            if coverage(lo, hi, start_region) > 0.5 {
                labels.start[i] = 1.0;
            }
            if coverage(lo, hi, end_region) > 0.5 {
                labels.end[i] = 1.0;
            }
        }
        let seg_units = (gs / unit, ge / unit);
        for i in 0..t {
            for d in 1..=dmax.min(t - i) {
                let cell = (i as f64, (i + d) as f64);
                if temporal_iou(cell, seg_units) > cfg.actionness_iou {
                    labels.actionness[i * dmax + d - 1] = 1.0;
                }
            }
        }
    }
    Ok(labels)
}
