//! Ranking and grounding metrics.
//!
//! Every query has exactly one relevant video, so ranking metrics reduce to
//! functions of the 1-based rank at which that video appears.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::mask::MaskBitmap;

pub const DEFAULT_K_SET: [usize; 5] = [1, 5, 10, 50, 100];
pub const BOUNDARY_TOLERANCE_FRACTION: f64 = 0.008;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn median_rank(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

pub fn mean_rank(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64
}

pub fn ap_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / ranks.len() as f64
}

/// Mean of AP@K over `k_set`.
pub fn map(ranks: &[usize], k_set: &[usize]) -> f64 {
    if k_set.is_empty() {
        return 0.0;
    }
    k_set.iter().map(|&k| ap_at_k(ranks, k)).sum::<f64>() / k_set.len() as f64
}

fn check_shape(a: &MaskBitmap, b: &MaskBitmap) -> Result<(), MetricError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()))
    }
}

/// Intersection over union. Two empty masks score 1.
pub fn region_similarity(pred: &MaskBitmap, gt: &MaskBitmap) -> Result<f64, MetricError> {
    check_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `ceil(0.008 * diagonal)` in pixels.
pub fn default_tolerance(width: u32, height: u32) -> f64 {
    (BOUNDARY_TOLERANCE_FRACTION * f64::from(width).hypot(f64::from(height))).ceil()
}

/// Foreground pixels with a background 4-neighbour or lying on the image edge.
pub fn boundary(mask: &MaskBitmap) -> MaskBitmap {
    let (w, h) = (mask.width(), mask.height());
    MaskBitmap::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0 || y == 0 || x + 1 == w || y + 1 == h || !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1))
    })
    .expect("shape of an existing mask")
}

/// Fraction of `from` pixels lying within `tol` of some `to` pixel.
fn matched_fraction(from: &MaskBitmap, to: &MaskBitmap, tol: f64) -> f64 {
    let (w, h) = (from.width() as i64, from.height() as i64);
    let r = tol.floor() as i64;
    let tol2 = tol * tol;
    let mut total = 0usize;
    let mut hit = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !from.get(x as u32, y as u32) {
                continue;
            }
            total += 1;
            let found = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0 && ny >= 0 && nx < w && ny < h && ((dx * dx + dy * dy) as f64) <= tol2 && to.get(nx as u32, ny as u32)
                })
            });
            hit += usize::from(found);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Boundary F-measure with a Euclidean pixel tolerance.
pub fn contour_accuracy(pred: &MaskBitmap, gt: &MaskBitmap, tolerance_px: f64) -> Result<f64, MetricError> {
    check_shape(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.count(), bg.count()) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &bg, tolerance_px);
    let recall = matched_fraction(&bg, &bp, tolerance_px);
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Masks keyed by `(object_id, frame_index)`.
pub type MaskSet = BTreeMap<(u64, u64), MaskBitmap>;

/// Mean J and mean F over the ground-truth pairs; a missing prediction
/// scores 0 on both.
pub fn video_jf(pred: &MaskSet, gt: &MaskSet, tolerance_px: Option<f64>) -> Result<(f64, f64), MetricError> {
    if gt.is_empty() {
        return Ok((1.0, 1.0));
    }
    let (mut j, mut f) = (0.0, 0.0);
    for (key, g) in gt {
        if let Some(p) = pred.get(key) {
            j += region_similarity(p, g)?;
            f += contour_accuracy(p, g, tolerance_px.unwrap_or_else(|| default_tolerance(g.width(), g.height())))?;
        }
    }
    let n = gt.len() as f64;
    Ok((j / n, f / n))
}

/// What evaluation needs from one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: String,
    pub rank: usize,
    pub predicted: MaskSet,
    pub ground_truth: MaskSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub rank: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub at_k: Vec<KMetrics>,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub map: f64,
    pub mean_j: f64,
    pub mean_f: f64,
    pub per_query: Vec<QueryRow>,
}

impl MetricReport {
    pub fn compute(outcomes: &[QueryOutcome], k_set: &[usize], tolerance_px: Option<f64>) -> Result<Self, MetricError> {
        let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
        let mut per_query = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            let (j, f) = video_jf(&o.predicted, &o.ground_truth, tolerance_px)?;
            per_query.push(QueryRow { query_id: o.query_id.clone(), rank: o.rank, j, f });
        }
        let n = per_query.len().max(1) as f64;
        Ok(Self {
            queries: outcomes.len(),
            at_k: k_set.iter().map(|&k| KMetrics { k, recall: recall_at_k(&ranks, k), ap: ap_at_k(&ranks, k) }).collect(),
            median_rank: median_rank(&ranks),
            mean_rank: mean_rank(&ranks),
            map: map(&ranks, k_set),
            mean_j: per_query.iter().map(|r| r.j).sum::<f64>() / n,
            mean_f: per_query.iter().map(|r| r.f).sum::<f64>() / n,
            per_query,
        })
    }

    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("report serialization")
    }

    /// Aligned-column summary followed by the per-query table.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = self.at_k.iter().map(|m| format!("R@{}", m.k)).collect();
        let mut values: Vec<String> = self.at_k.iter().map(|m| format!("{:.1}", 100.0 * m.recall)).collect();
        header.extend(["MdR", "MnR"].map(String::from));
        values.extend([format!("{:.1}", self.median_rank), format!("{:.1}", self.mean_rank)]);
        header.extend(self.at_k.iter().map(|m| format!("AP@{}", m.k)));
        values.extend(self.at_k.iter().map(|m| format!("{:.1}", 100.0 * m.ap)));
        header.extend(["mAP", "J", "F"].map(String::from));
        values.extend([self.map, self.mean_j, self.mean_f].map(|v| format!("{:.1}", 100.0 * v)));

        let mut out = String::new();
        let widths: Vec<usize> = header.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
        let line = |cells: &[String]| cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ");
        writeln!(out, "{}", line(&header)).unwrap();
        writeln!(out, "{}", line(&values)).unwrap();
        if !self.per_query.is_empty() {
            let idw = self.per_query.iter().map(|r| r.query_id.len()).max().unwrap_or(0).max("query".len());
            writeln!(out).unwrap();
            writeln!(out, "{:<idw$}  {:>6}  {:>6}  {:>6}", "query", "rank", "J", "F").unwrap();
            for r in &self.per_query {
                writeln!(out, "{:<idw$}  {:>6}  {:>6.1}  {:>6.1}", r.query_id, r.rank, 100.0 * r.j, 100.0 * r.f).unwrap();
            }
        }
        out
    }
}
