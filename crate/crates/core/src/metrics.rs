//! Frame accuracy and segment overlap metrics.

use std::fmt::{self, Write as _};

use crate::data::Segmentation;
use crate::error::{Error, Result};

fn check_lengths(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::invalid("ground truth", "no frames"));
    }
    Ok(())
}

/// Fraction of frames labeled correctly.
pub fn mof(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Frame accuracy over frames whose ground truth is not background.
pub fn mof_bg(pred: &[usize], gt: &[usize], background: usize) -> Result<f64> {
    let (hits, total) = mof_bg_counts(pred, gt, background)?;
    if total == 0 {
        return Err(Error::invalid("ground truth", "every frame is background"));
    }
    Ok(hits as f64 / total as f64)
}

fn mof_bg_counts(pred: &[usize], gt: &[usize], background: usize) -> Result<(usize, usize)> {
    check_lengths(pred, gt)?;
    let mut hits = 0;
    let mut total = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        if g != background {
            total += 1;
            hits += usize::from(p == g);
        }
    }
    Ok((hits, total))
}

/// Per ground-truth segment overlap scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentOverlap {
    pub iou: f64,
    pub iod: f64,
}

fn spans(seg: &Segmentation) -> Vec<(usize, usize, usize)> {
    let cuts = seg.cuts();
    seg.labels()
        .iter()
        .enumerate()
        .map(|(n, &a)| (a, cuts[n], cuts[n + 1]))
        .collect()
}

/// For every non-background ground-truth segment, the same-class detection
/// with the largest intersection (ties to the earlier detection); segments
/// without any overlapping same-class detection score zero.
pub fn segment_overlaps(
    pred: &Segmentation,
    gt: &Segmentation,
    background: Option<usize>,
) -> Result<Vec<SegmentOverlap>> {
    if pred.total_frames() != gt.total_frames() {
        return Err(Error::Shape(format!(
            "prediction covers {} frames, ground truth {}",
            pred.total_frames(),
            gt.total_frames()
        )));
    }
    let dets = spans(pred);
    let mut out = Vec::new();
    for (a, gs, ge) in spans(gt) {
        if Some(a) == background {
            continue;
        }
        let mut best: Option<(usize, usize, usize)> = None;
        for &(b, ds, de) in &dets {
            if b != a {
                continue;
            }
            let inter = ge.min(de).saturating_sub(gs.max(ds));
            if inter > 0 && best.is_none_or(|(i, _, _)| inter > i) {
                best = Some((inter, ds, de));
            }
        }
        out.push(match best {
            None => SegmentOverlap { iou: 0.0, iod: 0.0 },
            Some((inter, ds, de)) => {
                let union = ge.max(de) - gs.min(ds);
                SegmentOverlap {
                    iou: inter as f64 / union as f64,
                    iod: inter as f64 / (de - ds) as f64,
                }
            }
        });
    }
    Ok(out)
}

/// Mean IoU and IoD over non-background ground-truth segments.
pub fn iou_iod(pred: &Segmentation, gt: &Segmentation, background: Option<usize>) -> Result<(f64, f64)> {
    let ov = segment_overlaps(pred, gt, background)?;
    if ov.is_empty() {
        return Err(Error::invalid("ground truth", "no non-background segments"));
    }
    let n = ov.len() as f64;
    Ok((
        ov.iter().map(|o| o.iou).sum::<f64>() / n,
        ov.iter().map(|o| o.iod).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    pub mof: f64,
    pub mof_bg: Option<f64>,
    pub iou: Option<f64>,
    pub iod: Option<f64>,
}

/// Dataset-level metrics. Frame metrics pool frames, overlap metrics pool
/// ground-truth segments, across all videos.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mof: f64,
    pub mof_bg: f64,
    pub iou: f64,
    pub iod: f64,
    pub videos: Vec<VideoScores>,
}

/// Scores `(video_id, prediction, ground truth)` triples. Without a
/// background class, Mof-bg equals Mof.
pub fn evaluate(items: &[(String, Vec<usize>, Vec<usize>)], background: Option<usize>) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation set", "no videos"));
    }
    let mut frames = 0usize;
    let mut hits = 0usize;
    let mut bg_total = 0usize;
    let mut bg_hits = 0usize;
    let mut overlaps = Vec::new();
    let mut videos = Vec::with_capacity(items.len());
    for (id, pred, gt) in items {
        let m = mof(pred, gt)
            .map_err(|e| Error::invalid("evaluation set", format!("video {id}: {e}")))?;
        frames += gt.len();
        hits += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        let (bh, bt) = mof_bg_counts(pred, gt, background.unwrap_or(usize::MAX))?;
        bg_hits += bh;
        bg_total += bt;
        let ov = segment_overlaps(
            &Segmentation::from_frame_labels(pred)?,
            &Segmentation::from_frame_labels(gt)?,
            background,
        )?;
        let mean = |f: fn(&SegmentOverlap) -> f64| {
            (!ov.is_empty()).then(|| ov.iter().map(f).sum::<f64>() / ov.len() as f64)
        };
        videos.push(VideoScores {
            video_id: id.clone(),
            mof: m,
            mof_bg: (bt > 0).then(|| bh as f64 / bt as f64),
            iou: mean(|o| o.iou),
            iod: mean(|o| o.iod),
        });
        overlaps.extend(ov);
    }
    let n = overlaps.len().max(1) as f64;
    Ok(EvalReport {
        mof: hits as f64 / frames as f64,
        mof_bg: if bg_total == 0 { 0.0 } else { bg_hits as f64 / bg_total as f64 },
        iou: overlaps.iter().map(|o| o.iou).sum::<f64>() / n,
        iod: overlaps.iter().map(|o| o.iod).sum::<f64>() / n,
        videos,
    })
}

impl EvalReport {
    /// One `metric value` line per metric.
    pub fn metric_lines(&self) -> String {
        format!(
            "mof {}\nmof_bg {}\niou {}\niod {}\n",
            self.mof, self.mof_bg, self.iou, self.iod
        )
    }
}

impl fmt::Display for EvalReport {
    /// Human-readable `key: value` block with a per-video breakdown.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        writeln!(s, "videos: {}", self.videos.len())?;
        writeln!(s, "mof: {:.4}", self.mof)?;
        writeln!(s, "mof_bg: {:.4}", self.mof_bg)?;
        writeln!(s, "iou: {:.4}", self.iou)?;
        writeln!(s, "iod: {:.4}", self.iod)?;
        for v in &self.videos {
            writeln!(
                s,
                "video {}: mof={:.4} mof_bg={} iou={} iod={}",
                v.video_id,
                v.mof,
                opt(v.mof_bg),
                opt(v.iou),
                opt(v.iod)
            )?;
        }
        f.write_str(&s)
    }
}
