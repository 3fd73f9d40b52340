//! Per-sequence tracking metrics: AO, SR_τ, P_δ, normalised precision and
//! success AUC, plus their text and CSV reports.

use std::fmt::Write as _;

use crate::boxes::{center_distance, iou, BoxXYWH};
use crate::error::{Error, Result};

/// Success thresholds `τ_i = i/100`.
pub const AUC_SAMPLES: usize = 101;
/// Normalised-error thresholds `t_i = 0.5·i/50`.
pub const PNORM_SAMPLES: usize = 51;
pub const PNORM_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub pred: BoxXYWH,
    pub gt: BoxXYWH,
    pub gt_absent: bool,
}

impl Frame {
    pub fn new(pred: BoxXYWH, gt: BoxXYWH) -> Self {
        Self {
            pred,
            gt,
            gt_absent: false,
        }
    }
}

/// Frames of one sequence; at least one frame has a ground-truth box.
#[derive(Clone, Debug)]
pub struct SequenceResult {
    frames: Vec<Frame>,
}

impl SequenceResult {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let mut counted = 0;
        for (i, f) in frames.iter().enumerate().filter(|(_, f)| !f.gt_absent) {
            if !(f.gt.w > 0.0 && f.gt.h > 0.0) {
                return Err(Error::Input(format!("frame {i}: ground truth has no area")));
            }
            if !f.pred.is_finite() || !f.gt.is_finite() {
                return Err(Error::Input(format!("frame {i}: non-finite box")));
            }
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::Input("sequence has no frame with ground truth".into()));
        }
        Ok(Self { frames })
    }

    pub fn from_pairs(pred: &[BoxXYWH], gt: &[BoxXYWH]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} ground-truth boxes",
                pred.len(),
                gt.len()
            )));
        }
        Self::new(pred.iter().zip(gt).map(|(&p, &g)| Frame::new(p, g)).collect())
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    fn counted(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| !f.gt_absent)
    }

    fn fraction(&self, pass: impl Fn(&Frame) -> bool) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for f in self.counted() {
            n += 1;
            hit += usize::from(pass(f));
        }
        hit as f64 / n as f64
    }

    pub fn ious(&self) -> Vec<f64> {
        self.counted().map(|f| iou(&f.pred, &f.gt)).collect()
    }
}

pub fn ao(r: &SequenceResult) -> f64 {
    let v = r.ious();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fraction of frames with IoU ≥ τ.
pub fn success_rate(r: &SequenceResult, tau: f64) -> f64 {
    r.fraction(|f| iou(&f.pred, &f.gt) >= tau)
}

/// Fraction of frames whose centre error is at most `delta` pixels.
pub fn precision(r: &SequenceResult, delta: f64) -> f64 {
    r.fraction(|f| center_distance(&f.pred, &f.gt) <= delta)
}

fn normalized_error(f: &Frame) -> f64 {
    center_distance(&f.pred, &f.gt) / (f.gt.w * f.gt.h).sqrt()
}

/// Area under the normalised precision curve on `[0, 0.5]`, rescaled to
/// `[0, 1]` and sampled at 51 thresholds.
pub fn norm_precision(r: &SequenceResult) -> f64 {
    let errs: Vec<f64> = r.counted().map(normalized_error).collect();
    let n = errs.len() as f64;
    let mut total = 0.0;
    for i in 0..PNORM_SAMPLES {
        let t = PNORM_MAX * i as f64 / (PNORM_SAMPLES - 1) as f64;
        total += errs.iter().filter(|&&e| e <= t).count() as f64 / n;
    }
    total / PNORM_SAMPLES as f64
}

/// Mean of SR_τ over 101 thresholds in `[0, 1]`.
pub fn auc(r: &SequenceResult) -> f64 {
    let ious = r.ious();
    let n = ious.len() as f64;
    let mut total = 0.0;
    for i in 0..AUC_SAMPLES {
        let tau = i as f64 / (AUC_SAMPLES - 1) as f64;
        total += ious.iter().filter(|&&v| v >= tau).count() as f64 / n;
    }
    total / AUC_SAMPLES as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
    pub p_20: f64,
    pub pnorm: f64,
    pub auc: f64,
}

impl Summary {
    pub fn of(r: &SequenceResult) -> Self {
        Self {
            ao: ao(r),
            sr_50: success_rate(r, 0.5),
            sr_75: success_rate(r, 0.75),
            p_20: precision(r, 20.0),
            pnorm: norm_precision(r),
            auc: auc(r),
        }
    }

    /// Unweighted mean over sequences.
    pub fn mean(items: &[Summary]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Summary) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            ao: sum(|s| s.ao),
            sr_50: sum(|s| s.sr_50),
            sr_75: sum(|s| s.sr_75),
            p_20: sum(|s| s.p_20),
            pnorm: sum(|s| s.pnorm),
            auc: sum(|s| s.auc),
        }
    }

    fn values(&self) -> [f64; 6] {
        [self.ao, self.sr_50, self.sr_75, self.p_20, self.pnorm, self.auc]
    }
}

pub const CSV_HEADER: &str = "sequence,ao,sr_0.50,sr_0.75,p_20,pnorm,auc";

/// One row per sequence plus an `aggregate` row (mean over sequences).
pub fn csv_report(rows: &[(String, Summary)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    let mut push = |name: &str, m: &Summary| {
        let _ = write!(s, "{name}");
        for v in m.values() {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    };
    for (name, m) in rows {
        push(name, m);
    }
    let agg = Summary::mean(&rows.iter().map(|(_, m)| *m).collect::<Vec<_>>());
    push("aggregate", &agg);
    s
}

pub fn text_report(rows: &[(String, Summary)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("aggregate".len());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
        "sequence", "AO", "SR0.50", "SR0.75", "P20", "PNorm", "AUC"
    );
    let agg = Summary::mean(&rows.iter().map(|(_, m)| *m).collect::<Vec<_>>());
    for (name, m) in rows.iter().map(|(n, m)| (n.as_str(), m)).chain([("aggregate", &agg)]) {
        let v = m.values();
        let _ = writeln!(
            s,
            "{name:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            v[0], v[1], v[2], v[3], v[4], v[5]
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoxXYWH {
        BoxXYWH::new(x, y, w, h)
    }

    #[test]
    fn single_frame_pnorm() {
        // centre error 0.25·sqrt(w·h) with a 4×4 box: 1 px
        let r = SequenceResult::from_pairs(&[b(1.0, 0.0, 4.0, 4.0)], &[b(0.0, 0.0, 4.0, 4.0)]).unwrap();
        assert!((norm_precision(&r) - 26.0 / 51.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iou_auc() {
        let r = SequenceResult::from_pairs(&[b(10.0, 10.0, 1.0, 1.0)], &[b(0.0, 0.0, 1.0, 1.0)]).unwrap();
        assert!((auc(&r) - 1.0 / 101.0).abs() < 1e-15);
        assert_eq!(success_rate(&r, 0.0), 1.0);
    }

    #[test]
    fn absent_frames_are_skipped() {
        let mut frames = vec![Frame::new(b(0.0, 0.0, 2.0, 2.0), b(0.0, 0.0, 2.0, 2.0))];
        frames.push(Frame {
            pred: b(50.0, 50.0, 2.0, 2.0),
            gt: b(0.0, 0.0, 0.0, 0.0),
            gt_absent: true,
        });
        let r = SequenceResult::new(frames).unwrap();
        assert_eq!(ao(&r), 1.0);
        assert!(SequenceResult::new(vec![]).is_err());
    }

    #[test]
    fn csv_has_aggregate() {
        let r = SequenceResult::from_pairs(&[b(0.0, 0.0, 2.0, 2.0)], &[b(0.0, 0.0, 2.0, 2.0)]).unwrap();
        let csv = csv_report(&[("a".into(), Summary::of(&r))]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[2], "aggregate,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000");
    }
}
