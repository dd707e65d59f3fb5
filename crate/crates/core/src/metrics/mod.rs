//! Evaluation protocol: radius-limited centroid matching, detection scores,
//! per-class classification scores, per-tissue breakdown and confidence
//! threshold selection.
//!
//! Per-class scores fold the detection errors in:
//!
//! ```text
//! P_c = (TP_c + TN_c) / (TP_c + TN_c + 2 FP_c + FP_det)
//! R_c = (TP_c + TN_c) / (TP_c + TN_c + 2 FN_c + FN_det)
//! F_c = 2 (TP_c + TN_c) / (2 (TP_c + TN_c) + 2 FP_c + 2 FN_c + FP_det + FN_det)
//! ```
//!
//! where the class counts run over matched pairs only. Every `0/0` evaluates
//! to 0 and raises a flag.

mod matching;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationSet;
use crate::detector::filter_by_confidence;
use crate::error::{Error, Result};
use crate::tiler::Detection;

pub use matching::{match_centroids, match_centroids_with, MatchMethod, MatchResult};
use matching::PointGrid;

/// Tissue group used for records without a tag.
pub const UNTAGGED: &str = "untagged";

/// Precision, recall and F1 of one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio was 0/0 and was set to 0.
    pub zero_division: bool,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// Detection precision, recall and F1 from a matching.
pub fn detection_metrics(m: &MatchResult) -> Prf {
    let (tp, fp, fn_) = (m.tp() as f64, m.fp() as f64, m.fn_() as f64);
    let mut flag = false;
    let precision = ratio(tp, tp + fp, &mut flag);
    let recall = ratio(tp, tp + fn_, &mut flag);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut flag);
    Prf {
        precision,
        recall,
        f1,
        zero_division: flag,
    }
}

/// Per-class confusion counts over matched pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: Vec<u64>,
    pub tn: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl ClassCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }
}

/// For each class `c` over matched pairs: TP both `c`, FP predicted `c` only,
/// FN ground truth `c` only, TN neither.
pub fn classification_counts(m: &MatchResult, gt_labels: &[u32], pred_labels: &[u32], num_classes: usize) -> Result<ClassCounts> {
    let mut counts = ClassCounts {
        tp: vec![0; num_classes],
        tn: vec![0; num_classes],
        fp: vec![0; num_classes],
        fn_: vec![0; num_classes],
    };
    for &(g, p, _) in &m.pairs {
        let (gl, pl) = match (gt_labels.get(g), pred_labels.get(p)) {
            (Some(&a), Some(&b)) => (a as usize, b as usize),
            _ => return Err(Error::param(format!("missing label for pair ({g}, {p})"))),
        };
        if gl >= num_classes || pl >= num_classes {
            return Err(Error::param(format!("label outside {num_classes} classes in pair ({g}, {p})")));
        }
        for c in 0..num_classes {
            match (gl == c, pl == c) {
                (true, true) => counts.tp[c] += 1,
                (false, true) => counts.fp[c] += 1,
                (true, false) => counts.fn_[c] += 1,
                (false, false) => counts.tn[c] += 1,
            }
        }
    }
    Ok(counts)
}

/// Scores of one class given its counts and the detection errors charged
/// to it.
pub fn class_scores(tp: u64, tn: u64, fp: u64, fn_: u64, fp_det: u64, fn_det: u64) -> Prf {
    let good = (tp + tn) as f64;
    let (fp, fn_, fp_det, fn_det) = (fp as f64, fn_ as f64, fp_det as f64, fn_det as f64);
    let mut flag = false;
    Prf {
        precision: ratio(good, good + 2.0 * fp + fp_det, &mut flag),
        recall: ratio(good, good + 2.0 * fn_ + fn_det, &mut flag),
        f1: ratio(2.0 * good, 2.0 * good + 2.0 * fp + 2.0 * fn_ + fp_det + fn_det, &mut flag),
        zero_division: flag,
    }
}

/// Per-class scores charging the global detection errors to every class.
pub fn classification_metrics(counts: &ClassCounts, m: &MatchResult) -> Vec<Prf> {
    (0..counts.num_classes())
        .map(|c| class_scores(counts.tp[c], counts.tn[c], counts.fp[c], counts.fn_[c], m.fp() as u64, m.fn_() as u64))
        .collect()
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::param("macro average over no classes"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Matching radius in micrometers.
    pub radius_um: f64,
    pub class_names: Vec<String>,
    pub method: MatchMethod,
    /// Charge each class only the unmatched detections and nuclei of that
    /// class instead of all of them.
    pub per_class_detection_errors: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radius_um: 3.0,
            class_names: crate::default_class_names(),
            method: MatchMethod::Optimal,
            per_class_detection_errors: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    #[serde(flatten)]
    pub scores: Prf,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: Prf,
    pub tp_det: u64,
    pub fp_det: u64,
    pub fn_det: u64,
    pub classes: Vec<ClassReport>,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_tissue: BTreeMap<String, MetricsReport>,
}

fn check_preds(preds: &[Detection], num_classes: usize) -> Result<()> {
    match preds.iter().position(|d| d.class_id as usize >= num_classes) {
        Some(i) => Err(Error::param(format!("prediction {i} has class {} outside {num_classes} classes", preds[i].class_id))),
        None => Ok(()),
    }
}

/// Full report for one set of ground truth and predictions.
pub fn evaluate(gt: &AnnotationSet, preds: &[Detection], mpp: f64, cfg: &EvalConfig) -> Result<MetricsReport> {
    let n = cfg.class_names.len();
    gt.validate_classes(n)?;
    check_preds(preds, n)?;
    let gt_pts: Vec<(f64, f64)> = gt.records.iter().map(|r| (r.cx, r.cy)).collect();
    let pred_pts: Vec<(f64, f64)> = preds.iter().map(|d| (d.cx, d.cy)).collect();
    let m = match_centroids_with(&gt_pts, &pred_pts, cfg.radius_um, mpp, cfg.method)?;
    let gt_labels: Vec<u32> = gt.records.iter().map(|r| r.class_id).collect();
    let pred_labels: Vec<u32> = preds.iter().map(|d| d.class_id).collect();
    let counts = classification_counts(&m, &gt_labels, &pred_labels, n)?;
    let detection = detection_metrics(&m);
    let mut flags = Vec::new();
    if detection.zero_division {
        flags.push("detection: 0/0 set to 0".to_string());
    }
    let mut classes = Vec::with_capacity(n);
    for (c, name) in cfg.class_names.iter().enumerate() {
        let (fp_det, fn_det) = if cfg.per_class_detection_errors {
            (
                m.unmatched_pred.iter().filter(|&&i| pred_labels[i] as usize == c).count() as u64,
                m.unmatched_gt.iter().filter(|&&i| gt_labels[i] as usize == c).count() as u64,
            )
        } else {
            (m.fp() as u64, m.fn_() as u64)
        };
        let scores = class_scores(counts.tp[c], counts.tn[c], counts.fp[c], counts.fn_[c], fp_det, fn_det);
        if scores.zero_division {
            flags.push(format!("class {name}: 0/0 set to 0"));
        }
        classes.push(ClassReport {
            name: name.clone(),
            scores,
            tp: counts.tp[c],
            tn: counts.tn[c],
            fp: counts.fp[c],
            fn_: counts.fn_[c],
        });
    }
    let macro_f1 = macro_average(&classes.iter().map(|c| c.scores.f1).collect::<Vec<_>>())?;
    Ok(MetricsReport {
        detection,
        tp_det: m.tp() as u64,
        fp_det: m.fp() as u64,
        fn_det: m.fn_() as u64,
        classes,
        macro_f1,
        threshold: None,
        flags,
        per_tissue: BTreeMap::new(),
    })
}

/// Reports per tissue tag. Ground truth is grouped by tag (missing tags go
/// to [`UNTAGGED`]); a prediction follows the nucleus it matches, or else
/// the nearest nucleus.
pub fn per_tissue_report(gt: &AnnotationSet, preds: &[Detection], mpp: f64, cfg: &EvalConfig) -> Result<BTreeMap<String, MetricsReport>> {
    let mut out = BTreeMap::new();
    if gt.is_empty() && preds.is_empty() {
        let mut r = evaluate(gt, preds, mpp, cfg)?;
        r.flags.push("empty group".to_string());
        out.insert(UNTAGGED.to_string(), r);
        return Ok(out);
    }
    let tag = |i: usize| gt.records[i].tissue.clone().unwrap_or_else(|| UNTAGGED.to_string());
    let gt_pts: Vec<(f64, f64)> = gt.records.iter().map(|r| (r.cx, r.cy)).collect();
    let pred_pts: Vec<(f64, f64)> = preds.iter().map(|d| (d.cx, d.cy)).collect();
    let m = match_centroids_with(&gt_pts, &pred_pts, cfg.radius_um, mpp, cfg.method)?;
    let mut pred_group: Vec<Option<usize>> = vec![None; preds.len()];
    for &(g, p, _) in &m.pairs {
        pred_group[p] = Some(g);
    }
    let grid = PointGrid::new(&gt_pts, (cfg.radius_um / mpp).max(1.0) * 4.0);
    let mut groups: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..gt.len() {
        groups.entry(tag(i)).or_default().0.push(i);
    }
    for (p, owner) in pred_group.iter().enumerate() {
        let key = owner
            .or_else(|| grid.nearest(&gt_pts, pred_pts[p]))
            .map_or_else(|| UNTAGGED.to_string(), tag);
        groups.entry(key).or_default().1.push(p);
    }
    let results: Vec<Result<(String, MetricsReport)>> = {
        let items: Vec<(String, (Vec<usize>, Vec<usize>))> = groups.into_iter().collect();
        crate::par::map(&items, |(name, (gi, pi))| {
            let sub_gt = AnnotationSet::new(gi.iter().map(|&i| gt.records[i].clone()).collect(), gt.mpp);
            let sub_pred: Vec<Detection> = pi.iter().map(|&i| preds[i]).collect();
            let mut r = evaluate(&sub_gt, &sub_pred, mpp, cfg)?;
            if gi.is_empty() && pi.is_empty() {
                r.flags.push("empty group".to_string());
            }
            Ok((name.clone(), r))
        })
    };
    for r in results {
        let (k, v) = r?;
        out.insert(k, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub f_det: f64,
    pub macro_f1: f64,
    /// Harmonic mean of `f_det` and `macro_f1`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_tau: f64,
    pub best_score: f64,
    /// The score was zero at every threshold.
    pub all_zero: bool,
    pub curve: Vec<SweepPoint>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Evaluates every confidence threshold in `grid` (ascending, within
/// `[0, 1]`) and picks the one maximizing the harmonic mean of detection F1
/// and macro classification F1; ties go to the larger threshold.
pub fn sweep_threshold(preds: &[Detection], gt: &AnnotationSet, mpp: f64, cfg: &EvalConfig, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::param("threshold grid is empty"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("threshold grid must be ascending within [0, 1]"));
    }
    let curve: Vec<Result<SweepPoint>> = crate::par::map(grid, |&tau| {
        let kept = filter_by_confidence(preds, tau);
        let r = evaluate(gt, &kept, mpp, cfg)?;
        Ok(SweepPoint {
            tau,
            f_det: r.detection.f1,
            macro_f1: r.macro_f1,
            score: harmonic(r.detection.f1, r.macro_f1),
        })
    });
    let curve = curve.into_iter().collect::<Result<Vec<_>>>()?;
    let mut best = curve[0];
    for p in &curve[1..] {
        if p.score >= best.score {
            best = *p;
        }
    }
    Ok(SweepResult {
        best_tau: best.tau,
        best_score: best.score,
        all_zero: curve.iter().all(|p| p.score == 0.0),
        curve,
    })
}

/// Plain-text table with detection and per-class P/R/F side by side.
pub fn format_table(label: &str, report: &MetricsReport) -> String {
    let mut groups = vec![("Detection".to_string(), report.detection)];
    groups.extend(report.classes.iter().map(|c| (capitalize(&c.name), c.scores)));
    let label_w = label.len().max(6);
    let mut head1 = format!("{:label_w$}", "");
    let mut head2 = format!("{:label_w$}", "Method");
    let mut row = format!("{label:label_w$}");
    for (name, s) in &groups {
        let _ = write!(head1, " | {name:<20}");
        let _ = write!(head2, " | {:<6} {:<6} {:<6}", "P", "R", "F");
        let _ = write!(row, " | {:.4} {:.4} {:.4}", s.precision, s.recall, s.f1);
    }
    let _ = write!(head1, " |");
    let _ = write!(head2, " | macro F");
    let _ = write!(row, " | {:.4}", report.macro_f1);
    format!("{head1}\n{head2}\n{row}\n")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::AnnotationRecord;

    fn rec(cx: f64, cy: f64, class_id: u32, tissue: Option<&str>) -> AnnotationRecord {
        AnnotationRecord {
            cx,
            cy,
            w: 10.0,
            h: 10.0,
            class_id,
            tissue: tissue.map(str::to_string),
        }
    }

    fn det(cx: f64, cy: f64, class_id: u32, score: f64) -> Detection {
        Detection {
            cx,
            cy,
            w: 10.0,
            h: 10.0,
            class_id,
            score,
        }
    }

    fn pairs(n: usize, fp: usize, fn_: usize) -> MatchResult {
        MatchResult {
            pairs: (0..n).map(|i| (i, i, 0.0)).collect(),
            unmatched_gt: (n..n + fn_).collect(),
            unmatched_pred: (n..n + fp).collect(),
        }
    }

    #[test]
    fn detection_examples() {
        let s = detection_metrics(&pairs(8, 2, 2));
        assert!((s.precision - 0.8).abs() < 1e-15 && (s.recall - 0.8).abs() < 1e-15 && (s.f1 - 0.8).abs() < 1e-15);
        assert!(!s.zero_division);
        let s = detection_metrics(&pairs(0, 0, 5));
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(s.zero_division);
        assert_eq!(detection_metrics(&pairs(4, 0, 0)).f1, 1.0);
    }

    #[test]
    fn worked_classification_example() {
        // pairs (gt, pred) labelled (A,A), (A,B), (B,B)
        let m = pairs(3, 0, 0);
        let counts = classification_counts(&m, &[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!((counts.tp[0], counts.fp[0], counts.fn_[0], counts.tn[0]), (1, 0, 1, 1));
        let s = classification_metrics(&counts, &m);
        assert!((s[0].precision - 1.0).abs() < 1e-12);
        assert!((s[0].recall - 0.5).abs() < 1e-12);
        assert!((s[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        let h = 2.0 * s[0].precision * s[0].recall / (s[0].precision + s[0].recall);
        assert!((s[0].f1 - h).abs() < 1e-12);
    }

    #[test]
    fn counts_edge_cases() {
        let c = classification_counts(&pairs(4, 0, 0), &[2; 4], &[2; 4], 5).unwrap();
        assert_eq!(c.tp, vec![0, 0, 4, 0, 0]);
        assert_eq!(c.tn, vec![4, 4, 0, 4, 4]);
        let e = classification_counts(&pairs(0, 0, 0), &[], &[], 5).unwrap();
        assert!(e.tp.iter().chain(&e.tn).chain(&e.fp).chain(&e.fn_).all(|&v| v == 0));
        assert!(classification_counts(&pairs(1, 0, 0), &[7], &[0], 5).is_err());
    }

    #[test]
    fn macro_examples() {
        assert_eq!(macro_average(&[1.0; 5]).unwrap(), 1.0);
        assert_eq!(macro_average(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn absent_class_scores_zero_with_flag() {
        let gt = AnnotationSet::new(vec![rec(10.0, 10.0, 0, None), rec(50.0, 50.0, 1, None)], None);
        let preds = vec![det(10.0, 10.0, 0, 1.0), det(50.0, 50.0, 1, 1.0)];
        let r = evaluate(&gt, &preds, 0.25, &EvalConfig::default()).unwrap();
        assert_eq!(r.detection.f1, 1.0);
        // classes 2..4 only see TN pairs, so they score 1 rather than 0/0
        assert!(r.classes.iter().all(|c| c.scores.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
        let empty = evaluate(&AnnotationSet::default(), &[], 0.25, &EvalConfig::default()).unwrap();
        assert_eq!(empty.macro_f1, 0.0);
        assert!(empty.flags.iter().any(|f| f.contains("necrosis")));
    }

    #[test]
    fn restricted_detection_errors() {
        let gt = AnnotationSet::new(vec![rec(10.0, 10.0, 0, None), rec(500.0, 500.0, 1, None)], None);
        let preds = vec![det(10.0, 10.0, 0, 1.0)];
        let global = evaluate(&gt, &preds, 0.25, &EvalConfig::default()).unwrap();
        let cfg = EvalConfig {
            per_class_detection_errors: true,
            ..Default::default()
        };
        let restricted = evaluate(&gt, &preds, 0.25, &cfg).unwrap();
        assert!((global.classes[0].scores.recall - 0.5).abs() < 1e-12);
        assert_eq!(restricted.classes[0].scores.recall, 1.0);
        assert!((restricted.classes[1].scores.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tissue_groups() {
        let gt = AnnotationSet::new(
            vec![
                rec(10.0, 10.0, 0, Some("colon")),
                rec(40.0, 10.0, 1, Some("colon")),
                rec(1000.0, 1000.0, 2, Some("lung")),
                rec(1040.0, 1000.0, 2, Some("lung")),
            ],
            None,
        );
        let preds = vec![det(11.0, 10.0, 0, 1.0), det(1000.0, 1001.0, 2, 1.0), det(1100.0, 1100.0, 3, 0.4)];
        let cfg = EvalConfig::default();
        let groups = per_tissue_report(&gt, &preds, 0.25, &cfg).unwrap();
        assert_eq!(groups.keys().collect::<Vec<_>>(), vec!["colon", "lung"]);
        let colon = evaluate(&AnnotationSet::new(gt.records[..2].to_vec(), None), &preds[..1], 0.25, &cfg).unwrap();
        let lung = evaluate(&AnnotationSet::new(gt.records[2..].to_vec(), None), &preds[1..], 0.25, &cfg).unwrap();
        assert_eq!(groups["colon"], colon);
        assert_eq!(groups["lung"], lung);

        let untagged = AnnotationSet::new(gt.records.iter().map(|r| AnnotationRecord { tissue: None, ..r.clone() }).collect(), None);
        let single = per_tissue_report(&untagged, &preds, 0.25, &cfg).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[UNTAGGED], evaluate(&untagged, &preds, 0.25, &cfg).unwrap());

        let empty = per_tissue_report(&AnnotationSet::default(), &[], 0.25, &cfg).unwrap();
        assert!(empty[UNTAGGED].flags.iter().any(|f| f == "empty group"));
    }

    #[test]
    fn sweep_prefers_largest_clean_threshold() {
        let gt = AnnotationSet::new((0..5).map(|i| rec(100.0 * i as f64, 0.0, 0, None)).collect(), None);
        let mut preds: Vec<Detection> = gt.records.iter().map(|r| det(r.cx, r.cy, 0, 1.0)).collect();
        preds.extend((0..5).map(|i| det(50.0 + 100.0 * i as f64, 300.0, 1, 0.1)));
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let s = sweep_threshold(&preds, &gt, 0.25, &EvalConfig::default(), &grid).unwrap();
        assert_eq!(s.best_tau, 1.0);
        assert_eq!(s.best_score, 1.0);
        assert!(s.curve[0].score < 1.0);
        assert!(s.curve[2..].iter().all(|p| p.score == 1.0));

        let one = sweep_threshold(&preds, &gt, 0.25, &EvalConfig::default(), &[0.3]).unwrap();
        assert_eq!(one.best_tau, 0.3);

        let low: Vec<Detection> = preds.iter().map(|d| Detection { score: 0.05, ..*d }).collect();
        let z = sweep_threshold(&low, &gt, 0.25, &EvalConfig::default(), &[0.2, 0.5, 0.9]).unwrap();
        assert!(z.all_zero);
        assert_eq!(z.best_tau, 0.9);

        assert!(sweep_threshold(&preds, &gt, 0.25, &EvalConfig::default(), &[]).is_err());
        assert!(sweep_threshold(&preds, &gt, 0.25, &EvalConfig::default(), &[0.5, 0.2]).is_err());
    }

    #[test]
    fn table_layout() {
        let gt = AnnotationSet::new(vec![rec(10.0, 10.0, 0, None)], None);
        let r = evaluate(&gt, &[det(10.0, 10.0, 0, 1.0)], 0.25, &EvalConfig::default()).unwrap();
        let t = format_table("oracle", &r);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Detection") && lines[0].contains("Necrosis"));
        assert!(lines[2].starts_with("oracle | 1.0000 1.0000 1.0000"));
    }
}
