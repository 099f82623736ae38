//! Ranking metrics, closed/open-set IoU and the throughput harness.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{invalid, Error, Result};
use crate::scores::{ScoreKind, ScoreRegistry};
use crate::segnet::{self, Heads, SegNetParams};
use crate::toydata::Scene;

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// `(positives, negatives)` per distinct score, highest score first.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for i in idx {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Step-wise area under the precision-recall curve, one step per distinct
/// score threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Mann-Whitney probability that a positive outscores a negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    // 2U, accumulated from the lowest score upwards
    let mut two_u = 0u64;
    let mut neg_below = 0u64;
    for (p, n) in tie_groups(scores, labels).into_iter().rev() {
        two_u += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(two_u as f64 / (2 * pos * neg) as f64)
}

/// Smallest false-positive rate over score-value thresholds whose
/// true-positive rate reaches `tpr_target`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], tpr_target: f64) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(invalid(format!("tpr target {tpr_target}")));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if tp as f64 / pos as f64 >= tpr_target {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("the lowest threshold reaches tpr 1")
}

/// Rows: ground truth, columns: prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    /// Open-set charges: anomalies missed and predicted as the class.
    extra_fp: Vec<u64>,
    /// Open-set charges: correctly classified inliers that were flagged.
    extra_fn: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            extra_fp: vec![0; classes],
            extra_fn: vec![0; classes],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)` per class, `None` when the class never occurs
    /// in either prediction or ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.get(t, c)).sum::<u64>()
                    + self.extra_fp[c];
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum::<u64>()
                    + self.extra_fn[c];
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64> {
        mean_present(&self.iou())
    }
}

fn mean_present(per_class: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptySupport("mIoU class set"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn inlier_class(label: i16, classes: usize) -> Option<usize> {
    (label >= 0 && (label as usize) < classes).then_some(label as usize)
}

pub fn closed_confusion(pred: &[usize], labels: &[i16], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != labels.len() {
        return Err(invalid("prediction and label lengths differ"));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &l) in pred.iter().zip(labels) {
        if let Some(t) = inlier_class(l, classes) {
            if p >= classes {
                return Err(invalid(format!("predicted class {p} of {classes}")));
            }
            cm.add(t, p);
        }
    }
    Ok(cm)
}

/// Mean IoU over inlier pixels; ignored and anomalous pixels are skipped.
/// Returns the mean with per-class IoUs.
pub fn closed_miou(pred: &[usize], labels: &[i16], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let cm = closed_confusion(pred, labels, classes)?;
    Ok((cm.mean_iou()?, cm.iou()))
}

/// Lowest score threshold with the minimum FPR subject to
/// `TPR >= tpr_target`; pixels scoring at or above it are flagged.
pub fn operating_threshold(scores: &[f64], anomaly: &[bool], tpr_target: f64) -> Result<f64> {
    let (pos, _) = check_binary(scores, anomaly)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(u64, f64)> = None;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if anomaly[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp as f64 / pos as f64 >= tpr_target {
            match best {
                None => best = Some((fp, s)),
                Some((bfp, _)) if fp == bfp => best = Some((fp, s)),
                _ => break,
            }
        }
    }
    Ok(best.expect("the lowest threshold reaches tpr 1").1)
}

/// Open-set mIoU at the `tpr_target` operating point. A missed anomaly
/// is a false positive of its predicted class; a flagged inlier is a
/// false negative of its true class (a flagged correct prediction loses
/// its true positive, a flagged mistake keeps its closed-set false
/// positive).
pub fn open_miou(
    pred: &[usize],
    scores: &[f64],
    labels: &[i16],
    anomaly: &[bool],
    classes: usize,
    tpr_target: f64,
) -> Result<(f64, Vec<Option<f64>>)> {
    let n = pred.len();
    if scores.len() != n || labels.len() != n || anomaly.len() != n {
        return Err(invalid("open_miou input lengths differ"));
    }
    if !anomaly.contains(&true) {
        return Err(Error::EmptySupport("open_miou anomaly set"));
    }
    let tau = operating_threshold(scores, anomaly, tpr_target)?;
    let mut cm = ConfusionMatrix::new(classes);
    for i in 0..n {
        let flagged = scores[i] >= tau;
        if pred[i] >= classes {
            return Err(invalid(format!("predicted class {} of {classes}", pred[i])));
        }
        if anomaly[i] {
            if !flagged {
                cm.extra_fp[pred[i]] += 1;
            }
        } else if let Some(t) = inlier_class(labels[i], classes) {
            if flagged && pred[i] == t {
                cm.extra_fn[t] += 1;
            } else {
                cm.add(t, pred[i]);
            }
        }
    }
    Ok((cm.mean_iou()?, cm.iou()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMetrics {
    pub ap: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub open_miou: f64,
    pub per_class_open: Vec<Option<f64>>,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub aux_data: bool,
    pub score: ScoreKind,
    pub closed_miou: f64,
    pub per_class_closed: Vec<Option<f64>>,
    /// Absent when the test set carries no anomaly pixels.
    pub anomaly: Option<AnomalyMetrics>,
    pub scenes_per_sec: Option<f64>,
    pub fingerprint: String,
}

pub const CSV_HEADER: &str = "method,score,ap,fpr95,auroc,closed_miou,open_miou,scenes_per_sec";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format { what: "metrics row", msg: format!("bad number '{s}'") })
}

impl EvalReport {
    /// One comma-separated row matching [`CSV_HEADER`]; numbers in
    /// shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let a = self.anomaly.as_ref();
        [
            self.method.clone(),
            self.score.name().to_string(),
            opt(a.map(|m| m.ap)),
            opt(a.map(|m| m.fpr95)),
            opt(a.map(|m| m.auroc)),
            self.closed_miou.to_string(),
            opt(a.map(|m| m.open_miou)),
            opt(self.scenes_per_sec),
        ]
        .join(",")
    }

    /// Parses the summary columns of [`EvalReport::csv_row`]; per-class
    /// lists are not part of the row and come back empty.
    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        let bad = |msg: String| Error::Format { what: "metrics row", msg };
        if f.len() != 8 {
            return Err(bad(format!("{} fields", f.len())));
        }
        let score: ScoreKind = f[1].parse()?;
        let closed_miou = parse_opt(f[5])?.ok_or_else(|| bad("missing closed_miou".into()))?;
        let [ap, fpr95, auroc, open] = [f[2], f[3], f[4], f[6]].map(parse_opt);
        let anomaly = match (ap?, fpr95?, auroc?, open?) {
            (Some(ap), Some(fpr95), Some(auroc), Some(open_miou)) => Some(AnomalyMetrics {
                ap,
                fpr95,
                auroc,
                open_miou,
                per_class_open: Vec::new(),
                prevalence: f64::NAN,
            }),
            (None, None, None, None) => None,
            _ => return Err(bad("partial anomaly metrics".into())),
        };
        Ok(Self {
            method: f[0].to_string(),
            aux_data: false,
            score,
            closed_miou,
            per_class_closed: Vec::new(),
            anomaly,
            scenes_per_sec: parse_opt(f[7])?,
            fingerprint: String::new(),
        })
    }

    /// `key = value`, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "aux_data = {}", self.aux_data);
        let _ = writeln!(s, "score = {}", self.score);
        let _ = writeln!(s, "fingerprint = {}", self.fingerprint);
        if let Some(a) = &self.anomaly {
            let _ = writeln!(s, "ap = {}", a.ap);
            let _ = writeln!(s, "fpr95 = {}", a.fpr95);
            let _ = writeln!(s, "auroc = {}", a.auroc);
            let _ = writeln!(s, "anomaly_prevalence = {}", a.prevalence);
            let _ = writeln!(s, "open_miou = {}", a.open_miou);
            let _ = writeln!(s, "open_iou_per_class = {}", per_class(&a.per_class_open));
        }
        let _ = writeln!(s, "closed_miou = {}", self.closed_miou);
        let _ = writeln!(s, "closed_iou_per_class = {}", per_class(&self.per_class_closed));
        if let Some(t) = self.scenes_per_sec {
            let _ = writeln!(s, "scenes_per_sec = {t}");
        }
        s
    }
}

fn per_class(v: &[Option<f64>]) -> String {
    v.iter().map(|x| opt(*x)).collect::<Vec<_>>().join(",")
}

/// Pixels of all scenes pooled: predicted classes, labels, anomaly mask.
#[derive(Debug, Clone, Default)]
pub struct PooledPixels {
    pub pred: Vec<usize>,
    pub labels: Vec<i16>,
    pub anomaly: Vec<bool>,
    pub scores: Vec<f64>,
}

/// Metrics for one score over pooled pixels. Anomaly metrics are skipped
/// when no pixel is anomalous.
pub fn report_from_pooled(
    pooled: &PooledPixels,
    classes: usize,
    method: &str,
    score: ScoreKind,
    tpr_target: f64,
) -> Result<EvalReport> {
    let (closed, per_closed) = closed_miou(&pooled.pred, &pooled.labels, classes)?;
    let anomaly = if pooled.anomaly.contains(&true) {
        // ignored non-anomalous pixels take part in neither population
        let keep: Vec<usize> = (0..pooled.pred.len())
            .filter(|&i| pooled.anomaly[i] || inlier_class(pooled.labels[i], classes).is_some())
            .collect();
        let s: Vec<f64> = keep.iter().map(|&i| pooled.scores[i]).collect();
        let y: Vec<bool> = keep.iter().map(|&i| pooled.anomaly[i]).collect();
        let (open, per_open) = open_miou(
            &pooled.pred,
            &pooled.scores,
            &pooled.labels,
            &pooled.anomaly,
            classes,
            tpr_target,
        )?;
        Some(AnomalyMetrics {
            ap: average_precision(&s, &y)?,
            fpr95: fpr_at_tpr(&s, &y, tpr_target)?,
            auroc: auroc(&s, &y)?,
            open_miou: open,
            per_class_open: per_open,
            prevalence: y.iter().filter(|&&b| b).count() as f64 / y.len() as f64,
        })
    } else {
        None
    };
    Ok(EvalReport {
        method: method.to_string(),
        aux_data: false,
        score,
        closed_miou: closed,
        per_class_closed: per_closed,
        anomaly,
        scenes_per_sec: None,
        fingerprint: String::new(),
    })
}

/// What a throughput measurement runs per scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKind {
    /// Class head and argmax only.
    SegmentationOnly,
    /// Both heads, argmax and the score map.
    Scored(ScoreKind),
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::SegmentationOnly => "OH",
            BenchKind::Scored(k) => k.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("oh") {
            Ok(BenchKind::SegmentationOnly)
        } else {
            Ok(BenchKind::Scored(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
    /// Each sample keeps cycling over the scenes until every kind has run
    /// for at least this long, so short load spikes average out.
    pub min_sample_secs: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 3,
            repeats: 7,
            min_sample_secs: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    pub kind: BenchKind,
    pub median: f64,
    pub cv: f64,
    pub samples: Vec<f64>,
}

fn run_scene(params: &SegNetParams, scorers: &ScoreRegistry, kind: BenchKind, s: &Scene) -> Result<()> {
    match kind {
        BenchKind::SegmentationOnly => {
            let p = segnet::forward(params, &s.features, s.height, s.width, Heads::ClassOnly)?;
            std::hint::black_box(p.argmax());
        }
        BenchKind::Scored(k) => {
            let p = segnet::forward(params, &s.features, s.height, s.width, Heads::Both)?;
            std::hint::black_box(p.argmax());
            std::hint::black_box(scorers.get(k)?.score(&p)?);
        }
    }
    Ok(())
}

/// One sample per kind, in scenes per second. Kinds alternate scene by
/// scene with a rotating start, so every kind sees the same machine load.
fn run_round(
    params: &SegNetParams,
    scorers: &ScoreRegistry,
    kinds: &[BenchKind],
    scenes: &[Scene],
    round: usize,
    min_secs: f64,
) -> Result<Vec<f64>> {
    let mut secs = vec![0.0; kinds.len()];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); kinds.len()];
    let mut count = 0usize;
    while count < scenes.len() || secs.iter().any(|&t| t < min_secs) {
        let s = &scenes[count % scenes.len()];
        for j in 0..kinds.len() {
            let k = (round + count + j) % kinds.len();
            let start = Instant::now();
            run_scene(params, scorers, kinds[k], s)?;
            let t = start.elapsed().as_secs_f64();
            secs[k] += t;
            times[k].push(t);
        }
        count += 1;
    }
    // per-scene median: a preempted scene does not drag the sample down
    Ok(times.iter().map(|t| 1.0 / median(t)).collect())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Scenes per second for forward pass plus score map; `repeats` samples
/// per kind after `warmup` discarded rounds.
pub fn bench_throughput(
    params: &SegNetParams,
    scorers: &ScoreRegistry,
    kinds: &[BenchKind],
    scenes: &[Scene],
    opts: BenchOptions,
) -> Result<Vec<Throughput>> {
    if scenes.is_empty() {
        return Err(invalid("no scenes to benchmark"));
    }
    if kinds.is_empty() {
        return Err(invalid("no benchmark kinds"));
    }
    if opts.repeats < 5 {
        return Err(invalid(format!("repeats must be >= 5, got {}", opts.repeats)));
    }
    if !(opts.min_sample_secs >= 0.0) {
        return Err(invalid(format!("min_sample_secs {}", opts.min_sample_secs)));
    }
    let mut samples = vec![Vec::with_capacity(opts.repeats); kinds.len()];
    for round in 0..opts.warmup + opts.repeats {
        let rates = run_round(params, scorers, kinds, scenes, round, opts.min_sample_secs)?;
        if round >= opts.warmup {
            for (k, r) in rates.into_iter().enumerate() {
                samples[k].push(r);
            }
        }
    }
    Ok(kinds
        .iter()
        .zip(samples)
        .map(|(&kind, s)| Throughput {
            kind,
            median: median(&s),
            cv: coefficient_of_variation(&s),
            samples: s,
        })
        .collect())
}
