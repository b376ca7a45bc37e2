//! Center-distance detection metrics: greedy matching, clipped 101-point AP,
//! the five true-positive errors and the NDS composite.
//!
//! Datasets are passed as slices of per-sample box lists; predictions and
//! ground truth are aligned by index.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;
use crate::head::Box3D;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub dist_thresholds_m: Vec<f64>,
    pub tp_threshold_m: f64,
    pub min_recall: f64,
    pub min_precision: f64,
    /// Classes whose heading error is measured modulo pi.
    pub pi_period_classes: Vec<u32>,
    /// Classes without velocity annotations; their AVE is not computed.
    pub no_velocity_classes: Vec<u32>,
    /// Classes without attribute annotations; their AAE is not computed.
    pub no_attribute_classes: Vec<u32>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            dist_thresholds_m: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold_m: 2.0,
            min_recall: 0.1,
            min_precision: 0.1,
            pi_period_classes: Vec::new(),
            no_velocity_classes: Vec::new(),
            no_attribute_classes: Vec::new(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.dist_thresholds_m;
        if t.is_empty() || t.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("distance thresholds {t:?}")));
        }
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("distance thresholds not ascending: {t:?}")));
        }
        if !(self.tp_threshold_m > 0.0) || !self.tp_threshold_m.is_finite() {
            return Err(Error::Config(format!("tp threshold {}", self.tp_threshold_m)));
        }
        for (name, v) in [("min_recall", self.min_recall), ("min_precision", self.min_precision)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Result of matching one same-class pool of predictions against ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    /// `(prediction index, ground-truth index)` in processing order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Indices of `preds` by descending score; equal scores keep input order.
pub fn score_order(preds: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy center-distance matching within one sample and class.
///
/// Predictions are visited by descending score; each takes the nearest
/// still-unmatched ground truth strictly closer than `threshold`, the lower
/// index winning distance ties.
pub fn match_detections(preds: &[Box3D], gts: &[Box3D], threshold: f64) -> Matching {
    let mut taken = vec![false; gts.len()];
    let mut m = Matching::default();
    for i in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = preds[i].center_distance(g);
            if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                m.pairs.push((i, j));
            }
            None => m.unmatched_preds.push(i),
        }
    }
    m.unmatched_gts = (0..gts.len()).filter(|&j| !taken[j]).collect();
    m
}

/// One scored prediction after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub is_tp: bool,
}

/// Piecewise-linear interpolation with the conventions of `numpy.interp`:
/// left of the data returns the first value, right of it returns `right`, and
/// repeated abscissae resolve to the last sample at that abscissa.
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let n = xp.len();
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[n - 1] {
        return right;
    }
    if x == xp[n - 1] {
        return fp[n - 1];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + slope * (x - xp[j])
}

/// Precision sampled at recall `0, 0.01, .., 1` (zero beyond the reached recall).
pub fn precision_curve(scored: &[Scored], num_gt: usize) -> Vec<f64> {
    if scored.is_empty() || num_gt == 0 {
        return vec![0.0; 101];
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score));
    let mut rec = Vec::with_capacity(order.len());
    let mut prec = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        if scored[i].is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        rec.push(tp as f64 / num_gt as f64);
        prec.push(tp as f64 / (tp + fp) as f64);
    }
    (0..=100)
        .map(|k| interp(k as f64 / 100.0, &rec, &prec, 0.0))
        .collect()
}

/// Area under the clipped precision curve, normalized so a perfect detector
/// scores 1. Samples at recall `<= min_recall` are dropped and precision below
/// `min_precision` counts as zero.
pub fn average_precision(scored: &[Scored], num_gt: usize, min_recall: f64, min_precision: f64) -> f64 {
    let curve = precision_curve(scored, num_gt);
    let start = (100.0 * min_recall).round() as usize + 1;
    let tail = &curve[start.min(curve.len())..];
    if tail.is_empty() {
        return 0.0;
    }
    let span = 1.0 - min_precision;
    let sum: f64 = tail.iter().map(|p| ((p - min_precision) / span).max(0.0)).sum();
    (sum / tail.len() as f64).min(1.0)
}

/// Per-class true-positive errors. `None` marks an error that is not defined
/// for the class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: Option<f64>,
    pub aae: Option<f64>,
    /// No matched pairs; the defined errors are set to 1.
    pub empty: bool,
}

/// `1 - IoU` of two boxes sharing center and heading.
pub fn scale_error(p: &Box3D, g: &Box3D) -> f64 {
    1.0 - (0..3)
        .map(|i| p.dims[i].min(g.dims[i]) / p.dims[i].max(g.dims[i]))
        .product::<f64>()
}

/// Smallest absolute heading difference, in `[0, pi]` (or `[0, pi/2]` with
/// `pi_period`).
pub fn orientation_error(p: &Box3D, g: &Box3D, pi_period: bool) -> f64 {
    let d = wrap_angle(p.yaw - g.yaw).abs();
    if pi_period {
        d.min(PI - d)
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassRules {
    pub pi_period: bool,
    pub skip_velocity: bool,
    pub skip_attribute: bool,
}

pub fn tp_errors(pairs: &[(&Box3D, &Box3D)], rules: ClassRules) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors {
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            ave: (!rules.skip_velocity).then_some(1.0),
            aae: (!rules.skip_attribute).then_some(1.0),
            empty: true,
        };
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&Box3D, &Box3D) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
    TpErrors {
        ate: mean(&|p, g| p.center_distance(g)),
        ase: mean(&scale_error),
        aoe: mean(&|p, g| orientation_error(p, g, rules.pi_period)),
        ave: (!rules.skip_velocity).then(|| {
            mean(&|p, g| (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]))
        }),
        aae: (!rules.skip_attribute)
            .then(|| 1.0 - mean(&|p, g| f64::from(u8::from(p.attribute_id == g.attribute_id)))),
        empty: false,
    }
}

/// The six headline indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Indicators {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

impl Indicators {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.map) {
            return Err(Error::InvalidInput(format!("mAP {} outside [0, 1]", self.map)));
        }
        for e in self.errors() {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::InvalidInput(format!("TP error {e} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn errors(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }

    pub fn nds(&self) -> f64 {
        nds(self.map, self.errors())
    }
}

/// `(5 mAP + sum(1 - min(1, err))) / 10`.
pub fn nds(map: f64, errors: [f64; 5]) -> f64 {
    (5.0 * map + errors.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: u32,
    pub num_gt: usize,
    pub num_pred: usize,
    /// AP at each configured distance threshold.
    pub ap: Vec<f64>,
    pub tp: TpErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dist_thresholds_m: Vec<f64>,
    pub tp_threshold_m: f64,
    /// Classes with at least one ground-truth box, ascending.
    pub classes: Vec<ClassEval>,
    /// Prediction classes with no ground truth; excluded from the means.
    pub absent_classes: Vec<u32>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
}

impl EvalResult {
    pub fn indicators(&self) -> Indicators {
        Indicators {
            map: self.map,
            mate: self.mate,
            mase: self.mase,
            maoe: self.maoe,
            mave: self.mave,
            maae: self.maae,
        }
    }

    /// AP of every class at one threshold index, averaged.
    pub fn map_at(&self, threshold_index: usize) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.classes.iter().map(|c| c.ap[threshold_index]).sum::<f64>() / self.classes.len() as f64
    }
}

fn class_pool(samples: &[Vec<Box3D>], class_id: u32) -> Vec<Vec<Box3D>> {
    samples
        .iter()
        .map(|s| s.iter().filter(|b| b.class_id == class_id).cloned().collect())
        .collect()
}

fn evaluate_class(
    preds: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    class_id: u32,
    cfg: &MetricConfig,
) -> ClassEval {
    let p = class_pool(preds, class_id);
    let g = class_pool(gts, class_id);
    let num_gt = g.iter().map(Vec::len).sum();
    let num_pred = p.iter().map(Vec::len).sum();

    let scored_at = |threshold: f64| -> (Vec<Scored>, Vec<(Box3D, Box3D)>) {
        let mut scored = Vec::with_capacity(num_pred);
        let mut pairs = Vec::new();
        for (ps, gs) in p.iter().zip(&g) {
            let m = match_detections(ps, gs, threshold);
            let mut tp = vec![false; ps.len()];
            for &(i, j) in &m.pairs {
                tp[i] = true;
                pairs.push((ps[i].clone(), gs[j].clone()));
            }
            scored.extend(ps.iter().zip(tp).map(|(b, is_tp)| Scored { score: b.score, is_tp }));
        }
        (scored, pairs)
    };

    let ap = cfg
        .dist_thresholds_m
        .iter()
        .map(|&t| average_precision(&scored_at(t).0, num_gt, cfg.min_recall, cfg.min_precision))
        .collect();
    let (_, pairs) = scored_at(cfg.tp_threshold_m);
    let refs: Vec<(&Box3D, &Box3D)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let rules = ClassRules {
        pi_period: cfg.pi_period_classes.contains(&class_id),
        skip_velocity: cfg.no_velocity_classes.contains(&class_id),
        skip_attribute: cfg.no_attribute_classes.contains(&class_id),
    };
    ClassEval {
        class_id,
        num_gt,
        num_pred,
        ap,
        tp: tp_errors(&refs, rules),
    }
}

fn mean_or_one(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Evaluate aligned per-sample prediction and ground-truth lists.
pub fn evaluate(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], cfg: &MetricConfig) -> Result<EvalResult> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction samples vs {} ground-truth samples",
            preds.len(),
            gts.len()
        )));
    }
    for b in preds.iter().chain(gts).flatten() {
        b.validate()?;
    }
    let gt_classes: BTreeSet<u32> = gts.iter().flatten().map(|b| b.class_id).collect();
    let absent_classes: Vec<u32> = preds
        .iter()
        .flatten()
        .map(|b| b.class_id)
        .collect::<BTreeSet<_>>()
        .difference(&gt_classes)
        .copied()
        .collect();

    let classes: Vec<ClassEval> = gt_classes
        .into_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&k| evaluate_class(preds, gts, k, cfg))
        .collect();

    let map = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64).sum::<f64>()
            / classes.len() as f64
    };
    let mate = mean_or_one(classes.iter().map(|c| c.tp.ate));
    let mase = mean_or_one(classes.iter().map(|c| c.tp.ase));
    let maoe = mean_or_one(classes.iter().map(|c| c.tp.aoe));
    let mave = mean_or_one(classes.iter().filter_map(|c| c.tp.ave));
    let maae = mean_or_one(classes.iter().filter_map(|c| c.tp.aae));
    let nds = nds(map, [mate, mase, maoe, mave, maae]);
    Ok(EvalResult {
        dist_thresholds_m: cfg.dist_thresholds_m.clone(),
        tp_threshold_m: cfg.tp_threshold_m,
        classes,
        absent_classes,
        map,
        mate,
        mase,
        maoe,
        mave,
        maae,
        nds,
    })
}

/// Published `(mAP, [mATE, mASE, mAOE, mAVE, mAAE], NDS)` rows; NDS is
/// rounded to three decimals.
pub const NDS_REFERENCE_ROWS: [(f64, [f64; 5], f64); 19] = [
    (0.306, [0.716, 0.264, 0.609, 1.426, 0.658], 0.328),
    (0.295, [0.806, 0.268, 0.511, 1.315, 0.170], 0.372),
    (0.303, [0.860, 0.278, 0.437, 0.967, 0.235], 0.374),
    (0.335, [0.732, 0.263, 0.423, 1.285, 0.172], 0.409),
    (0.286, [0.724, 0.278, 0.590, 0.873, 0.247], 0.372),
    (0.288, [0.722, 0.269, 0.538, 0.911, 0.270], 0.373),
    (0.294, [0.686, 0.278, 0.547, 0.865, 0.261], 0.384),
    (0.304, [0.719, 0.272, 0.555, 0.903, 0.257], 0.381),
    (0.317, [0.704, 0.273, 0.531, 0.940, 0.250], 0.389),
    (0.322, [0.664, 0.266, 0.508, 0.894, 0.243], 0.403),
    (0.349, [0.637, 0.269, 0.490, 0.914, 0.268], 0.417),
    (0.305, [0.517, 0.290, 0.500, 0.316, 0.368], 0.453),
    (0.326, [0.631, 0.261, 0.516, 0.614, 0.115], 0.449),
    (0.671, [0.249, 0.236, 0.350, 0.250, 0.136], 0.714),
    (0.304, [0.738, 0.263, 0.546, 1.553, 0.134], 0.384),
    (0.338, [0.658, 0.255, 0.629, 1.629, 0.142], 0.400),
    (0.358, [0.690, 0.249, 0.452, 1.434, 0.124], 0.428),
    (0.386, [0.626, 0.245, 0.451, 1.509, 0.127], 0.448),
    (0.398, [0.556, 0.239, 0.414, 1.010, 0.153], 0.463),
];
