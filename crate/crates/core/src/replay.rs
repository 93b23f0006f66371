//! Replay sampling and loss composition against an abstract learner.
//!
//! Per-level classification error is the cross-entropy of the prediction
//! against the normalized indicator of the frame's label set, measured
//! relative to that target's own entropy (i.e. the KL divergence), so an
//! exact prediction scores 0. Regression error is the mean squared 3D error
//! over observed points.

use serde::{Deserialize, Serialize};

use crate::buffering::{Buffer, BufferEntry};
use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::types::{dist_sq, Instance, Vec3};

/// Loss weights `(α_1, …, α_L, β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LossWeights {
    pub alphas: Vec<f64>,
    pub beta: f64,
}

impl LossWeights {
    /// `(1, 1, 100000)`: the weights used for training.
    pub fn standard() -> Self {
        LossWeights {
            alphas: vec![1.0, 1.0],
            beta: 100_000.0,
        }
    }

    /// `(0, 0, 1)`: regression only.
    pub fn regression_only() -> Self {
        LossWeights {
            alphas: vec![0.0, 0.0],
            beta: 1.0,
        }
    }

    /// `(1, 1, 0)`: classification only.
    pub fn classification_only() -> Self {
        LossWeights {
            alphas: vec![1.0, 1.0],
            beta: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<Vec<f64>> for LossWeights {
    type Error = String;

    fn try_from(mut v: Vec<f64>) -> std::result::Result<Self, String> {
        if v.len() < 2 {
            return Err("loss_weights needs at least one alpha and a beta".into());
        }
        if v.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("loss weights must be finite and non-negative".into());
        }
        let beta = v.pop().unwrap();
        Ok(LossWeights { alphas: v, beta })
    }
}

impl From<LossWeights> for Vec<f64> {
    fn from(w: LossWeights) -> Self {
        let mut v = w.alphas;
        v.push(w.beta);
        v
    }
}

/// Stored (or current) model output for one frame: pre-softmax scores per
/// level and a predicted 3D coordinate for each observed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationPayload {
    pub logits_per_level: Vec<Vec<f64>>,
    pub predicted_points: Vec<Vec3>,
}

impl RepresentationPayload {
    /// The exact ground truth expressed as a prediction.
    pub fn ground_truth(inst: &Instance, points: &[Vec3]) -> Result<Self> {
        let mut logits_per_level = Vec::with_capacity(inst.levels());
        for l in 1..=inst.levels() {
            let set = inst.labels(l)?;
            let mut v = vec![f64::NEG_INFINITY; set.domain()];
            for i in set.iter() {
                v[i] = 0.0;
            }
            logits_per_level.push(v);
        }
        Ok(RepresentationPayload {
            logits_per_level,
            predicted_points: gt_coordinates(inst, points)?,
        })
    }

    /// Approximate serialized size, for informational reporting.
    pub fn byte_size(&self) -> usize {
        8 * (self.logits_per_level.iter().map(Vec::len).sum::<usize>() + 3 * self.predicted_points.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_level_classification: Vec<f64>,
    pub regression: f64,
    pub alphas: Vec<f64>,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(per_level_classification: Vec<f64>, regression: f64, alphas: &[f64], beta: f64) -> Self {
        let total = recompose(&per_level_classification, regression, alphas, beta);
        LossBreakdown {
            per_level_classification,
            regression,
            alphas: alphas.to_vec(),
            beta,
            total,
        }
    }

    /// Recomputes the weighted sum from the parts.
    pub fn recomposed_total(&self) -> f64 {
        recompose(&self.per_level_classification, self.regression, &self.alphas, self.beta)
    }
}

fn recompose(cls: &[f64], regression: f64, alphas: &[f64], beta: f64) -> f64 {
    cls.iter().zip(alphas).map(|(e, a)| a * e).sum::<f64>() + beta * regression
}

/// Natural log of the softmax normalizer.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// `-Σ_i t_i log softmax(logits)_i` for a probability vector `target`.
pub fn cross_entropy(target: &[f64], logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, z)| -t * (z - lse))
        .sum()
}

/// `KL(target ‖ softmax(logits))`.
fn kl_to_logits(target: &[f64], logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, z)| t * (t.ln() - (z - lse)))
        .sum::<f64>()
        .max(0.0)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn gt_coordinates(inst: &Instance, points: &[Vec3]) -> Result<Vec<Vec3>> {
    inst.observed_points()
        .iter()
        .map(|p| points.get(p.index()).copied().ok_or(Error::UnknownPoint(*p)))
        .collect()
}

fn mean_sq_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| dist_sq(x, y)).sum::<f64>() / a.len() as f64
}

fn check_shapes(inst: &Instance, pred: &RepresentationPayload, weights: &LossWeights) -> Result<()> {
    if pred.logits_per_level.len() != inst.levels() || weights.alphas.len() != inst.levels() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit levels and {} alphas for a {}-level hierarchy",
            pred.logits_per_level.len(),
            weights.alphas.len(),
            inst.levels()
        )));
    }
    for (l, logits) in pred.logits_per_level.iter().enumerate() {
        let card = inst.labels(l + 1)?.domain();
        if logits.len() != card {
            return Err(Error::ShapeMismatch(format!(
                "level {} has {} logits for {card} labels",
                l + 1,
                logits.len()
            )));
        }
    }
    if pred.predicted_points.len() != inst.observed_points().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted points for {} observed",
            pred.predicted_points.len(),
            inst.observed_points().len()
        )));
    }
    Ok(())
}

/// Weighted per-level classification plus regression loss of `pred` on `inst`.
/// `points` is the scene's point cloud indexed by [`PointId`](crate::types::PointId).
pub fn task_loss(
    inst: &Instance,
    pred: &RepresentationPayload,
    points: &[Vec3],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_shapes(inst, pred, weights)?;
    let mut cls = Vec::with_capacity(inst.levels());
    for (l, logits) in pred.logits_per_level.iter().enumerate() {
        let set = inst.labels(l + 1)?;
        let share = 1.0 / set.len() as f64;
        let mut target = vec![0.0; logits.len()];
        for i in set.iter() {
            target[i] = share;
        }
        cls.push(kl_to_logits(&target, logits));
    }
    let gt = gt_coordinates(inst, points)?;
    let regression = mean_sq_error(&pred.predicted_points, &gt);
    Ok(LossBreakdown::compose(cls, regression, &weights.alphas, weights.beta))
}

/// β for the distillation regression term: the stored prediction acts as an
/// upper bound, so the current prediction is only penalized while it is
/// strictly worse than the stored one.
pub fn bounded_beta(pred_error_sq: f64, stored_error_sq: f64, beta_on: f64) -> f64 {
    if pred_error_sq > stored_error_sq {
        beta_on
    } else {
        0.0
    }
}

/// Distillation loss of the current prediction against a stored payload.
pub fn distill_loss(
    inst: &Instance,
    current: &RepresentationPayload,
    stored: &RepresentationPayload,
    points: &[Vec3],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_shapes(inst, current, weights)?;
    check_shapes(inst, stored, weights)?;
    let cls = current
        .logits_per_level
        .iter()
        .zip(&stored.logits_per_level)
        .map(|(cur, old)| kl_to_logits(&softmax(old), cur))
        .collect();
    let gt = gt_coordinates(inst, points)?;
    let beta = bounded_beta(
        mean_sq_error(&current.predicted_points, &gt),
        mean_sq_error(&stored.predicted_points, &gt),
        weights.beta,
    );
    let regression = mean_sq_error(&current.predicted_points, &stored.predicted_points);
    Ok(LossBreakdown::compose(cls, regression, &weights.alphas, beta))
}

/// Current-task loss plus the mean loss over replayed buffer samples.
pub fn replay_loss_img(current: &LossBreakdown, replayed: &[LossBreakdown]) -> f64 {
    if replayed.is_empty() {
        return current.total;
    }
    current.total + replayed.iter().map(|l| l.total).sum::<f64>() / replayed.len() as f64
}

/// Current-task loss plus, over the replayed batch, the mean of ground-truth
/// loss and distillation loss.
pub fn replay_loss_rep(
    current: &LossBreakdown,
    replayed_gt: &[LossBreakdown],
    replayed_distill: &[LossBreakdown],
) -> Result<f64> {
    if replayed_gt.len() != replayed_distill.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth terms vs {} distillation terms",
            replayed_gt.len(),
            replayed_distill.len()
        )));
    }
    if replayed_gt.is_empty() {
        return Ok(current.total);
    }
    let sum: f64 = replayed_gt
        .iter()
        .zip(replayed_distill)
        .map(|(g, d)| g.total + d.total)
        .sum();
    Ok(current.total + sum / replayed_gt.len() as f64)
}

/// Draws `k` replay entries: without replacement when `k <= |entries|`,
/// otherwise uniformly with replacement.
pub fn sample_replay_batch<'a>(buf: &'a Buffer, k: usize, rng: &mut RngHandle) -> Result<Vec<&'a BufferEntry>> {
    let entries = buf.entries();
    if entries.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if k > entries.len() {
        return (0..k)
            .map(|_| rng.uniform_index(entries.len()).map(|i| &entries[i]))
            .collect();
    }
    // partial Fisher-Yates over indices
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let j = i + rng.uniform_index(entries.len() - i)?;
        idx.swap(i, j);
        out.push(&entries[idx[i]]);
    }
    Ok(out)
}

/// Anything that maps a frame to per-level label scores and 3D coordinates.
pub trait LearnerOracle {
    fn predict(&self, inst: &Instance, points: &[Vec3], stage: usize) -> Result<RepresentationPayload>;
}

/// Deterministic learner stand-in: ground truth corrupted by label flips and
/// Gaussian coordinate noise, keyed by `(seed, stage, scene, frame)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerStub {
    pub seed: u64,
    /// Probability that each true label is replaced by a random one.
    pub p_flip: f64,
    /// Standard deviation of coordinate noise (meters).
    pub sigma: f64,
    /// Logit margin of predicted labels over the rest.
    pub confidence: f64,
}

impl Default for LearnerStub {
    fn default() -> Self {
        LearnerStub {
            seed: 0,
            p_flip: 0.1,
            sigma: 0.02,
            confidence: 6.0,
        }
    }
}

impl LearnerOracle for LearnerStub {
    fn predict(&self, inst: &Instance, points: &[Vec3], stage: usize) -> Result<RepresentationPayload> {
        let mut rng = RngHandle::new(
            self.seed,
            format!("learner/{stage}/{}/{}", inst.scene, inst.frame_index),
        );
        let mut logits_per_level = Vec::with_capacity(inst.levels());
        for l in 1..=inst.levels() {
            let set = inst.labels(l)?;
            let card = set.domain();
            let mut v = vec![0.0; card];
            for i in set.iter() {
                let label = if rng.uniform() < self.p_flip {
                    rng.uniform_index(card)?
                } else {
                    i
                };
                v[label] = self.confidence;
            }
            logits_per_level.push(v);
        }
        let predicted_points = gt_coordinates(inst, points)?
            .into_iter()
            .map(|p| p.map(|c| c + self.sigma * rng.normal()))
            .collect();
        Ok(RepresentationPayload {
            logits_per_level,
            predicted_points,
        })
    }
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::buffering::{BufferPolicy, Strategy};
    use crate::hierarchy::LabelHierarchy;
    use crate::types::{PointId, Pose, SceneId};

    fn grid_scene() -> (Vec<Vec3>, LabelHierarchy) {
        let pts: Vec<Vec3> = (0..900)
            .map(|i| [(i % 30) as f64 * 0.1, (i / 30) as f64 * 0.1, 0.5])
            .collect();
        let h = LabelHierarchy::build(SceneId(0), &pts, 2, 25, &mut RngHandle::new(0, "h")).unwrap();
        (pts, h)
    }

    fn frame(h: &LabelHierarchy, idx: usize, pts: &[u32]) -> Instance {
        Instance::new(
            SceneId(0),
            idx,
            Pose::from_yaw([0.0; 3], 0.0),
            pts.iter().map(|&p| PointId(p)).collect(),
            h,
        )
        .unwrap()
    }

    #[test]
    fn exact_prediction_is_free() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 0, &[0, 1, 2, 40, 500]);
        let pred = RepresentationPayload::ground_truth(&inst, &pts).unwrap();
        let loss = task_loss(&inst, &pred, &pts, &LossWeights::standard()).unwrap();
        assert_eq!(loss.per_level_classification, vec![0.0, 0.0]);
        assert_eq!(loss.regression, 0.0);
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn uniform_logits_single_label_cost_ln_card() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 0, &[0]);
        let card1 = h.cardinality(1);
        assert_eq!(card1, 25);
        let mut pred = RepresentationPayload::ground_truth(&inst, &pts).unwrap();
        pred.logits_per_level[0] = vec![0.3; card1];
        let loss = task_loss(&inst, &pred, &pts, &LossWeights::standard()).unwrap();
        assert!((loss.per_level_classification[0] - (25f64).ln()).abs() < 1e-12);
        // plain cross-entropy of any label set against uniform logits is ln 25
        let target: Vec<f64> = (0..25).map(|i| if i < 4 { 0.25 } else { 0.0 }).collect();
        assert!((cross_entropy(&target, &[1.7; 25]) - 25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn regression_weight_arithmetic() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 0, &[5]);
        let mut pred = RepresentationPayload::ground_truth(&inst, &pts).unwrap();
        // squared error 1e-4 m^2
        pred.predicted_points[0][0] += 0.01;
        let loss = task_loss(&inst, &pred, &pts, &LossWeights::standard()).unwrap();
        assert!((loss.regression - 1e-4).abs() < 1e-15);
        assert!((loss.total - 10.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 0, &[5, 6]);
        let mut pred = RepresentationPayload::ground_truth(&inst, &pts).unwrap();
        pred.predicted_points.pop();
        assert!(matches!(
            task_loss(&inst, &pred, &pts, &LossWeights::standard()),
            Err(Error::ShapeMismatch(_))
        ));
        let mut pred = RepresentationPayload::ground_truth(&inst, &pts).unwrap();
        pred.logits_per_level[1].push(0.0);
        assert!(task_loss(&inst, &pred, &pts, &LossWeights::standard()).is_err());
    }

    #[test]
    fn bounded_beta_cases() {
        assert_eq!(bounded_beta(0.02, 0.01, 100_000.0), 100_000.0);
        assert_eq!(bounded_beta(0.005, 0.01, 100_000.0), 0.0);
        assert_eq!(bounded_beta(0.01, 0.01, 100_000.0), 0.0);
    }

    #[test]
    fn img_replay_loss() {
        let mk = |t: f64| LossBreakdown::compose(vec![t], 0.0, &[1.0], 0.0);
        assert_eq!(replay_loss_img(&mk(1.0), &[]), 1.0);
        assert_eq!(replay_loss_img(&mk(1.0), &[mk(2.0), mk(4.0)]), 4.0);
        let scaled = replay_loss_img(&mk(1.0), &[mk(6.0), mk(12.0)]) - 1.0;
        assert!((scaled - 3.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn rep_replay_loss() {
        let mk = |t: f64| LossBreakdown::compose(vec![t], 0.0, &[1.0], 0.0);
        assert_eq!(replay_loss_rep(&mk(1.5), &[], &[]).unwrap(), 1.5);
        assert_eq!(
            replay_loss_rep(&mk(1.0), &[mk(2.0), mk(0.0)], &[mk(1.0), mk(1.0)]).unwrap(),
            3.0
        );
        assert!(matches!(
            replay_loss_rep(&mk(1.0), &[mk(2.0)], &[]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn self_distillation_has_zero_classification() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 3, &[1, 2, 3, 300, 301]);
        let stub = LearnerStub::default();
        let p = stub.predict(&inst, &pts, 2).unwrap();
        let d = distill_loss(&inst, &p, &p, &pts, &LossWeights::standard()).unwrap();
        assert!(d.per_level_classification.iter().all(|&c| c.abs() < 1e-12));
        assert_eq!(d.regression, 0.0);
        assert_eq!(d.beta, 0.0);
    }

    #[test]
    fn distill_beta_follows_bounded_rule() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 3, &[10, 11, 12, 13]);
        let gt = RepresentationPayload::ground_truth(&inst, &pts).unwrap();
        let mut r = RngHandle::new(17, "distill");
        for _ in 0..200 {
            let noisy = |r: &mut RngHandle, s: f64| {
                let mut p = gt.clone();
                for q in &mut p.predicted_points {
                    for c in q.iter_mut() {
                        *c += s * r.normal();
                    }
                }
                p
            };
            let cur = noisy(&mut r, 0.05);
            let old = noisy(&mut r, 0.05);
            let d = distill_loss(&inst, &cur, &old, &pts, &LossWeights::standard()).unwrap();
            let e_cur = mean_sq_error(&cur.predicted_points, &gt.predicted_points);
            let e_old = mean_sq_error(&old.predicted_points, &gt.predicted_points);
            let expect = if e_cur > e_old { 100_000.0 } else { 0.0 };
            assert_eq!(d.beta, expect);
            assert!((d.total - d.recomposed_total()).abs() <= 1e-9 * d.total.max(1.0));
        }
    }

    #[test]
    fn stub_is_deterministic() {
        let (pts, h) = grid_scene();
        let inst = frame(&h, 7, &[1, 50, 99]);
        let stub = LearnerStub::default();
        assert_eq!(
            stub.predict(&inst, &pts, 1).unwrap(),
            stub.predict(&inst, &pts, 1).unwrap()
        );
        assert_ne!(
            stub.predict(&inst, &pts, 1).unwrap(),
            stub.predict(&inst, &pts, 2).unwrap()
        );
    }

    #[test]
    fn loss_weights_serde() {
        let w: LossWeights = serde_json::from_str("[1, 1, 100000]").unwrap();
        assert_eq!(w, LossWeights::standard());
        assert_eq!(
            serde_json::to_string(&LossWeights::regression_only()).unwrap(),
            "[0.0,0.0,1.0]"
        );
        assert!(serde_json::from_str::<LossWeights>("[1]").is_err());
    }

    fn filled_buffer(n: usize, cap: usize) -> Buffer {
        let (_, h) = grid_scene();
        let mut buf = Buffer::new(cap);
        let mut r = RngHandle::new(0, "fill");
        let policy = BufferPolicy::new(Strategy::Reservoir);
        for i in 0..n {
            buf.observe(&policy, &frame(&h, i, &[i as u32]), Some(&h), &mut r)
                .unwrap();
        }
        buf
    }

    #[test]
    fn replay_batch_edges() {
        let mut r = RngHandle::new(0, "batch");
        assert!(matches!(
            sample_replay_batch(&Buffer::new(4), 1, &mut r),
            Err(Error::EmptyBuffer)
        ));
        let one = filled_buffer(1, 4);
        let b = sample_replay_batch(&one, 1, &mut r).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].instance.frame_index, 0);
        assert!(sample_replay_batch(&one, 0, &mut r).unwrap().is_empty());
        assert_eq!(sample_replay_batch(&one, 3, &mut r).unwrap().len(), 3);
        let four = filled_buffer(4, 4);
        let b = sample_replay_batch(&four, 4, &mut r).unwrap();
        let mut idx: Vec<usize> = b.iter().map(|e| e.instance.frame_index).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn replay_batch_uniform() {
        let buf = filled_buffer(256, 256);
        let mut r = RngHandle::new(1, "uniform-batch");
        let batches = 100_000;
        let mut counts = vec![0usize; 256];
        for _ in 0..batches {
            for e in sample_replay_batch(&buf, 8, &mut r).unwrap() {
                counts[e.instance.frame_index] += 1;
            }
        }
        let p = 8.0 / 256.0;
        let mean = batches as f64 * p;
        let sigma = (batches as f64 * p * (1.0 - p)).sqrt();
        // one slot in ~370 may sit beyond 3 sigma by chance; 4 sigma bounds all 256
        let beyond3 = counts
            .iter()
            .filter(|&&c| (c as f64 - mean).abs() > 3.0 * sigma)
            .count();
        assert!(beyond3 <= 3, "{beyond3} slots outside 3 sigma");
        assert!(counts.iter().all(|&c| (c as f64 - mean).abs() <= 4.5 * sigma));
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        let p_value = 1.0 - ChiSquared::new(255.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}");
    }
}
