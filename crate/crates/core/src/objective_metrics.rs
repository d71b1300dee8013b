//! Softmax cross-entropy (plain and class-weighted) and confusion-matrix
//! metrics: pixel accuracy, per-class IoU, mean IoU.

use serde::{Deserialize, Serialize};
use vocseg_nn::Tensor;

use crate::error::{Result, SegError};

/// Per-class loss weights `w_i = 1 - n_i / sum_j n_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(SegError::Invalid("class weights need at least one labelled pixel".into()));
    }
    Ok(ClassWeights {
        weights: counts.iter().map(|&n| 1.0 - n as f64 / total as f64).collect(),
    })
}

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub sums: LossSums,
    pub grad: Tensor,
}

fn check_inputs(logits: &Tensor, targets: &[u8], weights: Option<&ClassWeights>) -> Result<()> {
    let [n, c, h, w] = logits.shape();
    if targets.len() != n * h * w {
        return Err(SegError::Shape(format!(
            "{} targets for logits of shape ({n}, {c}, {h}, {w})",
            targets.len()
        )));
    }
    if let Some(weights) = weights {
        if weights.len() != c {
            return Err(SegError::Shape(format!("{} class weights for {c} classes", weights.len())));
        }
    }
    if let Some(pixel) = targets.iter().position(|&t| t as usize >= c) {
        return Err(SegError::ClassRange {
            class: targets[pixel],
            pixel,
        });
    }
    if !logits.all_finite() {
        return Err(SegError::NonFinite("logits".into()));
    }
    Ok(())
}

/// Weighted mean of `-w_y log softmax(z)_y` over all pixels, normalized by
/// the sum of applied weights; `None` means every weight is 1.
pub fn cross_entropy(logits: &Tensor, targets: &[u8], weights: Option<&ClassWeights>) -> Result<f64> {
    let sums = cross_entropy_sums(logits, targets, weights)?;
    Ok(sums.mean())
}

/// Numerator and denominator of the weighted mean, so losses over several
/// batches can be pooled exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub weighted_nll: f64,
    pub weight: f64,
}

impl LossSums {
    pub fn add(&mut self, other: LossSums) {
        self.weighted_nll += other.weighted_nll;
        self.weight += other.weight;
    }

    pub fn mean(&self) -> f64 {
        self.weighted_nll / self.weight
    }
}

pub fn cross_entropy_sums(logits: &Tensor, targets: &[u8], weights: Option<&ClassWeights>) -> Result<LossSums> {
    ce_impl(logits, targets, weights, false).map(|(sums, _)| sums)
}

/// [`cross_entropy`] plus the gradient with respect to `logits`.
pub fn cross_entropy_with_grad(logits: &Tensor, targets: &[u8], weights: Option<&ClassWeights>) -> Result<LossOutput> {
    let (sums, grad) = ce_impl(logits, targets, weights, true)?;
    Ok(LossOutput {
        loss: sums.mean(),
        sums,
        grad: grad.expect("gradient requested"),
    })
}

fn ce_impl(logits: &Tensor, targets: &[u8], weights: Option<&ClassWeights>, want_grad: bool) -> Result<(LossSums, Option<Tensor>)> {
    check_inputs(logits, targets, weights)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let data = logits.data();
    let mut grad = want_grad.then(|| Tensor::zeros(logits.shape()));
    let mut total = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for b in 0..n {
        let item = &data[b * c * plane..(b + 1) * c * plane];
        for p in 0..plane {
            let y = targets[b * plane + p] as usize;
            let wy = weights.map_or(1.0, |cw| cw.weights[y]);
            let max = (0..c).map(|k| item[k * plane + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut z = 0.0f64;
            for (k, prob) in probs.iter_mut().enumerate() {
                *prob = (item[k * plane + p] as f64 - max).exp();
                z += *prob;
            }
            let log_p = item[y * plane + p] as f64 - max - z.ln();
            total -= wy * log_p;
            weight_sum += wy;
            if let Some(g) = grad.as_mut() {
                let g = &mut g.data_mut()[b * c * plane..(b + 1) * c * plane];
                for (k, prob) in probs.iter().enumerate() {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    g[k * plane + p] = (wy * (prob / z - onehot)) as f32;
                }
            }
        }
    }
    if weight_sum <= 0.0 {
        return Err(SegError::Invalid("cross-entropy weights sum to zero over the batch".into()));
    }
    if let Some(g) = grad.as_mut() {
        let scale = (1.0 / weight_sum) as f32;
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    if !total.is_finite() {
        return Err(SegError::NonFinite("loss".into()));
    }
    Ok((
        LossSums {
            weighted_nll: total,
            weight: weight_sum,
        },
        grad,
    ))
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let item = &data[b * c * plane..(b + 1) * c * plane];
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if item[k * plane + p] > item[best * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// `counts[g * classes + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, predictions: &[u8], targets: &[u8]) -> Result<()> {
        if predictions.len() != targets.len() {
            return Err(SegError::Shape(format!(
                "{} predictions vs {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        for (pixel, (&p, &g)) in predictions.iter().zip(targets).enumerate() {
            for class in [p, g] {
                if class as usize >= self.classes {
                    return Err(SegError::ClassRange { class, pixel });
                }
            }
        }
        for (&p, &g) in predictions.iter().zip(targets) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(SegError::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(SegError::Invalid("pixel accuracy of an empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither predictions nor targets.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let denom = self.row_sum(c) + self.col_sum(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over the classes with a defined IoU.
    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(SegError::Invalid("mean IoU with no class present".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Loss and confusion-derived metrics for one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub iou_per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix, loss: f64) -> Result<Self> {
        Ok(Self {
            loss,
            pixel_accuracy: cm.pixel_accuracy()?,
            iou_per_class: cm.iou_per_class(),
            mean_iou: cm.mean_iou()?,
        })
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            loss: self.loss,
            pixel_accuracy: self.pixel_accuracy,
            mean_iou: self.mean_iou,
        }
    }
}

/// The three numbers logged per split and epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_from(classes: usize, pixels: &[Vec<f32>]) -> Tensor {
        // pixels[p][k] -> (1, k, 1, P)
        let p = pixels.len();
        let mut data = vec![0.0; classes * p];
        for (i, px) in pixels.iter().enumerate() {
            for k in 0..classes {
                data[k * p + i] = px[k];
            }
        }
        Tensor::from_vec([1, classes, 1, p], data).unwrap()
    }

    #[test]
    fn certain_predictions_cost_nothing() {
        let logits = logits_from(3, &[vec![100.0, 0.0, 0.0], vec![0.0, 0.0, 100.0]]);
        let loss = cross_entropy(&logits, &[0, 2], None).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn uniform_logits_give_ln_21() {
        let logits = Tensor::full([2, 21, 3, 3], 0.7);
        let targets: Vec<u8> = (0..18).map(|i| (i * 5 % 21) as u8).collect();
        let loss = cross_entropy(&logits, &targets, None).unwrap();
        assert!((loss - 21f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn weighted_mean_over_two_classes() {
        // p_correct = 0.5 at both pixels; weights (0.25, 0.75) -> ln 2.
        let logits = logits_from(2, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let w = class_weights(&[3, 1]).unwrap();
        assert_eq!(w.weights, vec![0.25, 0.75]);
        let loss = cross_entropy(&logits, &[0, 1], Some(&w)).unwrap();
        let expected = -(0.25 * 0.5f64.ln() + 0.75 * 0.5f64.ln()) / (0.25 + 0.75);
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = logits_from(3, &[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4], vec![-0.2, 0.0, 0.9]]);
        let targets = [2u8, 0, 1];
        let w = ClassWeights {
            weights: vec![0.2, 0.5, 0.9],
        };
        let out = cross_entropy_with_grad(&logits, &targets, Some(&w)).unwrap();
        let eps = 1e-3f32;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= eps;
            let fd = (cross_entropy(&plus, &targets, Some(&w)).unwrap() - cross_entropy(&minus, &targets, Some(&w)).unwrap())
                / (2.0 * eps as f64);
            assert!((fd - out.grad.data()[i] as f64).abs() < 1e-4, "logit {i}: {fd} vs {}", out.grad.data()[i]);
        }
    }

    #[test]
    fn ce_rejects_bad_inputs() {
        let logits = Tensor::full([1, 2, 1, 2], 0.0);
        assert!(matches!(cross_entropy(&logits, &[0], None), Err(SegError::Shape(_))));
        assert!(matches!(cross_entropy(&logits, &[0, 2], None), Err(SegError::ClassRange { .. })));
        let nan = Tensor::full([1, 2, 1, 2], f32::NAN);
        assert!(matches!(cross_entropy(&nan, &[0, 1], None), Err(SegError::NonFinite(_))));
    }

    #[test]
    fn weights_formula_cases() {
        let w = class_weights(&[5; 21]).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 20.0 / 21.0).abs() < 1e-15));
        assert!(class_weights(&[0; 21]).is_err());
    }

    #[test]
    fn confusion_cells() {
        let mut cm = ConfusionMatrix::new(21);
        cm.update(&[3; 10], &[3; 10]).unwrap();
        assert_eq!(cm.get(3, 3), 10);
        assert_eq!(cm.total(), 10);
        let mut cm = ConfusionMatrix::new(21);
        cm.update(&[0; 4], &[1; 4]).unwrap();
        assert_eq!(cm.get(1, 0), 4);
        assert!(matches!(cm.update(&[21], &[0]), Err(SegError::ClassRange { class: 21, .. })));
    }

    #[test]
    fn accuracy_cases() {
        // cm = [[3,1],[0,4]]
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 0, 0, 1, 1, 1, 1, 1], &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.875);
        let mut wrong = ConfusionMatrix::new(2);
        wrong.update(&[1, 0], &[0, 1]).unwrap();
        assert_eq!(wrong.pixel_accuracy().unwrap(), 0.0);
        assert!(ConfusionMatrix::new(21).pixel_accuracy().is_err());
    }

    #[test]
    fn iou_cases() {
        let mut cm = ConfusionMatrix::new(21);
        cm.update(&[5; 9], &[5; 9]).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou[5], Some(1.0));
        assert_eq!(iou.iter().flatten().count(), 1);
        assert_eq!(cm.mean_iou().unwrap(), 1.0);

        // Class 1: TP 2, FP 1, FN 1.
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[1, 1, 1, 0, 2], &[1, 1, 0, 1, 2]).unwrap();
        assert_eq!(cm.iou_per_class()[1], Some(0.5));

        let mut cm = ConfusionMatrix::new(21);
        cm.update(&[1, 1, 2, 2], &[1, 0, 2, 2]).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!((iou[0], iou[1], iou[2]), (Some(0.0), Some(0.5), Some(1.0)));
        assert_eq!(iou.iter().flatten().count(), 3);
        assert_eq!(cm.mean_iou().unwrap(), 0.5);
        assert!(ConfusionMatrix::new(21).mean_iou().is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let logits = logits_from(3, &[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0], vec![0.0, 0.0, 0.0]]);
        assert_eq!(argmax_classes(&logits), vec![0, 1, 0]);
    }
}
