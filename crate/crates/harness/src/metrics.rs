use anyhow::{bail, ensure, Result};
use bgdb_core::block::Task;
use bgdb_core::tensor::no_grad;
use bgdb_core::Tensor;
use serde::{Deserialize, Serialize};

/// `2 |A and B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    ensure!(pred.len() == truth.len(), "dice: {} predictions for {} labels", pred.len(), truth.len());
    let inter = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let total = pred.iter().filter(|p| **p).count() + truth.iter().filter(|t| **t).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mean IoU over the classes present in either map.
pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    ensure!(pred.len() == truth.len(), "miou: {} predictions for {} labels", pred.len(), truth.len());
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        ensure!(p < classes && t < classes, "class index out of range");
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = inter.iter().zip(&union).filter(|(_, &u)| u > 0).map(|(&i, &u)| i as f64 / u as f64).collect();
    Ok(if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    ensure!(pred.len() == truth.len() && !pred.is_empty(), "accuracy: mismatched or empty inputs");
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney rank statistic, ties given
/// their average rank. `None` when either class is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    ensure!(scores.len() == positive.len(), "auc: {} scores for {} labels", scores.len(), positive.len());
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// Evaluation metrics; `None` where a metric does not apply.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub dice: Option<f64>,
    pub miou: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

/// Per-position class decisions and class probabilities from logits of shape
/// `[n, classes, ..]`; a single channel is read as a sigmoid foreground score.
fn decisions(logits: &Tensor) -> Result<(Vec<usize>, Vec<Vec<f64>>, usize)> {
    let s = logits.shape();
    ensure!(s.len() >= 2, "logits need a class axis, got {s:?}");
    let (n, k) = (s[0], s[1]);
    let rest: usize = s[2..].iter().product();
    let probs = if k == 1 { logits.sigmoid() } else { logits.softmax(1)? };
    let p = probs.data();
    let classes = k.max(2);
    let mut pred = Vec::with_capacity(n * rest);
    let mut scores = vec![Vec::with_capacity(n * rest); classes];
    for b in 0..n {
        for r in 0..rest {
            let at = |c: usize| p[(b * k + c) * rest + r];
            if k == 1 {
                pred.push(usize::from(at(0) >= 0.5));
                scores[0].push(1.0 - at(0));
                scores[1].push(at(0));
            } else {
                let best = (0..k).fold(0, |best, c| if at(c) > at(best) { c } else { best });
                pred.push(best);
                for (c, col) in scores.iter_mut().enumerate() {
                    col.push(at(c));
                }
            }
        }
    }
    Ok((pred, scores, classes))
}

fn label_classes(labels: &Tensor) -> Vec<usize> {
    let s = labels.shape();
    let (n, k) = (s[0], s[1]);
    let rest: usize = s[2..].iter().product();
    let y = labels.data();
    let mut out = Vec::with_capacity(n * rest);
    for b in 0..n {
        for r in 0..rest {
            let at = |c: usize| y[(b * k + c) * rest + r];
            out.push(if k == 1 {
                usize::from(at(0) >= 0.5)
            } else {
                (0..k).fold(0, |best, c| if at(c) > at(best) { c } else { best })
            });
        }
    }
    out
}

/// Metrics of `logits` against one-hot or binary `labels`.
///
/// Segmentation Dice is the per-image mean over foreground classes; mIoU and
/// pixel accuracy pool every pixel. AUC is one-vs-rest, macro-averaged when
/// there are more than two classes.
pub fn evaluate(logits: &Tensor, labels: &Tensor, task: Task) -> Result<EvalMetrics> {
    if logits.shape() != labels.shape() {
        bail!("logits {:?} and labels {:?} differ in shape", logits.shape(), labels.shape());
    }
    let (pred, scores, classes) = no_grad(|| decisions(logits))?;
    let truth = label_classes(labels);
    let aucs: Vec<f64> = (1..classes)
        .filter(|&c| classes > 2 || c == 1)
        .map(|c| {
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            auc(&scores[c], &positive)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let macro_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    let mut metrics = EvalMetrics { accuracy: Some(accuracy(&pred, &truth)?), auc: macro_auc, ..Default::default() };
    if task == Task::Segmentation {
        let n = logits.shape()[0];
        let per_image = pred.len() / n;
        let mut total = 0.0;
        for b in 0..n {
            let range = b * per_image..(b + 1) * per_image;
            let mut image = 0.0;
            for c in 1..classes {
                let p: Vec<bool> = pred[range.clone()].iter().map(|&v| v == c).collect();
                let t: Vec<bool> = truth[range.clone()].iter().map(|&v| v == c).collect();
                image += dice(&p, &t)?;
            }
            total += image / (classes - 1) as f64;
        }
        metrics.dice = Some(total / n as f64);
        metrics.miou = Some(miou(&pred, &truth, classes)?);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_cases() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dice(&a, &[true]).is_err());
    }

    #[test]
    fn half_overlap_on_four_by_four() {
        // Left half versus the middle two columns: 4 shared pixels of 8 + 8.
        let left: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let middle: Vec<bool> = (0..16).map(|i| (1..3).contains(&(i % 4))).collect();
        assert_eq!(dice(&left, &middle).unwrap(), 0.5);
    }

    #[test]
    fn miou_cases() {
        let t = [0, 0, 1, 1];
        assert_eq!(miou(&t, &t, 2).unwrap(), 1.0);
        // class 0: 1 / 2, class 1: 1 / 2
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap(), 1.0 / 3.0);
        // class 2 never appears and is skipped
        assert_eq!(miou(&t, &t, 3).unwrap(), 1.0);
    }

    #[test]
    fn auc_rank_statistic() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
        // Pairwise count: (0.3 > 0.2), (0.3 > 0.1), (0.15 < 0.2), (0.15 > 0.1) -> 3 of 4.
        assert_eq!(auc(&[0.3, 0.15, 0.2, 0.1], &[true, true, false, false]).unwrap(), Some(0.75));
    }

    #[test]
    fn perfect_segmentation_scores_one() {
        let mask = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], &[2, 1, 2, 2]).unwrap();
        let logits = mask.mul_scalar(20.0).add_scalar(-10.0);
        let m = evaluate(&logits, &mask, Task::Segmentation).unwrap();
        assert_eq!((m.dice, m.miou, m.accuracy, m.auc), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn classification_metrics() {
        let labels = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[3, 2]).unwrap();
        let logits = Tensor::new(vec![2.0, 0.0, 0.0, 2.0, 0.0, 1.0], &[3, 2]).unwrap();
        let m = evaluate(&logits, &labels, Task::Classification).unwrap();
        assert_eq!(m.dice, None);
        assert!((m.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(m.auc.unwrap() >= 0.0 && m.auc.unwrap() <= 1.0);
    }
}
