//! Linear probe: a single affine classifier trained on frozen embeddings,
//! reporting held-out accuracy. Low domain-probe accuracy means the
//! embedding hides the domain; high class-probe accuracy means it keeps
//! semantic content.

use rand::seq::SliceRandom;

use crate::error::{Result, UfdnError};
use crate::numerics::kernels;
use crate::numerics::Tensor;
use crate::rng::{self, stream};

const ITERATIONS: usize = 500;
const LEARNING_RATE: f64 = 0.1;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Full-batch gradient descent on multinomial logistic regression from zero
/// init: 500 iterations at lr 0.1 over a seed-fixed 80/20 split. The seed
/// affects only the split.
pub fn linear_probe(embeddings: &Tensor, labels: &[usize], seed: u64) -> Result<ProbeReport> {
    if embeddings.shape().len() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(UfdnError::Dimension(format!(
            "embeddings {:?} do not match {} labels",
            embeddings.shape(),
            labels.len()
        )));
    }
    let m = labels.len();
    let d = embeddings.shape()[1];
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    if classes < 2 {
        return Err(UfdnError::Validation(
            "linear probe needs at least two distinct classes".into(),
        ));
    }
    if m < 10 * classes {
        return Err(UfdnError::Validation(format!(
            "linear probe needs >= {} samples for {classes} classes, got {m}",
            10 * classes
        )));
    }

    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = rng::rng_for(seed, stream::PROBE_SPLIT, 0);
    order.shuffle(&mut rng);
    let n_train = ((m as f64) * TRAIN_FRACTION).floor() as usize;
    let (train_idx, held_idx) = order.split_at(n_train);

    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&embeddings.data()[i * d..(i + 1) * d]);
            y.push(labels[i]);
        }
        (x, y)
    };
    let (x_train, y_train) = gather(train_idx);
    let (x_held, y_held) = gather(held_idx);

    let mut weight = vec![0.0; d * classes];
    let mut bias = vec![0.0; classes];
    let inv_n = 1.0 / n_train as f64;
    for _ in 0..ITERATIONS {
        // logits = X W + b
        let mut logits = kernels::matmul_forward(&x_train, &weight, n_train, d, classes);
        for r in 0..n_train {
            for c in 0..classes {
                logits[r * classes + c] += bias[c];
            }
        }
        // residual = softmax - onehot, row-scaled by 1/n
        let mut resid = vec![0.0; n_train * classes];
        for r in 0..n_train {
            let row = &logits[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            for c in 0..classes {
                let p = (row[c] - mx).exp() / z;
                resid[r * classes + c] =
                    inv_n * (p - if y_train[r] == c { 1.0 } else { 0.0 });
            }
        }
        // dW = X^T resid; db = column sums of resid
        let dw = kernels::matmul_grad_b(&x_train, &resid, n_train, d, classes);
        for (w, g) in weight.iter_mut().zip(&dw) {
            *w -= LEARNING_RATE * g;
        }
        for c in 0..classes {
            let g: f64 = (0..n_train).map(|r| resid[r * classes + c]).sum();
            bias[c] -= LEARNING_RATE * g;
        }
    }

    let score = |x: &[f64], y: &[usize]| -> f64 {
        let n = y.len();
        let mut logits = kernels::matmul_forward(x, &weight, n, d, classes);
        let mut correct = 0usize;
        for r in 0..n {
            let mut best = 0usize;
            for c in 0..classes {
                logits[r * classes + c] += bias[c];
                if logits[r * classes + c] > logits[r * classes + best] {
                    best = c;
                }
            }
            if best == y[r] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    };
    Ok(ProbeReport {
        train_accuracy: score(&x_train, &y_train),
        heldout_accuracy: score(&x_held, &y_held),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn blobs(per_class: usize, separation: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let d = 8;
        let mut rng = rng_for(seed, 0x99, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for class in 0..2usize {
            let center = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
            for _ in 0..per_class {
                for j in 0..d {
                    let c = if j == 0 { center } else { 0.0 };
                    x.push(c + rng::normal(&mut rng));
                }
                y.push(class);
            }
        }
        (Tensor::from_vec(&[2 * per_class, d], x).unwrap(), y)
    }

    #[test]
    fn separable_blobs_are_learned() {
        // 6-sigma separation between class means.
        let (x, y) = blobs(60, 6.0, 1);
        let report = linear_probe(&x, &y, 7).unwrap();
        assert!(
            report.heldout_accuracy > 0.99,
            "held-out {}",
            report.heldout_accuracy
        );
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let (x, mut y) = blobs(100, 6.0, 2);
        // Random labels.
        let mut rng = rng_for(3, 0x9A, 0);
        for l in y.iter_mut() {
            *l = rng.random_range(0..2);
        }
        let report = linear_probe(&x, &y, 11).unwrap();
        assert!(
            (report.heldout_accuracy - 0.5).abs() <= 0.05 + 0.07,
            "held-out {} should be near chance",
            report.heldout_accuracy
        );
    }

    #[test]
    fn deterministic_in_seed() {
        let (x, y) = blobs(40, 2.0, 4);
        let a = linear_probe(&x, &y, 5).unwrap();
        let b = linear_probe(&x, &y, 5).unwrap();
        assert_eq!(a.heldout_accuracy, b.heldout_accuracy);
        assert_eq!(a.train_accuracy, b.train_accuracy);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let x = Tensor::zeros(&[30, 4]);
        let y = vec![0usize; 30];
        assert!(matches!(
            linear_probe(&x, &y, 1),
            Err(UfdnError::Validation(_))
        ));
        let y2: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let tiny = Tensor::zeros(&[10, 4]);
        assert!(linear_probe(&tiny, &y2[..10].to_vec(), 1).is_err());
    }
}
