//! Loss functions: softmax cross-entropy, the knowledge-distillation
//! mixture, and the batch-norm sparsity penalty.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable per-row softmax of `(batch, classes, 1, 1)` logits.
fn softmax_rows<E: Element>(logits: &Tensor<E>, temperature: E) -> Vec<E> {
    let s = logits.shape();
    let classes = s.channels;
    let mut probs = vec![E::zero(); s.batch * classes];
    for b in 0..s.batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let mut max = E::neg_infinity();
        for &v in row {
            let v = v / temperature;
            if v > max {
                max = v;
            }
        }
        let mut denom = E::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = ((v / temperature) - max).exp();
            probs[b * classes + c] = e;
            denom += e;
        }
        for c in 0..classes {
            probs[b * classes + c] /= denom;
        }
    }
    probs
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// gradient w.r.t. the logits.
pub fn cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(E, Tensor<E>)> {
    let s = logits.shape();
    let classes = s.channels;
    if labels.len() != s.batch {
        return Err(Error::LengthMismatch {
            at: String::from("cross_entropy"),
            expected: s.batch,
            got: labels.len(),
        });
    }
    for &l in labels {
        if l >= classes {
            return Err(Error::IndexOutOfRange {
                at: String::from("cross_entropy label"),
                index: l,
                limit: classes,
            });
        }
    }
    let probs = softmax_rows(logits, E::one());
    let inv_batch = E::one() / E::from_usize(s.batch);
    let mut loss = E::zero();
    let mut grad = Tensor::zeros(s);
    for (b, &label) in labels.iter().enumerate() {
        let p = probs[b * classes + label];
        loss -= p.max(E::from_f64(1e-300)).ln();
        for c in 0..classes {
            let indicator = if c == label { E::one() } else { E::zero() };
            grad.data_mut()[b * classes + c] = (probs[b * classes + c] - indicator) * inv_batch;
        }
    }
    Ok((loss * inv_batch, grad))
}

/// Inplace knowledge-distillation loss:
///
/// ```text
/// alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T))
///   + (1 - alpha) * cross_entropy(student, labels)
/// ```
///
/// The teacher tensor is treated as a constant: the returned gradient is
/// w.r.t. the student logits only.
pub fn inplace_kd_loss<E: Element>(
    student_logits: &Tensor<E>,
    teacher_logits: &Tensor<E>,
    labels: &[usize],
    temperature: E,
    alpha: E,
) -> Result<(E, Tensor<E>)> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Dimension {
            at: String::from("inplace_kd_loss"),
            detail: String::from("student and teacher logits differ in shape"),
        });
    }
    let (ce, ce_grad) = cross_entropy(student_logits, labels)?;
    let s = student_logits.shape();
    let classes = s.channels;
    let p_teacher = softmax_rows(teacher_logits, temperature);
    let p_student = softmax_rows(student_logits, temperature);
    let inv_batch = E::one() / E::from_usize(s.batch);
    let t2 = temperature * temperature;
    let mut kl = E::zero();
    for b in 0..s.batch {
        for c in 0..classes {
            let p = p_teacher[b * classes + c];
            if p > E::zero() {
                let q = p_student[b * classes + c].max(E::from_f64(1e-300));
                kl += p * (p.ln() - q.ln());
            }
        }
    }
    kl = kl * inv_batch;
    let loss = alpha * t2 * kl + (E::one() - alpha) * ce;
    let mut grad = Tensor::zeros(s);
    // d(T^2 * KL)/d(student) = T * (softmax(student/T) - softmax(teacher/T))
    let scale = alpha * temperature * inv_batch;
    for i in 0..s.batch * classes {
        grad.data_mut()[i] =
            scale * (p_student[i] - p_teacher[i]) + (E::one() - alpha) * ce_grad.data()[i];
    }
    Ok((loss, grad))
}

/// L1 penalty value over a gamma vector: `lambda * sum(|gamma|)`.
pub fn l1_penalty<E: Element>(gammas: &[E], lambda: E) -> E {
    let mut acc = E::zero();
    for &g in gammas {
        acc += g.abs();
    }
    lambda * acc
}

/// Subgradient of the L1 penalty, with sign(0) defined as 0.
pub fn l1_subgradient<E: Element>(g: E, lambda: E) -> E {
    if g > E::zero() {
        lambda
    } else if g < E::zero() {
        -lambda
    } else {
        E::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        for classes in [2usize, 3, 10] {
            let logits = Tensor::<f64>::zeros(Shape::new(1, classes, 1, 1));
            let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        logits.data_mut()[1] = 100.0;
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn random_cross_entropy_matches_direct_formula() {
        let logits = Tensor::<f64>::from_vec(
            Shape::new(1, 3, 1, 1),
            alloc::vec![0.3, -1.2, 2.0],
        );
        let (loss, _) = cross_entropy(&logits, &[2]).unwrap();
        let z: f64 = (0.3f64).exp() + (-1.2f64).exp() + (2.0f64).exp();
        let direct = -((2.0f64).exp() / z).ln();
        assert!((loss - direct).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn kd_with_alpha_zero_is_cross_entropy() {
        let s = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), alloc::vec![0.5, 1.0, -0.3]);
        let t = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), alloc::vec![9.0, -2.0, 1.0]);
        let (ce, ce_grad) = cross_entropy(&s, &[1]).unwrap();
        let (kd, kd_grad) = inplace_kd_loss(&s, &t, &[1], 2.0, 0.0).unwrap();
        assert!((ce - kd).abs() < 1e-12);
        assert!(ce_grad.max_abs_diff(&kd_grad) < 1e-12);
    }

    #[test]
    fn kd_with_matching_teacher_reduces_to_weighted_ce() {
        let s = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), alloc::vec![0.5, 1.0, -0.3]);
        let (ce, _) = cross_entropy(&s, &[0]).unwrap();
        let (kd, _) = inplace_kd_loss(&s, &s.clone(), &[0], 3.0, 0.7).unwrap();
        assert!((kd - 0.3 * ce).abs() < 1e-12);
    }

    #[test]
    fn kd_hand_case_matches_direct_evaluation() {
        // 3 classes, T = 2, alpha = 0.9, single sample.
        let student = alloc::vec![1.0f64, 0.0, -1.0];
        let teacher = alloc::vec![0.5f64, 0.5, 2.0];
        let t = 2.0f64;
        let alpha = 0.9f64;
        let soft = |v: &[f64]| {
            let e: alloc::vec::Vec<f64> = v.iter().map(|x| (x / t).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<alloc::vec::Vec<f64>>()
        };
        let p = soft(&teacher);
        let q = soft(&student);
        let kl: f64 = p
            .iter()
            .zip(q.iter())
            .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
            .sum();
        let z: f64 = student.iter().map(|x| x.exp()).sum();
        let ce = -(student[1].exp() / z).ln();
        let expected = alpha * t * t * kl + (1.0 - alpha) * ce;
        let st = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), student);
        let tt = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), teacher);
        let (loss, _) = inplace_kd_loss(&st, &tt, &[1], t, alpha).unwrap();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn l1_penalty_examples() {
        assert_eq!(l1_penalty::<f64>(&[0.0, 0.0], 0.5), 0.0);
        let v = l1_penalty::<f64>(&[1.0, -2.0], 0.1);
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(l1_subgradient(0.0f64, 0.1), 0.0);
        assert_eq!(l1_subgradient(2.0f64, 0.1), 0.1);
        assert_eq!(l1_subgradient(-2.0f64, 0.1), -0.1);
    }
}
