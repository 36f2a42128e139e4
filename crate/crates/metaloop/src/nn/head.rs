//! Classifier-head surgery.
//!
//! Both operations exist because softmax classification only sees logit
//! *differences*: adding one common vector to every head row (plus bias)
//! shifts all logits equally and changes nothing. Centering removes that
//! free direction; orthonormalizing pins the head geometry completely.

use crate::tensor::Array;

use super::{NnError, ParameterSet, Result, HEAD_GROUP};

/// Rows whose Gram-Schmidt residual falls below this are treated as linearly
/// dependent and redrawn.
const DEGENERATE: f64 = 1e-9;
const MAX_REDRAWS: usize = 8;

/// Replace the head weight rows with an orthonormal set (Gram-Schmidt over
/// the current rows, in f64) and zero the head biases.
///
/// A row that is (numerically) a combination of the previous rows is redrawn
/// from the head's init distribution, at most 8 times in total; running out
/// of redraws is an error. Requires `n <= d`. Deterministic in `seed`.
pub fn orthonormalize_head(params: &mut ParameterSet, seed: u64) -> Result<()> {
    let d_total = params.config.feature_dim()?;
    let head = params.group_mut(HEAD_GROUP).expect("parameter sets end in a head group");
    let w = head.params.iter_mut().find(|p| p.name == "w").expect("head has a weight");
    let shape = w.value.shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    debug_assert_eq!(d, d_total);
    if n > d {
        return Err(NnError::HeadTooWide { n, d });
    }

    let mut rows: Vec<Vec<f64>> = w.value.to_f64_vec().chunks(d).map(|r| r.to_vec()).collect();
    let mut rng = crate::seeded_rng(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let mut redraws = 0;

    let mut i = 0;
    while i < n {
        // Modified Gram-Schmidt, applied twice: the second pass clears the
        // rounding left by the first, pinning pairwise dots near 1e-16.
        for _pass in 0..2 {
            for j in 0..i {
                let proj: f64 = dot(&rows[i], &rows[j]);
                let prev = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(&prev) {
                    *a -= proj * b;
                }
            }
        }
        let norm = dot(&rows[i], &rows[i]).sqrt();
        if norm < DEGENERATE {
            if redraws >= MAX_REDRAWS {
                return Err(NnError::OrthonormalizeFailed { retries: MAX_REDRAWS });
            }
            redraws += 1;
            rows[i] = (0..d).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)).collect();
            continue; // retry this row
        }
        for a in rows[i].iter_mut() {
            *a /= norm;
        }
        i += 1;
    }

    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let precision = w.value.precision();
    w.value = Array::from_f64_values(precision, shape, &flat);

    let b = head.params.iter_mut().find(|p| p.name == "b").expect("head has a bias");
    b.value = Array::zeros(precision, b.value.shape().to_vec());
    Ok(())
}

/// Subtract the mean head row from every row, and the mean bias from every
/// bias. The removed component is exactly the softmax-invariant direction,
/// so predictions are unchanged while the head's free drift is pinned to
/// zero mean.
pub fn center_head(params: &mut ParameterSet) {
    let head = params.group_mut(HEAD_GROUP).expect("parameter sets end in a head group");

    let w = head.params.iter_mut().find(|p| p.name == "w").expect("head has a weight");
    let shape = w.value.shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    let mut vals = w.value.to_f64_vec();
    for col in 0..d {
        let mean: f64 = (0..n).map(|r| vals[r * d + col]).sum::<f64>() / n as f64;
        for r in 0..n {
            vals[r * d + col] -= mean;
        }
    }
    let precision = w.value.precision();
    w.value = Array::from_f64_values(precision, shape, &vals);

    let b = head.params.iter_mut().find(|p| p.name == "b").expect("head has a bias");
    let mut bias = b.value.to_f64_vec();
    let mean: f64 = bias.iter().sum::<f64>() / n as f64;
    for v in bias.iter_mut() {
        *v -= mean;
    }
    b.value = Array::from_f64_values(precision, b.value.shape().to_vec(), &bias);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
