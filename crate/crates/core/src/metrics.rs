//! Point and ensemble forecast scores.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

fn paired(pred: &Tensor, truth: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(shape_mismatch(op, pred.shape(), truth.shape()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyTensor(op));
    }
    Ok(())
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    paired(pred, truth, "mae")?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(p, y)| (p - y).abs()).sum();
    Ok(s / truth.len() as f64)
}

pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    paired(pred, truth, "rmse")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((s / truth.len() as f64).sqrt())
}

/// Checks an ensemble `[m, …]` against truth `[…]`; returns `m`.
fn ensemble_points(ensemble: &Tensor, truth: &Tensor, op: &'static str) -> Result<usize> {
    if ensemble.rank() != truth.rank() + 1 || ensemble.shape()[1..] != *truth.shape() {
        return Err(shape_mismatch(op, ensemble.shape(), truth.shape()));
    }
    if truth.is_empty() || ensemble.dim(0) == 0 {
        return Err(Error::EmptyTensor(op));
    }
    Ok(ensemble.dim(0))
}

fn sorted_members(ensemble: &Tensor, point: usize, stride: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(ensemble.data().iter().skip(point).step_by(stride).copied());
    buf.sort_by(f64::total_cmp);
}

/// CRPS of the empirical distribution of the members against one value:
/// `(1/m)Σ|x_i − y| − (1/2m²)Σ_{i,j}|x_i − x_j|`, with the pair sum taken
/// from the sorted members as `2Σ_i (2i − m + 1)x_(i)`.
pub fn crps_sorted(sorted: &[f64], y: f64) -> f64 {
    let m = sorted.len() as f64;
    let abs_err: f64 = sorted.iter().map(|x| (x - y).abs()).sum();
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * i as f64 - m + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    abs_err / m - pair / (2.0 * m * m)
}

/// Empirical CRPS averaged over all target points.
pub fn crps_empirical(ensemble: &Tensor, truth: &Tensor) -> Result<f64> {
    ensemble_points(ensemble, truth, "crps")?;
    let n = truth.len();
    let mut buf = Vec::new();
    let mut total = 0.0;
    for (p, &y) in truth.data().iter().enumerate() {
        sorted_members(ensemble, p, n, &mut buf);
        total += crps_sorted(&buf, y);
    }
    Ok(total / n as f64)
}

/// Linear-interpolation quantile of sorted data (position `q·(m−1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Interval score of `[lower, upper]` at level `alpha` for observation `y`.
pub fn interval_score(lower: f64, upper: f64, y: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / alpha * (lower - y);
    }
    if y > upper {
        s += 2.0 / alpha * (y - upper);
    }
    s
}

/// Mean interval score of the empirical `alpha/2` and `1 − alpha/2`
/// quantile band.
pub fn mis(ensemble: &Tensor, truth: &Tensor, alpha: f64) -> Result<f64> {
    let m = ensemble_points(ensemble, truth, "mis")?;
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("alpha {alpha} outside (0, 1)")));
    }
    let n = truth.len();
    let mut buf = Vec::new();
    let mut total = 0.0;
    for (p, &y) in truth.data().iter().enumerate() {
        sorted_members(ensemble, p, n, &mut buf);
        let lo = quantile_sorted(&buf, alpha / 2.0);
        let hi = quantile_sorted(&buf, 1.0 - alpha / 2.0);
        total += interval_score(lo, hi, y, alpha);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Of the ensemble mean.
    pub mae: f64,
    /// Of the ensemble mean.
    pub rmse: f64,
    pub crps: f64,
    pub mis: f64,
    /// CRPS divided by the mean absolute truth.
    pub crps_normalized: f64,
    pub n_points: usize,
    pub n_samples: usize,
    pub interval_alpha: f64,
}

/// All scores of an ensemble `[m, …]` against truth `[…]`. MIS needs two
/// members and is reported as NaN for a single-member ensemble.
pub fn evaluate(ensemble: &Tensor, truth: &Tensor, alpha: f64) -> Result<EvalReport> {
    let m = ensemble_points(ensemble, truth, "evaluate")?;
    let mean = crate::sampler::ensemble_mean(ensemble);
    let crps = crps_empirical(ensemble, truth)?;
    let scale = truth.data().iter().map(|y| y.abs()).sum::<f64>() / truth.len() as f64;
    Ok(EvalReport {
        mae: mae(&mean, truth)?,
        rmse: rmse(&mean, truth)?,
        crps,
        mis: if m >= 2 { mis(ensemble, truth, alpha)? } else { f64::NAN },
        crps_normalized: if scale > 0.0 { crps / scale } else { f64::NAN },
        n_points: truth.len(),
        n_samples: m,
        interval_alpha: alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec())
    }

    #[test]
    fn point_metric_hand_values() {
        assert_eq!(mae(&t(&[0.0, 0.0]), &t(&[1.0, 3.0])).unwrap(), 2.0);
        assert_eq!(rmse(&t(&[0.0, 0.0]), &t(&[3.0, 4.0])).unwrap(), 12.5f64.sqrt());
        assert_eq!(mae(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert!(mae(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
        assert!(mae(&t(&[]), &t(&[])).is_err());
    }

    #[test]
    fn crps_hand_values() {
        let ens = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]);
        assert!((crps_empirical(&ens, &t(&[1.0])).unwrap() - 0.5).abs() < 1e-15);
        let one = Tensor::from_vec(&[1, 2], vec![0.5, 3.0]);
        let truth = t(&[1.0, 1.0]);
        assert_eq!(crps_empirical(&one, &truth).unwrap(), 1.25);
    }

    #[test]
    fn mis_hand_values() {
        assert_eq!(interval_score(0.0, 1.0, 2.0, 0.05), 41.0);
        assert_eq!(interval_score(0.0, 1.0, 0.5, 0.05), 1.0);
        let ens = Tensor::from_vec(&[1, 1], vec![0.0]);
        assert_eq!(
            mis(&ens, &t(&[0.0]), 0.05),
            Err(Error::TooFewSamples { needed: 2, got: 1 })
        );
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted(&s, 0.125), 0.5);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
    }
}
