//! Precision/recall curves, F-measure, MAE and the summaries built on them.
//!
//! Conventions:
//! - a pixel is foreground at threshold `t` when `P ≥ t`;
//! - precision is 1 when nothing is predicted, recall is 1 when the mask is empty;
//! - F is 0 when its denominator vanishes.

use std::io::Write;

use crate::error::{Error, Result};
use crate::loss::laplace_edge_map;
use crate::tensor::Tensor;

pub const NUM_THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
/// Edge maps are binarized at this level for the boundary F-measure.
pub const EDGE_THRESHOLD: f64 = 0.5;

/// `k/255` for `k = 0..=255`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

fn check_pair(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::Metric(format!(
            "prediction shape {:?} differs from mask shape {:?}",
            p.shape(),
            y.shape()
        )));
    }
    if let Some(v) = y.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Metric(format!("mask is not binary (found {v})")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn pr_at_threshold(p: &Tensor, y: &Tensor, t: f64) -> Result<(f64, f64)> {
    check_pair(p, y)?;
    let (mut tp, mut predicted, mut positive) = (0, 0, 0);
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        let b = pv >= t;
        let g = yv == 1.0;
        tp += (b && g) as usize;
        predicted += b as usize;
        positive += g as usize;
    }
    Ok((ratio(tp, predicted), ratio(tp, positive)))
}

pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// Mean absolute error of one image.
pub fn mae(p: &Tensor, y: &Tensor) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(Error::Metric(format!(
            "prediction shape {:?} differs from mask shape {:?}",
            p.shape(),
            y.shape()
        )));
    }
    if p.is_empty() {
        return Err(Error::Metric("empty image".into()));
    }
    let sum: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / p.len() as f64)
}

/// Number of thresholds `k/255` that `p` reaches, i.e. one past the largest such `k`.
fn thresholds_reached(p: f64) -> usize {
    let mut k = (p * 255.0).floor().clamp(-1.0, 255.0) as isize;
    while k < 255 && p >= threshold((k + 1) as usize) {
        k += 1;
    }
    while k >= 0 && p < threshold(k as usize) {
        k -= 1;
    }
    (k + 1) as usize
}

/// Precision and recall of one image at all 256 thresholds.
pub fn pr_curve(p: &Tensor, y: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(p, y)?;
    // Histogram by the highest threshold reached, then suffix sums give |B| and |B∧Y|.
    let mut pred_hist = [0usize; NUM_THRESHOLDS + 1];
    let mut tp_hist = [0usize; NUM_THRESHOLDS + 1];
    let mut positive = 0;
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        let r = thresholds_reached(pv);
        pred_hist[r] += 1;
        if yv == 1.0 {
            tp_hist[r] += 1;
            positive += 1;
        }
    }
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    let (mut predicted, mut tp) = (0, 0);
    for k in (0..NUM_THRESHOLDS).rev() {
        predicted += pred_hist[k + 1];
        tp += tp_hist[k + 1];
        precision[k] = ratio(tp, predicted);
        recall[k] = ratio(tp, positive);
    }
    Ok((precision, recall))
}

/// Per-image adaptive threshold: twice the mean saliency, capped at 1.
pub fn adaptive_threshold(p: &Tensor) -> f64 {
    let mean = p.data().iter().sum::<f64>() / p.len().max(1) as f64;
    (2.0 * mean).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// F-measure of the averaged precision and recall at each threshold.
    pub f_curve: Vec<f64>,
    pub max_f: f64,
    /// Mean over images of F at each image's adaptive threshold.
    pub adaptive_f: f64,
    pub mae: f64,
    pub n_images: usize,
}

pub fn evaluate_dataset(pairs: &[(Tensor, Tensor)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Metric("no image/mask pairs to evaluate".into()));
    }
    let n = pairs.len() as f64;
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    let (mut adaptive_f, mut total_mae) = (0.0, 0.0);
    for (p, y) in pairs {
        let (pc, rc) = pr_curve(p, y)?;
        for k in 0..NUM_THRESHOLDS {
            precision[k] += pc[k];
            recall[k] += rc[k];
        }
        let (ap, ar) = pr_at_threshold(p, y, adaptive_threshold(p))?;
        adaptive_f += f_measure(ap, ar, BETA2);
        total_mae += mae(p, y)?;
    }
    precision
        .iter_mut()
        .chain(recall.iter_mut())
        .for_each(|v| *v /= n);
    let f_curve: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| f_measure(p, r, BETA2))
        .collect();
    let max_f = f_curve.iter().copied().fold(0.0, f64::max);
    Ok(MetricsReport {
        precision,
        recall,
        f_curve,
        max_f,
        adaptive_f: adaptive_f / n,
        mae: total_mae / n,
        n_images: pairs.len(),
    })
}

/// F-measure of edge maps: the Laplace edge responses of prediction and mask
/// are binarized at [`EDGE_THRESHOLD`] and F is averaged over images.
/// Inputs are single-channel maps shaped `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
pub fn boundary_f_measure(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("no image/mask pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for (p, y) in pairs {
        check_pair(p, y)?;
        let as_map = |t: &Tensor| -> Result<Tensor> {
            let (h, w) = match t.shape() {
                [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
                s => {
                    return Err(Error::Metric(format!(
                        "expected a single map, got shape {s:?}"
                    )))
                }
            };
            Ok(laplace_edge_map(&t.clone().reshape(&[1, 1, h, w])?)?)
        };
        let edge_p = as_map(p)?;
        let edge_y = as_map(y)?.map(|v| if v >= EDGE_THRESHOLD { 1.0 } else { 0.0 });
        let (prec, rec) = pr_at_threshold(&edge_p, &edge_y, EDGE_THRESHOLD)?;
        total += f_measure(prec, rec, BETA2);
    }
    Ok(total / pairs.len() as f64)
}

/// `threshold,precision,recall,f_measure` with 256 rows.
pub fn write_curve_csv(report: &MetricsReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "threshold,precision,recall,f_measure")?;
    for k in 0..NUM_THRESHOLDS {
        writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6}",
            threshold(k),
            report.precision[k],
            report.recall[k],
            report.f_curve[k]
        )?;
    }
    Ok(())
}

/// `metric,value` rows for max_f, adaptive_f and mae.
pub fn write_summary_csv(report: &MetricsReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "metric,value")?;
    writeln!(out, "max_f,{:.6}", report.max_f)?;
    writeln!(out, "adaptive_f,{:.6}", report.adaptive_f)?;
    writeln!(out, "mae,{:.6}", report.mae)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn four_pixel_case() {
        let (p, r) =
            pr_at_threshold(&t(&[0.9, 0.4, 0.6, 0.1]), &t(&[1.0, 1.0, 0.0, 0.0]), 0.5).unwrap();
        assert_eq!((p, r), (0.5, 0.5));
    }

    #[test]
    fn empty_prediction_convention() {
        let (p, r) = pr_at_threshold(&t(&[0.4; 4]), &t(&[1.0, 0.0, 0.0, 1.0]), 0.5).unwrap();
        assert_eq!((p, r), (1.0, 0.0));
        let (_, r) = pr_at_threshold(&t(&[0.9; 2]), &t(&[0.0; 2]), 0.5).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn perfect_prediction() {
        let y = t(&[1.0, 0.0, 1.0, 1.0, 0.0]);
        for k in 1..NUM_THRESHOLDS {
            assert_eq!(pr_at_threshold(&y, &y, threshold(k)).unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        assert!(pr_at_threshold(&t(&[0.5]), &t(&[0.5]), 0.5).is_err());
        assert!(pr_at_threshold(&t(&[0.5, 0.1]), &t(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn f_measure_values() {
        assert_eq!(f_measure(1.0, 1.0, BETA2), 1.0);
        assert!((f_measure(0.8, 0.6, BETA2) - 0.742857).abs() < 1e-6);
        assert_eq!(f_measure(0.0, 0.0, BETA2), 0.0);
    }

    #[test]
    fn mae_values() {
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y.map(|v| 1.0 - v), &y).unwrap(), 1.0);
        assert_eq!(mae(&t(&[0.25; 4]), &t(&[0.0; 4])).unwrap(), 0.25);
        assert!(mae(&t(&[0.0; 3]), &y).is_err());
    }

    #[test]
    fn thresholds_reached_matches_comparisons() {
        for k in 0..NUM_THRESHOLDS {
            let edge = threshold(k);
            for p in [
                edge,
                f64::from_bits(edge.to_bits().saturating_sub(1)),
                edge + 1e-12,
            ] {
                let brute = (0..NUM_THRESHOLDS).filter(|&j| p >= threshold(j)).count();
                assert_eq!(thresholds_reached(p), brute, "p={p:e}");
            }
        }
        assert_eq!(thresholds_reached(-0.5), 0);
        assert_eq!(thresholds_reached(2.0), NUM_THRESHOLDS);
    }

    #[test]
    fn single_perfect_pair() {
        let y = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let r = evaluate_dataset(&[(y.clone(), y)]).unwrap();
        assert_eq!(r.max_f, 1.0);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.adaptive_f, 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(evaluate_dataset(&[]).is_err());
        assert!(boundary_f_measure(&[]).is_err());
    }

    #[test]
    fn boundary_f_of_perfect_map() {
        let y = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i / 8) >= 4) as u8 as f64);
        assert_eq!(boundary_f_measure(&[(y.clone(), y.clone())]).unwrap(), 1.0);
        let blank = Tensor::zeros(&[1, 1, 8, 8]);
        assert_eq!(boundary_f_measure(&[(blank, y.clone())]).unwrap(), 0.0);
        let mask_layout = y.reshape(&[1, 8, 8]).unwrap();
        assert_eq!(
            boundary_f_measure(&[(mask_layout.clone(), mask_layout)]).unwrap(),
            1.0
        );
        let multi = Tensor::zeros(&[2, 8, 8]);
        assert!(boundary_f_measure(&[(multi.clone(), multi)]).is_err());
    }

    #[test]
    fn csv_layout() {
        let y = Tensor::from_fn(&[2, 2], |i| (i % 2) as f64);
        let r = evaluate_dataset(&[(y.clone(), y)]).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split_terminator('\n').collect();
        assert_eq!(lines.len(), 257);
        assert_eq!(lines[0], "threshold,precision,recall,f_measure");
        assert_eq!(lines[1], "0.000000,0.500000,1.000000,0.565217");
        assert_eq!(lines[256], "1.000000,1.000000,1.000000,1.000000");
        assert!(!text.contains('\r'));
        let mut buf = Vec::new();
        write_summary_csv(&r, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "metric,value\nmax_f,1.000000\nadaptive_f,1.000000\nmae,0.000000\n"
        );
    }
}
