//! Saliency and boundary losses.
//!
//! The saliency term is a class-balanced binary cross-entropy. The boundary
//! term compares Laplacian edge maps of the prediction and of the ground
//! truth: `edge(M) = tanh(|M * K|)` with the 4-neighbour kernel
//! `[[0,1,0],[1,-4,1],[0,1,0]]` under zero padding. Ground-truth edges stay
//! soft (values in `[0, 1)`), and the boundary term carries no class balance.

use crate::autodiff::{ConvOptions, Graph, Reduction, Var};
use crate::error::{Error, Result, TensorError};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA_S: f64 = 0.528;
pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of positive pixels in the saliency term (negatives get `1 - alpha_s`).
    pub alpha_s: f64,
    /// Mixing weight: `alpha * saliency + (1 - alpha) * boundary`.
    pub alpha: f64,
    pub clamp_eps: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_s: DEFAULT_ALPHA_S,
            alpha: 1.0,
            clamp_eps: DEFAULT_CLAMP_EPS,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_s) {
            return Err(Error::Config(format!(
                "alpha_s {} outside [0, 1]",
                self.alpha_s
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "clamp_eps {} outside (0, 0.5)",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

pub fn weighted_bce(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    alpha_s: f64,
    eps: f64,
    reduction: Reduction,
) -> Result<Var, TensorError> {
    g.binary_cross_entropy(pred, target, alpha_s, 1.0 - alpha_s, eps, reduction)
}

pub fn laplace_kernel() -> Tensor {
    Tensor::new(
        vec![1, 1, 3, 3],
        vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    )
    .expect("3x3 kernel")
}

/// Differentiable boundary map of a single-channel map `[N, 1, H, W]`.
pub fn laplace_edge(g: &mut Graph, map: Var) -> Result<Var, TensorError> {
    let (_, c, _, _) = g.value(map).dims4("laplace_edge")?;
    if c != 1 {
        return Err(TensorError::Invalid {
            op: "laplace_edge",
            msg: format!("expected a single-channel map, got {c} channels"),
        });
    }
    let kernel = g.constant(laplace_kernel());
    let response = g.conv2d(map, kernel, None, ConvOptions::same())?;
    let magnitude = g.abs(response);
    Ok(g.tanh(magnitude))
}

/// Boundary map of a plain tensor, outside any training graph.
pub fn laplace_edge_map(map: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    let e = laplace_edge(&mut g, m)?;
    Ok(g.value(e).clone())
}

/// Cross-entropy between the edge maps of `pred` and of `target`.
pub fn edge_bce(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    eps: f64,
    reduction: Reduction,
) -> Result<Var, TensorError> {
    if g.value(pred).shape() != target.shape() {
        return Err(TensorError::Invalid {
            op: "edge_bce",
            msg: format!(
                "prediction {:?} vs target {:?}",
                g.value(pred).shape(),
                target.shape()
            ),
        });
    }
    let target_edges = laplace_edge_map(target)?;
    let pred_edges = laplace_edge(g, pred)?;
    g.binary_cross_entropy(pred_edges, &target_edges, 1.0, 1.0, eps, reduction)
}

/// Handles to the two loss terms and their mix.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub saliency: Var,
    pub boundary: Var,
    pub total: Var,
}

pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let saliency = weighted_bce(g, pred, target, cfg.alpha_s, cfg.clamp_eps, cfg.reduction)?;
    let boundary = edge_bce(g, pred, target, cfg.clamp_eps, cfg.reduction)?;
    let a = g.scale(saliency, cfg.alpha);
    let b = g.scale(boundary, 1.0 - cfg.alpha);
    let total = g.add(a, b)?;
    Ok(LossTerms {
        saliency,
        boundary,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(p: f64, y: f64) -> f64 {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::scalar(p));
        let l = weighted_bce(&mut g, pv, &Tensor::scalar(y), 0.528, 1e-7, Reduction::Sum).unwrap();
        g.value(l).item()
    }

    #[test]
    fn single_pixel_values() {
        assert_abs_diff_eq!(
            single(0.5, 1.0),
            0.528 * std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(single(0.5, 1.0), 0.365_982, epsilon = 1e-6);
        assert_abs_diff_eq!(
            single(0.5, 0.0),
            0.472 * std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(single(0.5, 0.0), 0.327_165, epsilon = 1e-6);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(y.clone());
        let l = weighted_bce(&mut g, p, &y, 0.528, 1e-7, Reduction::Sum).unwrap();
        let bound = 2.0 * 0.528 * -(1.0f64 - 1e-7).ln() + 2.0 * 0.472 * -(1.0f64 - 1e-7).ln();
        assert!(g.value(l).item() <= bound + 1e-18);
    }

    #[test]
    fn mean_is_sum_over_count() {
        let y = Tensor::from_fn(&[1, 1, 3, 3], |i| (i % 2) as f64);
        let p = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.1 + 0.08 * i as f64);
        let mut g = Graph::new();
        let pv = g.constant(p);
        let s = weighted_bce(&mut g, pv, &y, 0.528, 1e-7, Reduction::Sum).unwrap();
        let m = weighted_bce(&mut g, pv, &y, 0.528, 1e-7, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(g.value(s).item() / 9.0, g.value(m).item(), epsilon = 1e-15);
    }

    #[test]
    fn balanced_weight_is_half_standard_bce() {
        let y = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
        let p = Tensor::from_fn(&[1, 1, 4, 4], |i| 0.05 + 0.05 * i as f64);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let half = weighted_bce(&mut g, pv, &y, 0.5, 1e-7, Reduction::Sum).unwrap();
        let standard: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        assert_abs_diff_eq!(g.value(half).item(), 0.5 * standard, epsilon = 1e-12);
    }

    #[test]
    fn constant_map_has_no_edges() {
        let e = laplace_edge_map(&Tensor::full(&[1, 1, 6, 6], 0.7)).unwrap();
        // Zero padding makes the border respond; the interior must be flat.
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(e.data()[y * 6 + x], 0.0);
            }
        }
    }

    #[test]
    fn impulse_response() {
        let mut m = Tensor::zeros(&[1, 1, 5, 5]);
        m.data_mut()[12] = 1.0;
        let e = laplace_edge_map(&m).unwrap();
        let d = e.data();
        assert_abs_diff_eq!(d[12], 4f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(d[12], 0.99933, epsilon = 1e-5);
        for i in [7, 11, 13, 17] {
            assert_abs_diff_eq!(d[i], 1f64.tanh(), epsilon = 1e-15);
            assert_abs_diff_eq!(d[i], 0.76159, epsilon = 1e-5);
        }
        for i in [6, 8, 16, 18, 2, 10, 14, 22, 0] {
            assert_eq!(d[i], 0.0);
        }
    }

    #[test]
    fn vertical_step_response() {
        // columns 0..3 are 0, columns 3..6 are 1
        let m = Tensor::from_fn(&[1, 1, 6, 6], |i| if i % 6 >= 3 { 1.0 } else { 0.0 });
        let e = laplace_edge_map(&m).unwrap();
        for y in 1..5 {
            let row = &e.data()[y * 6..(y + 1) * 6];
            assert_abs_diff_eq!(row[2], 1f64.tanh(), epsilon = 1e-15);
            assert_abs_diff_eq!(row[3], 1f64.tanh(), epsilon = 1e-15);
            assert_eq!(row[0], 0.0);
            assert_eq!(row[1], 0.0);
            assert_eq!(row[4], 0.0);
        }
    }

    #[test]
    fn laplace_edge_rejects_multichannel() {
        assert!(laplace_edge_map(&Tensor::zeros(&[1, 2, 4, 4])).is_err());
    }

    #[test]
    fn edge_bce_of_identical_maps_is_target_entropy() {
        let y = Tensor::from_fn(&[1, 1, 6, 6], |i| {
            if (i % 6) >= 2 && (i / 6) >= 2 {
                1.0
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let p = g.constant(y.clone());
        let l = edge_bce(&mut g, p, &y, 1e-7, Reduction::Sum).unwrap();
        let edges = laplace_edge_map(&y).unwrap();
        let entropy: f64 = edges
            .data()
            .iter()
            .map(|&t| {
                let tc = t.clamp(1e-7, 1.0 - 1e-7);
                -(t * tc.ln() + (1.0 - t) * (1.0 - tc).ln())
            })
            .sum();
        assert_abs_diff_eq!(g.value(l).item(), entropy, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_mixes_terms() {
        let y = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4) >= 2) as u8 as f64);
        let p = Tensor::from_fn(&[1, 1, 4, 4], |i| 0.2 + 0.04 * i as f64);
        for alpha in [0.0, 0.7, 1.0] {
            let mut g = Graph::new();
            let pv = g.constant(p.clone());
            let cfg = LossConfig::default().with_alpha(alpha);
            let t = total_loss(&mut g, pv, &y, &cfg).unwrap();
            let (s, b) = (g.value(t.saliency).item(), g.value(t.boundary).item());
            let total = g.value(t.total).item();
            assert_abs_diff_eq!(total, alpha * s + (1.0 - alpha) * b, epsilon = 1e-12);
            if alpha == 1.0 {
                assert_eq!(total, s);
            }
            if alpha == 0.0 {
                assert_eq!(total, b);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig::default().with_alpha(1.5).validate().is_err());
        let bad_eps = LossConfig {
            clamp_eps: 0.5,
            ..LossConfig::default()
        };
        assert!(bad_eps.validate().is_err());
    }
}
