//! Dilated 2-D convolution via im2col + GEMM.

use super::gemm::{gemm, MatRef};
use crate::error::TensorError;

/// Padding policy for [`conv2d`](super::Graph::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output keeps the input's spatial size. Stride 1 and odd kernels only.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvOptions {
    pub fn same() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        Self {
            dilation,
            ..Self::same()
        }
    }

    pub fn valid() -> Self {
        Self {
            padding: Padding::Valid,
            ..Self::same()
        }
    }
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self::same()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], opts: ConvOptions) -> Result<Self, TensorError> {
        let [n, cin, h, w] = *input else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: input.to_vec(),
            });
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(TensorError::Rank {
                op: "conv2d(weight)",
                expected: 4,
                shape: weight.to_vec(),
            });
        };
        if wcin != cin {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dim: "input channels (Cin)",
                left: cin,
                right: wcin,
            });
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!(
                    "stride ({}) and dilation ({}) must be at least 1",
                    opts.stride, opts.dilation
                ),
            });
        }
        if kh == 0 || kw == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "empty kernel".into(),
            });
        }
        let ext_h = opts.dilation * (kh - 1) + 1;
        let ext_w = opts.dilation * (kw - 1) + 1;
        let (pad_h, pad_w, oh, ow) = match opts.padding {
            Padding::Same => {
                if opts.stride != 1 {
                    return Err(TensorError::Invalid {
                        op: "conv2d",
                        msg: format!("same padding requires stride 1, got {}", opts.stride),
                    });
                }
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::Invalid {
                        op: "conv2d",
                        msg: format!("same padding requires odd kernel sizes, got {kh}x{kw}"),
                    });
                }
                ((ext_h - 1) / 2, (ext_w - 1) / 2, h, w)
            }
            Padding::Valid => {
                if ext_h > h {
                    return Err(TensorError::DimMismatch {
                        op: "conv2d",
                        dim: "height (kernel extent vs input)",
                        left: ext_h,
                        right: h,
                    });
                }
                if ext_w > w {
                    return Err(TensorError::DimMismatch {
                        op: "conv2d",
                        dim: "width (kernel extent vs input)",
                        left: ext_w,
                        right: w,
                    });
                }
                (
                    0,
                    0,
                    (h - ext_h) / opts.stride + 1,
                    (w - ext_w) / opts.stride + 1,
                )
            }
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: opts.stride,
            dilation: opts.dilation,
            pad_h,
            pad_w,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(
        o: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pad: usize,
        size: usize,
    ) -> Option<usize> {
        let pos = (o * stride + k * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// Output columns `[lo, hi)` whose tap `k` lands inside a row of width `w` (stride 1).
    #[inline]
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let shift = k * self.dilation;
        let lo = self.pad_w.saturating_sub(shift).min(self.ow);
        let hi = (self.w + self.pad_w).saturating_sub(shift).min(self.ow);
        (lo, hi.max(lo))
    }

    /// Unfolds one image `[Cin, H, W]` into `cols[Cin*kh*kw, oh*ow]`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let chan = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) =
                            Self::src(oy, ki, self.stride, self.dilation, self.pad_h, self.h)
                        else {
                            line.fill(0.0);
                            continue;
                        };
                        let src_row = &chan[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            line[..lo].fill(0.0);
                            line[hi..].fill(0.0);
                            if hi > lo {
                                let start = lo + kj * self.dilation - self.pad_w;
                                line[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, v) in line.iter_mut().enumerate() {
                            *v = match Self::src(
                                ox,
                                kj,
                                self.stride,
                                self.dilation,
                                self.pad_w,
                                self.w,
                            ) {
                                Some(ix) => src_row[ix],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols` back onto an image gradient, accumulating.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let chan = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let Some(iy) =
                            Self::src(oy, ki, self.stride, self.dilation, self.pad_h, self.h)
                        else {
                            continue;
                        };
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst_row = &mut chan[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            if hi > lo {
                                let start = lo + kj * self.dilation - self.pad_w;
                                for (d, g) in dst_row[start..start + hi - lo]
                                    .iter_mut()
                                    .zip(&line[lo..hi])
                                {
                                    *d += g;
                                }
                            }
                            continue;
                        }
                        for (ox, &g) in line.iter().enumerate() {
                            if let Some(ix) =
                                Self::src(ox, kj, self.stride, self.dilation, self.pad_w, self.w)
                            {
                                dst_row[ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(
    geom: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = geom.cin * geom.h * geom.w;
    let plane = geom.out_plane();
    let k = geom.patch_len();
    let mut out = vec![0.0; geom.n * geom.cout * plane];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * plane]
    };
    let wmat = MatRef::row_major(weight, geom.cout, k);
    for img in 0..geom.n {
        let x = &input[img * in_len..(img + 1) * in_len];
        let o = &mut out[img * geom.cout * plane..(img + 1) * geom.cout * plane];
        if let Some(b) = bias {
            for (co, row) in o.chunks_exact_mut(plane).enumerate() {
                row.fill(b[co]);
            }
        }
        let patches = if geom.is_pointwise() {
            x
        } else {
            geom.im2col(x, &mut cols);
            &cols
        };
        gemm(wmat, MatRef::row_major(patches, k, plane), 1.0, o);
    }
    out
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    geom: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let in_len = geom.cin * geom.h * geom.w;
    let plane = geom.out_plane();
    let k = geom.patch_len();
    let out_len = geom.cout * plane;
    let mut dx = need[0].then(|| vec![0.0; input.len()]);
    let mut dw = need[1].then(|| vec![0.0; weight.len()]);
    let mut db = need[2].then(|| vec![0.0; geom.cout]);
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { k * plane }];
    let mut dcols = vec![0.0; if need[0] { k * plane } else { 0 }];
    let wmat = MatRef::row_major(weight, geom.cout, k);
    for img in 0..geom.n {
        let go = &grad_out[img * out_len..(img + 1) * out_len];
        let gmat = MatRef::row_major(go, geom.cout, plane);
        if let Some(db) = db.as_mut() {
            for (co, row) in go.chunks_exact(plane).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let x = &input[img * in_len..(img + 1) * in_len];
            let patches = if geom.is_pointwise() {
                x
            } else {
                geom.im2col(x, &mut cols);
                &cols
            };
            gemm(gmat, MatRef::row_major(patches, k, plane).t(), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[img * in_len..(img + 1) * in_len];
            if geom.is_pointwise() {
                gemm(wmat.t(), gmat, 1.0, dimg);
            } else {
                gemm(wmat.t(), gmat, 0.0, &mut dcols);
                geom.col2im(&dcols, dimg);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
