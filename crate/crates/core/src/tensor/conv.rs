use crate::error::{config_err, dim_err, Result};

use super::Element;

/// Geometry of a 2-D convolution (cross-correlation, no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    /// 3×3 convolution whose output keeps the input extent at stride 1.
    pub fn same3x3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self::new(in_channels, out_channels, 3)
            .padding(dilation)
            .dilation(dilation)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.dilation.0 > 0
            && self.dilation.1 > 0;
        if ok {
            Ok(())
        } else {
            Err(config_err!("convolution spec has a zero extent: {self:?}"))
        }
    }

    /// Weight tensor shape: `[out, in, kh, kw]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// Weight shape of the transposed convolution: `[in, out, kh, kw]`.
    pub fn transpose_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel.0, self.kernel.1]
    }

    fn extent(size: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = size + 2 * p;
        if padded < span {
            None
        } else {
            Some((padded - span) / s + 1)
        }
    }

    /// Output `(H, W)` of the forward convolution.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = Self::extent(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = Self::extent(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(config_err!(
                "convolution {self:?} has no valid output position on a {h}x{w} input"
            )),
        }
    }

    /// Output `(H, W)` of the transposed convolution.
    pub fn transpose_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let grow = |size: usize, k: usize, s: usize, p: usize, d: usize| {
            ((size - 1) * s + d * (k - 1) + 1).checked_sub(2 * p).filter(|&x| x > 0)
        };
        let oh = grow(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = grow(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(config_err!(
                "transposed convolution {self:?} yields an empty output on a {h}x{w} input"
            )),
        }
    }

    pub(crate) fn check_weights(&self, shape: &[usize], transposed: bool) -> Result<()> {
        let want = if transposed {
            self.transpose_weight_shape()
        } else {
            self.weight_shape()
        };
        if shape != want {
            return Err(dim_err!("weight shape {shape:?} does not match {want:?} for {self:?}"));
        }
        Ok(())
    }
}

/// Spatial geometry shared by the column kernels: the "image" side has
/// extent `h×w`, the "column" side `oh×ow`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.spec.kernel.0 * self.spec.kernel.1
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when the column matrix is the image itself (1×1, unit stride, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.spec.kernel == (1, 1) && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }

    /// Visits every (column-matrix index, image index) pair inside the image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let (dh, dw) = self.spec.dilation;
        let ncols = self.cols();
        for c in 0..self.channels {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    for oi in 0..self.oh {
                        let y = (oi * sh + ki * dh) as isize - ph as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + y as usize) * self.w;
                        for oj in 0..self.ow {
                            let x = (oj * sw + kj * dw) as isize - pw as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            f(row * ncols + oi * self.ow + oj, base + x as usize);
                        }
                    }
                }
            }
        }
    }

    /// Gathers one image (`channels×h×w`) into a `rows×cols` column matrix.
    pub fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, ii| cols[ci] = image[ii]);
    }

    /// Scatter-adds a column matrix back onto an image.
    pub fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_tap(|ci, ii| image[ii] += cols[ci]);
    }
}

/// Forward convolution of a batch. `input` is `n×cin×h×w`, result `n×cout×oh×ow`.
pub(crate) fn conv2d_forward<T: Element>(
    input: &[T],
    n: usize,
    g: &Geometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let cout = g.spec.out_channels;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_stride = g.channels * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * ncols];
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * ncols }];
    for b in 0..n {
        let image = &input[b * in_stride..(b + 1) * in_stride];
        let src = if pointwise {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        let dst = &mut out[b * cout * ncols..(b + 1) * cout * ncols];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        T::gemm(cout, rows, ncols, weight, false, src, false, T::one(), dst);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Weight/bias gradients are accumulated
/// into the provided buffers; the input gradient is returned when asked for.
pub(crate) fn conv2d_backward<T: Element>(
    input: &[T],
    n: usize,
    g: &Geometry,
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
    want_input: bool,
) -> Option<Vec<T>> {
    let cout = g.spec.out_channels;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_stride = g.channels * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut grad_in = want_input.then(|| vec![T::zero(); n * in_stride]);
    let mut grad_weight = grad_weight;
    if let Some(gb) = grad_bias {
        for b in 0..n {
            let go = &grad_out[b * cout * ncols..(b + 1) * cout * ncols];
            for (o, chunk) in go.chunks(ncols).enumerate() {
                gb[o] += chunk.iter().copied().sum();
            }
        }
    }
    let pointwise = g.is_pointwise();
    for b in 0..n {
        let go = &grad_out[b * cout * ncols..(b + 1) * cout * ncols];
        let image = &input[b * in_stride..(b + 1) * in_stride];
        if let Some(gw) = grad_weight.as_deref_mut() {
            let src = if pointwise {
                image
            } else {
                g.im2col(image, &mut cols);
                &cols
            };
            // dW[cout, rows] += dY[cout, ncols] · cols[rows, ncols]^T
            T::gemm(cout, ncols, rows, go, false, src, true, T::one(), gw);
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[b * in_stride..(b + 1) * in_stride];
            // dcols[rows, ncols] = W[cout, rows]^T · dY[cout, ncols]
            if pointwise {
                T::gemm(rows, cout, ncols, weight, true, go, false, T::zero(), dst);
            } else {
                T::gemm(rows, cout, ncols, weight, true, go, false, T::zero(), &mut cols);
                g.col2im(&cols, dst);
            }
        }
    }
    grad_in
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with geometry
/// `g`, where `g.h×g.w` is the produced (larger) extent and `g.oh×g.ow` the
/// consumed one. `weight` is laid out `[cin, cout, kh, kw]` with
/// `g.channels == cout`.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    input: &[T],
    n: usize,
    g: &Geometry,
    cin: usize,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let cout = g.channels;
    let (rows, ncols) = (g.rows(), g.cols());
    let out_stride = cout * g.h * g.w;
    let mut out = vec![T::zero(); n * out_stride];
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let x = &input[b * cin * ncols..(b + 1) * cin * ncols];
        // cols[rows, ncols] = W[cin, rows]^T · x[cin, ncols]
        T::gemm(rows, cin, ncols, weight, true, x, false, T::zero(), &mut cols);
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        g.col2im(&cols, dst);
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(g.h * g.w).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    input: &[T],
    n: usize,
    g: &Geometry,
    cin: usize,
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
    want_input: bool,
) -> Option<Vec<T>> {
    let cout = g.channels;
    let (rows, ncols) = (g.rows(), g.cols());
    let out_stride = cout * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut grad_in = want_input.then(|| vec![T::zero(); n * cin * ncols]);
    let mut grad_weight = grad_weight;
    if let Some(gb) = grad_bias {
        for b in 0..n {
            let go = &grad_out[b * out_stride..(b + 1) * out_stride];
            for (o, chunk) in go.chunks(g.h * g.w).enumerate() {
                gb[o] += chunk.iter().copied().sum();
            }
        }
    }
    for b in 0..n {
        g.im2col(&grad_out[b * out_stride..(b + 1) * out_stride], &mut cols);
        let x = &input[b * cin * ncols..(b + 1) * cin * ncols];
        if let Some(gw) = grad_weight.as_deref_mut() {
            // dW[cin, rows] += x[cin, ncols] · cols[rows, ncols]^T
            T::gemm(cin, ncols, rows, x, false, &cols, true, T::one(), gw);
        }
        if let Some(gi) = grad_in.as_mut() {
            // dx[cin, ncols] = W[cin, rows] · cols[rows, ncols]
            let dst = &mut gi[b * cin * ncols..(b + 1) * cin * ncols];
            T::gemm(cin, rows, ncols, weight, false, &cols, false, T::zero(), dst);
        }
    }
    grad_in
}
