//! 2-D convolution lowered onto GEMM through im2col.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, gemm_nt, MatrixDims, TileConfig};
use crate::tensor::{Shape4, Tensor};

/// Zero border widths on each side of the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Pad {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: Pad,
}

fn out_len(len: usize, before: usize, after: usize, k: usize, stride: usize, axis: &str) -> Result<usize> {
    let padded = len + before + after;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "{axis} {len} with padding {before}+{after}, kernel {k} and stride {stride} \
             does not give a whole number of outputs; adjust the padding"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: (usize, usize), stride: usize, padding: usize) -> Result<Self> {
        ConvSpec::with_pad(out_channels, kernel, stride, Pad::uniform(padding))
    }

    pub fn with_pad(out_channels: usize, kernel: (usize, usize), stride: usize, pad: Pad) -> Result<Self> {
        if out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "convolution needs positive filters, kernel and stride \
                 (got {out_channels} filters, kernel {kernel:?}, stride {stride})"
            )));
        }
        Ok(ConvSpec {
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        Ok((
            out_len(h, self.pad.top, self.pad.bottom, kh, self.stride, "height")?,
            out_len(w, self.pad.left, self.pad.right, kw, self.stride, "width")?,
        ))
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel.0 * self.kernel.1
    }
}

/// Lowers `x` (N×C×H×W) to a `(C·kh·kw) × (N·H'·W')` matrix whose column
/// `p` is the receptive field of output position `p`.
pub fn im2col(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let s = x.shape4()?;
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let cols = im2col_raw(x.data(), s, spec, oh, ow);
    Tensor::new(vec![spec.patch_len(s.c), s.n * oh * ow], cols)
}

fn im2col_raw(x: &[f64], s: Shape4, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let plane = oh * ow;
    let ncols = s.n * plane;
    let mut out = vec![0.0; spec.patch_len(s.c) * ncols];
    for c in 0..s.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for n in 0..s.n {
                    let src = &x[(n * s.c + c) * s.h * s.w..(n * s.c + c + 1) * s.h * s.w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - spec.pad.top as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let dst = &mut dst_row[n * plane + oy * ow..n * plane + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - spec.pad.left as isize;
                            if ix >= 0 && ix < s.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds a column matrix back onto the input grid (adjoint of im2col).
fn col2im(cols: &[f64], s: Shape4, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let plane = oh * ow;
    let ncols = s.n * plane;
    let mut dx = vec![0.0; s.numel()];
    for c in 0..s.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..s.n {
                    let base = (n * s.c + c) * s.h * s.w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - spec.pad.top as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let dst = &mut dx[base + iy as usize * s.w..base + (iy as usize + 1) * s.w];
                        let src = &src_row[n * plane + oy * ow..n * plane + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - spec.pad.left as isize;
                            if ix >= 0 && ix < s.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: Shape4,
    cols: Vec<f64>,
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub d_input: Option<Tensor>,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

fn check_params(x: Shape4, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<()> {
    let (kh, kw) = spec.kernel;
    let expected = [spec.out_channels, x.c, kh, kw];
    if weights.shape() != expected {
        return Err(Error::DimensionMismatch(format!(
            "conv weights have shape {:?}, expected {:?} for {} input channels",
            weights.shape(),
            expected,
            x.c
        )));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::DimensionMismatch(format!(
            "conv bias has shape {:?}, expected [{}]",
            bias.shape(),
            spec.out_channels
        )));
    }
    Ok(())
}

pub fn conv2d_forward(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    cfg: TileConfig,
) -> Result<Tensor> {
    conv2d_forward_cached(x, weights, bias, spec, cfg).map(|(y, _)| y)
}

pub fn conv2d_forward_cached(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    cfg: TileConfig,
) -> Result<(Tensor, ConvCache)> {
    let s = x.shape4()?;
    check_params(s, weights, bias, spec)?;
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let k = spec.out_channels;
    let plane = oh * ow;
    let cols = im2col_raw(x.data(), s, spec, oh, ow);
    let dims = MatrixDims {
        m: k,
        n: spec.patch_len(s.c),
        w: s.n * plane,
    };
    let prod = gemm(weights.data(), &cols, dims, cfg);
    // K × (N·H'·W') → N×K×H'×W'
    let mut out = vec![0.0; s.n * k * plane];
    for (f, &b) in bias.data().iter().enumerate() {
        for n in 0..s.n {
            let src = &prod[f * dims.w + n * plane..f * dims.w + (n + 1) * plane];
            let dst = &mut out[(n * k + f) * plane..(n * k + f + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    let y = Tensor::new(vec![s.n, k, oh, ow], out)?;
    Ok((
        y,
        ConvCache {
            input_shape: s,
            cols,
            out_hw: (oh, ow),
        },
    ))
}

pub fn conv2d_backward(
    cache: &ConvCache,
    weights: &Tensor,
    spec: &ConvSpec,
    upstream: &Tensor,
    need_input_grad: bool,
    cfg: TileConfig,
) -> Result<ConvGrads> {
    let s = cache.input_shape;
    let (oh, ow) = cache.out_hw;
    let k = spec.out_channels;
    let plane = oh * ow;
    if upstream.shape() != [s.n, k, oh, ow] {
        return Err(Error::DimensionMismatch(format!(
            "conv upstream gradient has shape {:?}, expected {:?}",
            upstream.shape(),
            [s.n, k, oh, ow]
        )));
    }
    let patch = spec.patch_len(s.c);
    let ncols = s.n * plane;

    // N×K×H'×W' → K × (N·H'·W')
    let g = upstream.data();
    let mut g_mat = vec![0.0; k * ncols];
    let mut d_bias = vec![0.0; k];
    for n in 0..s.n {
        for f in 0..k {
            let src = &g[(n * k + f) * plane..(n * k + f + 1) * plane];
            g_mat[f * ncols + n * plane..f * ncols + (n + 1) * plane].copy_from_slice(src);
            d_bias[f] += src.iter().sum::<f64>();
        }
    }

    let d_w = gemm_nt(&g_mat, &cache.cols, k, ncols, patch);

    let d_input = if need_input_grad {
        let w_t = weights.reshaped(&[k, patch])?.transpose()?;
        let d_cols = gemm(
            w_t.data(),
            &g_mat,
            MatrixDims {
                m: patch,
                n: k,
                w: ncols,
            },
            cfg,
        );
        Some(Tensor::new(s.to_vec(), col2im(&d_cols, s, spec, oh, ow))?)
    } else {
        None
    };

    Ok(ConvGrads {
        d_input,
        d_weights: Tensor::new(weights.shape().to_vec(), d_w)?,
        d_bias: Tensor::new(vec![k], d_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one() -> TileConfig {
        TileConfig::new(8, 1).unwrap()
    }

    /// Brute-force patch extractor over an explicitly zero-bordered copy.
    fn patches_oracle(x: &Tensor, spec: &ConvSpec) -> Vec<Vec<f64>> {
        let s = x.shape4().unwrap();
        let (ph, pw) = (s.h + spec.pad.top + spec.pad.bottom, s.w + spec.pad.left + spec.pad.right);
        let mut padded = vec![0.0; s.n * s.c * ph * pw];
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        padded[((n * s.c + c) * ph + y + spec.pad.top) * pw + xx + spec.pad.left] =
                            x.get(&[n, c, y, xx]).unwrap();
                    }
                }
            }
        }
        let (oh, ow) = spec.output_hw(s.h, s.w).unwrap();
        let mut columns = Vec::new();
        for n in 0..s.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut col = Vec::new();
                    for c in 0..s.c {
                        for ki in 0..spec.kernel.0 {
                            for kj in 0..spec.kernel.1 {
                                let y = oy * spec.stride + ki;
                                let xx = ox * spec.stride + kj;
                                col.push(padded[((n * s.c + c) * ph + y) * pw + xx]);
                            }
                        }
                    }
                    columns.push(col);
                }
            }
        }
        columns
    }

    fn columns_of(m: &Tensor) -> Vec<Vec<f64>> {
        let [r, c] = m.dims2().unwrap();
        (0..c).map(|j| (0..r).map(|i| m.data()[i * c + j]).collect()).collect()
    }

    /// Direct six-loop convolution.
    pub(crate) fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
        let s = x.shape4().unwrap();
        let (oh, ow) = spec.output_hw(s.h, s.w).unwrap();
        let k = spec.out_channels;
        let mut out = Tensor::zeros(&[s.n, k, oh, ow]).unwrap();
        let o = out.data_mut();
        for n in 0..s.n {
            for f in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..s.c {
                            for ki in 0..spec.kernel.0 {
                                for kj in 0..spec.kernel.1 {
                                    let y = (oy * spec.stride + ki) as isize - spec.pad.top as isize;
                                    let xx = (ox * spec.stride + kj) as isize - spec.pad.left as isize;
                                    if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                                        continue;
                                    }
                                    acc += x.get(&[n, c, y as usize, xx as usize]).unwrap()
                                        * w.get(&[f, c, ki, kj]).unwrap();
                                }
                            }
                        }
                        o[((n * k + f) * oh + oy) * ow + ox] = acc + b.data()[f];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_2x2_stride_2() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 + 1.0).unwrap();
        let spec = ConvSpec::new(1, (2, 2), 2, 0).unwrap();
        let cols = im2col(&x, &spec).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        let expected = vec![
            vec![1.0, 2.0, 5.0, 6.0],
            vec![3.0, 4.0, 7.0, 8.0],
            vec![9.0, 10.0, 13.0, 14.0],
            vec![11.0, 12.0, 15.0, 16.0],
        ];
        assert_eq!(columns_of(&cols), expected);
        assert_eq!(patches_oracle(&x, &spec), expected);
    }

    #[test]
    fn whole_image_kernel_gives_one_column() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64).unwrap();
        let spec = ConvSpec::new(1, (3, 3), 1, 0).unwrap();
        let cols = im2col(&x, &spec).unwrap();
        assert_eq!(cols.shape(), &[18, 1]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn padded_border_columns_hold_zeros() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 + 1.0).unwrap();
        let spec = ConvSpec::new(1, (3, 3), 1, 1).unwrap();
        let cols = im2col(&x, &spec).unwrap();
        assert_eq!(cols.shape(), &[9, 16]);
        let got = columns_of(&cols);
        assert_eq!(got, patches_oracle(&x, &spec));
        // Top-left output: first row and column of the window fall in the border.
        assert_eq!(got[0], vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn non_integral_output_is_rejected() {
        let spec = ConvSpec::new(1, (2, 2), 2, 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        let err = im2col(&x, &spec).unwrap_err();
        assert!(err.to_string().contains("adjust the padding"));
    }

    #[test]
    fn zero_filters_give_zero_maps() {
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| i as f64).unwrap();
        let spec = ConvSpec::new(4, (3, 3), 1, 1).unwrap();
        let w = Tensor::zeros(&[4, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = conv2d_forward(&x, &w, &b, &spec, one()).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_filter_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 2.0).unwrap();
        let spec = ConvSpec::new(1, (1, 1), 1, 0).unwrap();
        let w = Tensor::filled(&[1, 1, 1, 1], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, &b, &spec, one()).unwrap(), x);
    }

    #[test]
    fn constant_input_box_filter() {
        let x = Tensor::filled(&[1, 1, 4, 4], 5.0).unwrap();
        let spec = ConvSpec::new(1, (2, 2), 1, 0).unwrap();
        let w = Tensor::filled(&[1, 1, 2, 2], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_forward(&x, &w, &b, &spec, one()).unwrap();
        assert_eq!(y, direct_conv(&x, &w, &b, &spec));
        assert_eq!(y, Tensor::filled(&[1, 1, 3, 3], 20.0).unwrap());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let spec = ConvSpec::new(1, (3, 3), 1, 1).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, &b, &spec, one()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    /// d/dW[f,c,ki,kj] of Σ upstream·y written straight from the definition.
    #[test]
    fn filter_gradient_matches_direct_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[1, 1, 5, 5], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let w = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let spec = ConvSpec::new(1, (3, 3), 1, 0).unwrap();
        let (y, cache) = conv2d_forward_cached(&x, &w, &b, &spec, one()).unwrap();
        let up = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0)).unwrap();
        let grads = conv2d_backward(&cache, &w, &spec, &up, true, one()).unwrap();
        for ki in 0..3 {
            for kj in 0..3 {
                let mut expected = 0.0;
                for oy in 0..3 {
                    for ox in 0..3 {
                        expected += up.get(&[0, 0, oy, ox]).unwrap() * x.get(&[0, 0, oy + ki, ox + kj]).unwrap();
                    }
                }
                let got = grads.d_weights.get(&[0, 0, ki, kj]).unwrap();
                assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
            }
        }
        assert!((grads.d_bias.data()[0] - up.sum()).abs() < 1e-12);
        // Input gradient: full correlation of upstream with the flipped filter.
        let dx = grads.d_input.unwrap();
        for y0 in 0..5 {
            for x0 in 0..5 {
                let mut expected = 0.0;
                for oy in 0..3 {
                    for ox in 0..3 {
                        if y0 >= oy && x0 >= ox && y0 - oy < 3 && x0 - ox < 3 {
                            expected += up.get(&[0, 0, oy, ox]).unwrap() * w.get(&[0, 0, y0 - oy, x0 - ox]).unwrap();
                        }
                    }
                }
                assert!((dx.get(&[0, 0, y0, x0]).unwrap() - expected).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn output_size_law(h in 1usize..30, w in 1usize..30, kh in 1usize..6, kw in 1usize..6,
                           stride in 1usize..4, pad in 0usize..3) {
            let spec = ConvSpec::new(2, (kh, kw), stride, pad).unwrap();
            match spec.output_hw(h, w) {
                Ok((oh, ow)) => {
                    prop_assert_eq!(oh, (h + 2 * pad - kh) / stride + 1);
                    prop_assert_eq!(ow, (w + 2 * pad - kw) / stride + 1);
                    prop_assert_eq!((h + 2 * pad - kh) % stride, 0);
                    let x = Tensor::zeros(&[1, 1, h, w]).unwrap();
                    let wts = Tensor::zeros(&[2, 1, kh, kw]).unwrap();
                    let b = Tensor::zeros(&[2]).unwrap();
                    let y = conv2d_forward(&x, &wts, &b, &spec, one()).unwrap();
                    prop_assert_eq!(y.shape(), &[1, 2, oh, ow]);
                }
                Err(_) => {
                    let padded = h + 2 * pad;
                    let bad_h = padded < kh || (padded - kh) % stride != 0;
                    let padded = w + 2 * pad;
                    let bad_w = padded < kw || (padded - kw) % stride != 0;
                    prop_assert!(bad_h || bad_w);
                }
            }
        }

        #[test]
        fn float_conv_tracks_direct_loops(seed in any::<u64>(), pad in 0usize..2, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[2, 2, 6, 6], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let w = Tensor::from_fn(&[3, 2, k, k], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let b = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let spec = ConvSpec::new(3, (k, k), 1, pad).unwrap();
            let y = conv2d_forward(&x, &w, &b, &spec, one()).unwrap();
            let oracle = direct_conv(&x, &w, &b, &spec);
            for (a, o) in y.data().iter().zip(oracle.data()) {
                prop_assert!((a - o).abs() <= 1e-12 * a.abs().max(o.abs()).max(1.0));
            }
        }
    }
}
