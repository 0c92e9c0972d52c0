use crate::error::{Error, Result};
use crate::gemm::{gemm, MatrixDims, TileConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub d_input: Option<Tensor>,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

fn check(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<MatrixDims> {
    let [n, d_in] = x.dims2()?;
    let [w_in, d_out] = weights.dims2()?;
    if w_in != d_in || bias.shape() != [d_out] {
        return Err(Error::DimensionMismatch(format!(
            "dense layer input {:?}, weights {:?}, bias {:?} do not agree",
            x.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    Ok(MatrixDims { m: n, n: d_in, w: d_out })
}

/// `x · W + b` for `x` of shape N×d_in and `W` of shape d_in×d_out.
pub fn fc_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, cfg: TileConfig) -> Result<Tensor> {
    let dims = check(x, weights, bias)?;
    let mut out = gemm(x.data(), weights.data(), dims, cfg);
    for row in out.chunks_mut(dims.w) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(vec![dims.m, dims.w], out)
}

pub fn fc_backward(
    x: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    need_input_grad: bool,
    cfg: TileConfig,
) -> Result<DenseGrads> {
    let [n, d_in] = x.dims2()?;
    let [_, d_out] = weights.dims2()?;
    if upstream.shape() != [n, d_out] {
        return Err(Error::DimensionMismatch(format!(
            "dense upstream gradient has shape {:?}, expected [{n}, {d_out}]",
            upstream.shape()
        )));
    }
    let d_w = gemm(
        x.transpose()?.data(),
        upstream.data(),
        MatrixDims { m: d_in, n, w: d_out },
        cfg,
    );
    let mut d_b = vec![0.0; d_out];
    for row in upstream.data().chunks(d_out) {
        for (acc, g) in d_b.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let d_input = if need_input_grad {
        let d_x = gemm(
            upstream.data(),
            weights.transpose()?.data(),
            MatrixDims { m: n, n: d_out, w: d_in },
            cfg,
        );
        Some(Tensor::new(vec![n, d_in], d_x)?)
    } else {
        None
    };
    Ok(DenseGrads {
        d_input,
        d_weights: Tensor::new(vec![d_in, d_out], d_w)?,
        d_bias: Tensor::new(vec![d_out], d_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TileConfig {
        TileConfig::new(4, 2).unwrap()
    }

    #[test]
    fn identity_weights_pass_through() {
        let x = Tensor::from_fn(&[3, 5], |i| i as f64 - 4.0).unwrap();
        let y = fc_forward(&x, &Tensor::identity(5).unwrap(), &Tensor::zeros(&[5]).unwrap(), cfg()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn lenet_style_head_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 768], |_| rng.gen_range(0.0..1.0)).unwrap();
        let w1 = Tensor::from_fn(&[768, 500], |_| rng.gen_range(-0.05..0.05)).unwrap();
        let w2 = Tensor::from_fn(&[500, 10], |_| rng.gen_range(-0.05..0.05)).unwrap();
        let h = fc_forward(&x, &w1, &Tensor::zeros(&[500]).unwrap(), cfg()).unwrap();
        let y = fc_forward(&h, &w2, &Tensor::zeros(&[10]).unwrap(), cfg()).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn mismatched_widths() {
        let x = Tensor::zeros(&[2, 3]).unwrap();
        let w = Tensor::zeros(&[4, 2]).unwrap();
        assert!(fc_forward(&x, &w, &Tensor::zeros(&[2]).unwrap(), cfg()).is_err());
        let w = Tensor::zeros(&[3, 2]).unwrap();
        assert!(fc_forward(&x, &w, &Tensor::zeros(&[3]).unwrap(), cfg()).is_err());
    }

    /// Loss L = Σ r ⊙ (xW + b) with fixed random r; central differences at ε = 1e-5.
    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let w = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let b = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let r = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let y = fc_forward(x, w, b, cfg()).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let grads = fc_backward(&x, &w, &r, true, cfg()).unwrap();
        let eps = 1e-5;
        let check = |analytic: &Tensor, which: usize| {
            for i in 0..analytic.len() {
                let mut args = [x.clone(), w.clone(), b.clone()];
                args[which].data_mut()[i] += eps;
                let up = loss(&args[0], &args[1], &args[2]);
                args[which].data_mut()[i] -= 2.0 * eps;
                let down = loss(&args[0], &args[1], &args[2]);
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-6, "param {which} idx {i}: {a} vs {numeric}");
            }
        };
        check(grads.d_input.as_ref().unwrap(), 0);
        check(&grads.d_weights, 1);
        check(&grads.d_bias, 2);
    }
}
