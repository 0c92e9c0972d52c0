use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: usize,
    pub mode: PoolMode,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            window: (2, 2),
            stride: 2,
            mode: PoolMode::Max,
        }
    }
}

impl PoolSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (wh, ww) = self.window;
        if wh == 0 || ww == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("pooling window and stride must be positive".into()));
        }
        if h < wh || w < ww || !(h - wh).is_multiple_of(self.stride) || !(w - ww).is_multiple_of(self.stride) {
            return Err(Error::Geometry(format!(
                "{h}x{w} input does not divide into {wh}x{ww} windows at stride {}",
                self.stride
            )));
        }
        Ok(((h - wh) / self.stride + 1, (w - ww) / self.stride + 1))
    }
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Shape4,
    spec: PoolSpec,
    /// Flat input offset of each output's maximum (max mode only).
    argmax: Vec<usize>,
}

pub fn pool_forward(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, PoolCache)> {
    let s = x.shape4()?;
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let (wh, ww) = spec.window;
    let data = x.data();
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut argmax = Vec::new();
    let scale = 1.0 / (wh * ww) as f64;
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                match spec.mode {
                    PoolMode::Max => {
                        let mut best = base + y0 * s.w + x0;
                        for y in y0..y0 + wh {
                            for xx in x0..x0 + ww {
                                let at = base + y * s.w + xx;
                                // Strict comparison keeps the first maximum in scan order.
                                if data[at] > data[best] {
                                    best = at;
                                }
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                    PoolMode::Mean => {
                        let mut acc = 0.0;
                        for y in y0..y0 + wh {
                            for xx in x0..x0 + ww {
                                acc += data[base + y * s.w + xx];
                            }
                        }
                        out.push(acc * scale);
                    }
                }
            }
        }
    }
    let y = Tensor::new(vec![s.n, s.c, oh, ow], out)?;
    Ok((
        y,
        PoolCache {
            input_shape: s,
            spec: *spec,
            argmax,
        },
    ))
}

pub fn pool_backward(cache: &PoolCache, upstream: &Tensor) -> Result<Tensor> {
    let s = cache.input_shape;
    let (oh, ow) = cache.spec.output_hw(s.h, s.w)?;
    if upstream.shape() != [s.n, s.c, oh, ow] {
        return Err(Error::DimensionMismatch(format!(
            "pool upstream gradient has shape {:?}, expected {:?}",
            upstream.shape(),
            [s.n, s.c, oh, ow]
        )));
    }
    let mut dx = vec![0.0; s.numel()];
    let g = upstream.data();
    match cache.spec.mode {
        PoolMode::Max => {
            for (&at, &gv) in cache.argmax.iter().zip(g) {
                dx[at] += gv;
            }
        }
        PoolMode::Mean => {
            let (wh, ww) = cache.spec.window;
            let stride = cache.spec.stride;
            let scale = 1.0 / (wh * ww) as f64;
            for plane in 0..s.n * s.c {
                let base = plane * s.h * s.w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = g[(plane * oh + oy) * ow + ox] * scale;
                        for y in oy * stride..oy * stride + wh {
                            for xx in ox * stride..ox * stride + ww {
                                dx[base + y * s.w + xx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mean_spec() -> PoolSpec {
        PoolSpec {
            mode: PoolMode::Mean,
            ..PoolSpec::default()
        }
    }

    #[test]
    fn max_of_sequential_grid() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 + 1.0).unwrap();
        let (y, _) = pool_forward(&x, &PoolSpec::default()).unwrap();
        // Brute-force window scan.
        let mut expected = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.get(&[0, 0, 2 * oy + dy, 2 * ox + dx]).unwrap());
                    }
                }
                expected.push(m);
            }
        }
        assert_eq!(y.data(), expected.as_slice());
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn constant_field_same_under_both_modes() {
        let x = Tensor::filled(&[1, 2, 4, 6], 3.5).unwrap();
        let (ymax, _) = pool_forward(&x, &PoolSpec::default()).unwrap();
        let (ymean, _) = pool_forward(&x, &mean_spec()).unwrap();
        assert_eq!(ymax, ymean);
        assert!(ymax.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn channels_are_preserved() {
        let x = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        let (y, _) = pool_forward(&x, &PoolSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
    }

    #[test]
    fn odd_input_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 5, 4]).unwrap();
        assert!(matches!(pool_forward(&x, &PoolSpec::default()), Err(Error::Geometry(_))));
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let x = Tensor::filled(&[1, 1, 2, 2], 1.0).unwrap();
        let (_, cache) = pool_forward(&x, &PoolSpec::default()).unwrap();
        let dx = pool_backward(&cache, &Tensor::filled(&[1, 1, 1, 1], 7.0).unwrap()).unwrap();
        assert_eq!(dx.data(), &[7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_spreads_quarters() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64).unwrap();
        let (y, cache) = pool_forward(&x, &mean_spec()).unwrap();
        assert_eq!(y.data(), &[1.5]);
        let dx = pool_backward(&cache, &Tensor::filled(&[1, 1, 1, 1], 8.0).unwrap()).unwrap();
        assert_eq!(dx.data(), &[2.0; 4]);
    }

    proptest! {
        #[test]
        fn routed_gradient_mass_is_conserved(seed in any::<u64>(), mean in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = if mean { mean_spec() } else { PoolSpec::default() };
            let x = Tensor::from_fn(&[2, 3, 6, 8], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let (y, cache) = pool_forward(&x, &spec).unwrap();
            let up = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0)).unwrap();
            let dx = pool_backward(&cache, &up).unwrap();
            prop_assert!((dx.sum() - up.sum()).abs() < 1e-12);
        }
    }
}
