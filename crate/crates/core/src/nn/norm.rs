use super::{join, FeatureMap, Param, Parameters};

const EPS: f32 = 1e-5;

/// Per-sample, per-channel normalization over the spatial positions with a
/// learned scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

/// Saved normalized activations for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Vec<f32>,
    inv_std: Vec<f32>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, NormCache) {
        assert_eq!(x.channels, self.channels);
        let plane = x.plane_len();
        let mut y = x.clone();
        let mut normalized = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.channels * x.batch];
        for c in 0..x.channels {
            for n in 0..x.batch {
                let idx = c * x.batch + n;
                let src = x.plane(c, n);
                let mean = src.iter().sum::<f32>() / plane as f32;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / plane as f32;
                let inv = 1.0 / (var + EPS).sqrt();
                inv_std[idx] = inv;
                let xhat = &mut normalized[idx * plane..(idx + 1) * plane];
                let out = y.plane_mut(c, n);
                for ((o, h), s) in out.iter_mut().zip(xhat.iter_mut()).zip(src) {
                    *h = (s - mean) * inv;
                    *o = self.gamma.value[c] * *h + self.beta.value[c];
                }
            }
        }
        (y, NormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, gy: &FeatureMap) -> FeatureMap {
        let plane = gy.plane_len();
        let m = plane as f32;
        let mut gx = FeatureMap::zeros(gy.channels, gy.batch, gy.height, gy.width);
        for c in 0..gy.channels {
            let gamma = self.gamma.value[c];
            for n in 0..gy.batch {
                let idx = c * gy.batch + n;
                let g = gy.plane(c, n);
                let xhat = &cache.normalized[idx * plane..(idx + 1) * plane];
                let sum_g: f32 = g.iter().sum();
                let sum_gx: f32 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
                self.gamma.grad[c] += sum_gx;
                self.beta.grad[c] += sum_g;
                let k = gamma * cache.inv_std[idx] / m;
                let out = gx.plane_mut(c, n);
                for ((o, gv), h) in out.iter_mut().zip(g).zip(xhat) {
                    *o = k * (m * gv - sum_g - h * sum_gx);
                }
            }
        }
        gx
    }
}

impl Parameters for InstanceNorm {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_plane() {
        let x = FeatureMap::from_vec(2, 2, 1, 4, (0..16).map(|v| (v * v) as f32).collect());
        let norm = InstanceNorm::new(2);
        let (y, _) = norm.forward(&x);
        for c in 0..2 {
            for n in 0..2 {
                let p = y.plane(c, n);
                let mean: f32 = p.iter().sum::<f32>() / 4.0;
                let var: f32 = p.iter().map(|v| v * v).sum::<f32>() / 4.0;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = FeatureMap::from_vec(1, 2, 2, 3, (0..12).map(|v| ((v * 7) % 5) as f32 * 0.3 - 0.4).collect());
        let r: Vec<f32> = (0..12).map(|v| (v as f32 * 0.77).sin()).collect();
        let mut norm = InstanceNorm::new(1);
        norm.gamma.value[0] = 1.3;
        norm.beta.value[0] = -0.2;
        let loss = |n: &InstanceNorm, x: &FeatureMap| -> f64 {
            n.forward(x).0.data.iter().zip(&r).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = norm.forward(&x);
        let gy = FeatureMap::from_vec(1, 2, 2, 3, r.clone());
        let gx = norm.backward(&cache, &gy);
        let h = 1e-3f32;
        for idx in 0..12 {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * h as f64);
            assert!((fd - gx.data[idx] as f64).abs() < 2e-2, "{idx}: {fd} vs {}", gx.data[idx]);
        }
    }
}
