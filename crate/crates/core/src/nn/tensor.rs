/// Batch of feature maps stored as `[channels][batch][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    pub fn from_vec(channels: usize, batch: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * batch * height * width, "feature map size mismatch");
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    /// Build from conventional sample-major `[N][C][H][W]` data.
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, nchw: &[f32]) -> Self {
        assert_eq!(nchw.len(), channels * batch * height * width);
        let plane = height * width;
        let mut out = Self::zeros(channels, batch, height, width);
        for n in 0..batch {
            for c in 0..channels {
                let src = (n * channels + c) * plane;
                let dst = (c * batch + n) * plane;
                out.data[dst..dst + plane].copy_from_slice(&nchw[src..src + plane]);
            }
        }
        out
    }

    pub fn to_nchw(&self) -> Vec<f32> {
        let plane = self.plane_len();
        let mut out = vec![0.0; self.data.len()];
        for n in 0..self.batch {
            for c in 0..self.channels {
                let dst = (n * self.channels + c) * plane;
                let src = (c * self.batch + n) * plane;
                out[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Number of spatial positions across the batch (`N·H·W`).
    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    pub fn plane(&self, c: usize, n: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (c * self.batch + n) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [f32] {
        let p = self.plane_len();
        let start = (c * self.batch + n) * p;
        &mut self.data[start..start + p]
    }

    /// Stack along the channel axis.
    pub fn concat_channels(parts: &[&FeatureMap]) -> FeatureMap {
        let first = parts[0];
        let mut channels = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert!(
                p.batch == first.batch && p.height == first.height && p.width == first.width,
                "concat of mismatched feature maps"
            );
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        FeatureMap::from_vec(channels, first.batch, first.height, first.width, data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<FeatureMap> {
        assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let stride = self.positions();
        let mut offset = 0;
        sizes
            .iter()
            .map(|&c| {
                let data = self.data[offset * stride..(offset + c) * stride].to_vec();
                offset += c;
                FeatureMap::from_vec(c, self.batch, self.height, self.width, data)
            })
            .collect()
    }

    /// Zero-pad at the bottom and right to `height x width`.
    pub fn pad_to(&self, height: usize, width: usize) -> FeatureMap {
        assert!(height >= self.height && width >= self.width);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(self.channels, self.batch, height, width);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = self.plane(c, n);
                let dst = out.plane_mut(c, n);
                for y in 0..self.height {
                    dst[y * width..y * width + self.width]
                        .copy_from_slice(&src[y * self.width..(y + 1) * self.width]);
                }
            }
        }
        out
    }

    /// Keep the top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> FeatureMap {
        assert!(height <= self.height && width <= self.width);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(self.channels, self.batch, height, width);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = self.plane(c, n);
                let dst = out.plane_mut(c, n);
                for y in 0..height {
                    dst[y * width..(y + 1) * width]
                        .copy_from_slice(&src[y * self.width..y * self.width + width]);
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}
