use rand::Rng;

use super::gemm::gemm;
use super::{join, FeatureMap, Param, Parameters};

/// Zero padding on each border of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Output size equals input size for a stride-1 convolution with an
    /// effective kernel extent `k` (an even extent pads one more at the end).
    pub fn same(k: usize) -> Self {
        let lo = (k - 1) / 2;
        let hi = k - 1 - lo;
        Self {
            top: lo,
            bottom: hi,
            left: lo,
            right: hi,
        }
    }
}

/// Mapping between a dense "image" grid and a strided "patch" grid. For a
/// convolution the image is the input and the patches are output pixels;
/// for a transposed convolution the roles swap.
#[derive(Debug, Clone, Copy)]
struct PatchGeometry {
    channels: usize,
    batch: usize,
    image_h: usize,
    image_w: usize,
    grid_h: usize,
    grid_w: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
}

impl PatchGeometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn cols(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    #[inline]
    fn image_coord(&self, grid: usize, tap: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (grid * self.stride + tap * self.dilation) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Gather image patches into a `[C·kh·kw] x [N·gh·gw]` matrix.
fn im2col(image: &[f32], g: &PatchGeometry) -> Vec<f32> {
    let mut cols = vec![0.0f32; g.rows() * g.cols()];
    let image_plane = g.image_h * g.image_w;
    let grid_plane = g.grid_h * g.grid_w;
    let ncols = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &image[(c * g.batch + n) * image_plane..][..image_plane];
                    let dst = &mut dst_row[n * grid_plane..(n + 1) * grid_plane];
                    for gy in 0..g.grid_h {
                        let Some(iy) = g.image_coord(gy, ky, g.pad_top, g.image_h) else {
                            continue;
                        };
                        let src_row = &src[iy * g.image_w..(iy + 1) * g.image_w];
                        let dst_line = &mut dst[gy * g.grid_w..(gy + 1) * g.grid_w];
                        for (gx, d) in dst_line.iter_mut().enumerate() {
                            if let Some(ix) = g.image_coord(gx, kx, g.pad_left, g.image_w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back onto the image grid.
fn col2im(cols: &[f32], g: &PatchGeometry, image: &mut [f32]) {
    let image_plane = g.image_h * g.image_w;
    let grid_plane = g.grid_h * g.grid_w;
    let ncols = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut image[(c * g.batch + n) * image_plane..][..image_plane];
                    let src = &src_row[n * grid_plane..(n + 1) * grid_plane];
                    for gy in 0..g.grid_h {
                        let Some(iy) = g.image_coord(gy, ky, g.pad_top, g.image_h) else {
                            continue;
                        };
                        let src_line = &src[gy * g.grid_w..(gy + 1) * g.grid_w];
                        let dst_row = &mut dst[iy * g.image_w..(iy + 1) * g.image_w];
                        for (gx, s) in src_line.iter().enumerate() {
                            if let Some(ix) = g.image_coord(gx, kx, g.pad_left, g.image_w) {
                                dst_row[ix] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut FeatureMap, bias: &[f32]) {
    let stride = y.positions();
    for (c, b) in bias.iter().enumerate() {
        y.data[c * stride..(c + 1) * stride].iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(gy: &FeatureMap, grad: &mut [f32]) {
    let stride = gy.positions();
    for (c, g) in grad.iter_mut().enumerate() {
        *g += gy.data[c * stride..(c + 1) * stride].iter().sum::<f32>();
    }
}

/// 2-D convolution with weights stored as `[out][in·kh·kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation,
            padding,
            weight: Param::uniform(out_channels * fan_in, bound, rng),
            bias: bias.then(|| Param::uniform(out_channels, bound, rng)),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let eh = self.dilation * (self.kernel_h - 1) + 1;
        let ew = self.dilation * (self.kernel_w - 1) + 1;
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        assert!(ph >= eh && pw >= ew, "input {h}x{w} smaller than kernel extent");
        ((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1)
    }

    fn geometry(&self, x: &FeatureMap) -> PatchGeometry {
        let (oh, ow) = self.output_size(x.height, x.width);
        PatchGeometry {
            channels: self.in_channels,
            batch: x.batch,
            image_h: x.height,
            image_w: x.width,
            grid_h: oh,
            grid_w: ow,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            dilation: self.dilation,
            pad_top: self.padding.top,
            pad_left: self.padding.left,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1
            && self.kernel_w == 1
            && self.stride == 1
            && self.padding == Padding::uniform(0)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_channels, "conv input channel mismatch");
        let g = self.geometry(x);
        let mut y = FeatureMap::zeros(self.out_channels, x.batch, g.grid_h, g.grid_w);
        let k = g.rows();
        let n = g.cols();
        if self.is_pointwise() {
            gemm(self.out_channels, k, n, &self.weight.value, false, &x.data, false, 0.0, &mut y.data);
        } else {
            let cols = im2col(&x.data, &g);
            gemm(self.out_channels, k, n, &self.weight.value, false, &cols, false, 0.0, &mut y.data);
        }
        if let Some(b) = &self.bias {
            add_bias(&mut y, &b.value);
        }
        y
    }

    /// Accumulate parameter gradients for `gy = dL/dy` and return `dL/dx`
    /// when `input_grad` is set.
    pub fn backward(&mut self, x: &FeatureMap, gy: &FeatureMap, input_grad: bool) -> Option<FeatureMap> {
        self.backward_ex(x, gy, true, input_grad)
    }

    /// As [`backward`](Self::backward), optionally skipping the parameter
    /// gradients (for a frozen layer that only passes gradients through).
    pub fn backward_ex(
        &mut self,
        x: &FeatureMap,
        gy: &FeatureMap,
        param_grad: bool,
        input_grad: bool,
    ) -> Option<FeatureMap> {
        let g = self.geometry(x);
        assert_eq!((gy.channels, gy.height, gy.width), (self.out_channels, g.grid_h, g.grid_w));
        let k = g.rows();
        let n = g.cols();
        let pointwise = self.is_pointwise();
        if param_grad {
            let cols_owned;
            let cols: &[f32] = if pointwise {
                &x.data
            } else {
                cols_owned = im2col(&x.data, &g);
                &cols_owned
            };
            gemm(self.out_channels, n, k, &gy.data, false, cols, true, 1.0, &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                accumulate_bias_grad(gy, &mut b.grad);
            }
        }
        if !input_grad {
            return None;
        }
        let mut gx = FeatureMap::zeros(x.channels, x.batch, x.height, x.width);
        if pointwise {
            gemm(k, self.out_channels, n, &self.weight.value, true, &gy.data, false, 0.0, &mut gx.data);
        } else {
            let mut gcols = vec![0.0; k * n];
            gemm(k, self.out_channels, n, &self.weight.value, true, &gy.data, false, 0.0, &mut gcols);
            col2im(&gcols, &g, &mut gx.data);
        }
        Some(gx)
    }
}

impl Parameters for Conv2d {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

/// Transposed convolution with weights stored as `[in][out·kh·kw]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan = out_channels * kernel * kernel;
        let bound = 1.0 / (fan as f32).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::uniform(in_channels * fan, bound, rng),
            bias: bias.then(|| Param::uniform(out_channels, bound, rng)),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |v: usize| (v - 1) * self.stride + self.kernel - 2 * self.padding;
        (f(h), f(w))
    }

    fn geometry(&self, x: &FeatureMap) -> PatchGeometry {
        let (oh, ow) = self.output_size(x.height, x.width);
        PatchGeometry {
            channels: self.out_channels,
            batch: x.batch,
            image_h: oh,
            image_w: ow,
            grid_h: x.height,
            grid_w: x.width,
            kernel_h: self.kernel,
            kernel_w: self.kernel,
            stride: self.stride,
            dilation: 1,
            pad_top: self.padding,
            pad_left: self.padding,
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channel mismatch");
        let g = self.geometry(x);
        let rows = g.rows();
        let n = g.cols();
        let mut cols = vec![0.0; rows * n];
        gemm(rows, self.in_channels, n, &self.weight.value, true, &x.data, false, 0.0, &mut cols);
        let mut y = FeatureMap::zeros(self.out_channels, x.batch, g.image_h, g.image_w);
        col2im(&cols, &g, &mut y.data);
        if let Some(b) = &self.bias {
            add_bias(&mut y, &b.value);
        }
        y
    }

    pub fn backward(&mut self, x: &FeatureMap, gy: &FeatureMap, input_grad: bool) -> Option<FeatureMap> {
        self.backward_ex(x, gy, true, input_grad)
    }

    pub fn backward_ex(
        &mut self,
        x: &FeatureMap,
        gy: &FeatureMap,
        param_grad: bool,
        input_grad: bool,
    ) -> Option<FeatureMap> {
        let g = self.geometry(x);
        assert_eq!((gy.channels, gy.height, gy.width), (self.out_channels, g.image_h, g.image_w));
        let rows = g.rows();
        let n = g.cols();
        let gcols = im2col(&gy.data, &g);
        if param_grad {
            gemm(self.in_channels, n, rows, &x.data, false, &gcols, true, 1.0, &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                accumulate_bias_grad(gy, &mut b.grad);
            }
        }
        if !input_grad {
            return None;
        }
        let mut gx = FeatureMap::zeros(x.channels, x.batch, x.height, x.width);
        gemm(self.in_channels, rows, n, &self.weight.value, false, &gcols, false, 0.0, &mut gx.data);
        Some(gx)
    }
}

impl Parameters for ConvTranspose2d {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}
