//! Stage 2: residual attention denoiser refining the coarse estimate.
//!
//! The network predicts a residual `R` on normalized `2 x N x K` planes;
//! the refined channel is `H̃ + s · unpack(R)`. The reconstruction layer
//! starts at zero, so an untrained (or freshly initialized) network is
//! exactly the identity.

use log::info;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::cgan::{append_log, CganModel, EstimationResult};
use crate::channel::{dft_matrix, AngularTransform, ChannelRealization, Domain};
use crate::checkpoint::{self, BlobInfo, CHECKPOINT_VERSION};
use crate::config::ExperimentConfig;
use crate::dataset::{bytes_to_f32, compute_normalization, pack_channel, read_f32_file, split_train_val, unpack_channel, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    join, Activation, Adam, Block, Conv2d, FeatureMap, Layer, Optimizer, Padding, Param, Parameters, Trace,
};
use crate::rng::{self, Purpose};

fn conv_block<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, dilation: usize, act: Activation, rng: &mut R) -> Block {
    let pad = Padding::uniform(dilation * (kernel - 1) / 2);
    Block::new(Layer::Conv(Conv2d::new(cin, cout, kernel, 1, dilation, pad, true, rng)), None, act)
}

fn relu_in_place(x: &mut FeatureMap) {
    Activation::Relu.apply(x);
}

fn relu_backward(y: &FeatureMap, g: &mut FeatureMap) {
    Activation::Relu.backward(y, g);
}

/// Enhanced attention unit: merge-and-run branches, two residual blocks
/// and a channel gate on a short skip.
#[derive(Debug, Clone)]
pub struct Eau {
    branch1: Block,
    branch2: Block,
    merge: Block,
    rb1: [Block; 2],
    rb2: [Block; 3],
    squeeze: Block,
    excite: Block,
    /// Replace the learned gate by a constant (testing and ablation).
    pub gate_override: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct EauTrace {
    branch1: Trace,
    branch2: Trace,
    merge: Trace,
    rb1: [Trace; 2],
    r1: FeatureMap,
    rb2: [Trace; 3],
    r2: FeatureMap,
    squeeze: Option<Trace>,
    excite: Option<Trace>,
    gate: Vec<f32>,
}

/// Per-channel, per-sample mean over positions (`C x B x 1 x 1`).
fn global_average(x: &FeatureMap) -> FeatureMap {
    let n = x.positions() as f32;
    let mut out = FeatureMap::zeros(x.channels, x.batch, 1, 1);
    for c in 0..x.channels {
        for b in 0..x.batch {
            out.data[c * x.batch + b] = x.plane(c, b).iter().sum::<f32>() / n;
        }
    }
    out
}

impl Eau {
    pub fn new<R: Rng + ?Sized>(f: usize, rng: &mut R) -> Self {
        let hidden = (f / 16).max(2);
        let relu = Activation::Relu;
        let id = Activation::Identity;
        Self {
            branch1: conv_block(f, f, 3, 1, relu, rng),
            branch2: conv_block(f, f, 3, 2, relu, rng),
            merge: conv_block(2 * f, f, 3, 1, relu, rng),
            rb1: [conv_block(f, f, 3, 1, relu, rng), conv_block(f, f, 3, 1, id, rng)],
            rb2: [
                conv_block(f, f, 3, 1, relu, rng),
                conv_block(f, f, 3, 1, relu, rng),
                conv_block(f, f, 1, 1, id, rng),
            ],
            squeeze: conv_block(f, hidden, 1, 1, relu, rng),
            excite: conv_block(hidden, f, 1, 1, Activation::Sigmoid, rng),
            gate_override: None,
        }
    }

    pub fn channels(&self) -> usize {
        match &self.merge.layer {
            Layer::Conv(c) => c.out_channels,
            Layer::ConvT(c) => c.out_channels,
        }
    }

    /// Gate values `g[c * batch + b]` for an input.
    pub fn gate(&self, x: &FeatureMap) -> Vec<f32> {
        self.forward_traced(x).1.gate
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &FeatureMap) -> (FeatureMap, EauTrace) {
        let (b1, t_b1) = self.branch1.forward_traced(x);
        let (b2, t_b2) = self.branch2.forward_traced(x);
        let (m, t_m) = self.merge.forward_traced(&FeatureMap::concat_channels(&[&b1, &b2]));

        let (u, t_a) = self.rb1[0].forward_traced(&m);
        let (mut r1, t_b) = self.rb1[1].forward_traced(&u);
        r1.add_assign(&m);
        relu_in_place(&mut r1);

        let (u, t_c) = self.rb2[0].forward_traced(&r1);
        let (u, t_d) = self.rb2[1].forward_traced(&u);
        let (mut r2, t_e) = self.rb2[2].forward_traced(&u);
        r2.add_assign(&r1);
        relu_in_place(&mut r2);

        let (gate, squeeze, excite) = match self.gate_override {
            Some(v) => (vec![v; x.channels * x.batch], None, None),
            None => {
                let (z, t_s) = self.squeeze.forward_traced(&global_average(&r2));
                let (g, t_x) = self.excite.forward_traced(&z);
                (g.data, Some(t_s), Some(t_x))
            }
        };
        let mut out = x.clone();
        let plane = x.plane_len();
        for (i, &g) in gate.iter().enumerate() {
            let range = i * plane..(i + 1) * plane;
            for (o, r) in out.data[range.clone()].iter_mut().zip(&r2.data[range]) {
                *o += g * r;
            }
        }
        let trace = EauTrace {
            branch1: t_b1,
            branch2: t_b2,
            merge: t_m,
            rb1: [t_a, t_b],
            r1,
            rb2: [t_c, t_d, t_e],
            r2,
            squeeze,
            excite,
            gate,
        };
        (out, trace)
    }

    pub fn backward(&mut self, t: &EauTrace, gy: &FeatureMap) -> FeatureMap {
        let plane = gy.plane_len();
        let mut g_r2 = gy.clone();
        let mut g_gate = vec![0.0f32; t.gate.len()];
        for (i, &g) in t.gate.iter().enumerate() {
            let range = i * plane..(i + 1) * plane;
            let mut acc = 0.0f32;
            for (d, r) in g_r2.data[range.clone()].iter_mut().zip(&t.r2.data[range]) {
                acc += *d * r;
                *d *= g;
            }
            g_gate[i] = acc;
        }
        if let (Some(ts), Some(tx)) = (&t.squeeze, &t.excite) {
            let gg = FeatureMap::from_vec(gy.channels, gy.batch, 1, 1, g_gate);
            let gz = self.excite.backward(tx, gg, true).unwrap();
            let gp = self.squeeze.backward(ts, gz, true).unwrap();
            let n = plane as f32;
            for (i, &v) in gp.data.iter().enumerate() {
                g_r2.data[i * plane..(i + 1) * plane].iter_mut().for_each(|d| *d += v / n);
            }
        }

        relu_backward(&t.r2, &mut g_r2);
        let mut g_r1 = g_r2.clone();
        let g = self.rb2[2].backward(&t.rb2[2], g_r2, true).unwrap();
        let g = self.rb2[1].backward(&t.rb2[1], g, true).unwrap();
        g_r1.add_assign(&self.rb2[0].backward(&t.rb2[0], g, true).unwrap());

        relu_backward(&t.r1, &mut g_r1);
        let mut g_m = g_r1.clone();
        let g = self.rb1[1].backward(&t.rb1[1], g_r1, true).unwrap();
        g_m.add_assign(&self.rb1[0].backward(&t.rb1[0], g, true).unwrap());

        let f = gy.channels;
        let g_cat = self.merge.backward(&t.merge, g_m, true).unwrap();
        let mut parts = g_cat.split_channels(&[f, f]);
        let g_b2 = parts.pop().unwrap();
        let g_b1 = parts.pop().unwrap();
        let mut gx = gy.clone();
        gx.add_assign(&self.branch1.backward(&t.branch1, g_b1, true).unwrap());
        gx.add_assign(&self.branch2.backward(&t.branch2, g_b2, true).unwrap());
        gx
    }
}

impl Parameters for Eau {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.branch1.collect_params(&join(prefix, "branch1"), out);
        self.branch2.collect_params(&join(prefix, "branch2"), out);
        self.merge.collect_params(&join(prefix, "merge"), out);
        for (i, b) in self.rb1.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("rb1_{i}")), out);
        }
        for (i, b) in self.rb2.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("rb2_{i}")), out);
        }
        self.squeeze.collect_params(&join(prefix, "squeeze"), out);
        self.excite.collect_params(&join(prefix, "excite"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.branch1.collect_params_mut(out);
        self.branch2.collect_params_mut(out);
        self.merge.collect_params_mut(out);
        self.rb1.iter_mut().for_each(|b| b.collect_params_mut(out));
        self.rb2.iter_mut().for_each(|b| b.collect_params_mut(out));
        self.squeeze.collect_params_mut(out);
        self.excite.collect_params_mut(out);
    }
}

/// Feature extraction, cascaded EAUs with a long skip, reconstruction.
#[derive(Debug, Clone)]
pub struct Ridnet {
    pub filters: usize,
    head: Block,
    pub eaus: Vec<Eau>,
    tail: Conv2d,
    /// Add the feature-extraction output back after the EAU cascade.
    pub long_skip: bool,
}

#[derive(Debug, Clone)]
pub struct RidnetTrace {
    head: Trace,
    eaus: Vec<EauTrace>,
    features: FeatureMap,
}

impl Ridnet {
    pub fn new<R: Rng + ?Sized>(filters: usize, eau_count: usize, rng: &mut R) -> Self {
        let head = conv_block(2, filters, 3, 1, Activation::Relu, rng);
        let eaus = (0..eau_count).map(|_| Eau::new(filters, rng)).collect();
        let mut tail = Conv2d::new(filters, 2, 3, 1, 1, Padding::same(3), true, rng);
        tail.weight.value.fill(0.0);
        if let Some(b) = &mut tail.bias {
            b.value.fill(0.0);
        }
        Self {
            filters,
            head,
            eaus,
            tail,
            long_skip: true,
        }
    }

    fn check(&self, x: &FeatureMap, channels: usize) -> Result<()> {
        if x.channels != channels {
            return Err(Error::invalid(format!(
                "expected {channels} input planes, got {}",
                x.channels
            )));
        }
        Ok(())
    }

    /// `f_0 = ReLU(C_fe(x))` on `2 x N x K` planes.
    pub fn feature_extract(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x, 2)?;
        Ok(self.head.forward(x))
    }

    /// EAU cascade plus (optionally) the long skip from `f_0`.
    pub fn feature_learning(&self, f0: &FeatureMap) -> Result<FeatureMap> {
        self.check(f0, self.filters)?;
        let mut x = f0.clone();
        for e in &self.eaus {
            x = e.forward(&x);
        }
        if self.long_skip {
            x.add_assign(f0);
        }
        Ok(x)
    }

    /// Residual planes `R` from learned features.
    pub fn reconstruct(&self, features: &FeatureMap) -> Result<FeatureMap> {
        self.check(features, self.filters)?;
        Ok(self.tail.forward(features))
    }

    /// Residual `R` for normalized input planes.
    pub fn residual(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let f0 = self.feature_extract(x)?;
        self.reconstruct(&self.feature_learning(&f0)?)
    }

    pub fn forward_traced(&self, x: &FeatureMap) -> Result<(FeatureMap, RidnetTrace)> {
        self.check(x, 2)?;
        let (f0, head) = self.head.forward_traced(x);
        let mut h = f0.clone();
        let mut eaus = Vec::with_capacity(self.eaus.len());
        for e in &self.eaus {
            let (y, t) = e.forward_traced(&h);
            eaus.push(t);
            h = y;
        }
        if self.long_skip {
            h.add_assign(&f0);
        }
        let r = self.tail.forward(&h);
        Ok((r, RidnetTrace { head, eaus, features: h }))
    }

    /// Accumulate parameter gradients for `dL/dR`.
    pub fn backward(&mut self, t: &RidnetTrace, g_r: &FeatureMap) {
        let g_feat = self.tail.backward(&t.features, g_r, true).unwrap();
        let mut g = g_feat.clone();
        for (e, tr) in self.eaus.iter_mut().zip(&t.eaus).rev() {
            g = e.backward(tr, &g);
        }
        if self.long_skip {
            g.add_assign(&g_feat);
        }
        self.head.backward(&t.head, g, false);
    }

    pub fn set_gate_override(&mut self, gate: Option<f32>) {
        self.eaus.iter_mut().for_each(|e| e.gate_override = gate);
    }
}

impl Parameters for Ridnet {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.head.collect_params(&join(prefix, "head"), out);
        for (i, e) in self.eaus.iter().enumerate() {
            e.collect_params(&join(prefix, &format!("eau{i}")), out);
        }
        self.tail.collect_params(&join(prefix, "tail"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.head.collect_params_mut(out);
        self.eaus.iter_mut().for_each(|e| e.collect_params_mut(out));
        self.tail.collect_params_mut(out);
    }
}

/// Element-mean absolute error between packed prediction and target planes.
pub fn ridnet_loss(predictions: &[f32], targets: &[f32]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("empty loss batch"));
    }
    Ok(crate::cgan::l1_regularizer(targets, predictions))
}

/// A denoiser bound to the domain and normalization it was trained with.
#[derive(Debug, Clone)]
pub struct RidnetModel {
    pub net: Ridnet,
    pub domain: Domain,
    pub num_antennas: usize,
    pub num_users: usize,
    pub normalization_scale: f64,
    transform: Option<AngularTransform>,
    pub trained: bool,
}

impl RidnetModel {
    pub fn new(
        num_antennas: usize,
        num_users: usize,
        domain: Domain,
        normalization_scale: f64,
        cfg: &RidnetTrainConfig,
    ) -> Result<Self> {
        let mut rng = rng::stream(cfg.seed, Purpose::Init, 2);
        let transform = match domain {
            Domain::Spatial => None,
            Domain::Angular => Some(dft_matrix(num_antennas)?),
        };
        Ok(Self {
            net: Ridnet::new(cfg.filters, cfg.eau_count, &mut rng),
            domain,
            num_antennas,
            num_users,
            normalization_scale,
            transform,
            trained: false,
        })
    }

    /// Move a spatial-domain matrix into this model's working domain.
    pub fn to_model_domain(&self, h: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        match &self.transform {
            Some(t) => &t.matrix * h,
            None => h.clone(),
        }
    }

    /// Move a working-domain matrix into `domain`.
    pub fn from_model_domain(&self, h: DMatrix<Complex64>, domain: Domain) -> DMatrix<Complex64> {
        match (&self.transform, domain) {
            (Some(t), Domain::Spatial) => t.matrix.adjoint() * h,
            (None, Domain::Angular) => dft_matrix(h.nrows()).expect("non-empty").matrix * h,
            _ => h,
        }
    }

    /// `Ĥ = H̃ + s · unpack(R(H̃ / s))` for inputs already in the model's
    /// domain. Works on untrained networks (identity at initialization).
    pub fn apply(&self, inputs: &[DMatrix<Complex64>]) -> Result<Vec<DMatrix<Complex64>>> {
        let (n, k, s) = (self.num_antennas, self.num_users, self.normalization_scale);
        let mut planes = Vec::with_capacity(inputs.len() * 2 * n * k);
        for h in inputs {
            if h.shape() != (n, k) {
                return Err(Error::invalid(format!(
                    "denoiser expects {n}x{k} channels, got {}x{}",
                    h.nrows(),
                    h.ncols()
                )));
            }
            planes.extend(pack_channel(h, s, false));
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = FeatureMap::from_nchw(inputs.len(), 2, n, k, &planes);
        let r = self.net.residual(&x)?.to_nchw();
        Ok(inputs
            .iter()
            .zip(r.chunks_exact(2 * n * k))
            .map(|(h, c)| h + unpack_channel(c, n, k, s))
            .collect())
    }

    /// Refine spatial coarse estimates; results are returned in `output`.
    pub fn refine_batch(&self, coarse: &[DMatrix<Complex64>], output: Domain) -> Result<Vec<DMatrix<Complex64>>> {
        if !self.trained {
            return Err(Error::state("RIDNet has not been trained or loaded"));
        }
        let inputs: Vec<_> = coarse.iter().map(|h| self.to_model_domain(h)).collect();
        Ok(self
            .apply(&inputs)?
            .into_iter()
            .map(|h| self.from_model_domain(h, output))
            .collect())
    }
}

impl Parameters for RidnetModel {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.net.collect_params(prefix, out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.net.collect_params_mut(out);
    }
}

/// Refine a channel that is already in the model's working domain.
pub fn denoise_channel(h: &ChannelRealization, model: &RidnetModel) -> Result<ChannelRealization> {
    if !model.trained {
        return Err(Error::state("RIDNet has not been trained or loaded"));
    }
    if h.domain != model.domain {
        return Err(Error::state(format!(
            "{} RIDNet cannot denoise a {}-domain channel",
            model.domain, h.domain
        )));
    }
    let refined = model.apply(std::slice::from_ref(&h.matrix))?.pop().unwrap();
    Ok(ChannelRealization {
        matrix: refined,
        ..h.clone()
    })
}

/// Second stage of the composed estimator: fills `refined` (in `output`
/// domain) and the RIDNet latency.
pub fn denoise(result: &EstimationResult, model: &RidnetModel, output: Domain) -> Result<EstimationResult> {
    let start = Instant::now();
    let refined = model.refine_batch(std::slice::from_ref(&result.coarse), output)?.pop().unwrap();
    let latency = start.elapsed();
    Ok(EstimationResult {
        refined: Some(refined),
        ridnet_latency: Some(latency),
        ..result.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidnetTrainConfig {
    pub filters: usize,
    pub eau_count: usize,
    pub learning_rates: Vec<f64>,
    pub milestones: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub split_seed: u64,
}

impl From<&ExperimentConfig> for RidnetTrainConfig {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            filters: c.ridnet_filters,
            eau_count: c.ridnet_eau_count,
            learning_rates: c.ridnet_learning_rates.clone(),
            milestones: c.ridnet_milestones.clone(),
            batch_size: c.ridnet_batch_size,
            epochs: c.ridnet_epochs,
            seed: c.master_seed,
            validation_fraction: c.validation_fraction,
            split_seed: c.split_seed,
        }
    }
}

impl RidnetTrainConfig {
    /// Learning rate of one-based `epoch` within a budget of `total` epochs.
    pub fn learning_rate(&self, epoch: usize, total: usize) -> f64 {
        let progress = (epoch - 1) as f64 / total as f64;
        let stage = self.milestones.iter().filter(|&&m| progress >= m).count();
        self.learning_rates[stage.min(self.learning_rates.len() - 1)]
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.learning_rates.len() != self.milestones.len() + 1 {
            return Err(Error::invalid("need exactly one more learning rate than milestones"));
        }
        if self.learning_rates.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("learning rates must be non-increasing"));
        }
        if self.batch_size == 0 || self.filters == 0 {
            return Err(Error::invalid("batch size and filter count must be positive"));
        }
        Ok(())
    }
}

/// Normalized `(H̃, H)` training pairs in one working domain.
#[derive(Debug, Clone)]
pub struct PairedCorpus {
    pub domain: Domain,
    pub num_antennas: usize,
    pub num_users: usize,
    pub normalization_scale: f64,
    inputs: Vec<f32>,
    targets: Vec<f32>,
}

impl PairedCorpus {
    /// Pair stage-1 estimates with the dataset's true channels. Angular
    /// pairs get their own scale computed from the transformed channels.
    pub fn build(data: &Dataset, coarse: &[DMatrix<Complex64>], domain: Domain) -> Result<Self> {
        if coarse.len() != data.len() {
            return Err(Error::invalid(format!(
                "{} coarse estimates for {} samples",
                coarse.len(),
                data.len()
            )));
        }
        let (n, k) = (data.manifest.num_antennas, data.manifest.num_users);
        let u = match domain {
            Domain::Spatial => None,
            Domain::Angular => Some(dft_matrix(n)?.matrix),
        };
        let to_domain = |h: DMatrix<Complex64>| match &u {
            Some(u) => u * h,
            None => h,
        };
        let truths: Vec<_> = (0..data.len()).map(|i| to_domain(data.channel(i))).collect();
        let scale = match domain {
            Domain::Spatial => data.manifest.normalization_scale,
            Domain::Angular => compute_normalization(truths.iter().flat_map(|h| h.iter().flat_map(|c| [c.re, c.im])))?,
        };
        let mut inputs = Vec::with_capacity(data.len() * 2 * n * k);
        let mut targets = Vec::with_capacity(data.len() * 2 * n * k);
        for (h_coarse, h) in coarse.iter().zip(&truths) {
            inputs.extend(pack_channel(&to_domain(h_coarse.clone()), scale, false));
            targets.extend(pack_channel(h, scale, false));
        }
        Ok(Self {
            domain,
            num_antennas: n,
            num_users: k,
            normalization_scale: scale,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / (2 * self.num_antennas * self.num_users)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn slab(&self) -> usize {
        2 * self.num_antennas * self.num_users
    }

    fn gather(&self, source: &[f32], idx: &[usize]) -> FeatureMap {
        let s = self.slab();
        let mut buf = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            buf.extend_from_slice(&source[i * s..(i + 1) * s]);
        }
        FeatureMap::from_nchw(idx.len(), 2, self.num_antennas, self.num_users, &buf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidnetEpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_l1: f64,
    pub validation_l1: f64,
}

#[derive(Debug, Clone)]
pub struct RidnetOutcome {
    pub best: RidnetModel,
    pub last: RidnetModel,
    pub best_epoch: usize,
    pub best_validation_l1: f64,
    pub initial_validation_l1: f64,
    pub epochs_completed: usize,
    pub log: Vec<RidnetEpochLog>,
}

const EVAL_BATCH: usize = 64;

fn validation_l1(net: &Ridnet, pairs: &PairedCorpus, idx: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = pairs.gather(&pairs.inputs, chunk);
        let t = pairs.gather(&pairs.targets, chunk);
        let r = net.residual(&x)?;
        for ((xi, ri), ti) in x.data.iter().zip(&r.data).zip(&t.data) {
            sum += (*xi as f64 + *ri as f64 - *ti as f64).abs();
        }
        count += x.data.len();
    }
    Ok(sum / count as f64)
}

/// Adam with the milestone schedule and best-validation selection.
pub fn train_ridnet(pairs: &PairedCorpus, cfg: &RidnetTrainConfig, resume: Option<&RidnetOutcome>) -> Result<RidnetOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::state("stage-1 training corpus is empty"));
    }
    let (train_idx, val_idx) = split_train_val(pairs.len(), cfg.validation_fraction, cfg.split_seed)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::invalid("corpus too small for a train/validation split"));
    }
    let (mut model, mut out) = match resume {
        Some(prev) => {
            if prev.last.domain != pairs.domain {
                return Err(Error::state("resumed RIDNet was trained in the other domain"));
            }
            (prev.last.clone(), prev.clone())
        }
        None => {
            let model = RidnetModel::new(
                pairs.num_antennas,
                pairs.num_users,
                pairs.domain,
                pairs.normalization_scale,
                cfg,
            )?;
            let initial = validation_l1(&model.net, pairs, &val_idx)?;
            info!("ridnet ({}): initial validation L1 {initial:.5}", pairs.domain);
            let out = RidnetOutcome {
                best: model.clone(),
                last: model.clone(),
                best_epoch: 0,
                best_validation_l1: f64::INFINITY,
                initial_validation_l1: initial,
                epochs_completed: 0,
                log: Vec::new(),
            };
            (model, out)
        }
    };
    let first = out.epochs_completed + 1;
    let total = out.epochs_completed + cfg.epochs;
    let mut opt = Adam::new(cfg.learning_rate(first, total));

    for epoch in first..=total {
        let started = Instant::now();
        opt.set_learning_rate(cfg.learning_rate(epoch, total));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed ^ 0x5249_444e, Purpose::Shuffle, epoch as u64));
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = pairs.gather(&pairs.inputs, chunk);
            let t = pairs.gather(&pairs.targets, chunk);
            model.net.zero_grad();
            let (r, trace) = model.net.forward_traced(&x)?;
            let count = r.data.len() as f32;
            let mut g = r.clone();
            let mut loss = 0.0f64;
            for ((gi, xi), ti) in g.data.iter_mut().zip(&x.data).zip(&t.data) {
                let e = *gi + xi - ti;
                loss += e.abs() as f64;
                *gi = if e > 0.0 {
                    1.0 / count
                } else if e < 0.0 {
                    -1.0 / count
                } else {
                    0.0
                };
            }
            let loss = loss / count as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: RIDNet loss {loss}")));
            }
            model.net.backward(&trace, &g);
            opt.step(&mut model.net.params_mut());
            sum += loss;
            batches += 1;
        }
        let val = validation_l1(&model.net, pairs, &val_idx)?;
        let row = RidnetEpochLog {
            epoch,
            learning_rate: opt.learning_rate(),
            train_l1: sum / batches as f64,
            validation_l1: val,
        };
        info!(
            "ridnet ({}) epoch {epoch}: lr {:e} train {:.5} val {:.5} [{:.1}s]",
            pairs.domain,
            row.learning_rate,
            row.train_l1,
            val,
            started.elapsed().as_secs_f64()
        );
        out.log.push(row);
        out.epochs_completed = epoch;
        if val < out.best_validation_l1 {
            out.best_validation_l1 = val;
            out.best_epoch = epoch;
            out.best = model.clone();
            out.best.trained = true;
        }
    }
    model.trained = true;
    out.last = model;
    Ok(out)
}

pub const STAGE1_DIR: &str = "stage1";
const STAGE1_MANIFEST: &str = "stage1.json";
const STAGE1_FILE: &str = "coarse.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stage1Manifest {
    format_version: u32,
    dataset_hash: String,
    generator_checksum: u32,
    num_samples: usize,
    num_antennas: usize,
    num_users: usize,
    crc32: u32,
}

/// Coarse estimates of every sample of `data` from the frozen generator.
pub fn stage1_estimates(data: &Dataset, cgan: &CganModel) -> Result<Vec<DMatrix<Complex64>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let obs: Vec<_> = chunk.iter().map(|&i| data.observation(i)).collect();
        let pil: Vec<_> = chunk.iter().map(|&i| data.pilots(i)).collect();
        let o: Vec<_> = obs.iter().collect();
        let p: Vec<_> = pil.iter().collect();
        out.extend(cgan.estimate_batch(&o, &p)?);
    }
    Ok(out)
}

/// Stage-1 estimates cached under `dir`, regenerated when the dataset or
/// generator weights differ from the cached run.
pub fn cached_stage1(dir: &Path, data: &Dataset, cgan: &CganModel) -> Result<Vec<DMatrix<Complex64>>> {
    let dataset_hash = data.manifest.hash();
    let generator_checksum = cgan.generator.param_checksum();
    if let Ok(cached) = load_stage1(dir) {
        if cached.0.dataset_hash == dataset_hash && cached.0.generator_checksum == generator_checksum {
            return Ok(cached.1);
        }
    }
    let coarse = stage1_estimates(data, cgan)?;
    let (n, k) = (data.manifest.num_antennas, data.manifest.num_users);
    let mut bytes = Vec::with_capacity(coarse.len() * 2 * n * k * 4);
    for h in &coarse {
        bytes.extend(pack_channel(h, 1.0, false).iter().flat_map(|v| v.to_le_bytes()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(STAGE1_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    let manifest = Stage1Manifest {
        format_version: CHECKPOINT_VERSION,
        dataset_hash,
        generator_checksum,
        num_samples: coarse.len(),
        num_antennas: n,
        num_users: k,
        crc32: crc32fast::hash(&bytes),
    };
    let path = dir.join(STAGE1_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest always serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    // Re-read so that what the caller trains on is exactly what is cached
    // (values pass through f32 on disk).
    Ok(load_stage1(dir)?.1)
}

fn load_stage1(dir: &Path) -> Result<(Stage1Manifest, Vec<DMatrix<Complex64>>)> {
    let path = dir.join(STAGE1_MANIFEST);
    if !path.exists() {
        return Err(Error::state(format!("no stage-1 corpus at {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Stage1Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: m.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let slab = 2 * m.num_antennas * m.num_users;
    let bytes = read_f32_file(&dir.join(STAGE1_FILE), STAGE1_FILE, (m.num_samples * slab * 4) as u64)?;
    let actual = crc32fast::hash(&bytes);
    if actual != m.crc32 {
        return Err(Error::Checksum {
            array: STAGE1_FILE.into(),
            expected: m.crc32,
            actual,
        });
    }
    let values = bytes_to_f32(&bytes);
    let coarse = values
        .chunks_exact(slab)
        .map(|c| unpack_channel(c, m.num_antennas, m.num_users, 1.0))
        .collect();
    Ok((m, coarse))
}

/// Load a cached stage-1 corpus; a missing cache is a state error.
pub fn load_stage1_corpus(dir: &Path) -> Result<Vec<DMatrix<Complex64>>> {
    Ok(load_stage1(dir)?.1)
}

pub const RIDNET_KIND: &str = "ridnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidnetCheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub domain: Domain,
    pub config_hash: String,
    pub num_antennas: usize,
    pub num_users: usize,
    pub normalization_scale: f64,
    pub generator_checksum: u32,
    pub train: RidnetTrainConfig,
    pub best_epoch: usize,
    pub epochs_completed: usize,
    pub validation_l1: f64,
    pub initial_validation_l1: f64,
    pub best: BlobInfo,
    pub last: BlobInfo,
}

const LOG_HEADER: &str = "epoch,learning_rate,train_l1,validation_l1";

pub fn save_ridnet(
    dir: &Path,
    outcome: &RidnetOutcome,
    cfg: &RidnetTrainConfig,
    config_hash: &str,
    generator_checksum: u32,
) -> Result<RidnetCheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best = checkpoint::write_blob(dir, "weights.bin", &outcome.best)?;
    let last = checkpoint::write_blob(dir, "last.bin", &outcome.last)?;
    let m = &outcome.best;
    let manifest = RidnetCheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        kind: RIDNET_KIND.into(),
        domain: m.domain,
        config_hash: config_hash.into(),
        num_antennas: m.num_antennas,
        num_users: m.num_users,
        normalization_scale: m.normalization_scale,
        generator_checksum,
        train: cfg.clone(),
        best_epoch: outcome.best_epoch,
        epochs_completed: outcome.epochs_completed,
        validation_l1: outcome.best_validation_l1,
        initial_validation_l1: outcome.initial_validation_l1,
        best,
        last,
    };
    checkpoint::write_manifest(dir, &manifest)?;
    append_log(
        &dir.join(crate::cgan::TRAIN_LOG_FILE),
        LOG_HEADER,
        outcome.log.iter().map(|r| {
            (
                r.epoch,
                format!("{},{:e},{},{}", r.epoch, r.learning_rate, r.train_l1, r.validation_l1),
            )
        }),
    )?;
    Ok(manifest)
}

pub fn load_ridnet(dir: &Path) -> Result<(RidnetCheckpointManifest, RidnetOutcome)> {
    let manifest: RidnetCheckpointManifest = checkpoint::read_manifest(dir)?;
    if manifest.kind != RIDNET_KIND {
        return Err(Error::Format {
            path: dir.join(checkpoint::CHECKPOINT_FILE),
            message: format!("expected a {RIDNET_KIND} checkpoint, found `{}`", manifest.kind),
        });
    }
    let mut best = RidnetModel::new(
        manifest.num_antennas,
        manifest.num_users,
        manifest.domain,
        manifest.normalization_scale,
        &manifest.train,
    )?;
    let mut last = best.clone();
    checkpoint::read_blob(dir, &manifest.best, &mut best)?;
    checkpoint::read_blob(dir, &manifest.last, &mut last)?;
    best.trained = true;
    last.trained = true;
    let log = read_log(&dir.join(crate::cgan::TRAIN_LOG_FILE)).unwrap_or_default();
    let outcome = RidnetOutcome {
        best,
        last,
        best_epoch: manifest.best_epoch,
        best_validation_l1: manifest.validation_l1,
        initial_validation_l1: manifest.initial_validation_l1,
        epochs_completed: manifest.epochs_completed,
        log,
    };
    Ok((manifest, outcome))
}

fn read_log(path: &Path) -> Option<Vec<RidnetEpochLog>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
            (v.len() == 4).then(|| RidnetEpochLog {
                epoch: v[0] as usize,
                learning_rate: v[1],
                train_l1: v[2],
                validation_l1: v[3],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, b: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(c, b, h, w, (0..c * b * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn small_cfg() -> RidnetTrainConfig {
        RidnetTrainConfig {
            filters: 4,
            eau_count: 2,
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            milestones: vec![0.5, 0.8],
            batch_size: 8,
            epochs: 2,
            seed: 3,
            validation_fraction: 0.2,
            split_seed: 4,
        }
    }

    #[test]
    fn eau_shape_and_gate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Eau::new(8, &mut rng);
        let x = random_map(8, 3, 6, 5, 2);
        let y = e.forward(&x);
        assert!(y.same_shape(&x));
        let g = e.gate(&x);
        assert_eq!(g.len(), 8 * 3);
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_gate_eau_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = Eau::new(8, &mut rng);
        e.gate_override = Some(0.0);
        let x = random_map(8, 2, 6, 5, 2);
        assert_eq!(e.forward(&x), x);
    }

    #[test]
    fn zero_gates_double_the_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Ridnet::new(8, 4, &mut rng);
        net.set_gate_override(Some(0.0));
        let x = random_map(2, 2, 8, 4, 3);
        let f0 = net.feature_extract(&x).unwrap();
        let fr = net.feature_learning(&f0).unwrap();
        for (a, b) in fr.data.iter().zip(&f0.data) {
            assert_eq!(*a, 2.0 * b);
        }
        net.long_skip = false;
        assert_eq!(net.feature_learning(&f0).unwrap(), f0);
    }

    #[test]
    fn feature_extract_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Ridnet::new(8, 1, &mut rng);
        let (_, bias) = net.head.layer.weight_mut();
        bias.unwrap().value.fill(0.0);
        net.head.act = Activation::Identity;
        let x = random_map(2, 1, 8, 4, 3);
        let mut x2 = x.clone();
        x2.scale(-2.5);
        let mut y = net.feature_extract(&x).unwrap();
        y.scale(-2.5);
        let y2 = net.feature_extract(&x2).unwrap();
        assert_eq!(y2.channels, 8);
        for (a, b) in y.data.iter().zip(&y2.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reconstruct_zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Ridnet::new(8, 1, &mut rng);
        let r = net.reconstruct(&FeatureMap::zeros(8, 2, 4, 4)).unwrap();
        assert_eq!(r.channels, 2);
        assert!(r.data.iter().all(|&v| v == 0.0));
        assert!(net.feature_extract(&FeatureMap::zeros(3, 1, 4, 4)).is_err());
    }

    #[test]
    fn fresh_model_is_exact_identity() {
        let m = RidnetModel::new(8, 4, Domain::Spatial, 0.7, &small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h: Vec<_> = (0..5)
            .map(|_| DMatrix::from_fn(8, 4, |_, _| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))))
            .collect();
        assert_eq!(m.apply(&h).unwrap(), h);
    }

    #[test]
    fn untrained_and_wrong_domain_are_state_errors() {
        let mut m = RidnetModel::new(8, 4, Domain::Angular, 1.0, &small_cfg()).unwrap();
        let h = ChannelRealization {
            matrix: DMatrix::zeros(8, 4),
            domain: Domain::Angular,
            per_user_paths: Vec::new(),
            seed: 0,
        };
        assert!(matches!(denoise_channel(&h, &m), Err(Error::State(_))));
        m.trained = true;
        assert!(denoise_channel(&h, &m).is_ok());
        let spatial = ChannelRealization {
            domain: Domain::Spatial,
            ..h
        };
        assert!(matches!(denoise_channel(&spatial, &m), Err(Error::State(_))));
    }

    #[test]
    fn loss_conventions() {
        let a = vec![0.25f32; 12];
        assert_eq!(ridnet_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<f32> = a.iter().map(|v| v + 0.5).collect();
        assert!((ridnet_loss(&b, &a).unwrap() - 0.5).abs() < 1e-7);
        assert!(ridnet_loss(&a[..4], &a).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let c = RidnetTrainConfig {
            learning_rates: vec![1e-4, 1e-5, 1e-6],
            ..small_cfg()
        };
        let lrs: Vec<f64> = (1..=30).map(|e| c.learning_rate(e, 30)).collect();
        assert!(lrs[..15].iter().all(|&l| l == 1e-4));
        assert!(lrs[15..24].iter().all(|&l| l == 1e-5));
        assert!(lrs[24..].iter().all(|&l| l == 1e-6));
    }

    fn nth_param(m: &mut dyn Parameters, mut idx: usize, delta: f32) {
        for p in m.params_mut() {
            if idx < p.len() {
                p.value[idx] += delta;
                return;
            }
            idx -= p.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Ridnet::new(4, 2, &mut rng);
        // Non-zero tail so that every layer receives gradient.
        for v in net.tail.weight.value.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let x = random_map(2, 2, 6, 4, 5);
        let r = random_map(2, 2, 6, 4, 6);
        let loss = |n: &Ridnet| -> f64 {
            n.residual(&x).unwrap().data.iter().zip(&r.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        net.zero_grad();
        let (_, trace) = net.forward_traced(&x).unwrap();
        net.backward(&trace, &r);
        let analytic: Vec<f32> = net.named_params().iter().flat_map(|(_, p)| p.grad.clone()).collect();
        let h = 1e-3f32;
        let (mut checked, mut agree) = (0, 0);
        for idx in (0..analytic.len()).step_by(31) {
            let mut np = net.clone();
            let mut nm = net.clone();
            nth_param(&mut np, idx, h);
            nth_param(&mut nm, idx, -h);
            let fd = (loss(&np) - loss(&nm)) / (2.0 * h as f64);
            let a = analytic[idx] as f64;
            if (fd - a).abs() < 2e-3 + 0.02 * a.abs() {
                agree += 1;
            }
            checked += 1;
        }
        assert!(checked > 40 && agree * 10 >= checked * 9, "{agree}/{checked} probes agree");
    }
}
