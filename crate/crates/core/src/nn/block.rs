use super::{join, Activation, Conv2d, ConvTranspose2d, FeatureMap, InstanceNorm, NormCache, Param, Parameters};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
}

impl Layer {
    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvT(c) => c.forward(x),
        }
    }

    pub fn backward(
        &mut self,
        x: &FeatureMap,
        gy: &FeatureMap,
        param_grad: bool,
        input_grad: bool,
    ) -> Option<FeatureMap> {
        match self {
            Layer::Conv(c) => c.backward_ex(x, gy, param_grad, input_grad),
            Layer::ConvT(c) => c.backward_ex(x, gy, param_grad, input_grad),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Layer::Conv(c) => c.output_size(h, w),
            Layer::ConvT(c) => c.output_size(h, w),
        }
    }

    /// Mutable access to the weight and bias (in that order).
    pub fn weight_mut(&mut self) -> (&mut Param, Option<&mut Param>) {
        match self {
            Layer::Conv(c) => (&mut c.weight, c.bias.as_mut()),
            Layer::ConvT(c) => (&mut c.weight, c.bias.as_mut()),
        }
    }
}

/// Convolution, optional instance normalization, activation.
#[derive(Debug, Clone)]
pub struct Block {
    pub layer: Layer,
    pub norm: Option<InstanceNorm>,
    pub act: Activation,
}

/// What a traced forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: FeatureMap,
    norm: Option<NormCache>,
    output: FeatureMap,
}

impl Trace {
    pub fn output(&self) -> &FeatureMap {
        &self.output
    }
}

impl Block {
    pub fn new(layer: Layer, norm: Option<InstanceNorm>, act: Activation) -> Self {
        Self { layer, norm, act }
    }

    fn run(&self, x: &FeatureMap) -> (FeatureMap, Option<NormCache>) {
        let mut y = self.layer.forward(x);
        let mut cache = None;
        if let Some(n) = &self.norm {
            let (z, c) = n.forward(&y);
            y = z;
            cache = Some(c);
        }
        self.act.apply(&mut y);
        (y, cache)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.run(x).0
    }

    pub fn forward_traced(&self, x: &FeatureMap) -> (FeatureMap, Trace) {
        let (y, norm) = self.run(x);
        let trace = Trace {
            input: x.clone(),
            norm,
            output: y.clone(),
        };
        (y, trace)
    }

    pub fn backward(&mut self, trace: &Trace, gy: FeatureMap, input_grad: bool) -> Option<FeatureMap> {
        self.backward_ex(trace, gy, true, input_grad)
    }

    /// Backward pass; with `param_grad == false` the block's gradient
    /// buffers are left untouched.
    pub fn backward_ex(
        &mut self,
        trace: &Trace,
        mut gy: FeatureMap,
        param_grad: bool,
        input_grad: bool,
    ) -> Option<FeatureMap> {
        self.act.backward(&trace.output, &mut gy);
        if let (Some(n), Some(c)) = (&mut self.norm, &trace.norm) {
            gy = if param_grad {
                n.backward(c, &gy)
            } else {
                n.clone().backward(c, &gy)
            };
        }
        self.layer.backward(&trace.input, &gy, param_grad, input_grad)
    }
}

impl Parameters for Block {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match &self.layer {
            Layer::Conv(c) => c.collect_params(&join(prefix, "conv"), out),
            Layer::ConvT(c) => c.collect_params(&join(prefix, "convt"), out),
        }
        if let Some(n) = &self.norm {
            n.collect_params(&join(prefix, "norm"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match &mut self.layer {
            Layer::Conv(c) => c.collect_params_mut(out),
            Layer::ConvT(c) => c.collect_params_mut(out),
        }
        if let Some(n) = &mut self.norm {
            n.collect_params_mut(out);
        }
    }
}
