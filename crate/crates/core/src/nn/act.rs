use super::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: &mut FeatureMap) {
        match self {
            Activation::Identity => {}
            Activation::Relu => x.data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::LeakyRelu(slope) => x.data.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            }),
            Activation::Sigmoid => x.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Tanh => x.data.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// Turn `dL/dy` into `dL/dx` in place, given the activation output `y`.
    /// Every supported activation is monotone, so `y` determines the slope.
    pub fn backward(self, y: &FeatureMap, grad: &mut FeatureMap) {
        let g = grad.data.iter_mut().zip(&y.data);
        match self {
            Activation::Identity => {}
            Activation::Relu => g.for_each(|(g, y)| {
                if *y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::LeakyRelu(slope) => g.for_each(|(g, y)| {
                if *y < 0.0 {
                    *g *= slope
                }
            }),
            Activation::Sigmoid => g.for_each(|(g, y)| *g *= y * (1.0 - y)),
            Activation::Tanh => g.for_each(|(g, y)| *g *= 1.0 - y * y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let xs = [-2.0f32, -0.3, 0.4, 1.7];
        for act in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Sigmoid, Activation::Tanh] {
            let x = FeatureMap::from_vec(1, 1, 1, 4, xs.to_vec());
            let mut y = x.clone();
            act.apply(&mut y);
            let mut g = FeatureMap::from_vec(1, 1, 1, 4, vec![1.0; 4]);
            act.backward(&y, &mut g);
            for (i, &x0) in xs.iter().enumerate() {
                let f = |v: f32| {
                    let mut m = FeatureMap::from_vec(1, 1, 1, 1, vec![v]);
                    act.apply(&mut m);
                    m.data[0]
                };
                let fd = (f(x0 + 1e-3) - f(x0 - 1e-3)) / 2e-3;
                assert!((fd - g.data[i]).abs() < 1e-2, "{act:?} at {x0}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
    }
}
