//! Linear layers and MLP stacks shared by the matching and prediction
//! modules.

use rand::Rng;

use crate::error::Result;
use crate::rng::RandomState;
use crate::tensor::{Parameter, Real, Tensor};

/// Affine layer with Xavier-uniform init.
pub struct Linear<T: Real = f32> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut RandomState,
    ) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data: Vec<T> = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.random_range(-limit..limit)))
            .collect();
        let w = Parameter::new(format!("{name}.w"), &[in_dim, out_dim], data)?;
        let b = if bias {
            Some(Parameter::zeros(format!("{name}.b"), &[out_dim]))
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.w, self.b.as_ref())
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match &self.b {
            Some(b) => vec![&self.w, b],
            None => vec![&self.w],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match &mut self.b {
            Some(b) => vec![&mut self.w, b],
            None => vec![&mut self.w],
        }
    }
}

/// Stack of linear layers with ReLU between them. The final layer is
/// linear unless `relu_last` is set.
pub struct Mlp<T: Real = f32> {
    layers: Vec<Linear<T>>,
    relu_last: bool,
}

impl<T: Real> Mlp<T> {
    /// `widths` holds the input width followed by one output width per
    /// layer, e.g. `[64, 64, 32, 1]` is a 3-layer MLP.
    pub fn new(name: &str, widths: &[usize], relu_last: bool, rng: &mut RandomState) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
        for i in 0..widths.len() - 1 {
            layers.push(Linear::new(
                &format!("{name}.{i}"),
                widths[i],
                widths[i + 1],
                true,
                rng,
            )?);
        }
        Ok(Mlp { layers, relu_last })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() || self.relu_last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
