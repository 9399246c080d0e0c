use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the variance head so `ln σ²` stays finite.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Identity,
    Sigmoid,
}

pub fn softplus(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else if a < -30.0 {
        a.exp()
    } else {
        a.exp().ln_1p()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Softplus => softplus(a),
            Activation::Identity => a,
            Activation::Sigmoid => sigmoid(a),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(a),
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and biases drawn from N(0, 1).
    PaperStdNormal,
    /// Weights from N(0, 2 / fan_in), zero biases.
    Scaled,
}

/// Dense layer `y = f(W x + b)`; `weights` is out × in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerFile", into = "LayerFile")]
pub struct MlpLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Row-major on-disk form of a layer.
#[derive(Serialize, Deserialize)]
struct LayerFile {
    activation: Activation,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<MlpLayer> for LayerFile {
    fn from(l: MlpLayer) -> Self {
        LayerFile {
            activation: l.activation,
            weights: l
                .weights
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            bias: l.bias.iter().copied().collect(),
        }
    }
}

impl TryFrom<LayerFile> for MlpLayer {
    type Error = Error;

    fn try_from(f: LayerFile) -> Result<Self> {
        let out = f.weights.len();
        let inp = f.weights.first().map_or(0, Vec::len);
        if out == 0 || inp == 0 || f.weights.iter().any(|r| r.len() != inp) {
            return Err(Error::Config("layer weights must be a non-empty rectangle".into()));
        }
        if f.bias.len() != out {
            return Err(Error::DimensionMismatch {
                expected: out,
                got: f.bias.len(),
            });
        }
        let layer = MlpLayer {
            weights: DMatrix::from_fn(out, inp, |i, j| f.weights[i][j]),
            bias: DVector::from_vec(f.bias),
            activation: f.activation,
        };
        if !layer.is_finite() {
            return Err(Error::Config("layer has non-finite parameters".into()));
        }
        Ok(layer)
    }
}

impl MlpLayer {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let mut draw = || -> f64 { StandardNormal.sample(rng) };
        let (weights, bias) = match init {
            InitScheme::PaperStdNormal => {
                let w = DMatrix::from_fn(out_dim, in_dim, |_, _| draw());
                let b = DVector::from_fn(out_dim, |_, _| draw());
                (w, b)
            }
            InitScheme::Scaled => {
                let s = (2.0 / in_dim as f64).sqrt();
                let w = DMatrix::from_fn(out_dim, in_dim, |_, _| s * draw());
                (w, DVector::zeros(out_dim))
            }
        };
        MlpLayer {
            weights,
            bias,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    /// Pre-activations `W X + b` for a batch stored column-wise.
    pub fn pre_activation(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: x.nrows(),
            });
        }
        let mut a = &self.weights * x;
        for mut col in a.column_iter_mut() {
            col += &self.bias;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.pre_activation(x)?.map(|a| self.activation.apply(a)))
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.forward(&m)?.as_slice().to_vec())
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

/// Gradients for one layer, same shapes as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LayerGrad {
    pub fn into_slices(self) -> [Vec<f64>; 2] {
        [self.weights.as_slice().to_vec(), self.bias.as_slice().to_vec()]
    }
}

/// Inputs and pre-activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<DMatrix<f64>>,
    pub pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

impl Mlp {
    /// Layers of the given widths, `hidden` activations between and
    /// `last` on the final layer.
    pub fn build<R: Rng + ?Sized>(
        in_dim: usize,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (k, &w) in widths.iter().enumerate() {
            let act = if k + 1 == widths.len() { last } else { hidden };
            layers.push(MlpLayer::new(prev, w, act, init, rng));
            prev = w;
        }
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, MlpLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, MlpLayer::out_dim)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let a = l.pre_activation(&h)?;
            let next = a.map(|v| l.activation.apply(v));
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagate. `d_out` is dL/d(pre-activation of the last layer)
    /// when `d_out_is_pre`, else dL/d(output). Returns per-layer gradients
    /// and dL/d(input).
    pub fn backward(
        &self,
        trace: &Trace,
        d_out: DMatrix<f64>,
        d_out_is_pre: bool,
    ) -> (Vec<LayerGrad>, DMatrix<f64>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut delta = d_out;
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            if !(k == n - 1 && d_out_is_pre) {
                delta.zip_apply(&trace.pre[k], |d, a| *d *= layer.activation.derivative(a));
            }
            let gw = &delta * trace.inputs[k].transpose();
            let gb = delta.column_sum();
            let d_in = layer.weights.transpose() * &delta;
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
            delta = d_in;
        }
        grads.reverse();
        (grads, delta)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(MlpLayer::is_finite)
    }

    /// Checks that consecutive layers chain.
    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].out_dim(),
                    got: w[1].in_dim(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye_layer(n: usize, act: Activation) -> MlpLayer {
        MlpLayer {
            weights: DMatrix::identity(n, n),
            bias: DVector::zeros(n),
            activation: act,
        }
    }

    #[test]
    fn identity_layer_passes_input() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(eye_layer(3, Activation::Identity).forward_vec(&x).unwrap(), x);
    }

    #[test]
    fn relu_clips_negatives() {
        assert_eq!(
            eye_layer(2, Activation::Relu).forward_vec(&[-1.0, 2.0]).unwrap(),
            vec![0.0, 2.0]
        );
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - 2.0_f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-50.0) > 0.0);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let err = eye_layer(3, Activation::Relu).forward_vec(&[1.0, 2.0]);
        assert!(matches!(err, Err(Error::DimensionMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn layer_file_is_row_major() {
        let l = MlpLayer {
            weights: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            bias: DVector::from_vec(vec![0.5, -0.5]),
            activation: Activation::Softplus,
        };
        let json = serde_json::to_string(&l).unwrap();
        assert!(json.contains("[[1.0,2.0,3.0],[4.0,5.0,6.0]]"), "{json}");
        let back: MlpLayer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
        let ragged = r#"{"activation":"relu","weights":[[1.0],[1.0,2.0]],"bias":[0,0]}"#;
        assert!(serde_json::from_str::<MlpLayer>(ragged).is_err());
    }
}
