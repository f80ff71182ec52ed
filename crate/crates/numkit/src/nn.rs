//! Feed-forward building blocks: linear layers, layer normalization, and
//! the MLP wiring used by every parameterized function in the system.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{NumkitError, Result};
use crate::tape::{Param, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    LayerNorm,
}

/// Architecture description of a multi-layer perceptron.
///
/// `layer_widths` lists every layer including input and output, so the
/// smallest valid network is a single linear map `[in, out]`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    pub normalization: Normalization,
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> Self {
        MlpSpec {
            layer_widths,
            hidden_activation: HiddenActivation::Gelu,
            output_activation: OutputActivation::Linear,
            normalization: Normalization::LayerNorm,
            dropout_rate: 0.0,
        }
    }

    pub fn with_output(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.normalization = norm;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(NumkitError::Contract(
                "MlpSpec needs at least two layer widths".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(NumkitError::Contract("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NumkitError::Contract(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Self {
        let w = fan_in_uniform(rng, fan_in, fan_out);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), ArrayD::from_shape_vec(IxDyn(&[fan_out]), b).unwrap()),
        }
    }

    /// `x` is `[.., fan_in]`; rank-2 input applies a plain matmul, rank-3 is
    /// flattened over the leading axes first.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let fan_in = self.w.value.shape()[0];
        let fan_out = self.w.value.shape()[1];
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        match shape.len() {
            2 => x.matmul(w).add(b),
            3 => {
                let rows = shape[0] * shape[1];
                let flat = x.reshape(&[rows, fan_in]);
                flat.matmul(w).add(b).reshape(&[shape[0], shape[1], fan_out])
            }
            n => panic!("Linear::forward expects rank 2 or 3 input, got rank {n}"),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), ArrayD::ones(IxDyn(&[dim]))),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let last = x.shape().len() - 1;
        let mean = x.mean_axis_keep(last);
        let centered = x.sub(mean);
        let var = centered.square().mean_axis_keep(last);
        let denom = var.add_scalar(self.eps).sqrt();
        let normed = centered.div(denom);
        normed.mul(tape.param(&self.gain)).add(tape.param(&self.bias))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Multi-layer perceptron with GELU hidden activations and optional
/// per-hidden-layer LayerNorm, in the order linear -> norm -> activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Linear>,
    norms: Vec<LayerNorm>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, name: &str, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for i in 0..spec.layer_widths.len() - 1 {
            let fan_in = spec.layer_widths[i];
            let fan_out = spec.layer_widths[i + 1];
            layers.push(Linear::new(&format!("{name}.l{i}"), fan_in, fan_out, rng));
            let is_hidden = i + 2 < spec.layer_widths.len();
            if is_hidden && spec.normalization == Normalization::LayerNorm {
                norms.push(LayerNorm::new(&format!("{name}.ln{i}"), fan_out));
            }
        }
        Ok(Mlp { spec, layers, norms })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Evaluation-mode forward pass (dropout off).
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_inner(tape, x, None)
    }

    /// Training-mode forward pass; draws dropout masks from `rng` when the
    /// spec carries a nonzero dropout rate.
    pub fn forward_train<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var<'t>> {
        self.forward_inner(tape, x, Some(rng))
    }

    fn forward_inner<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let got = *shape.last().ok_or_else(|| {
            NumkitError::shape("Mlp::forward", format!("[.., {}]", self.input_dim()), "[]")
        })?;
        if got != self.input_dim() {
            return Err(NumkitError::shape(
                "Mlp::forward",
                format!("last dim {}", self.input_dim()),
                format!("last dim {got}"),
            ));
        }

        let mut h = x;
        let n_layers = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            let is_hidden = i + 1 < n_layers;
            if is_hidden {
                if self.spec.normalization == Normalization::LayerNorm {
                    h = self.norms[i].forward(tape, h);
                }
                h = match self.spec.hidden_activation {
                    HiddenActivation::Gelu => h.gelu(),
                };
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    if self.spec.dropout_rate > 0.0 {
                        h = apply_dropout(tape, h, self.spec.dropout_rate, rng);
                    }
                }
            }
        }
        Ok(match self.spec.output_activation {
            OutputActivation::Linear => h,
            OutputActivation::Tanh => h.tanh(),
            OutputActivation::Sigmoid => h.sigmoid(),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.params());
        }
        for n in &self.norms {
            out.extend(n.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        for n in &mut self.norms {
            out.extend(n.params_mut());
        }
        out
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }
}

/// Inverted dropout: zero with probability `rate`, scale by 1/(1-rate).
fn apply_dropout<'t>(tape: &'t Tape, x: Var<'t>, rate: f64, rng: &mut ChaCha12Rng) -> Var<'t> {
    let shape = x.shape();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let mask = tape.constant(ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap());
    x.mul(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut r = rng(0);
        let spec = MlpSpec::new(vec![3, 3]).with_normalization(Normalization::None);
        let mut mlp = Mlp::new(spec, "id", &mut r).unwrap();
        let eye = ndarray::Array2::<f64>::eye(3).into_dyn();
        mlp.layers_mut()[0].w.value = eye;
        mlp.layers_mut()[0].b.value = ArrayD::zeros(IxDyn(&[3]));

        let tape = Tape::new();
        let x = tape.constant(ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn());
        let y = mlp.forward(&tape, x).unwrap();
        assert_eq!(y.value(), ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut r = rng(1);
        let mlp = Mlp::new(MlpSpec::new(vec![4, 2]), "m", &mut r).unwrap();
        let tape = Tape::new();
        let x = tape.constant(ndarray::arr2(&[[1.0, 2.0]]).into_dyn());
        assert!(matches!(
            mlp.forward(&tape, x),
            Err(NumkitError::Shape { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let build = || {
            let mut r = rng(42);
            Mlp::new(
                MlpSpec::new(vec![3, 16, 16, 2]).with_dropout(0.0),
                "m",
                &mut r,
            )
            .unwrap()
        };
        let input = ndarray::arr2(&[[0.3, -0.7, 1.1]]).into_dyn();
        let run = |mlp: &Mlp| {
            let tape = Tape::new();
            let x = tape.constant(input.clone());
            mlp.forward(&tape, x).unwrap().value()
        };
        let (a, b) = (build(), build());
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn dropout_draws_are_deterministic_per_seed() {
        let mut r = rng(7);
        let mlp = Mlp::new(MlpSpec::new(vec![3, 32, 2]).with_dropout(0.5), "m", &mut r).unwrap();
        let input = ndarray::arr2(&[[0.5, 0.5, 0.5]]).into_dyn();
        let run = |seed: u64| {
            let tape = Tape::new();
            let x = tape.constant(input.clone());
            let mut dr = rng(seed);
            mlp.forward_train(&tape, x, &mut dr).unwrap().value()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn spec_validation_catches_degenerate_configs() {
        assert!(MlpSpec::new(vec![3]).validate().is_err());
        assert!(MlpSpec::new(vec![3, 0]).validate().is_err());
        assert!(MlpSpec::new(vec![3, 4]).with_dropout(1.0).validate().is_err());
    }
}
