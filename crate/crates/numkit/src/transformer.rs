//! Pre-norm Transformer encoder with multi-head self-attention.
//!
//! Handles single-step (`T = 1`) and sequential inputs. Sinusoidal position
//! encodings are added only when `T > 1` and the spec asks for them; no
//! causal mask is applied.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

use crate::error::{NumkitError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tape::{Param, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalEncoding {
    None,
    Sinusoidal,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoderSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub positional: PositionalEncoding,
}

impl TransformerEncoderSpec {
    pub fn new(num_layers: usize, num_heads: usize, model_dim: usize) -> Self {
        TransformerEncoderSpec {
            num_layers,
            num_heads,
            model_dim,
            ffn_dim: 4 * model_dim,
            dropout_rate: 0.0,
            positional: PositionalEncoding::Sinusoidal,
        }
    }

    pub fn with_positional(mut self, positional: PositionalEncoding) -> Self {
        self.positional = positional;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(NumkitError::Contract("num_layers must be >= 1".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(NumkitError::Contract(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ffn: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub spec: TransformerEncoderSpec,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(spec: TransformerEncoderSpec, name: &str, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        let layers = (0..spec.num_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(&format!("{p}.ln_attn"), d),
                    wq: Linear::new(&format!("{p}.wq"), d, d, rng),
                    wk: Linear::new(&format!("{p}.wk"), d, d, rng),
                    wv: Linear::new(&format!("{p}.wv"), d, d, rng),
                    wo: Linear::new(&format!("{p}.wo"), d, d, rng),
                    ln_ffn: LayerNorm::new(&format!("{p}.ln_ffn"), d),
                    ff1: Linear::new(&format!("{p}.ff1"), d, spec.ffn_dim, rng),
                    ff2: Linear::new(&format!("{p}.ff2"), spec.ffn_dim, d, rng),
                }
            })
            .collect();
        Ok(TransformerEncoder { spec, layers })
    }

    /// Encodes a single sequence `[T, model_dim]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(NumkitError::shape(
                "transformer_encode",
                "[T, model_dim]",
                format!("{shape:?}"),
            ));
        }
        let t = shape[0];
        let batched = x.reshape(&[1, t, shape[1]]);
        let out = self.forward_batched(tape, batched)?;
        Ok(out.reshape(&[t, shape[1]]))
    }

    /// Encodes a batch of sequences `[B, T, model_dim]`.
    pub fn forward_batched<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.spec.model_dim {
            return Err(NumkitError::shape(
                "transformer_encode",
                format!("[B, T, {}]", self.spec.model_dim),
                format!("{shape:?}"),
            ));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut h = x;
        if t > 1 && self.spec.positional == PositionalEncoding::Sinusoidal {
            let pe = sinusoidal_positions(t, d);
            h = h.add(tape.constant(pe.into_shape_with_order(IxDyn(&[1, t, d])).unwrap()));
        }
        for layer in &self.layers {
            h = self.layer_forward(tape, layer, h, b, t, None)?;
        }
        Ok(h)
    }

    fn layer_forward<'t>(
        &self,
        tape: &'t Tape,
        layer: &EncoderLayer,
        x: Var<'t>,
        b: usize,
        t: usize,
        mut attn_sink: Option<&mut Vec<ArrayD<f64>>>,
    ) -> Result<Var<'t>> {
        let d = self.spec.model_dim;
        let heads = self.spec.num_heads;
        let dh = d / heads;

        // Self-attention block with pre-norm residual.
        let normed = layer.ln_attn.forward(tape, x);
        let q = split_heads(layer.wq.forward(tape, normed), b, t, heads, dh);
        let k = split_heads(layer.wk.forward(tape, normed), b, t, heads, dh);
        let v = split_heads(layer.wv.forward(tape, normed), b, t, heads, dh);

        let kt = k.permute(&[0, 2, 1]);
        let scores = q.batched_matmul(kt).scale(1.0 / (dh as f64).sqrt());
        let probs = scores.softmax_last();
        if let Some(sink) = attn_sink.as_deref_mut() {
            sink.push(probs.value());
        }
        let ctx = probs.batched_matmul(v);
        let merged = merge_heads(ctx, b, t, heads, dh);
        let attn_out = layer.wo.forward(tape, merged);
        let x = x.add(attn_out);

        // Feed-forward block with pre-norm residual.
        let normed = layer.ln_ffn.forward(tape, x);
        let ff = layer.ff2.forward(tape, layer.ff1.forward(tape, normed).gelu());
        Ok(x.add(ff))
    }

    /// Attention probabilities per layer for a single `[T, model_dim]` input,
    /// shaped `[B*heads, T, T]`. Diagnostic accessor; recomputes the forward.
    pub fn attention_maps(&self, x: &ArrayD<f64>) -> Result<Vec<ArrayD<f64>>> {
        let tape = Tape::new();
        let shape = x.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.spec.model_dim {
            return Err(NumkitError::shape(
                "attention_maps",
                format!("[T, {}]", self.spec.model_dim),
                format!("{shape:?}"),
            ));
        }
        let (t, d) = (shape[0], shape[1]);
        let mut h = tape
            .constant(x.clone())
            .reshape(&[1, t, d]);
        if t > 1 && self.spec.positional == PositionalEncoding::Sinusoidal {
            let pe = sinusoidal_positions(t, d);
            h = h.add(tape.constant(pe.into_shape_with_order(IxDyn(&[1, t, d])).unwrap()));
        }
        let mut maps = Vec::new();
        for layer in &self.layers {
            h = self.layer_forward(&tape, layer, h, 1, t, Some(&mut maps))?;
        }
        Ok(maps)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.ln_attn.params());
            out.extend(l.wq.params());
            out.extend(l.wk.params());
            out.extend(l.wv.params());
            out.extend(l.wo.params());
            out.extend(l.ln_ffn.params());
            out.extend(l.ff1.params());
            out.extend(l.ff2.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.ln_attn.params_mut());
            out.extend(l.wq.params_mut());
            out.extend(l.wk.params_mut());
            out.extend(l.wv.params_mut());
            out.extend(l.wo.params_mut());
            out.extend(l.ln_ffn.params_mut());
            out.extend(l.ff1.params_mut());
            out.extend(l.ff2.params_mut());
        }
        out
    }
}

/// `[B, T, d] -> [B*heads, T, dh]`
fn split_heads<'t>(x: Var<'t>, b: usize, t: usize, heads: usize, dh: usize) -> Var<'t> {
    x.reshape(&[b, t, heads, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b * heads, t, dh])
}

/// `[B*heads, T, dh] -> [B, T, d]`
fn merge_heads<'t>(x: Var<'t>, b: usize, t: usize, heads: usize, dh: usize) -> Var<'t> {
    x.reshape(&[b, heads, t, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, t, heads * dh])
}

/// Classic sin/cos position table, `[T, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> ArrayD<f64> {
    let mut pe = ArrayD::zeros(IxDyn(&[t, d]));
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::SeedableRng;

    fn build(spec: TransformerEncoderSpec) -> TransformerEncoder {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        TransformerEncoder::new(spec, "enc", &mut rng).unwrap()
    }

    #[test]
    fn single_step_input_keeps_shape() {
        let enc = build(TransformerEncoderSpec::new(2, 8, 256));
        let tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 256])));
        let y = enc.forward(&tape, x).unwrap();
        assert_eq!(y.shape(), vec![1, 256]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let enc = build(TransformerEncoderSpec::new(2, 4, 16));
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 16]), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        for probs in enc.attention_maps(&x).unwrap() {
            let sums = probs.sum_axis(Axis(probs.ndim() - 1));
            for &s in sums.iter() {
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let spec = TransformerEncoderSpec::new(2, 4, 16).with_positional(PositionalEncoding::None);
        let enc = build(spec);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 16]), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.index_axis_mut(Axis(0), dst)
                .assign(&x.index_axis(Axis(0), src));
        }

        let run = |inp: &ArrayD<f64>| {
            let tape = Tape::new();
            let v = tape.constant(inp.clone());
            enc.forward(&tape, v).unwrap().value()
        };
        let y = run(&x);
        let yp = run(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            let a = yp.index_axis(Axis(0), dst);
            let b = y.index_axis(Axis(0), src);
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn model_dim_mismatch_is_an_error() {
        let enc = build(TransformerEncoderSpec::new(1, 4, 16));
        let tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 8])));
        assert!(matches!(
            enc.forward(&tape, x),
            Err(NumkitError::Shape { .. })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(TransformerEncoderSpec::new(0, 4, 16).validate().is_err());
        assert!(TransformerEncoderSpec::new(1, 3, 16).validate().is_err());
    }
}
