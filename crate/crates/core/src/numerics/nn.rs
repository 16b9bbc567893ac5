//! Transformer building blocks expressed on a [`Graph`]. Every block reads its
//! weights from the graph's parameter set under a name prefix, so the same
//! code serves training, inference and gradient checking.

use rand::Rng;

use super::graph::{AttnMask, Graph, Var};
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParameterSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    ps.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok(())
}

pub fn init_layer_norm(ps: &mut ParameterSet, name: &str, d: usize) -> Result<()> {
    ps.insert(format!("{name}.g"), Tensor::filled(&[1, d], 1.0))?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, d]))?;
    Ok(())
}

/// Query, key, value and output projections. Keys carry no bias: a key bias
/// shifts every score of a query equally and cancels in the softmax.
pub fn init_attention<R: Rng + ?Sized>(ps: &mut ParameterSet, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    init_linear(ps, &format!("{prefix}.q"), d, d, rng)?;
    let std = (1.0 / d as f64).sqrt();
    ps.insert(format!("{prefix}.k.w"), Tensor::randn(&[d, d], std, rng))?;
    init_linear(ps, &format!("{prefix}.v"), d, d, rng)?;
    init_linear(ps, &format!("{prefix}.o"), d, d, rng)
}

pub fn init_ffn<R: Rng + ?Sized>(ps: &mut ParameterSet, prefix: &str, d: usize, hidden: usize, rng: &mut R) -> Result<()> {
    init_linear(ps, &format!("{prefix}.fc1"), d, hidden, rng)?;
    init_linear(ps, &format!("{prefix}.fc2"), hidden, d, rng)
}

pub fn init_encoder_layer<R: Rng + ?Sized>(ps: &mut ParameterSet, prefix: &str, dims: LayerDims, rng: &mut R) -> Result<()> {
    dims.validate()?;
    init_layer_norm(ps, &format!("{prefix}.ln1"), dims.d)?;
    init_attention(ps, &format!("{prefix}.attn"), dims.d, rng)?;
    init_layer_norm(ps, &format!("{prefix}.ln2"), dims.d)?;
    init_ffn(ps, &format!("{prefix}.ffn"), dims.d, dims.ffn, rng)
}

pub fn linear(g: &mut Graph<'_>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

pub fn layer_norm(g: &mut Graph<'_>, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(&format!("{name}.g"))?;
    let beta = g.param(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Projected multi-head attention: `xq` supplies queries, `xkv` keys/values.
pub fn mha(g: &mut Graph<'_>, xq: Var, xkv: Var, prefix: &str, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
    let q = linear(g, xq, &format!("{prefix}.q"))?;
    let kw = g.param(&format!("{prefix}.k.w"))?;
    let k = g.matmul(xkv, kw)?;
    let v = linear(g, xkv, &format!("{prefix}.v"))?;
    let a = g.attention(q, k, v, heads, mask)?;
    linear(g, a, &format!("{prefix}.o"))
}

pub fn ffn(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.gelu(h)?;
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Pre-norm encoder layer: `x + MHA(LN(x))` followed by `h + FFN(LN(h))`.
pub fn encoder_layer(g: &mut Graph<'_>, x: Var, prefix: &str, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
    let n1 = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let a = mha(g, n1, n1, &format!("{prefix}.attn"), heads, mask)?;
    let h = g.add(x, a)?;
    let n2 = layer_norm(g, h, &format!("{prefix}.ln2"))?;
    let f = ffn(g, n2, &format!("{prefix}.ffn"))?;
    g.add(h, f)
}

/// Sinusoidal position code for a (possibly fractional) position.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

pub fn positions(positions: &[f64], d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = positions.iter().map(|&p| sinusoid(p, d)).collect();
    if rows.is_empty() {
        return Tensor::zeros(&[0, d]);
    }
    Tensor::from_rows(&rows).expect("uniform rows")
}

/// Multi-head scaled dot-product attention over already-projected inputs.
pub fn multi_head_attention(query: &Tensor, key: &Tensor, value: &Tensor, mask: Option<&AttnMask>, heads: usize) -> Result<Tensor> {
    let ps = ParameterSet::new();
    let mut g = Graph::new(&ps);
    let q = g.input(query)?;
    let k = g.input(key)?;
    let v = g.input(value)?;
    let out = g.attention(q, k, v, heads, mask)?;
    Ok(g.tensor(out))
}

/// One pre-norm transformer encoder layer evaluated without recording gradients.
pub fn transformer_encoder_layer(x: &Tensor, mask: Option<&AttnMask>, params: &ParameterSet, prefix: &str, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let xv = g.input(x)?;
    let out = encoder_layer(&mut g, xv, prefix, heads, mask)?;
    Ok(g.tensor(out))
}
