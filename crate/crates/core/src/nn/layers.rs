use rand::Rng;

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// One hidden ReLU layer followed by a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct Head {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

/// Scaled dot-product self-attention with an output projection, a residual
/// connection and layer normalization.
///
/// Rows are split into independent groups (`segments`); rows only attend to
/// rows of their own group, so a batch of sets can be processed at once.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    heads: Vec<Head>,
    out: Linear,
    ln_gain: ParamId,
    ln_bias: ParamId,
    dim: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(NnError::invalid(format!(
                "{num_heads} heads do not divide dimension {dim}"
            )));
        }
        let dk = dim / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            heads.push(Head {
                query: store.add_uniform(format!("{name}.h{h}.query"), &[dim, dk], dim, rng)?,
                key: store.add_uniform(format!("{name}.h{h}.key"), &[dim, dk], dim, rng)?,
                value: store.add_uniform(format!("{name}.h{h}.value"), &[dim, dk], dim, rng)?,
            });
        }
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, rng)?;
        let ln_gain = store.add(format!("{name}.ln.gain"), Tensor::full([dim], 1.0))?;
        let ln_bias = store.add(format!("{name}.ln.bias"), Tensor::zeros([dim]))?;
        Ok(Self {
            heads,
            out,
            ln_gain,
            ln_bias,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `x` is `[n, dim]`; returns `[n, dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, segments: &[usize]) -> Result<Var, NnError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(NnError::ShapeMismatch {
                op: "self_attention",
                left: shape,
                right: vec![self.dim],
            });
        }
        if shape[0] == 0 {
            return Err(NnError::EmptyInput("self_attention"));
        }
        let dk = self.dim / self.heads.len();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (wq, wk, wv) = (g.param(head.query), g.param(head.key), g.param(head.value));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            outs.push(g.attention(q, k, v, segments, scale)?);
        }
        let mixed = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let projected = self.out.forward(g, mixed)?;
        let residual = g.add(x, projected)?;
        let (gain, bias) = (g.param(self.ln_gain), g.param(self.ln_bias));
        g.layer_norm(residual, gain, bias)
    }
}

/// Same-padded 1-D convolution over a `[T, c_in]` sequence.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::invalid(format!("kernel size {kernel} must be odd")));
        }
        let fan_in = c_in * kernel;
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[kernel, c_in, c_out], fan_in, rng)?,
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv1d(x, w, b)
    }
}
