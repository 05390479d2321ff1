use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::{NnError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors, their gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AEIP";
pub const CHECKPOINT_VERSION: u8 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::invalid(format!("duplicate parameter name {name:?}")));
        }
        let n = value.len();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NnError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        for (a, b) in p.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are then cleared.
    pub fn adam_step(&mut self, opt: &Adam) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for p in &mut self.params {
            let data = p.value.data_mut();
            for (i, x) in data.iter_mut().enumerate() {
                let g = p.grad[i];
                p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g;
                p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                *x -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                p.grad[i] = 0.0;
            }
        }
    }

    /// Writes parameter values as an `AEIP` checkpoint.
    ///
    /// Layout: magic, version byte, little-endian `u32` header length, UTF-8
    /// header with one `name<TAB>d0xd1x...` line per parameter, then every
    /// parameter as little-endian `f32` in header order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), NnError> {
        let mut header = String::new();
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
            header.push_str(&format!("{}\t{}\n", p.name, dims.join("x")));
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        let mut payload = Vec::with_capacity(self.num_scalars() * 4);
        for p in &self.params {
            for v in p.value.to_f32() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&payload)?;
        Ok(())
    }

    /// Loads values from a checkpoint into an already-built store; names and
    /// shapes must match exactly. Adam state is reset.
    pub fn load_checkpoint(&mut self, mut r: impl Read) -> Result<(), NnError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let entries = parse_checkpoint(&bytes)?;
        if entries.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {name:?}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != tensor.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = tensor;
            p.m.iter_mut().for_each(|x| *x = 0.0);
            p.v.iter_mut().for_each(|x| *x = 0.0);
            p.grad.iter_mut().for_each(|x| *x = 0.0);
        }
        self.step = 0;
        Ok(())
    }
}

/// Decodes an `AEIP` checkpoint into `(name, tensor)` pairs.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NnError> {
    let bad = |msg: &str| NnError::Checkpoint(msg.to_string());
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing AEIP magic"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header = bytes.get(9..9 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
    let mut payload = &bytes[9 + hlen..];
    let mut out = Vec::new();
    for line in header.lines() {
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| NnError::Checkpoint(format!("malformed header line {line:?}")))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| NnError::Checkpoint(format!("bad shape {dims:?} for {name:?}")))?;
        let n: usize = shape.iter().product();
        if payload.len() < n * 4 {
            return Err(NnError::Checkpoint(format!("truncated payload at {name:?}")));
        }
        let data: Vec<f32> = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        payload = &payload[n * 4..];
        out.push((name.to_string(), Tensor::from_f32(shape, &data)?));
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(out)
}
