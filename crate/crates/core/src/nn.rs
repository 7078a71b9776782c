//! Parameter storage and the small set of layers the models are built from.
//!
//! Parameters are held in a [`ParamStore`] keyed by dotted path. Initial
//! values come from a seeded stream so that two stores built with the same
//! seed and the same construction order are bit-identical.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
    FanIn(usize),
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal samples drawn from `rng`.
pub fn gaussian(
    rng: &mut impl Rng,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn init_values(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        }
    }
}

struct StoreInner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

pub struct ParamStore {
    inner: Mutex<StoreInner>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("param store poisoned");
        f.debug_struct("ParamStore")
            .field("params", &inner.params.len())
            .field("buffers", &inner.buffers.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Mutex::new(StoreInner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: seeded_rng(seed),
            }),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("param store poisoned")
    }

    fn make(&self, inner: &mut StoreInner, shape: &[usize], init: Init) -> Result<Tensor> {
        let n = shape.iter().product();
        let vals = init_values(init, n, &mut inner.rng);
        Ok(Tensor::from_vec(vals, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the trainable parameter at `name`, creating it on first use.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(v) = inner.params.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self.make(&mut inner, shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.params.insert(name.to_string(), var);
        Ok(out)
    }

    /// Non-trainable state saved alongside parameters.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(t) = inner.buffers.get(name) {
            return Ok(t.clone());
        }
        let t = self.make(&mut inner, shape, init)?;
        inner.buffers.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn set_buffer(&self, name: &str, value: Tensor) -> Result<()> {
        let mut inner = self.lock();
        match inner.buffers.get(name) {
            Some(old) if old.dims() != value.dims() => Err(Error::Shape(format!(
                "buffer {name} has shape {:?}, got {:?}",
                old.dims(),
                value.dims()
            ))),
            _ => {
                inner.buffers.insert(name.to_string(), value.detach());
                Ok(())
            }
        }
    }

    pub fn get_buffer(&self, name: &str) -> Option<Tensor> {
        self.lock().buffers.get(name).cloned()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().params.get(name).cloned()
    }

    /// Trainable variables whose name satisfies `keep`, in name order.
    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.lock().params.values().cloned().collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.lock().params.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.num_params_where(|_| true)
    }

    pub fn num_params_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Every parameter and buffer as a named tensor, in name order.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.lock();
        let mut out: BTreeMap<String, Tensor> = inner
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        for (k, t) in &inner.buffers {
            out.insert(format!("buffer:{k}"), t.clone());
        }
        out
    }

    /// Overwrites existing entries from `tensors` (as produced by [`Self::tensors`]).
    /// Unknown names are inserted, so a store may be loaded before the model is built.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut inner = self.lock();
        for (name, t) in tensors {
            let t = t.to_dtype(self.dtype)?.to_device(&self.device)?;
            if let Some(buf) = name.strip_prefix("buffer:") {
                inner.buffers.insert(buf.to_string(), t);
            } else if let Some(v) = inner.params.get(name) {
                if v.dims() != t.dims() {
                    return Err(Error::Shape(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        t.dims(),
                        v.dims()
                    )));
                }
                v.set(&t)?;
            } else {
                inner.params.insert(name.clone(), Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    /// Loads only entries that already exist with the same shape, returning the
    /// names that were skipped. Used to carry weights across architectures that
    /// share most layers.
    pub fn load_matching(&self, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut inner = self.lock();
        let mut skipped = Vec::new();
        for (name, t) in tensors {
            let t = t.to_dtype(self.dtype)?.to_device(&self.device)?;
            if let Some(buf) = name.strip_prefix("buffer:") {
                match inner.buffers.get(buf) {
                    Some(old) if old.dims() == t.dims() => {
                        inner.buffers.insert(buf.to_string(), t);
                    }
                    _ => skipped.push(name.clone()),
                }
            } else {
                match inner.params.get(name) {
                    Some(v) if v.dims() == t.dims() => v.set(&t)?,
                    _ => skipped.push(name.clone()),
                }
            }
        }
        Ok(skipped)
    }

    /// Copies every entry under `prefix` into `dst`, replacing the prefix with `dst_prefix`.
    pub fn copy_into(&self, prefix: &str, dst: &ParamStore, dst_prefix: &str) -> Result<()> {
        let renamed: BTreeMap<String, Tensor> = self
            .tensors()
            .into_iter()
            .filter_map(|(k, t)| {
                let (is_buf, bare) = match k.strip_prefix("buffer:") {
                    Some(b) => (true, b.to_string()),
                    None => (false, k.clone()),
                };
                let rest = bare.strip_prefix(prefix)?;
                let name = format!("{dst_prefix}{rest}");
                Some((
                    if is_buf {
                        format!("buffer:{name}")
                    } else {
                        name
                    },
                    t.copy().ok()?,
                ))
            })
            .collect();
        dst.load(&renamed)
    }

    /// Sum of all parameter values in f64, a cheap change detector.
    pub fn checksum(&self, keep: impl Fn(&str) -> bool) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (_, v)) in self.vars_where(keep).into_iter().enumerate() {
            let t = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?;
            let w = (i + 1) as f64;
            acc += w * t.sum_all()?.to_scalar::<f64>()?;
            acc += t.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(acc)
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.param(&self.path(name), shape, init)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.buffer(&self.path(name), shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Rank-`r` update `B·A` added to a frozen linear weight.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    /// `(rank, in)`
    pub down: Tensor,
    /// `(out, rank)`, zero at creation so the adapted layer starts equal to its base.
    pub up: Tensor,
    pub rank: usize,
}

impl LowRankAdapter {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, rank: usize) -> Result<Self> {
        Ok(Self {
            down: scope.param("lora_down", &[rank, in_dim], Init::FanIn(in_dim))?,
            up: scope.param("lora_up", &[out_dim, rank], Init::Zeros)?,
            rank,
        })
    }

    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.up.matmul(&self.down)?)
    }
}

/// Fully connected layer over the last dimension, optionally carrying a low-rank adapter.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub adapter: Option<LowRankAdapter>,
    path: String,
}

impl Dense {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(
            scope,
            in_dim,
            out_dim,
            Init::FanIn(in_dim),
            Init::FanIn(in_dim),
        )
    }

    pub fn zeros(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(scope, in_dim, out_dim, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
        w: Init,
        b: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[out_dim, in_dim], w)?,
            bias: Some(scope.param("bias", &[out_dim], b)?),
            adapter: None,
            path: scope.prefix().to_string(),
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight,
            bias,
            adapter: None,
            path: String::new(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn attach_adapter(&mut self, store: &ParamStore, rank: usize) -> Result<()> {
        let scope = Scope {
            store,
            prefix: self.path.clone(),
        };
        self.adapter = Some(LowRankAdapter::new(
            &scope,
            self.in_dim(),
            self.out_dim(),
            rank,
        )?);
        Ok(())
    }

    /// Base weight plus the adapter update, if any.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.adapter {
            Some(a) => Ok(self.weight.add(&a.delta()?)?),
            None => Ok(self.weight.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight()?;
        let dims = x.dims().to_vec();
        let last = *dims
            .last()
            .ok_or_else(|| Error::Shape("dense on a scalar".into()))?;
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((lead, last))?.matmul(&w.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(Self {
            weight: scope.param("weight", &[cout, cin, k, k], Init::FanIn(fan_in))?,
            bias: scope.param("bias", &[cout], Init::FanIn(fan_in))?,
            stride,
            padding,
        })
    }

    pub fn zeros(
        scope: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[cout, cin, k, k], Init::Zeros)?,
            bias: scope.param("bias", &[cout], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Layer norm over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        let groups = [8, 4, 2, 1]
            .into_iter()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        Ok(Self {
            weight: scope.param("weight", &[channels], Init::Ones)?,
            bias: scope.param("bias", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let g = layer_norm(&g, 1e-5)?.reshape((b, c, h, w))?;
        Ok(g.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Multi-head self-attention over `(batch, tokens, dim)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Dense::new(&scope.pp("qkv"), dim, 3 * dim)?,
            out: Dense::new(&scope.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// Attention output before the output projection.
    pub fn mix(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.mix(x)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mse of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(a.sub(b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `1 - mean cosine similarity` between feature vectors along `dim`.
pub fn cosine_distance(a: &Tensor, b: &Tensor, dim: usize) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cosine distance of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let eps = 1e-8;
    let dot = a.mul(b)?.sum_keepdim(dim)?;
    let na = (a.sqr()?.sum_keepdim(dim)? + eps)?.sqrt()?;
    let nb = (b.sqr()?.sum_keepdim(dim)? + eps)?.sqrt()?;
    let cos = dot.div(&na.mul(&nb)?)?;
    Ok(cos.mean_all()?.affine(-1.0, 1.0)?)
}
