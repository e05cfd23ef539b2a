//! Layers with trainable parameters (conv, linear, layer norm), seeded
//! initialization, the named-parameter registry used for checkpoints, and the
//! AdamW optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::tensor::conv::{conv2d, ConvSpec};
use crate::tensor::{Data, Tensor};

/// Ordered named-parameter registry. Iteration order is the construction
/// order, which is deterministic for a fixed model configuration.
#[derive(Default)]
pub struct ParamMap {
    entries: Vec<(String, Tensor)>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.push((name.into(), t.clone()));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total scalar count across all registered arrays.
    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

/// Anything that exposes trainable parameters under a name prefix.
pub trait Collect {
    fn collect(&self, prefix: &str, params: &mut ParamMap);
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Data {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        // Kaiming-uniform with ReLU gain.
        let fan_in = (c_in / spec.groups) * kernel * kernel;
        let w_bound = (6.0 / fan_in as f64).sqrt();
        let b_bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::new(
            uniform_init(rng, &[c_out, c_in / spec.groups, kernel, kernel], w_bound),
            true,
        );
        let bias = Tensor::new(uniform_init(rng, &[c_out], b_bound), true);
        Conv2d { weight, bias: Some(bias), spec }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Collect for Conv2d {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        params.push(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            params.push(format!("{prefix}.bias"), b);
        }
    }
}

pub struct Linear {
    pub weight: Tensor, // (out, in)
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::new(uniform_init(rng, &[d_out, d_in], bound), true),
            bias: Some(Tensor::new(uniform_init(rng, &[d_out], bound), true)),
        }
    }

    pub fn new_no_bias(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::new(uniform_init(rng, &[d_out, d_in], bound), true),
            bias: None,
        }
    }

    /// Applies to the last axis of an (..., d_in) tensor.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let d_in = *shape.last().expect("linear input rank");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, d_in]);
        let wt = self.weight.permute(&[1, 0]); // (in, out)
        let mut out = flat.matmul(&wt);
        if let Some(b) = &self.bias {
            out = out.add(b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank") = self.weight.shape()[0];
        out.reshape(&out_shape)
    }
}

impl Collect for Linear {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        params.push(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            params.push(format!("{prefix}.bias"), b);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::new(ArrayD::ones(IxDyn(&[dim])), true),
            beta: Tensor::new(ArrayD::zeros(IxDyn(&[dim])), true),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl Collect for LayerNorm {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        params.push(format!("{prefix}.gamma"), &self.gamma);
        params.push(format!("{prefix}.beta"), &self.beta);
    }
}

/// Group normalization with per-channel affine parameters.
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        let groups = if channels % 8 == 0 {
            8
        } else if channels % 4 == 0 {
            4
        } else {
            1
        };
        GroupNorm {
            gamma: Tensor::new(ArrayD::ones(IxDyn(&[1, channels, 1, 1])), true),
            beta: Tensor::new(ArrayD::zeros(IxDyn(&[1, channels, 1, 1])), true),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm_base(self.groups, self.eps)
            .mul(&self.gamma)
            .add(&self.beta)
    }
}

impl Collect for GroupNorm {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        params.push(format!("{prefix}.gamma"), &self.gamma);
        params.push(format!("{prefix}.beta"), &self.beta);
    }
}

/// Conv2d followed by group normalization.
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNorm {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        ConvNorm {
            conv: Conv2d::new(c_in, c_out, kernel, spec, rng),
            norm: GroupNorm::new(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.norm.forward(&self.conv.forward(x))
    }
}

impl Collect for ConvNorm {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.conv.collect(&format!("{prefix}.conv"), params);
        self.norm.collect(&format!("{prefix}.norm"), params);
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Data>,
    v: Vec<Data>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        AdamW {
            params,
            m,
            v,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
        }
    }

    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            p.update_value(|data| {
                ndarray::Zip::from(&mut *data).and(&*m).and(&*v).for_each(|x, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
                });
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Moment estimates and step counter as named arrays (for checkpoints).
    pub fn state_arrays(&self) -> Vec<(String, Data)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("opt.m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("opt.v.{i}"), v.clone()));
        }
        out.push((
            "opt.step".into(),
            ArrayD::from_elem(IxDyn(&[1]), self.step as f64),
        ));
        out
    }

    /// Restores state saved by [`AdamW::state_arrays`]. Arrays must match
    /// the current parameter list in order and shape.
    pub fn load_state(&mut self, arrays: &[(String, Data)]) -> crate::error::Result<()> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| {
                    crate::error::FuseError::Checkpoint(format!(
                        "optimizer state '{name}' missing from checkpoint"
                    ))
                })
        };
        for i in 0..self.m.len() {
            let m = find(&format!("opt.m.{i}"))?;
            let v = find(&format!("opt.v.{i}"))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(crate::error::FuseError::Checkpoint(format!(
                    "optimizer state {i} has the wrong shape"
                )));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        let step = find("opt.step")?;
        self.step = step[[0]] as u64;
        Ok(())
    }
}
