//! The LR-to-SR network: a 3x3 feature head, a stack of residual blocks
//! with combined first/second-order channel-wise and spatial attention,
//! a global skip, sub-pixel upsampling and a 1x1 reconstruction layer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn;
use crate::tensor::{concat, Tensor};
use crate::{Error, Result, Scalar};

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of residual attention blocks.
    pub blocks: usize,
    /// Feature channels.
    pub channels: usize,
    /// Upscale factor, 2 or 4.
    pub scale: usize,
    /// Pooled spatial extent for the spatial covariance (H' = W').
    pub sa_pool: usize,
    /// Bottleneck divisor of the channel-attention MLP.
    pub ca_reduction: usize,
    pub use_ca: bool,
    pub use_sa: bool,
    pub use_first_order: bool,
    pub use_second_order: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 5,
            channels: 64,
            scale: 2,
            sa_pool: 8,
            ca_reduction: 4,
            use_ca: true,
            use_sa: true,
            use_first_order: true,
            use_second_order: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!(
                "scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        if self.ca_reduction == 0
            || self.channels < self.ca_reduction
            || self.channels % self.ca_reduction != 0
        {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of ca_reduction ({})",
                self.channels, self.ca_reduction
            )));
        }
        if self.sa_pool < 1 {
            return Err(Error::Config("sa_pool must be >= 1".into()));
        }
        if (self.use_ca || self.use_sa) && !self.use_first_order && !self.use_second_order {
            return Err(Error::Config(
                "an enabled attention branch needs at least one of first/second order".into(),
            ));
        }
        Ok(())
    }

    pub fn upsample_stages(&self) -> usize {
        match self.scale {
            2 => 1,
            4 => 2,
            _ => unreachable!("validated"),
        }
    }
}

/// Named, ordered collection of learnable tensors. Iteration order is the
/// creation order and is identical across runs for a given config.
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        if !tensor.requires_grad() {
            return Err(Error::Contract(format!(
                "parameter {name} must require gradients"
            )));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn clear_grads(&self) {
        for (_, t) in &self.entries {
            t.clear_grad();
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn he_uniform<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

fn add_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<()> {
    let w = Tensor::leaf(
        &[cout, cin, k, k],
        he_uniform(rng, cout * cin * k * k, cin * k * k),
    )?;
    let b = Tensor::leaf(&[cout], vec![S::zero(); cout])?;
    store.insert(&format!("{name}.weight"), w)?;
    store.insert(&format!("{name}.bias"), b)
}

fn add_dense<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_dim: usize,
    in_dim: usize,
) -> Result<()> {
    let w = Tensor::leaf(&[out_dim, in_dim], he_uniform(rng, out_dim * in_dim, in_dim))?;
    let b = Tensor::leaf(&[out_dim, 1], vec![S::zero(); out_dim])?;
    store.insert(&format!("{name}.weight"), w)?;
    store.insert(&format!("{name}.bias"), b)
}

fn add_row<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
) -> Result<()> {
    let w = Tensor::leaf(&[1, k], he_uniform(rng, k, k))?;
    let b = Tensor::leaf(&[1], vec![S::zero(); 1])?;
    store.insert(&format!("{name}.weight"), w)?;
    store.insert(&format!("{name}.bias"), b)
}

/// Build a freshly initialized parameter store: conv and dense weights are
/// uniform in +-sqrt(6/fan_in), biases zero; deterministic per seed.
pub fn build<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = config.channels;
    let p2 = config.sa_pool * config.sa_pool;

    add_conv(&mut store, &mut rng, "head", c, 1, 3)?;
    for b in 0..config.blocks {
        let pre = format!("block{b}");
        add_conv(&mut store, &mut rng, &format!("{pre}.conv1"), c, c, 3)?;
        add_conv(&mut store, &mut rng, &format!("{pre}.conv2"), c, c, 3)?;
        if config.use_ca {
            if config.use_second_order {
                add_row(&mut store, &mut rng, &format!("{pre}.ca.row"), c)?;
            }
            add_dense(
                &mut store,
                &mut rng,
                &format!("{pre}.ca.reduce"),
                c / config.ca_reduction,
                c,
            )?;
            add_dense(
                &mut store,
                &mut rng,
                &format!("{pre}.ca.expand"),
                c,
                c / config.ca_reduction,
            )?;
        }
        if config.use_sa {
            if config.use_second_order {
                add_row(&mut store, &mut rng, &format!("{pre}.sa.row"), p2)?;
            }
            add_conv(&mut store, &mut rng, &format!("{pre}.sa.conv"), 1, 1, 1)?;
        }
        let fuse_in = if config.use_ca && config.use_sa { 2 * c } else { c };
        add_conv(&mut store, &mut rng, &format!("{pre}.fuse"), c, fuse_in, 1)?;
    }
    for s in 0..config.upsample_stages() {
        add_conv(&mut store, &mut rng, &format!("upsample{s}"), 4 * c, c, 3)?;
    }
    add_conv(&mut store, &mut rng, "reconstruct", 1, c, 1)?;
    Ok(store)
}

fn conv<S: Scalar>(
    params: &ParamStore<S>,
    name: &str,
    x: &Tensor<S>,
    padding: usize,
) -> Result<Tensor<S>> {
    nn::conv2d(
        x,
        params.get(&format!("{name}.weight"))?,
        params.get(&format!("{name}.bias"))?,
        padding,
    )
}

/// Channel-wise attention: gate each channel of `h_conv` by a sigmoid of
/// pooled first/second-order channel statistics passed through a
/// bottleneck MLP.
pub fn ca_branch<S: Scalar>(
    params: &ParamStore<S>,
    config: &ModelConfig,
    block: usize,
    h_conv: &Tensor<S>,
) -> Result<Tensor<S>> {
    let c = config.channels;
    let pre = format!("block{block}.ca");
    let mut stat: Option<Tensor<S>> = None;
    if config.use_first_order {
        stat = Some(nn::channel_avg_pool_spatial(h_conv)?);
    }
    if config.use_second_order {
        let sigma = nn::channel_covariance(h_conv)?;
        let v = nn::rowwise_conv(
            &sigma,
            params.get(&format!("{pre}.row.weight"))?,
            params.get(&format!("{pre}.row.bias"))?,
        )?
        .reshape(&[c, 1, 1])?;
        stat = Some(match stat {
            Some(first) => first.add(&v)?,
            None => v,
        });
    }
    let stat = stat.expect("config validation guarantees at least one order");
    let vec = stat.reshape(&[c, 1])?;
    let z = params
        .get(&format!("{pre}.reduce.weight"))?
        .matmul(&vec)?
        .add(params.get(&format!("{pre}.reduce.bias"))?)?
        .relu();
    let logits = params
        .get(&format!("{pre}.expand.weight"))?
        .matmul(&z)?
        .add(params.get(&format!("{pre}.expand.bias"))?)?;
    let gate = logits.sigmoid().reshape(&[c, 1, 1])?;
    h_conv.mul(&gate)
}

/// Spatial attention: gate every spatial position of `h_conv` (shared
/// across channels) by a sigmoid of pooled first/second-order spatial
/// statistics.
pub fn sa_branch<S: Scalar>(
    params: &ParamStore<S>,
    config: &ModelConfig,
    block: usize,
    h_conv: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (h, w) = (h_conv.shape()[1], h_conv.shape()[2]);
    let p = config.sa_pool;
    let pre = format!("block{block}.sa");
    let mut stat: Option<Tensor<S>> = None;
    if config.use_first_order {
        stat = Some(nn::spatial_avg_pool_channel(h_conv)?);
    }
    if config.use_second_order {
        if h < p || w < p {
            return Err(Error::ShapeMismatch(format!(
                "spatial attention with second-order pooling needs H,W >= sa_pool ({p}), got {h}x{w}"
            )));
        }
        let pooled = nn::adaptive_avg_pool(h_conv, p, p)?;
        let sigma = nn::spatial_covariance(&pooled)?;
        let v = nn::rowwise_conv(
            &sigma,
            params.get(&format!("{pre}.row.weight"))?,
            params.get(&format!("{pre}.row.bias"))?,
        )?
        .reshape(&[1, p, p])?;
        let up = nn::nearest_upsample(&v, h, w)?;
        stat = Some(match stat {
            Some(first) => first.add(&up)?,
            None => up,
        });
    }
    let stat = stat.expect("config validation guarantees at least one order");
    let logits = conv(params, &format!("{pre}.conv"), &stat, 0)?;
    let gate = logits.sigmoid();
    h_conv.mul(&gate)
}

/// Fuse attention branch outputs (concatenated channel-wise when both are
/// present) through a 1x1 convolution and add the block input.
pub fn fuse<S: Scalar>(
    params: &ParamStore<S>,
    block: usize,
    h_ca: Option<&Tensor<S>>,
    h_sa: Option<&Tensor<S>>,
    skip_in: &Tensor<S>,
    fallback: &Tensor<S>,
) -> Result<Tensor<S>> {
    let name = format!("block{block}.fuse");
    let fused_in = match (h_ca, h_sa) {
        (Some(ca), Some(sa)) => concat(&[ca, sa])?,
        (Some(ca), None) => ca.clone(),
        (None, Some(sa)) => sa.clone(),
        (None, None) => fallback.clone(),
    };
    conv(params, &name, &fused_in, 0)?.add(skip_in)
}

/// One residual attention block: conv-ReLU-conv, parallel attention
/// branches, fusion, and the identity skip.
pub fn rbam_block<S: Scalar>(
    params: &ParamStore<S>,
    config: &ModelConfig,
    block: usize,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    if x.shape()[0] != config.channels {
        return Err(Error::ShapeMismatch(format!(
            "block expects {} channels, got {:?}",
            config.channels,
            x.shape()
        )));
    }
    let pre = format!("block{block}");
    let h1 = conv(params, &format!("{pre}.conv1"), x, 1)?.relu();
    let h_conv = conv(params, &format!("{pre}.conv2"), &h1, 1)?;
    let h_ca = if config.use_ca {
        Some(ca_branch(params, config, block, &h_conv)?)
    } else {
        None
    };
    let h_sa = if config.use_sa {
        Some(sa_branch(params, config, block, &h_conv)?)
    } else {
        None
    };
    fuse(params, block, h_ca.as_ref(), h_sa.as_ref(), x, &h_conv)
}

/// Sub-pixel upsampling tail: log2(r) stages of 3x3 conv to 4C channels
/// followed by a x2 shuffle, then a 1x1 single-channel reconstruction.
pub fn upsample_head<S: Scalar>(
    params: &ParamStore<S>,
    config: &ModelConfig,
    h: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut cur = h.clone();
    for s in 0..config.upsample_stages() {
        cur = conv(params, &format!("upsample{s}"), &cur, 1)?;
        cur = nn::pixel_shuffle(&cur, 2)?;
    }
    conv(params, "reconstruct", &cur, 0)
}

/// Full forward pass: `(1,H,W) -> (1, r*H, r*W)`.
pub fn forward<S: Scalar>(
    params: &ParamStore<S>,
    config: &ModelConfig,
    lr_image: &Tensor<S>,
) -> Result<Tensor<S>> {
    if lr_image.shape().len() != 3 || lr_image.shape()[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "forward expects a (1,H,W) input, got {:?}",
            lr_image.shape()
        )));
    }
    let (h, w) = (lr_image.shape()[1], lr_image.shape()[2]);
    if config.use_sa && config.use_second_order && (h < config.sa_pool || w < config.sa_pool) {
        return Err(Error::ShapeMismatch(format!(
            "input {h}x{w} is below sa_pool ({}) required by second-order spatial attention",
            config.sa_pool
        )));
    }
    let h0 = conv(params, "head", lr_image, 1)?;
    let mut hb = h0.clone();
    for b in 0..config.blocks {
        hb = rbam_block(params, config, b, &hb)?;
    }
    let feat = hb.add(&h0)?;
    upsample_head(params, config, &feat)
}
