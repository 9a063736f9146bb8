//! L1 loss, Adam, the learning-rate schedule, the patch-based training
//! loop with dihedral augmentation, and checkpoint serialization.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{bicubic_resample, dihedral, extract_patch, image_to_tensor, GrayImage};
use crate::model::{forward, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// LR patch extent; HR crops are `scale * patch_size` square.
    pub patch_size: usize,
    pub lr0: f64,
    pub lr_halve_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub scale: usize,
    /// Write a checkpoint every this many epochs (and at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            patch_size: 48,
            lr0: 1e-4,
            lr_halve_every: 50,
            epochs: 300,
            seed: 0,
            scale: 2,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % self.scale != 0 {
            return Err(Error::Config(format!(
                "patch_size ({}) must be a positive multiple of scale ({})",
                self.patch_size, self.scale
            )));
        }
        if self.lr_halve_every == 0 {
            return Err(Error::Config("lr_halve_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference; the subgradient at zero is zero.
pub fn l1_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "l1_loss shapes {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel();
    let inv_n = S::one() / S::from_f64(n as f64);
    let mut acc = S::zero();
    {
        let pd = pred.data();
        let td = target.data();
        for i in 0..n {
            acc = acc + (pd[i] - td[i]).abs();
        }
    }
    let back = Box::new(move |g: &[S], parents: &[Tensor<S>]| {
        let (pred, target) = (&parents[0], &parents[1]);
        let pd = pred.data();
        let td = target.data();
        let g0 = g[0] * inv_n;
        let sign = |d: S| {
            if d > S::zero() {
                S::one()
            } else if d < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        };
        if pred.requires_grad() {
            pred.accum(|gp| {
                for i in 0..n {
                    gp[i] = gp[i] + g0 * sign(pd[i] - td[i]);
                }
            });
        }
        if target.requires_grad() {
            target.accum(|gt| {
                for i in 0..n {
                    gt[i] = gt[i] - g0 * sign(pd[i] - td[i]);
                }
            });
        }
    });
    Ok(Tensor::custom_op(
        vec![1],
        vec![acc * inv_n],
        vec![pred.clone(), target.clone()],
        back,
    ))
}

/// Per-parameter Adam moments, aligned with the parameter store order.
pub struct AdamState<S: Scalar> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let m = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over all parameters in store order.
/// Gradients must be populated; they are zeroed afterwards.
pub fn adam_step<S: Scalar>(
    params: &ParamStore<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    // Fail before mutating anything if any gradient is missing.
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::State(format!("missing gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let eps = S::from_f64(state.eps);
    let lr_s = S::from_f64(lr);
    let corr1 = S::one() - b1.powi(t);
    let corr2 = S::one() - b2.powi(t);
    for (i, (_, p)) in params.iter().enumerate() {
        let g = p.grad().unwrap();
        let mut data = p.to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            data[j] = data[j] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(data)?;
        p.clear_grad();
    }
    Ok(())
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.lr_halve_every) as i32)
}

/// Apply one uniformly drawn dihedral transform to an aligned LR/HR pair.
pub fn augment<S: Scalar>(
    pair: (&GrayImage<S>, &GrayImage<S>),
    scale: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(GrayImage<S>, GrayImage<S>)> {
    let (lr, hr) = pair;
    if hr.height() != scale * lr.height() || hr.width() != scale * lr.width() {
        return Err(Error::Contract(format!(
            "misaligned pair: LR {}x{} vs HR {}x{} at scale {scale}",
            lr.height(),
            lr.width(),
            hr.height(),
            hr.width()
        )));
    }
    let k = rng.gen_range(0..8u8);
    Ok((dihedral(lr, k), dihedral(hr, k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_l1: f64,
    pub wallclock_s: f64,
}

impl EpochLog {
    /// Append-only log line: `epoch,lr,mean_l1,wallclock_s`.
    pub fn line(&self) -> String {
        format!("{},{:e},{:e},{:.3}", self.epoch, self.lr, self.mean_l1, self.wallclock_s)
    }
}

/// Patch-based training over HR images.
///
/// Each batch draws `batch_size` seeded random HR crops (with replacement
/// across images), bicubic-downsamples them to form LR inputs, augments,
/// and takes one Adam step on the mean L1. Epochs reseed the RNG from
/// `(seed, epoch)` so interrupted runs resume exactly.
pub fn train<S: Scalar>(
    params: &ParamStore<S>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    images: &[GrayImage<S>],
    state: &mut AdamState<S>,
    start_epoch: usize,
    mut after_epoch: impl FnMut(&EpochLog, &ParamStore<S>, &AdamState<S>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    mcfg.validate()?;
    tcfg.validate()?;
    let hr_size = tcfg.scale * tcfg.patch_size;
    let usable: Vec<&GrayImage<S>> = images
        .iter()
        .filter(|img| {
            let ok = img.height() >= hr_size && img.width() >= hr_size;
            if !ok {
                eprintln!(
                    "warning: skipping {}x{} image smaller than HR crop {hr_size}",
                    img.height(),
                    img.width()
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Contract(
            "no training image is large enough for the configured patch size".into(),
        ));
    }
    let total_px: usize = usable.iter().map(|i| i.height() * i.width()).sum();
    let batch_px = tcfg.batch_size * hr_size * hr_size;
    let batches = total_px.div_ceil(batch_px).max(1);

    let inv_batch = S::one() / S::from_f64(tcfg.batch_size as f64);
    let mut logs = Vec::new();
    for epoch in start_epoch..tcfg.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(epoch, tcfg);
        let mut rng = epoch_rng(tcfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for _ in 0..batches {
            for _ in 0..tcfg.batch_size {
                let img = usable[rng.gen_range(0..usable.len())];
                let top = rng.gen_range(0..=img.height() - hr_size);
                let left = rng.gen_range(0..=img.width() - hr_size);
                let hr = extract_patch(img, top, left, hr_size)?;
                let lr_patch = bicubic_resample(&hr, tcfg.patch_size, tcfg.patch_size)?;
                let (lr_aug, hr_aug) = augment((&lr_patch, &hr), tcfg.scale, &mut rng)?;
                let x = image_to_tensor(&lr_aug);
                let target = image_to_tensor(&hr_aug);
                let pred = forward(params, mcfg, &x)?;
                let loss = l1_loss(&pred, &target)?;
                loss_sum += loss.item()?.as_f64();
                loss_count += 1;
                loss.scale(inv_batch).backward()?;
            }
            adam_step(params, state, lr)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_l1: loss_sum / loss_count as f64,
            wallclock_s: t0.elapsed().as_secs_f64(),
        };
        after_epoch(&log, params, state)?;
        logs.push(log);
    }
    Ok(logs)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---- checkpoint serialization ----

const MAGIC: &[u8; 4] = b"RBAM";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_record<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(S::DTYPE_TAG);
    push_u32(out, shape.len() as u32);
    for &e in shape {
        push_u32(out, e as u32);
    }
    for &v in data {
        v.write_le(out);
    }
}

/// Serialize config, parameters and optimizer state. The layout is:
/// magic "RBAM", version u32, config block, epochs-completed u32,
/// parameter records, Adam step u64, first-moment records, second-moment
/// records. All integers little-endian; tensor data is raw scalar bits,
/// so a save/load round trip is bit-exact.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    mcfg: &ModelConfig,
    params: &ParamStore<S>,
    state: &AdamState<S>,
    epochs_completed: u32,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    for v in [
        mcfg.blocks,
        mcfg.channels,
        mcfg.scale,
        mcfg.sa_pool,
        mcfg.ca_reduction,
    ] {
        push_u32(&mut out, v as u32);
    }
    for flag in [
        mcfg.use_ca,
        mcfg.use_sa,
        mcfg.use_first_order,
        mcfg.use_second_order,
    ] {
        out.push(flag as u8);
    }
    push_u32(&mut out, epochs_completed);
    push_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        push_record(&mut out, name, t.shape(), &t.data());
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    for (moments, _tag) in [(&state.m, "m"), (&state.v, "v")] {
        for ((name, t), buf) in params.iter().zip(moments.iter()) {
            push_record(&mut out, name, t.shape(), buf);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record<S: Scalar>(&mut self) -> Result<(String, Vec<usize>, Vec<S>)> {
        let name_len = self.u32("record name length")? as usize;
        let name = String::from_utf8(self.take(name_len, "record name")?.to_vec())
            .map_err(|_| Error::Format {
                offset: self.pos,
                msg: "record name is not UTF-8".into(),
            })?;
        let tag = self.take(1, "dtype tag")?[0];
        if tag != S::DTYPE_TAG {
            return Err(Error::Format {
                offset: self.pos - 1,
                msg: format!("dtype tag {tag} does not match expected {}", S::DTYPE_TAG),
            });
        }
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * S::BYTE_WIDTH, "tensor data")?;
        let data = raw
            .chunks_exact(S::BYTE_WIDTH)
            .map(S::read_le)
            .collect();
        Ok((name, shape, data))
    }
}

pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub state: AdamState<S>,
    pub epochs_completed: u32,
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let blocks = cur.u32("blocks")? as usize;
    let channels = cur.u32("channels")? as usize;
    let scale = cur.u32("scale")? as usize;
    let sa_pool = cur.u32("sa_pool")? as usize;
    let ca_reduction = cur.u32("ca_reduction")? as usize;
    let flags = cur.take(4, "flags")?;
    let config = ModelConfig {
        blocks,
        channels,
        scale,
        sa_pool,
        ca_reduction,
        use_ca: flags[0] != 0,
        use_sa: flags[1] != 0,
        use_first_order: flags[2] != 0,
        use_second_order: flags[3] != 0,
    };
    config.validate().map_err(|e| Error::Format {
        offset: 8,
        msg: format!("checkpoint carries an invalid config: {e}"),
    })?;
    let epochs_completed = cur.u32("epochs completed")?;
    let count = cur.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (name, shape, data) = cur.record::<S>()?;
        params.insert(&name, crate::tensor::Tensor::leaf(&shape, data)?)?;
    }
    let mut state = AdamState::new(&params);
    state.step = cur.u64("adam step")?;
    for moments in [&mut state.m, &mut state.v] {
        for (i, (name, t)) in params.iter().enumerate() {
            let (rname, rshape, data) = cur.record::<S>()?;
            if rname != name || rshape != t.shape() {
                return Err(Error::Format {
                    offset: cur.pos,
                    msg: format!("optimizer record {rname} does not mirror parameter {name}"),
                });
            }
            moments[i] = data;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            msg: "trailing bytes after checkpoint payload".into(),
        });
    }
    Ok(Checkpoint {
        config,
        params,
        state,
        epochs_completed,
    })
}
