//! Finite-difference gradient verification. Runs in double precision;
//! the central-difference oracle is independent of the autodiff path.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{build, forward, ModelConfig, ParamStore};
use crate::optim::l1_loss;
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// `|a - f| / max(|a|, |f|, 1e-3)` — the floor keeps round-off noise in
/// tiny gradients from registering as disagreement.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

/// Central finite differences of a scalar function at `x`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        g.push((hi - lo) / (2.0 * step));
    }
    g
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter group.
    pub groups: Vec<(String, f64)>,
    pub worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }

    pub fn worst_group(&self) -> Option<&(String, f64)> {
        self.groups
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compare every parameter gradient of the full network against central
/// finite differences on a random input/target pair.
///
/// `corrupt` (test fixture) perturbs the analytic gradients before the
/// comparison so negative controls can prove the check actually bites.
pub fn model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    height: usize,
    width: usize,
    corrupt: Option<&dyn Fn(&str, &mut [f64])>,
) -> Result<GradCheckReport> {
    config.validate()?;
    let params: ParamStore<f64> = build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let input = Tensor::from_vec(
        &[1, height, width],
        (0..height * width).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let (oh, ow) = (config.scale * height, config.scale * width);
    let target = Tensor::from_vec(
        &[1, oh, ow],
        (0..oh * ow).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;

    let loss = l1_loss(&forward(&params, config, &input)?, &target)?;
    loss.backward()?;

    let mut groups = Vec::new();
    let mut worst = 0.0f64;
    for (name, p) in params.iter() {
        let mut analytic = p.grad().expect("backward populates every parameter");
        if let Some(corrupt) = corrupt {
            corrupt(name, &mut analytic);
        }
        let saved = p.to_vec();
        let mut eval = |data: &[f64]| -> f64 {
            p.set_data(data.to_vec()).unwrap();
            let out = forward(&params, config, &input).unwrap();
            let l = l1_loss(&out, &target).unwrap().item().unwrap();
            l
        };
        let fd = fd_grad(&mut eval, &saved, DEFAULT_STEP);
        p.set_data(saved)?;
        let group_worst = analytic
            .iter()
            .zip(fd.iter())
            .map(|(&a, &f)| rel_err(a, f))
            .fold(0.0f64, f64::max);
        worst = worst.max(group_worst);
        groups.push((name.to_string(), group_worst));
    }
    params.clear_grads();
    Ok(GradCheckReport { groups, worst })
}

/// The ablation corners exercised by the verification suite.
pub fn ablation_corners() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig {
        blocks: 1,
        channels: 4,
        scale: 2,
        sa_pool: 8,
        ca_reduction: 4,
        ..ModelConfig::default()
    };
    let mk = |ca: bool, sa: bool, first: bool, second: bool| ModelConfig {
        use_ca: ca,
        use_sa: sa,
        use_first_order: first,
        use_second_order: second,
        ..base.clone()
    };
    vec![
        ("baseline", mk(false, false, true, true)),
        ("ca+sa-1st", mk(true, true, true, false)),
        ("ca+sa-2nd", mk(true, true, false, true)),
        ("ca+sa-both", mk(true, true, true, true)),
        ("ca-only-both", mk(true, false, true, true)),
        ("sa-only-both", mk(false, true, true, true)),
    ]
}
