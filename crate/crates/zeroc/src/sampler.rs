//! Stochastic gradient Langevin dynamics over tensors, used both to mine
//! negatives during training and to minimize composed energies at inference.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Result, ZcError};

#[derive(Clone, Debug)]
pub struct SgldConfig {
    /// Step size λ; the update is q ← q − (λ/2)∇E(q) + ω.
    pub step_size: f64,
    /// Number of Langevin steps.
    pub steps: usize,
    /// Standard deviation of the injected noise ω. Defaults to √λ.
    pub noise_scale: f64,
    /// Clamp applied to every coordinate after each step, if any.
    pub clamp_range: Option<(f64, f64)>,
    /// Extra noise-free steps run after the main loop to settle the state
    /// near the local minimum it found ("polish").
    pub polish_steps: usize,
    /// Record the state after every step (for diagnostics and tests).
    pub record_trajectory: bool,
}

impl SgldConfig {
    pub fn new(step_size: f64, steps: usize) -> Self {
        SgldConfig {
            step_size,
            steps,
            noise_scale: step_size.sqrt(),
            clamp_range: None,
            polish_steps: 0,
            record_trajectory: false,
        }
    }

    /// The configuration used to refine masks: λ = 0.1, clamped to [0, 1].
    pub fn for_masks(steps: usize) -> Self {
        let mut c = SgldConfig::new(0.1, steps);
        c.clamp_range = Some((0.0, 1.0));
        c
    }

    /// The configuration used for embeddings and images: λ = 0.01.
    pub fn for_embeddings(steps: usize) -> Self {
        SgldConfig::new(0.01, steps)
    }
}

/// Result of one SGLD run: the final state per variable, the final
/// energies (N,), and optionally the full trajectory.
#[derive(Debug)]
pub struct SgldOutcome {
    pub states: Vec<Tensor>,
    pub energies: Vec<f64>,
    pub trajectory: Vec<Vec<Tensor>>,
}

fn gaussian_like(t: &Tensor, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = t.elem_count();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Ok(Tensor::from_vec(v, t.dims(), t.device())?.to_dtype(t.dtype())?)
}

/// Run SGLD jointly over a set of state tensors against one scalar-per-chain
/// energy. The energy closure receives one tensor per state in the same
/// order. Gradients are taken through the summed energy, so chains evolve
/// independently when the energy is chain-separable.
pub fn sgld(
    energy: impl Fn(&[Tensor]) -> Result<Tensor>,
    init: &[Tensor],
    config: &SgldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SgldOutcome> {
    let configs = vec![config.clone(); init.len()];
    sgld_mixed(energy, init, &configs, rng)
}

/// `sgld` with one configuration per state, so a joint chain can move masks
/// and embeddings with their own step sizes and clamps. Step counts and
/// trajectory recording are taken from the first configuration and must
/// agree across all of them.
pub fn sgld_mixed(
    energy: impl Fn(&[Tensor]) -> Result<Tensor>,
    init: &[Tensor],
    configs: &[SgldConfig],
    rng: &mut ChaCha8Rng,
) -> Result<SgldOutcome> {
    if init.is_empty() {
        return Err(ZcError::Contract("sgld requires at least one state".into()));
    }
    if configs.len() != init.len() {
        return Err(ZcError::Contract(format!(
            "sgld got {} states but {} configurations",
            init.len(),
            configs.len()
        )));
    }
    let config = &configs[0];
    if configs
        .iter()
        .any(|c| c.steps != config.steps || c.polish_steps != config.polish_steps)
    {
        return Err(ZcError::Contract(
            "per-state sgld configurations disagree on step counts".into(),
        ));
    }
    let mut states: Vec<Tensor> = init.iter().map(|t| t.detach()).collect();
    let mut trajectory = Vec::new();
    for step in 0..config.steps + config.polish_steps {
        let noisy = step < config.steps;
        let vars: Vec<Var> = states
            .iter()
            .map(Var::from_tensor)
            .collect::<candle_core::Result<_>>()?;
        let inputs: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let e = energy(&inputs)?;
        let total = e.sum_all()?;
        let grads = total.backward()?;
        let mut next = Vec::with_capacity(states.len());
        for ((var, state), cfg) in vars.iter().zip(&states).zip(configs) {
            let mut q = state.clone();
            if let Some(g) = grads.get(var.as_tensor()) {
                q = (q - (g * (cfg.step_size / 2.0))?)?;
            }
            if noisy && cfg.noise_scale > 0.0 {
                let noise = gaussian_like(&q, cfg.noise_scale, rng)?;
                q = (q + noise)?;
            }
            if let Some((lo, hi)) = cfg.clamp_range {
                q = q.clamp(lo, hi)?;
            }
            let flat = q.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(ZcError::Sampler {
                    step,
                    msg: "non-finite state".into(),
                });
            }
            next.push(q.detach());
        }
        states = next;
        if config.record_trajectory {
            trajectory.push(states.clone());
        }
    }
    let final_e = energy(&states)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if final_e.iter().any(|v| !v.is_finite()) {
        return Err(ZcError::Sampler {
            step: config.steps,
            msg: "non-finite final energy".into(),
        });
    }
    Ok(SgldOutcome {
        states,
        energies: final_e,
        trajectory,
    })
}

/// Uniform [0, 1) initialization for masks and one-hot-ish images.
pub fn init_uniform(
    dims: &[usize],
    dtype: DType,
    device: &Device,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
}

/// Gaussian initialization matching given per-coordinate mean and std,
/// used to start embedding chains from the label-table statistics.
pub fn init_gaussian(
    mean: &[f64],
    std: &[f64],
    n_chains: usize,
    dtype: DType,
    device: &Device,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if mean.len() != std.len() {
        return Err(ZcError::Contract("mean/std length mismatch".into()));
    }
    let d = mean.len();
    let mut v = Vec::with_capacity(n_chains * d);
    for _ in 0..n_chains {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            v.push(mean[j] + std[j] * z);
        }
    }
    Ok(Tensor::from_vec(v, (n_chains, d), device)?.to_dtype(dtype)?)
}
