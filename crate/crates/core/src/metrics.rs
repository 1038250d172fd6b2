//! Scalar quality proxies for sampled clips, an evaluation harness,
//! and a finite-difference verifier for the first-order story behind
//! weight-space extrapolation.

use crate::diffusion::corpus::LatentCode;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::{CondEmbedding, DenoiserSpec, LatentVideo, MagnitudeClass, MotionCommand};
use crate::error::{Error, Result};
use crate::merge::{task_arithmetic, DeltaMap, Role};
use crate::rng::fnv1a64;
use crate::sampler::{ddim_sample, decoupled_sample, ModelPair, SwitchSchedule};
use crate::tensor_store::{Tensor, TensorMap};

/// Mean inter-frame displacement, normalized by √d so the score is
/// comparable across latent widths. Zero exactly when every frame is
/// identical.
pub fn motion_degree(v: &LatentVideo) -> f64 {
    let d = v.dim();
    let norm = (d as f64).sqrt();
    let mut total = 0.0;
    for k in 0..v.frames() - 1 {
        let a = v.frame(k);
        let b = v.frame(k + 1);
        let dist: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let diff = y as f64 - x as f64;
                diff * diff
            })
            .sum::<f64>()
            .sqrt();
        total += dist / norm;
    }
    total / (v.frames() - 1) as f64
}

/// Mean cosine similarity of every later frame to frame 0. A frame
/// that collapses to exactly zero contributes 0; a zero frame 0 leaves
/// every term undefined and is an error.
pub fn consistency(v: &LatentVideo) -> Result<f64> {
    let f0 = v.frame(0);
    let n0: f64 = f0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n0 == 0.0 {
        return Err(Error::Numeric(
            "first frame is zero; consistency is undefined".into(),
        ));
    }
    let mut total = 0.0;
    for k in 1..v.frames() {
        let fk = v.frame(k);
        let nk: f64 = fk.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if nk > 0.0 {
            let dot: f64 = f0.iter().zip(fk).map(|(&a, &b)| a as f64 * b as f64).sum();
            total += dot / (n0 * nk);
        }
    }
    Ok(total / (v.frames() - 1) as f64)
}

/// Cosine between the clip's net decoded displacement (last frame's
/// blob position minus the first's) and the commanded unit direction.
/// A clip that goes nowhere scores 0; `Still` has no direction to
/// score against and is rejected.
pub fn control_adherence(v: &LatentVideo, command: MotionCommand) -> Result<f64> {
    if command == MotionCommand::Still {
        return Err(Error::Invalid(
            "command still has no direction to score against".into(),
        ));
    }
    let code = LatentCode::new(v.dim())?;
    let first = code.decode_frame(v, 0);
    let last = code.decode_frame(v, v.frames() - 1);
    let disp = [last[0] - first[0], last[1] - first[1]];
    let norm = (disp[0] * disp[0] + disp[1] * disp[1]).sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let dir = command.direction();
    Ok((disp[0] * dir[0] + disp[1] * dir[1]) / norm)
}

/// How to drive the sampler during evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

/// Aggregated scores over a batch of sampled clips.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub motion_degree: f64,
    pub consistency: f64,
    /// None when no commands were assigned, so nothing could be scored.
    pub control_adherence: Option<f64>,
    pub n_samples: usize,
    pub seed_set: Vec<u64>,
}

/// Short stable fingerprint of a seed list for report rows.
pub fn seed_hash(seeds: &[u64]) -> String {
    let bytes: Vec<u8> = seeds.iter().flat_map(|s| s.to_le_bytes()).collect();
    format!("{:016x}", fnv1a64(&bytes))
}

/// Score `seeds.len()` clips produced by an arbitrary sampling
/// closure. Commands are assigned round-robin and always scored,
/// whether or not the sampler could condition on them; `conditioned`
/// controls only whether the closure receives an embedding.
pub fn eval_with<F>(
    sample: F,
    commands: &[MotionCommand],
    conditioned: bool,
    dim: usize,
    seeds: &[u64],
) -> Result<EvalReport>
where
    F: Fn(Option<&CondEmbedding>, u64) -> Result<LatentVideo>,
{
    if seeds.is_empty() {
        return Err(Error::Invalid("need at least one evaluation seed".into()));
    }
    let mut degree = 0.0;
    let mut consist = 0.0;
    let mut adh_total = 0.0;
    let mut adh_count = 0usize;
    for (i, &seed) in seeds.iter().enumerate() {
        let command = if commands.is_empty() {
            None
        } else {
            Some(commands[i % commands.len()])
        };
        let cond = match command {
            Some(cmd) if conditioned => Some(CondEmbedding::for_command(
                cmd,
                MagnitudeClass::High,
                dim,
            )?),
            _ => None,
        };
        let video = sample(cond.as_ref(), seed)?;
        degree += motion_degree(&video);
        consist += consistency(&video)?;
        if let Some(cmd) = command {
            if cmd != MotionCommand::Still {
                adh_total += control_adherence(&video, cmd)?;
                adh_count += 1;
            }
        }
    }
    let n = seeds.len() as f64;
    Ok(EvalReport {
        motion_degree: degree / n,
        consistency: consist / n,
        control_adherence: (adh_count > 0).then(|| adh_total / adh_count as f64),
        n_samples: seeds.len(),
        seed_set: seeds.to_vec(),
    })
}

/// Sample and score one model with plain DDIM. Models without the
/// adapter sample unconditionally but are still scored against the
/// assigned commands, which is exactly the comparison the pipeline
/// reports ask for.
pub fn eval_model(
    theta: &TensorMap,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    commands: &[MotionCommand],
    n: usize,
    seeds: &[u64],
    cfg: &SampleConfig,
) -> Result<EvalReport> {
    if n == 0 || seeds.len() != n {
        return Err(Error::Invalid(format!(
            "asked for {n} samples but supplied {} seeds",
            seeds.len()
        )));
    }
    let conditioned = spec.has_adapter;
    eval_with(
        |cond, seed| ddim_sample(theta, spec, sched, cond, cfg.steps, cfg.cfg_scale, seed),
        commands,
        conditioned,
        spec.dim,
        seeds,
    )
}

/// Sample and score the decoupled pair under a time switch.
pub fn eval_decoupled(
    pair: &ModelPair,
    switch: &SwitchSchedule,
    sched: &NoiseSchedule,
    commands: &[MotionCommand],
    n: usize,
    seeds: &[u64],
    cfg: &SampleConfig,
) -> Result<EvalReport> {
    if n == 0 || seeds.len() != n {
        return Err(Error::Invalid(format!(
            "asked for {n} samples but supplied {} seeds",
            seeds.len()
        )));
    }
    eval_with(
        |cond, seed| {
            decoupled_sample(pair, switch, sched, cond, cfg.steps, cfg.cfg_scale, seed)
        },
        commands,
        true,
        pair.spec().dim,
        seeds,
    )
}

/// Largest model the finite-difference probes will walk.
pub const TAYLOR_PARAM_LIMIT: usize = 2000;

/// First-order prediction vs direct measurement of a metric change
/// under a weight-space move.
#[derive(Debug, Clone)]
pub struct TaylorReport {
    pub alpha_grid: Vec<f64>,
    /// α·⟨∇D, Δθ⟩ per grid point.
    pub predicted: Vec<f64>,
    /// D(θ + αΔθ) − D(θ) per grid point.
    pub measured: Vec<f64>,
    /// Least-squares coefficient fitting Δθ ≈ γ·∇D; 0 when the
    /// gradient vanishes.
    pub gamma_hat: f64,
    /// None when either vector is zero, including the vanished-gradient
    /// case.
    pub cosine_alignment: Option<f64>,
}

fn map_param_count(theta: &TensorMap) -> usize {
    theta.iter().map(|(_, t)| t.numel()).sum()
}

fn rebuild_with(theta: &TensorMap, name: &str, idx: usize, value: f32) -> Result<TensorMap> {
    let mut out = TensorMap::new(theta.stage())?;
    for (k, v) in theta.meta_entries() {
        if k != "stage" {
            out.set_meta(k, v)?;
        }
    }
    for (n, t) in theta.iter() {
        if n == name {
            let mut data = t.data().to_vec();
            data[idx] = value;
            out.insert(n, Tensor::new(t.shape().to_vec(), data)?)?;
        } else {
            out.insert(n, t.clone())?;
        }
    }
    Ok(out)
}

fn eval_metric<D>(d_fn: &D, theta: &TensorMap) -> Result<f64>
where
    D: Fn(&TensorMap) -> Result<f64>,
{
    let v = d_fn(theta)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("metric returned non-finite value {v}")));
    }
    Ok(v)
}

/// Estimate ∇D at `theta` by central finite differences, one parameter
/// at a time in name order, and package it as a raw delta so it can be
/// fed back through the merge operations. Each step is measured as the
/// difference actually realized in f32 storage.
pub fn fd_gradient<D>(theta: &TensorMap, d_fn: D, fd_step: f64) -> Result<DeltaMap>
where
    D: Fn(&TensorMap) -> Result<f64>,
{
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(Error::Invalid(format!("bad finite-difference step {fd_step}")));
    }
    let total = map_param_count(theta);
    if total > TAYLOR_PARAM_LIMIT {
        return Err(Error::Invalid(format!(
            "{total} parameters exceed the finite-difference budget of {TAYLOR_PARAM_LIMIT}"
        )));
    }
    let mut entries = std::collections::BTreeMap::new();
    for (name, t) in theta.iter() {
        let mut grad = vec![0.0f64; t.numel()];
        for (idx, g) in grad.iter_mut().enumerate() {
            let base = t.data()[idx] as f64;
            let vp = (base + fd_step) as f32;
            let vm = (base - fd_step) as f32;
            let h_eff = vp as f64 - vm as f64;
            if h_eff == 0.0 {
                return Err(Error::Numeric(format!(
                    "finite-difference step vanished in f32 at {name}[{idx}]"
                )));
            }
            let dp = eval_metric(&d_fn, &rebuild_with(theta, name, idx, vp)?)?;
            let dm = eval_metric(&d_fn, &rebuild_with(theta, name, idx, vm)?)?;
            *g = (dp - dm) / h_eff;
        }
        entries.insert(name.to_string(), Tensor::from_f64(t.shape().to_vec(), &grad)?);
    }
    Ok(DeltaMap {
        entries,
        base_id: theta.meta("id").unwrap_or("").to_string(),
        role: Role::Raw,
        mask_seed: None,
        prune_rate: None,
    })
}

/// Compare the first-order prediction α·⟨∇D, Δθ⟩ against the directly
/// measured change of D along the move θ + αΔθ, and report how well
/// the move aligns with the metric gradient. D must be deterministic;
/// fix any sampling seeds inside the closure.
pub fn taylor_check<D>(
    theta_pre: &TensorMap,
    delta: &DeltaMap,
    d_fn: D,
    alpha_grid: &[f64],
    fd_step: f64,
) -> Result<TaylorReport>
where
    D: Fn(&TensorMap) -> Result<f64>,
{
    if alpha_grid.is_empty() {
        return Err(Error::Invalid("empty alpha grid".into()));
    }
    if let Some(bad) = alpha_grid.iter().find(|a| !a.is_finite()) {
        return Err(Error::Invalid(format!("non-finite alpha {bad}")));
    }
    for (name, t) in &delta.entries {
        match theta_pre.get(name) {
            Some(base) if base.shape() == t.shape() => {}
            Some(_) => {
                return Err(Error::Incompatible(format!(
                    "delta tensor {name} has a different shape than the base"
                )));
            }
            None => {
                return Err(Error::Incompatible(format!(
                    "delta tensor {name} does not exist in the base"
                )));
            }
        }
    }

    let grad = fd_gradient(theta_pre, &d_fn, fd_step)?;
    let d0 = eval_metric(&d_fn, theta_pre)?;

    // Flatten gradient and move over the full parameter space, in name
    // order; parameters the delta does not touch contribute zero move.
    let mut dot = 0.0;
    let mut g_sq = 0.0;
    let mut d_sq = 0.0;
    for (name, gt) in &grad.entries {
        let dt = delta.entries.get(name);
        for (idx, &g) in gt.data().iter().enumerate() {
            let g = g as f64;
            let dv = dt.map_or(0.0, |t| t.data()[idx] as f64);
            dot += g * dv;
            g_sq += g * g;
            d_sq += dv * dv;
        }
    }
    let gamma_hat = if g_sq == 0.0 { 0.0 } else { dot / g_sq };
    let cosine_alignment = if g_sq == 0.0 || d_sq == 0.0 {
        None
    } else {
        Some(dot / (g_sq.sqrt() * d_sq.sqrt()))
    };

    let mut predicted = Vec::with_capacity(alpha_grid.len());
    let mut measured = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        predicted.push(alpha * dot);
        let moved = task_arithmetic(theta_pre, &[delta], &[alpha])?;
        measured.push(eval_metric(&d_fn, &moved)? - d0);
    }
    Ok(TaylorReport {
        alpha_grid: alpha_grid.to_vec(),
        predicted,
        measured,
        gamma_hat,
        cosine_alignment,
    })
}
