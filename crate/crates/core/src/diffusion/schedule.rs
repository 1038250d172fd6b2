//! Forward-diffusion noise schedules.

use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};

/// How the per-step noise rates are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Betas grow linearly, rescaled so total noise injected is
    /// independent of the step count (matches the common 1000-step
    /// convention's endpoints).
    LinearBeta,
    /// Squared-cosine cumulative schedule with the usual 0.008 offset.
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta => "linear_beta",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<ScheduleKind> {
        match s {
            "linear_beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Cumulative signal-retention curve ᾱ: `alpha_bar[t]` is the fraction
/// of original signal variance surviving after `t` noising steps, with
/// `alpha_bar[0] = 1` and a strict decrease to a small positive tail.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<NoiseSchedule> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Numeric("schedule must start at alpha_bar = 1".into()));
        }
        for t in 1..alpha_bar.len() {
            let ratio = alpha_bar[t] / alpha_bar[t - 1];
            if !(ratio > 0.0 && ratio < 1.0) || !alpha_bar[t].is_finite() {
                return Err(Error::Numeric(format!(
                    "per-step retention at t={t} is {ratio}, outside (0,1)"
                )));
            }
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Number of diffusion steps T.
    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// ᾱ_t for 0 ≤ t ≤ T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Build a `T`-step schedule of the given kind.
pub fn build_schedule(t_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    let t = t_steps as f64;
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            let scale = 1000.0 / t;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (1..=t_steps)
                .map(|i| {
                    let frac = if t_steps == 1 {
                        0.0
                    } else {
                        (i - 1) as f64 / (t_steps - 1) as f64
                    };
                    (lo + (hi - lo) * frac).min(0.999)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |x: f64| ((x / t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (1..=t_steps)
                .map(|i| {
                    let beta = 1.0 - f(i as f64) / f((i - 1) as f64);
                    beta.min(0.999)
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_steps + 1);
    alpha_bar.push(1.0);
    for beta in betas {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - beta));
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// Diffuse a clean clip to step `t`: `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t > sched.t_max() {
        return Err(Error::Invalid(format!(
            "step {t} outside schedule range 0..={}",
            sched.t_max()
        )));
    }
    if z0.frames() != eps.frames() || z0.dim() != eps.dim() {
        return Err(Error::Invalid(format!(
            "noise shape {}x{} does not match clip {}x{}",
            eps.frames(),
            eps.dim(),
            z0.frames(),
            z0.dim()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (sig, noi) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f64> = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| sig * z as f64 + noi * e as f64)
        .collect();
    LatentVideo::from_f64(z0.frames(), z0.dim(), &data)
}
