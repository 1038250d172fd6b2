//! Deterministic DDIM sampling, classifier-free guidance, and
//! time-switched sampling over a decoupled model pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::denoiser::{forward_f64, Weights};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::{CondEmbedding, DenoiserSpec, LatentVideo};
use crate::error::{Error, Result};
use crate::tensor_store::TensorMap;

/// Which of the two decoupled models handles the early, high-noise
/// phase of sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    DynFirst,
    ConFirst,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DynFirst => "dyn-first",
            Strategy::ConFirst => "con-first",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "dyn-first" => Ok(Strategy::DynFirst),
            "con-first" => Ok(Strategy::ConFirst),
            other => Err(Error::Invalid(format!(
                "unknown switch strategy {other:?}; expected dyn-first or con-first"
            ))),
        }
    }
}

/// Hard time switch: one model owns the first `k` of `t_total` sampler
/// steps, the other owns the rest. Steps count down from `t_total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchSchedule {
    pub t_total: usize,
    pub k: usize,
    pub strategy: Strategy,
}

impl SwitchSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_total == 0 {
            return Err(Error::Invalid("switch schedule needs at least one step".into()));
        }
        if self.k > self.t_total {
            return Err(Error::Invalid(format!(
                "switch point {} exceeds total steps {}",
                self.k, self.t_total
            )));
        }
        Ok(())
    }
}

/// Mixing weight on the motion model at sampler step `t` (counting
/// down from `t_total` to 1): 1.0 selects the motion model, 0.0 the
/// consistency model. The schedule is a step function, never a blend.
pub fn alpha_t(t: usize, sched: &SwitchSchedule) -> Result<f64> {
    sched.validate()?;
    if t < 1 || t > sched.t_total {
        return Err(Error::Invalid(format!(
            "step {t} outside 1..={}",
            sched.t_total
        )));
    }
    let early = t > sched.t_total - sched.k;
    Ok(match sched.strategy {
        Strategy::DynFirst => {
            if early {
                1.0
            } else {
                0.0
            }
        }
        Strategy::ConFirst => {
            if early {
                0.0
            } else {
                1.0
            }
        }
    })
}

/// The two enhanced models produced by parameter isolation, loaded and
/// validated once so per-step selection is free.
pub struct ModelPair {
    dyn_map: TensorMap,
    con_map: TensorMap,
    dyn_w: Weights,
    con_w: Weights,
    spec: DenoiserSpec,
}

impl ModelPair {
    pub fn new(dyn_star: &TensorMap, con_star: &TensorMap, spec: &DenoiserSpec) -> Result<ModelPair> {
        if dyn_star.stage() != "dyn_star" {
            return Err(Error::Invalid(format!(
                "motion model has stage {:?}, expected dyn_star",
                dyn_star.stage()
            )));
        }
        if con_star.stage() != "con_star" {
            return Err(Error::Invalid(format!(
                "consistency model has stage {:?}, expected con_star",
                con_star.stage()
            )));
        }
        if !spec.has_adapter {
            return Err(Error::Invalid(
                "decoupled models carry the adapter; spec says has_adapter = false".into(),
            ));
        }
        if !dyn_star.names().eq(con_star.names()) {
            return Err(Error::Incompatible(
                "motion and consistency models hold different tensor sets".into(),
            ));
        }
        Ok(ModelPair {
            dyn_map: dyn_star.clone(),
            con_map: con_star.clone(),
            dyn_w: Weights::from_map(dyn_star, spec)?,
            con_w: Weights::from_map(con_star, spec)?,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }
}

/// Convex combination of the pair in weight space. The endpoints are
/// exact copies of the stored models; anything in between is stamped
/// with stage `blend`.
pub fn blend(pair: &ModelPair, a: f64) -> Result<TensorMap> {
    if !(a.is_finite() && (0.0..=1.0).contains(&a)) {
        return Err(Error::Invalid(format!("blend weight {a} outside [0, 1]")));
    }
    if a == 1.0 {
        return Ok(pair.dyn_map.clone());
    }
    if a == 0.0 {
        return Ok(pair.con_map.clone());
    }
    let mut out = TensorMap::new("blend")?;
    for (name, dt) in pair.dyn_map.iter() {
        let ct = pair.con_map.get(name).unwrap();
        let data: Vec<f64> = dt
            .data()
            .iter()
            .zip(ct.data())
            .map(|(&x, &y)| a * x as f64 + (1.0 - a) * y as f64)
            .collect();
        out.insert(
            name,
            crate::tensor_store::Tensor::from_f64(dt.shape().to_vec(), &data)?,
        )?;
    }
    out.set_meta("blend_alpha", &format!("{a}"))?;
    Ok(out)
}

fn validate_sample_args(
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    cond: Option<&CondEmbedding>,
    steps: usize,
    cfg_scale: f64,
) -> Result<()> {
    spec.validate()?;
    if sched.t_max() != spec.t_max {
        return Err(Error::Invalid(format!(
            "schedule has {} steps, spec wants {}",
            sched.t_max(),
            spec.t_max
        )));
    }
    if steps < 1 || steps > sched.t_max() {
        return Err(Error::Invalid(format!(
            "sampler steps {steps} outside 1..={}",
            sched.t_max()
        )));
    }
    if !cfg_scale.is_finite() {
        return Err(Error::Invalid(format!("guidance scale {cfg_scale} is not finite")));
    }
    if let Some(c) = cond {
        if !spec.has_adapter {
            return Err(Error::Invalid(
                "conditioned sampling needs a denoiser with the adapter".into(),
            ));
        }
        if c.dim() != spec.dim || c.tokens() < 1 {
            return Err(Error::Invalid(format!(
                "condition embedding {}x{} does not match latent dim {}",
                c.tokens(),
                c.dim(),
                spec.dim
            )));
        }
    }
    Ok(())
}

/// Guided noise estimate. Exactly one forward pass runs when guidance
/// degenerates (scale 1 wants only the conditioned branch, scale 0
/// only the unconditioned one) or when there is no condition at all.
fn guided_eps(
    w: &Weights,
    spec: &DenoiserSpec,
    z: &[f64],
    t: usize,
    cond: Option<&CondEmbedding>,
    cfg_scale: f64,
) -> Vec<f64> {
    match cond {
        None => forward_f64(w, spec, z, t, None),
        Some(c) => {
            if cfg_scale == 1.0 {
                forward_f64(w, spec, z, t, Some(c))
            } else if cfg_scale == 0.0 {
                forward_f64(w, spec, z, t, None)
            } else {
                let e_c = forward_f64(w, spec, z, t, Some(c));
                let e_u = forward_f64(w, spec, z, t, None);
                e_u.iter()
                    .zip(&e_c)
                    .map(|(&u, &c)| u + cfg_scale * (c - u))
                    .collect()
            }
        }
    }
}

/// Core DDIM loop over a decreasing subsequence of the diffusion
/// schedule. `pick` chooses the weights for each sampler step, counted
/// down from `steps` to 1.
fn run_ddim<'a, F>(
    pick: F,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    cond: Option<&CondEmbedding>,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<LatentVideo>
where
    F: Fn(usize) -> &'a Weights,
{
    let t_max = sched.t_max();
    let times: Vec<usize> = (0..steps).map(|j| (j + 1) * t_max / steps).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = (0..spec.frames * spec.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for j in (0..steps).rev() {
        let t = times[j];
        let t_prev = if j > 0 { times[j - 1] } else { 0 };
        let w = pick(j + 1);
        let eps = guided_eps(w, spec, &z, t, cond, cfg_scale);
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        let sig_t = ab_t.sqrt();
        let noi_t = (1.0 - ab_t).sqrt();
        let sig_p = ab_prev.sqrt();
        let noi_p = (1.0 - ab_prev).sqrt();
        for (zi, ei) in z.iter_mut().zip(&eps) {
            let pred_z0 = (*zi - noi_t * ei) / sig_t;
            *zi = sig_p * pred_z0 + noi_p * ei;
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sampling produced non-finite latent {bad} at step {t}"
            )));
        }
    }
    LatentVideo::from_f64(spec.frames, spec.dim, &z)
}

/// Sample one clip from a single model with deterministic DDIM.
pub fn ddim_sample(
    theta: &TensorMap,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    cond: Option<&CondEmbedding>,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<LatentVideo> {
    validate_sample_args(spec, sched, cond, steps, cfg_scale)?;
    let w = Weights::from_map(theta, spec)?;
    run_ddim(|_| &w, spec, sched, cond, steps, cfg_scale, seed)
}

/// Sample one clip while switching between the motion and consistency
/// models per step. The switch schedule must cover exactly the sampler
/// steps.
pub fn decoupled_sample(
    pair: &ModelPair,
    switch: &SwitchSchedule,
    sched: &NoiseSchedule,
    cond: Option<&CondEmbedding>,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<LatentVideo> {
    switch.validate()?;
    if switch.t_total != steps {
        return Err(Error::Invalid(format!(
            "switch schedule covers {} steps but the sampler runs {steps}",
            switch.t_total
        )));
    }
    validate_sample_args(&pair.spec, sched, cond, steps, cfg_scale)?;
    run_ddim(
        |t| {
            // validated above: t always lies in 1..=t_total
            if alpha_t(t, switch).unwrap() == 1.0 {
                &pair.dyn_w
            } else {
                &pair.con_w
            }
        },
        &pair.spec,
        sched,
        cond,
        steps,
        cfg_scale,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::init_weights;
    use crate::diffusion::schedule::{build_schedule, ScheduleKind};
    use crate::diffusion::{MagnitudeClass, MotionCommand};
    use crate::tensor_store::bitwise_equal;

    fn spec() -> DenoiserSpec {
        DenoiserSpec {
            frames: 3,
            dim: 4,
            hidden: 8,
            has_adapter: true,
            t_max: 20,
        }
    }

    fn pair() -> (ModelPair, TensorMap, TensorMap) {
        let s = spec();
        let mut d = init_weights(&s, 100).unwrap();
        d.set_stage("dyn_star").unwrap();
        let mut c = init_weights(&s, 200).unwrap();
        c.set_stage("con_star").unwrap();
        (ModelPair::new(&d, &c, &s).unwrap(), d, c)
    }

    #[test]
    fn switch_weight_follows_the_step_function() {
        let sched = SwitchSchedule {
            t_total: 50,
            k: 10,
            strategy: Strategy::DynFirst,
        };
        assert_eq!(alpha_t(45, &sched).unwrap(), 1.0);
        assert_eq!(alpha_t(41, &sched).unwrap(), 1.0);
        assert_eq!(alpha_t(40, &sched).unwrap(), 0.0);
        assert_eq!(alpha_t(1, &sched).unwrap(), 0.0);
        let flipped = SwitchSchedule {
            strategy: Strategy::ConFirst,
            ..sched
        };
        assert_eq!(alpha_t(45, &flipped).unwrap(), 0.0);
        assert_eq!(alpha_t(40, &flipped).unwrap(), 1.0);

        let all_con = SwitchSchedule { k: 0, ..sched };
        let all_dyn = SwitchSchedule { k: 50, ..sched };
        for t in [1, 25, 50] {
            assert_eq!(alpha_t(t, &all_con).unwrap(), 0.0);
            assert_eq!(alpha_t(t, &all_dyn).unwrap(), 1.0);
        }
        assert!(alpha_t(0, &sched).is_err());
        assert!(alpha_t(51, &sched).is_err());
        assert!(SwitchSchedule { k: 51, ..sched }.validate().is_err());
    }

    #[test]
    fn switch_transitions_exactly_once() {
        for strategy in [Strategy::DynFirst, Strategy::ConFirst] {
            for k in 0..=12 {
                let sched = SwitchSchedule { t_total: 12, k, strategy };
                let values: Vec<f64> = (1..=12).map(|t| alpha_t(t, &sched).unwrap()).collect();
                let flips = values.windows(2).filter(|w| w[0] != w[1]).count();
                assert!(flips <= 1, "k={k} {strategy:?} gave {values:?}");
                assert!(values.iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn blend_endpoints_are_exact_copies() {
        let (p, d, c) = pair();
        assert!(bitwise_equal(&blend(&p, 1.0).unwrap(), &d));
        assert!(bitwise_equal(&blend(&p, 0.0).unwrap(), &c));
        assert!(blend(&p, -0.1).is_err());
        assert!(blend(&p, 1.1).is_err());
        assert!(blend(&p, f64::NAN).is_err());
    }

    #[test]
    fn blend_midpoint_averages_in_f64() {
        let s = spec();
        let mut d = init_weights(&s, 1).unwrap();
        d.set_stage("dyn_star").unwrap();
        let mut c = init_weights(&s, 2).unwrap();
        c.set_stage("con_star").unwrap();
        let p = ModelPair::new(&d, &c, &s).unwrap();
        let half = blend(&p, 0.5).unwrap();
        assert_eq!(half.stage(), "blend");
        let dv = d.get("spatial.w1").unwrap().data();
        let cv = c.get("spatial.w1").unwrap().data();
        let hv = half.get("spatial.w1").unwrap().data();
        for i in 0..dv.len() {
            let want = (0.5 * dv[i] as f64 + 0.5 * cv[i] as f64) as f32;
            assert_eq!(hv[i], want);
        }
    }

    #[test]
    fn model_pair_rejects_bad_stages_and_mismatched_names() {
        let s = spec();
        let d = init_weights(&s, 1).unwrap();
        let mut c = init_weights(&s, 2).unwrap();
        c.set_stage("con_star").unwrap();
        // dyn still stamped pretrained
        assert!(ModelPair::new(&d, &c, &s).is_err());

        let bare = DenoiserSpec {
            has_adapter: false,
            ..s.clone()
        };
        let mut d_bare = init_weights(&bare, 1).unwrap();
        d_bare.set_stage("dyn_star").unwrap();
        assert!(ModelPair::new(&d_bare, &c, &s).is_err());
    }

    #[test]
    fn degenerate_switch_matches_single_model_bitwise() {
        let (p, d, c) = pair();
        let s = spec();
        let sched = build_schedule(s.t_max, ScheduleKind::LinearBeta).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Right, MagnitudeClass::High, s.dim).unwrap();
        for steps in [1, 7, 20] {
            for (k, theta) in [(steps, &d), (0, &c)] {
                let switch = SwitchSchedule {
                    t_total: steps,
                    k,
                    strategy: Strategy::DynFirst,
                };
                let via_pair =
                    decoupled_sample(&p, &switch, &sched, Some(&cond), steps, 7.5, 42).unwrap();
                let direct =
                    ddim_sample(theta, &s, &sched, Some(&cond), steps, 7.5, 42).unwrap();
                assert_eq!(via_pair, direct, "steps={steps} k={k}");
            }
        }
    }

    #[test]
    fn identical_models_make_the_switch_invisible() {
        let s = spec();
        let mut d = init_weights(&s, 5).unwrap();
        d.set_stage("dyn_star").unwrap();
        let mut c = init_weights(&s, 5).unwrap();
        c.set_stage("con_star").unwrap();
        let p = ModelPair::new(&d, &c, &s).unwrap();
        let sched = build_schedule(s.t_max, ScheduleKind::LinearBeta).unwrap();
        let baseline = ddim_sample(&d, &s, &sched, None, 10, 7.5, 9).unwrap();
        for k in [0, 3, 5, 10] {
            let switch = SwitchSchedule {
                t_total: 10,
                k,
                strategy: Strategy::DynFirst,
            };
            let got = decoupled_sample(&p, &switch, &sched, None, 10, 7.5, 9).unwrap();
            assert_eq!(got, baseline, "k={k}");
        }
    }

    #[test]
    fn guidance_is_linear_in_the_scale() {
        let s = spec();
        let theta = init_weights(&s, 31).unwrap();
        let sched = build_schedule(s.t_max, ScheduleKind::LinearBeta).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Up, MagnitudeClass::High, s.dim).unwrap();
        let sample = |scale: f64| {
            ddim_sample(&theta, &s, &sched, Some(&cond), 1, scale, 77)
                .unwrap()
                .to_f64()
        };
        let (z0, z1, z2) = (sample(0.0), sample(1.0), sample(2.0));
        for i in 0..z0.len() {
            let lhs = z2[i] - z1[i];
            let rhs = z1[i] - z0[i];
            let tol = 1e-5 * lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs - rhs).abs() < tol, "entry {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let s = spec();
        let theta = init_weights(&s, 3).unwrap();
        let sched = build_schedule(s.t_max, ScheduleKind::LinearBeta).unwrap();
        let a = ddim_sample(&theta, &s, &sched, None, 10, 0.0, 5).unwrap();
        let b = ddim_sample(&theta, &s, &sched, None, 10, 0.0, 5).unwrap();
        assert_eq!(a, b);
        let c = ddim_sample(&theta, &s, &sched, None, 10, 0.0, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_args_are_validated() {
        let s = spec();
        let theta = init_weights(&s, 3).unwrap();
        let sched = build_schedule(s.t_max, ScheduleKind::LinearBeta).unwrap();
        assert!(ddim_sample(&theta, &s, &sched, None, 0, 7.5, 1).is_err());
        assert!(ddim_sample(&theta, &s, &sched, None, 21, 7.5, 1).is_err());
        assert!(ddim_sample(&theta, &s, &sched, None, 10, f64::NAN, 1).is_err());
        let wrong = build_schedule(12, ScheduleKind::LinearBeta).unwrap();
        assert!(ddim_sample(&theta, &s, &wrong, None, 5, 7.5, 1).is_err());

        let (p, _, _) = pair();
        let switch = SwitchSchedule {
            t_total: 9,
            k: 2,
            strategy: Strategy::DynFirst,
        };
        assert!(decoupled_sample(&p, &switch, &sched, None, 10, 7.5, 1).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::DynFirst, Strategy::ConFirst] {
            assert_eq!(Strategy::parse(s.as_str()).unwrap(), s);
        }
        assert!(Strategy::parse("both").is_err());
    }
}
