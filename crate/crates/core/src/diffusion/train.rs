//! Plain-SGD training loop for the noise-prediction network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::corpus::Clip;
use crate::diffusion::denoiser::{
    batch_loss, batch_loss_and_grads, init_weights, manifest, BatchItem, Weights,
};
use crate::diffusion::schedule::{forward_noise, NoiseSchedule};
use crate::diffusion::{DenoiserSpec, LatentVideo};
use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::tensor_store::TensorMap;

/// Which parameters the optimizer may move. Everything else keeps its
/// exact bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    AdapterAndTemporal,
}

impl Trainable {
    fn admits(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::AdapterAndTemporal => {
                name.starts_with("adapter.") || name.starts_with("temporal.")
            }
        }
    }
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub trainable: Trainable,
    /// Probability of replacing a clip's condition with the null token
    /// during training, so unconditional predictions stay calibrated
    /// for guidance at sampling time.
    pub cond_drop: f64,
    /// Lifecycle stage stamped on the returned checkpoint.
    pub stage: String,
}

fn validate_corpus(spec: &DenoiserSpec, corpus: &[Clip]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    for clip in corpus {
        if clip.video.frames() != spec.frames || clip.video.dim() != spec.dim {
            return Err(Error::Invalid(format!(
                "corpus clip is {}x{}, spec wants {}x{}",
                clip.video.frames(),
                clip.video.dim(),
                spec.frames,
                spec.dim
            )));
        }
        if clip.cond.is_some() && !spec.has_adapter {
            return Err(Error::Invalid(
                "conditioned corpus needs a denoiser with the adapter".into(),
            ));
        }
    }
    Ok(())
}

/// Draw one training example from the corpus.
fn draw_item<'a>(
    rng: &mut ChaCha8Rng,
    spec: &DenoiserSpec,
    corpus: &'a [Clip],
    sched: &NoiseSchedule,
    cond_drop: Option<f64>,
) -> Result<BatchItem<'a>> {
    let clip = &corpus[rng.gen_range(0..corpus.len())];
    let t = rng.gen_range(1..=spec.t_max);
    let eps: Vec<f32> = (0..spec.frames * spec.dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    let eps_v = LatentVideo::new(spec.frames, spec.dim, eps)?;
    let z_t = forward_noise(&clip.video, t, &eps_v, sched)?;
    let cond = match (&clip.cond, cond_drop) {
        (Some(c), Some(p)) => {
            if rng.gen::<f64>() < p {
                None
            } else {
                Some(c)
            }
        }
        (Some(c), None) => Some(c),
        (None, _) => None,
    };
    Ok(BatchItem {
        z_t: z_t.to_f64(),
        eps: eps_v.to_f64(),
        t,
        cond,
    })
}

/// Train a denoiser on noise prediction with plain SGD. `init` seeds
/// the parameters from an existing checkpoint; otherwise fresh weights
/// come from `config.seed`. Frozen parameters keep their exact bits.
pub fn train(
    spec: &DenoiserSpec,
    corpus: &[Clip],
    sched: &NoiseSchedule,
    config: &TrainConfig,
    init: Option<&TensorMap>,
) -> Result<TensorMap> {
    spec.validate()?;
    validate_corpus(spec, corpus)?;
    if sched.t_max() != spec.t_max {
        return Err(Error::Invalid(format!(
            "schedule has {} steps, spec wants {}",
            sched.t_max(),
            spec.t_max
        )));
    }
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate {} must be positive", config.lr)));
    }
    if config.batch == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    if !(config.cond_drop.is_finite() && (0.0..=1.0).contains(&config.cond_drop)) {
        return Err(Error::Invalid(format!(
            "condition-drop rate {} outside [0, 1]",
            config.cond_drop
        )));
    }
    TensorMap::new(&config.stage)?;

    let mut w = match init {
        Some(theta) => Weights::from_map(theta, spec)?,
        None => Weights::from_map(&init_weights(spec, config.seed)?, spec)?,
    };
    let trainable: Vec<String> = w
        .names()
        .filter(|n| config.trainable.admits(n))
        .map(str::to_string)
        .collect();
    if trainable.is_empty() {
        return Err(Error::Invalid(
            "no trainable parameters under the requested freeze".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed));
    for step in 0..config.steps {
        let mut items = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            items.push(draw_item(&mut rng, spec, corpus, sched, Some(config.cond_drop))?);
        }
        let (loss, grads) = batch_loss_and_grads(&w, spec, &items)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        for name in &trainable {
            let g = &grads[name];
            for (wi, gi) in w.get_mut(name).iter_mut().zip(g) {
                *wi -= config.lr * gi;
            }
        }
    }
    w.to_map(&config.stage)
}

/// Deterministic held-out noise-prediction loss: `samples` examples
/// drawn from `seed`, conditions used as stored (never dropped).
pub fn eval_loss(
    theta: &TensorMap,
    spec: &DenoiserSpec,
    corpus: &[Clip],
    sched: &NoiseSchedule,
    seed: u64,
    samples: usize,
) -> Result<f64> {
    spec.validate()?;
    validate_corpus(spec, corpus)?;
    if sched.t_max() != spec.t_max {
        return Err(Error::Invalid(format!(
            "schedule has {} steps, spec wants {}",
            sched.t_max(),
            spec.t_max
        )));
    }
    if samples == 0 {
        return Err(Error::Invalid("need at least one evaluation sample".into()));
    }
    let w = Weights::from_map(theta, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    let mut items = Vec::with_capacity(samples);
    for _ in 0..samples {
        items.push(draw_item(&mut rng, spec, corpus, sched, None)?);
    }
    batch_loss(&w, spec, &items)
}

/// Extend an adapter-free checkpoint with freshly initialized adapter
/// weights, leaving every existing tensor bit-identical. This is the
/// starting point for fine-tuning.
pub fn attach_adapter_init(pre: &TensorMap, spec: &DenoiserSpec, seed: u64) -> Result<TensorMap> {
    spec.validate()?;
    if !spec.has_adapter {
        return Err(Error::Invalid(
            "target spec has no adapter to attach".into(),
        ));
    }
    let bare = DenoiserSpec {
        has_adapter: false,
        ..spec.clone()
    };
    Weights::from_map(pre, &bare)?;
    let fresh = init_weights(spec, seed)?;
    let mut out = pre.clone();
    for (name, _) in manifest(spec) {
        if name.starts_with("adapter.") {
            out.insert(&name, fresh.get(&name).unwrap().clone())?;
        }
    }
    Ok(out)
}
