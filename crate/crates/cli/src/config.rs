//! Experiment configuration: a plain-text `key=value` file plus flag
//! overrides, resolving to one struct that captures every input of a
//! run. Precedence, weakest first: built-in defaults, config file,
//! `MMRG_WORKDIR` (workdir only), `--set key=value` pairs, dedicated
//! flags.
//!
//! Recognized keys (all optional; defaults in parentheses):
//!
//! | key | meaning |
//! |-----|---------|
//! | `workdir` | artifact directory (`runs/default`) |
//! | `frames` | frames per clip (8) |
//! | `dim` | latent channels per frame (16) |
//! | `hidden` | denoiser hidden width (96) |
//! | `t_max` | diffusion steps T (50) |
//! | `schedule` | `linear_beta` or `cosine` (`linear_beta`) |
//! | `pretrain_clips` | pretraining corpus size (4096) |
//! | `pretrain_magnitude` | pretraining per-frame motion (0.35) |
//! | `pretrain_corpus_seed` | corpus generator seed (101) |
//! | `pretrain_steps` | SGD steps (60000) |
//! | `pretrain_lr` | SGD learning rate (0.2) |
//! | `pretrain_seed` | training stream seed (1001) |
//! | `finetune_clips` | fine-tuning corpus size (2048) |
//! | `finetune_magnitude` | fine-tuning per-frame motion (0.07) |
//! | `finetune_corpus_seed` | corpus generator seed (202) |
//! | `finetune_steps` | SGD steps (40000) |
//! | `finetune_lr` | SGD learning rate (0.2) |
//! | `finetune_seed` | training stream seed (2002) |
//! | `adapter_seed` | fresh adapter init seed (77) |
//! | `cond_drop` | unconditional share during fine-tuning (0.15) |
//! | `batch` | SGD batch size (64) |
//! | `alpha` | extrapolation strength (0.5) |
//! | `prune_rate` | drop probability p (0.7) |
//! | `mask_seed_deg` | mask seed for the motion delta (31) |
//! | `mask_seed_adt` | mask seed for the adapter-stage delta (32) |
//! | `w_deg` | motion delta weight (1.0) |
//! | `w_adt` | adapter delta weight (1.0) |
//! | `steps` | sampler steps (50) |
//! | `cfg_scale` | guidance scale (7.5) |
//! | `switch_k` | switch step K (t_max/2) |
//! | `strategy` | `dyn-first` or `con-first` (`dyn-first`) |
//! | `eval_n` | videos per evaluation (24) |
//! | `eval_seed_base` | first eval seed; run uses base..base+n (9000) |
//! | `sample_seed` | seed for single-sample commands (4242) |
//! | `taylor_frames` | small-model frames (4) |
//! | `taylor_dim` | small-model latent channels (8) |
//! | `taylor_hidden` | small-model hidden width (8) |
//! | `taylor_clips` | small corpora size (512) |
//! | `taylor_steps` | small-model SGD steps (8000) |
//! | `taylor_lr` | small-model learning rate (0.1) |
//! | `taylor_sample_steps` | sampler steps inside the probed metric (10) |
//! | `taylor_eval_n` | videos per metric evaluation (4) |
//! | `taylor_alphas` | comma list of move sizes (0.001,0.003,0.01) |
//! | `taylor_fd_step` | finite-difference step (0.001) |

use std::path::{Path, PathBuf};

use mmrg_core::diffusion::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use mmrg_core::diffusion::DenoiserSpec;
use mmrg_core::sampler::Strategy;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub workdir: PathBuf,
    pub frames: usize,
    pub dim: usize,
    pub hidden: usize,
    pub t_max: usize,
    pub schedule: ScheduleKind,

    pub pretrain_clips: usize,
    pub pretrain_magnitude: f64,
    pub pretrain_corpus_seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,

    pub finetune_clips: usize,
    pub finetune_magnitude: f64,
    pub finetune_corpus_seed: u64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_seed: u64,
    pub adapter_seed: u64,
    pub cond_drop: f64,

    pub batch: usize,

    pub alpha: f64,
    pub prune_rate: f64,
    pub mask_seed_deg: u64,
    pub mask_seed_adt: u64,
    pub w_deg: f64,
    pub w_adt: f64,

    pub steps: usize,
    pub cfg_scale: f64,
    switch_k: Option<usize>,
    pub strategy: Strategy,

    pub eval_n: usize,
    pub eval_seed_base: u64,
    pub sample_seed: u64,

    pub taylor_frames: usize,
    pub taylor_dim: usize,
    pub taylor_hidden: usize,
    pub taylor_clips: usize,
    pub taylor_steps: usize,
    pub taylor_lr: f64,
    pub taylor_sample_steps: usize,
    pub taylor_eval_n: usize,
    pub taylor_alphas: Vec<f64>,
    pub taylor_fd_step: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            workdir: PathBuf::from("runs/default"),
            frames: 8,
            dim: 16,
            hidden: 96,
            t_max: 50,
            schedule: ScheduleKind::LinearBeta,

            pretrain_clips: 4096,
            pretrain_magnitude: 0.35,
            pretrain_corpus_seed: 101,
            pretrain_steps: 60_000,
            pretrain_lr: 0.2,
            pretrain_seed: 1001,

            finetune_clips: 2048,
            finetune_magnitude: 0.07,
            finetune_corpus_seed: 202,
            finetune_steps: 40_000,
            finetune_lr: 0.2,
            finetune_seed: 2002,
            adapter_seed: 77,
            cond_drop: 0.15,

            batch: 64,

            alpha: 0.5,
            prune_rate: 0.7,
            mask_seed_deg: 31,
            mask_seed_adt: 32,
            w_deg: 1.0,
            w_adt: 1.0,

            steps: 50,
            cfg_scale: 7.5,
            switch_k: None,
            strategy: Strategy::DynFirst,

            eval_n: 24,
            eval_seed_base: 9000,
            sample_seed: 4242,

            taylor_frames: 4,
            taylor_dim: 8,
            taylor_hidden: 8,
            taylor_clips: 512,
            taylor_steps: 8000,
            taylor_lr: 0.1,
            taylor_sample_steps: 10,
            taylor_eval_n: 4,
            taylor_alphas: vec![0.001, 0.003, 0.01],
            taylor_fd_step: 0.001,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("key {key} has unparsable value {value:?}")))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let items: Vec<f64> = value
        .split(',')
        .map(|s| parse::<f64>(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("key {key} lists no values")));
    }
    Ok(items)
}

impl ExperimentConfig {
    /// Load the file (when given), then apply `MMRG_WORKDIR` and
    /// `--set` pairs in precedence order.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::MissingArtifact(path.to_path_buf())
                } else {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                }
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Config(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    )));
                };
                cfg.set_key(key.trim(), value)?;
            }
        }
        if let Ok(dir) = std::env::var("MMRG_WORKDIR") {
            if !dir.is_empty() {
                cfg.workdir = PathBuf::from(dir);
            }
        }
        for pair in sets {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(CliError::Config(format!(
                    "--set needs key=value, got {pair:?}"
                )));
            };
            cfg.set_key(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "workdir" => self.workdir = PathBuf::from(value.trim()),
            "frames" => self.frames = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "schedule" => {
                self.schedule = ScheduleKind::parse(value.trim())
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
            "pretrain_clips" => self.pretrain_clips = parse(key, value)?,
            "pretrain_magnitude" => self.pretrain_magnitude = parse(key, value)?,
            "pretrain_corpus_seed" => self.pretrain_corpus_seed = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_seed" => self.pretrain_seed = parse(key, value)?,
            "finetune_clips" => self.finetune_clips = parse(key, value)?,
            "finetune_magnitude" => self.finetune_magnitude = parse(key, value)?,
            "finetune_corpus_seed" => self.finetune_corpus_seed = parse(key, value)?,
            "finetune_steps" => self.finetune_steps = parse(key, value)?,
            "finetune_lr" => self.finetune_lr = parse(key, value)?,
            "finetune_seed" => self.finetune_seed = parse(key, value)?,
            "adapter_seed" => self.adapter_seed = parse(key, value)?,
            "cond_drop" => self.cond_drop = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "prune_rate" => self.prune_rate = parse(key, value)?,
            "mask_seed_deg" => self.mask_seed_deg = parse(key, value)?,
            "mask_seed_adt" => self.mask_seed_adt = parse(key, value)?,
            "w_deg" => self.w_deg = parse(key, value)?,
            "w_adt" => self.w_adt = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "cfg_scale" => self.cfg_scale = parse(key, value)?,
            "switch_k" => self.switch_k = Some(parse(key, value)?),
            "strategy" => {
                self.strategy = Strategy::parse(value.trim())
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
            "eval_n" => self.eval_n = parse(key, value)?,
            "eval_seed_base" => self.eval_seed_base = parse(key, value)?,
            "sample_seed" => self.sample_seed = parse(key, value)?,
            "taylor_frames" => self.taylor_frames = parse(key, value)?,
            "taylor_dim" => self.taylor_dim = parse(key, value)?,
            "taylor_hidden" => self.taylor_hidden = parse(key, value)?,
            "taylor_clips" => self.taylor_clips = parse(key, value)?,
            "taylor_steps" => self.taylor_steps = parse(key, value)?,
            "taylor_lr" => self.taylor_lr = parse(key, value)?,
            "taylor_sample_steps" => self.taylor_sample_steps = parse(key, value)?,
            "taylor_eval_n" => self.taylor_eval_n = parse(key, value)?,
            "taylor_alphas" => self.taylor_alphas = parse_f64_list(key, value)?,
            "taylor_fd_step" => self.taylor_fd_step = parse(key, value)?,
            _ => {
                return Err(CliError::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.eval_n == 0 {
            return bad("eval_n must be positive".into());
        }
        if self.steps == 0 || self.steps > self.t_max {
            return bad(format!(
                "steps {} must lie in 1..=t_max ({})",
                self.steps, self.t_max
            ));
        }
        if let Some(k) = self.switch_k {
            if k > self.steps {
                return bad(format!(
                    "switch_k {k} cannot exceed sampler steps {}",
                    self.steps
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.prune_rate) {
            return bad(format!("prune_rate {} must lie in [0,1]", self.prune_rate));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return bad(format!("cond_drop {} must lie in [0,1]", self.cond_drop));
        }
        Ok(())
    }

    /// Denoiser shape without the conditioning adapter.
    pub fn bare_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            frames: self.frames,
            dim: self.dim,
            hidden: self.hidden,
            has_adapter: false,
            t_max: self.t_max,
        }
    }

    /// Denoiser shape with the conditioning adapter attached.
    pub fn full_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            has_adapter: true,
            ..self.bare_spec()
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(build_schedule(self.t_max, self.schedule)?)
    }

    /// Switch step: explicit `switch_k`, else half the sampler steps.
    pub fn switch_k(&self) -> usize {
        self.switch_k.unwrap_or(self.steps / 2)
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval_n as u64)
            .map(|i| self.eval_seed_base + i)
            .collect()
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.switch_k(), 25);
        assert_eq!(cfg.eval_seeds().len(), 24);
    }

    #[test]
    fn file_and_sets_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        std::fs::write(&path, "# comment\nalpha=0.7\n\nsteps=25\n").unwrap();
        let cfg =
            ExperimentConfig::resolve(Some(&path), &["alpha=1.5".into()]).unwrap();
        assert_eq!(cfg.alpha, 1.5);
        assert_eq!(cfg.steps, 25);
        assert_eq!(cfg.switch_k(), 12);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = ExperimentConfig::resolve(None, &["wat=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::resolve(None, &["alpha=fast".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::resolve(None, &["steps=0".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::resolve(None, &["alpha".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_config_file_exits_four() {
        let err = ExperimentConfig::resolve(Some(Path::new("/no/such.conf")), &[])
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
