//! One function per subcommand. Every command loads its inputs from the
//! working directory, so stages can run in separate invocations, and a
//! failed pipeline keeps the artifacts it already wrote.

use std::path::PathBuf;

use mmrg_core::diffusion::corpus::{gen_corpus, load_corpus, save_corpus, SyntheticCorpusSpec};
use mmrg_core::diffusion::schedule::NoiseSchedule;
use mmrg_core::diffusion::train::{attach_adapter_init, eval_loss, train, TrainConfig, Trainable};
use mmrg_core::diffusion::{
    CondEmbedding, DenoiserSpec, LatentVideo, MagnitudeClass, MotionCommand,
};
use mmrg_core::merge::{
    build_enhanced_models, dare_prune, delta, extrapolate, isolate_parameter_sets, DeltaMap,
    IsolatedSets,
};
use mmrg_core::metrics::{
    eval_decoupled, eval_model, motion_degree, seed_hash, taylor_check, EvalReport, SampleConfig,
    TaylorReport,
};
use mmrg_core::sampler::{ddim_sample, decoupled_sample, ModelPair, Strategy, SwitchSchedule};
use mmrg_core::tensor_store::{
    load_checkpoint, save_checkpoint, validate_compatibility, Tensor, TensorMap,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CORPUS_PRETRAIN: &str = "corpus_pretrain.mmrg";
pub const CORPUS_FINETUNE: &str = "corpus_finetune.mmrg";
pub const THETA_PRE: &str = "theta_pre.mmrg";
pub const THETA_SFT: &str = "theta_sft.mmrg";
pub const THETA_DYN: &str = "theta_dyn.mmrg";
pub const DELTA_ADT: &str = "theta_adt.mmrg";
pub const DELTA_DEG: &str = "theta_deg.mmrg";
pub const DELTA_CON: &str = "theta_con.mmrg";
pub const THETA_DYN_STAR: &str = "theta_dyn_star.mmrg";
pub const THETA_CON_STAR: &str = "theta_con_star.mmrg";
pub const SAMPLE_DECOUPLED: &str = "sample_decoupled.mmrg";

const EVAL_COMMANDS: [MotionCommand; 4] = [
    MotionCommand::Right,
    MotionCommand::Left,
    MotionCommand::Up,
    MotionCommand::Down,
];

/// Shared command context: resolved config plus the dry-run switch.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub dry_run: bool,
}

impl Ctx {
    /// In dry-run mode print the plan and report `true` (skip the work).
    fn plan(&self, lines: &[String]) -> bool {
        if self.dry_run {
            for l in lines {
                println!("plan: {l}");
            }
        }
        self.dry_run
    }

    fn ensure_workdir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.workdir).map_err(|e| {
            CliError::Other(format!(
                "cannot create workdir {}: {e}",
                self.cfg.workdir.display()
            ))
        })
    }

    fn load(&self, name: &str) -> Result<TensorMap> {
        let path = self.cfg.artifact(name);
        if !path.exists() {
            return Err(CliError::MissingArtifact(path));
        }
        Ok(load_checkpoint(&path)?)
    }

    fn save(&self, name: &str, map: &TensorMap) -> Result<PathBuf> {
        self.ensure_workdir()?;
        let path = self.cfg.artifact(name);
        save_checkpoint(map, &path)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        self.cfg.noise_schedule()
    }

    /// Denoiser shape for a loaded checkpoint: adapter presence comes
    /// from the tensors, everything else from config.
    fn spec_for(&self, map: &TensorMap) -> DenoiserSpec {
        if map.get("adapter.null").is_some() {
            self.cfg.full_spec()
        } else {
            self.cfg.bare_spec()
        }
    }

    fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.cfg.steps,
            cfg_scale: self.cfg.cfg_scale,
        }
    }

    fn switch_schedule(&self, k: Option<usize>, strategy: Option<Strategy>) -> SwitchSchedule {
        SwitchSchedule {
            t_total: self.cfg.steps,
            k: k.unwrap_or_else(|| self.cfg.switch_k()),
            strategy: strategy.unwrap_or(self.cfg.strategy),
        }
    }
}

/// Parse `--cond` values like `right` or `down:low`.
fn parse_cond(arg: &str) -> Result<(MotionCommand, MagnitudeClass)> {
    let (cmd, mag) = match arg.split_once(':') {
        Some((c, m)) => (c, m),
        None => (arg, "high"),
    };
    let command = MotionCommand::parse(cmd).map_err(|e| CliError::Config(e.to_string()))?;
    let magnitude = match mag {
        "high" => MagnitudeClass::High,
        "low" => MagnitudeClass::Low,
        other => {
            return Err(CliError::Config(format!(
                "magnitude {other:?} must be high or low"
            )))
        }
    };
    Ok((command, magnitude))
}

fn embedding_for(
    cond: Option<&str>,
    spec: &DenoiserSpec,
    dim: usize,
) -> Result<Option<CondEmbedding>> {
    let Some(arg) = cond else { return Ok(None) };
    if !spec.has_adapter {
        return Err(CliError::Config(
            "conditioned sampling needs a model with the adapter stage".into(),
        ));
    }
    let (command, magnitude) = parse_cond(arg)?;
    Ok(Some(CondEmbedding::for_command(command, magnitude, dim)?))
}

/// Prefix non-path errors with the pipeline stage that raised them.
fn at_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("stage {stage}: {m}")),
        CliError::Numeric(m) => CliError::Numeric(format!("stage {stage}: {m}")),
        CliError::Other(m) => CliError::Other(format!("stage {stage}: {m}")),
        missing @ CliError::MissingArtifact(_) => missing,
    })
}

fn write_csv(ctx: &Ctx, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
    ctx.ensure_workdir()?;
    let path = ctx.cfg.artifact(name);
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(header)
        .and_then(|_| rows.iter().try_for_each(|r| w.write_record(r)))
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn report_rows(stage: &str, r: &EvalReport) -> Vec<Vec<String>> {
    let hash = seed_hash(&r.seed_set);
    let mut rows = vec![
        vec![
            stage.to_string(),
            "motion_degree".into(),
            format!("{:.6}", r.motion_degree),
            r.n_samples.to_string(),
            hash.clone(),
        ],
        vec![
            stage.to_string(),
            "consistency".into(),
            format!("{:.6}", r.consistency),
            r.n_samples.to_string(),
            hash.clone(),
        ],
    ];
    if let Some(a) = r.control_adherence {
        rows.push(vec![
            stage.to_string(),
            "control_adherence".into(),
            format!("{a:.6}"),
            r.n_samples.to_string(),
            hash,
        ]);
    }
    rows
}

fn print_report(stage: &str, r: &EvalReport) {
    let adh = r
        .control_adherence
        .map(|a| format!("{a:.4}"))
        .unwrap_or_else(|| "-".into());
    println!(
        "{stage}: motion_degree {:.4}  consistency {:.4}  control_adherence {adh}  (n={})",
        r.motion_degree, r.consistency, r.n_samples
    );
}

pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[
        format!(
            "generate {} unconditioned clips (magnitude {}) -> {}",
            c.pretrain_clips,
            c.pretrain_magnitude,
            c.artifact(CORPUS_PRETRAIN).display()
        ),
        format!(
            "generate {} conditioned clips (magnitude {}) -> {}",
            c.finetune_clips,
            c.finetune_magnitude,
            c.artifact(CORPUS_FINETUNE).display()
        ),
    ]) {
        return Ok(());
    }
    ctx.ensure_workdir()?;
    let pre = gen_corpus(&SyntheticCorpusSpec {
        count: c.pretrain_clips,
        frames: c.frames,
        dim: c.dim,
        motion_magnitude: c.pretrain_magnitude,
        conditioned: false,
        seed: c.pretrain_corpus_seed,
    })?;
    save_corpus(&pre, false, &c.artifact(CORPUS_PRETRAIN))?;
    println!("wrote {}", c.artifact(CORPUS_PRETRAIN).display());
    let ft = gen_corpus(&SyntheticCorpusSpec {
        count: c.finetune_clips,
        frames: c.frames,
        dim: c.dim,
        motion_magnitude: c.finetune_magnitude,
        conditioned: true,
        seed: c.finetune_corpus_seed,
    })?;
    save_corpus(&ft, true, &c.artifact(CORPUS_FINETUNE))?;
    println!("wrote {}", c.artifact(CORPUS_FINETUNE).display());
    Ok(())
}

pub fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[format!(
        "train {} steps (lr {}, batch {}) on {} -> {}",
        c.pretrain_steps,
        c.pretrain_lr,
        c.batch,
        c.artifact(CORPUS_PRETRAIN).display(),
        c.artifact(THETA_PRE).display()
    )]) {
        return Ok(());
    }
    let corpus_path = c.artifact(CORPUS_PRETRAIN);
    if !corpus_path.exists() {
        return Err(CliError::MissingArtifact(corpus_path));
    }
    let corpus = load_corpus(&corpus_path)?;
    let sched = ctx.schedule()?;
    let spec = c.bare_spec();
    let theta = train(
        &spec,
        &corpus,
        &sched,
        &TrainConfig {
            lr: c.pretrain_lr,
            batch: c.batch,
            steps: c.pretrain_steps,
            seed: c.pretrain_seed,
            trainable: Trainable::All,
            cond_drop: 0.0,
            stage: "pretrained".into(),
        },
        None,
    )?;
    let held = eval_loss(&theta, &spec, &corpus, &sched, c.pretrain_seed ^ 0xE7A1, 128)?;
    println!("pretraining finished; held-out loss {held:.4}");
    ctx.save(THETA_PRE, &theta)?;
    Ok(())
}

pub fn cmd_finetune(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[format!(
        "attach adapter to {} and train {} steps (adapter+temporal) on {} -> {}",
        c.artifact(THETA_PRE).display(),
        c.finetune_steps,
        c.artifact(CORPUS_FINETUNE).display(),
        c.artifact(THETA_SFT).display()
    )]) {
        return Ok(());
    }
    let corpus_path = c.artifact(CORPUS_FINETUNE);
    if !corpus_path.exists() {
        return Err(CliError::MissingArtifact(corpus_path));
    }
    let corpus = load_corpus(&corpus_path)?;
    let pre = ctx.load(THETA_PRE)?;
    let spec = c.full_spec();
    let init = attach_adapter_init(&pre, &spec, c.adapter_seed)?;
    let sched = ctx.schedule()?;
    let theta = train(
        &spec,
        &corpus,
        &sched,
        &TrainConfig {
            lr: c.finetune_lr,
            batch: c.batch,
            steps: c.finetune_steps,
            seed: c.finetune_seed,
            trainable: Trainable::AdapterAndTemporal,
            cond_drop: c.cond_drop,
            stage: "sft".into(),
        },
        Some(&init),
    )?;
    let held = eval_loss(&theta, &spec, &corpus, &sched, c.finetune_seed ^ 0xE7A1, 128)?;
    println!("fine-tuning finished; held-out loss {held:.4}");
    ctx.save(THETA_SFT, &theta)?;
    Ok(())
}

pub fn cmd_extrapolate(ctx: &Ctx, alpha: Option<f64>) -> Result<()> {
    let c = &ctx.cfg;
    let alpha = alpha.unwrap_or(c.alpha);
    if ctx.plan(&[format!(
        "extrapolate shared weights of {} away from {} (alpha {alpha}) -> {}",
        c.artifact(THETA_PRE).display(),
        c.artifact(THETA_SFT).display(),
        c.artifact(THETA_DYN).display()
    )]) {
        return Ok(());
    }
    let pre = ctx.load(THETA_PRE)?;
    let sft = ctx.load(THETA_SFT)?;
    let partition = validate_compatibility(&sft, &pre)?;
    let dyn_map = extrapolate(&pre, &sft, alpha, &partition)?;
    ctx.save(THETA_DYN, &dyn_map)?;
    Ok(())
}

pub fn cmd_dare(ctx: &Ctx, input: &str, output: &str, p: Option<f64>, seed: Option<u64>) -> Result<()> {
    let c = &ctx.cfg;
    let p = p.unwrap_or(c.prune_rate);
    let seed = seed.unwrap_or(c.mask_seed_deg);
    if ctx.plan(&[format!(
        "drop-and-rescale {} (p {p}, seed {seed}) -> {}",
        c.artifact(input).display(),
        c.artifact(output).display()
    )]) {
        return Ok(());
    }
    let map = ctx.load(input)?;
    let d = DeltaMap::from_tensor_map(&map)?;
    let pruned = dare_prune(&d, p, seed)?;
    ctx.save(output, &pruned.to_tensor_map()?)?;
    Ok(())
}

pub fn cmd_isolate(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[format!(
        "split adapter/motion/consistency deltas (p {}, seeds {}/{}) -> {}, {}, {}",
        c.prune_rate,
        c.mask_seed_deg,
        c.mask_seed_adt,
        c.artifact(DELTA_ADT).display(),
        c.artifact(DELTA_DEG).display(),
        c.artifact(DELTA_CON).display()
    )]) {
        return Ok(());
    }
    let pre = ctx.load(THETA_PRE)?;
    let sft = ctx.load(THETA_SFT)?;
    let dyn_map = ctx.load(THETA_DYN)?;
    let partition = validate_compatibility(&sft, &pre)?;
    let sets = isolate_parameter_sets(
        &pre,
        &sft,
        &dyn_map,
        &partition,
        c.prune_rate,
        c.mask_seed_deg,
        c.mask_seed_adt,
    )?;
    ctx.save(DELTA_ADT, &sets.theta_adt.to_tensor_map()?)?;
    ctx.save(DELTA_DEG, &sets.theta_deg.to_tensor_map()?)?;
    ctx.save(DELTA_CON, &sets.theta_con.to_tensor_map()?)?;
    Ok(())
}

pub fn cmd_build_enhanced(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[format!(
        "merge deltas onto {} (w_deg {}, w_adt {}) -> {}, {}",
        c.artifact(THETA_PRE).display(),
        c.w_deg,
        c.w_adt,
        c.artifact(THETA_DYN_STAR).display(),
        c.artifact(THETA_CON_STAR).display()
    )]) {
        return Ok(());
    }
    let pre = ctx.load(THETA_PRE)?;
    let sets = IsolatedSets {
        theta_adt: DeltaMap::from_tensor_map(&ctx.load(DELTA_ADT)?)?,
        theta_deg: DeltaMap::from_tensor_map(&ctx.load(DELTA_DEG)?)?,
        theta_con: DeltaMap::from_tensor_map(&ctx.load(DELTA_CON)?)?,
    };
    let (dyn_star, con_star) = build_enhanced_models(&pre, &sets, c.w_deg, c.w_adt)?;
    ctx.save(THETA_DYN_STAR, &dyn_star)?;
    ctx.save(THETA_CON_STAR, &con_star)?;
    Ok(())
}

fn video_artifact(
    video: &LatentVideo,
    seed: u64,
    cond: Option<&str>,
    extra: &[(&str, String)],
) -> Result<TensorMap> {
    let mut m = TensorMap::new("sample")?;
    m.insert(
        "video",
        Tensor::new(vec![video.frames(), video.dim()], video.data().to_vec())?,
    )?;
    m.set_meta("seed", &seed.to_string())?;
    m.set_meta("cond", cond.unwrap_or("none"))?;
    for (k, v) in extra {
        m.set_meta(k, v)?;
    }
    Ok(m)
}

pub fn cmd_sample(
    ctx: &Ctx,
    model: &str,
    seed: Option<u64>,
    cond: Option<&str>,
    out: Option<&str>,
) -> Result<()> {
    let c = &ctx.cfg;
    let seed = seed.unwrap_or(c.sample_seed);
    let out = out.unwrap_or("sample.mmrg");
    if ctx.plan(&[format!(
        "sample {} ({} steps, cfg {}, seed {seed}, cond {}) -> {}",
        c.artifact(model).display(),
        c.steps,
        c.cfg_scale,
        cond.unwrap_or("none"),
        c.artifact(out).display()
    )]) {
        return Ok(());
    }
    let theta = ctx.load(model)?;
    let spec = ctx.spec_for(&theta);
    let sched = ctx.schedule()?;
    let embedding = embedding_for(cond, &spec, c.dim)?;
    let video = ddim_sample(
        &theta,
        &spec,
        &sched,
        embedding.as_ref(),
        c.steps,
        c.cfg_scale,
        seed,
    )?;
    println!("motion_degree {:.4}", motion_degree(&video));
    let artifact = video_artifact(&video, seed, cond, &[("model_stage", theta.stage().into())])?;
    ctx.save(out, &artifact)?;
    Ok(())
}

pub fn cmd_sample_decoupled(
    ctx: &Ctx,
    seed: Option<u64>,
    cond: Option<&str>,
    out: Option<&str>,
    k: Option<usize>,
    strategy: Option<Strategy>,
) -> Result<()> {
    let c = &ctx.cfg;
    let seed = seed.unwrap_or(c.sample_seed);
    let cond = cond.or(Some("right"));
    let out = out.unwrap_or(SAMPLE_DECOUPLED);
    let switch = ctx.switch_schedule(k, strategy);
    if ctx.plan(&[format!(
        "decoupled-sample {} + {} (K {} of {}, {}, seed {seed}) -> {}",
        c.artifact(THETA_DYN_STAR).display(),
        c.artifact(THETA_CON_STAR).display(),
        switch.k,
        switch.t_total,
        switch.strategy.as_str(),
        c.artifact(out).display()
    )]) {
        return Ok(());
    }
    let dyn_star = ctx.load(THETA_DYN_STAR)?;
    let con_star = ctx.load(THETA_CON_STAR)?;
    let spec = c.full_spec();
    let pair = ModelPair::new(&dyn_star, &con_star, &spec)?;
    let sched = ctx.schedule()?;
    let embedding = embedding_for(cond, &spec, c.dim)?;
    let video = decoupled_sample(
        &pair,
        &switch,
        &sched,
        embedding.as_ref(),
        c.steps,
        c.cfg_scale,
        seed,
    )?;
    println!("motion_degree {:.4}", motion_degree(&video));
    let artifact = video_artifact(
        &video,
        seed,
        cond,
        &[
            ("switch_k", switch.k.to_string()),
            ("strategy", switch.strategy.as_str().into()),
        ],
    )?;
    ctx.save(out, &artifact)?;
    Ok(())
}

fn eval_checkpoint(ctx: &Ctx, name: &str) -> Result<(String, EvalReport)> {
    let theta = ctx.load(name)?;
    let spec = ctx.spec_for(&theta);
    let sched = ctx.schedule()?;
    let report = eval_model(
        &theta,
        &spec,
        &sched,
        &EVAL_COMMANDS,
        ctx.cfg.eval_n,
        &ctx.cfg.eval_seeds(),
        &ctx.sample_config(),
    )?;
    Ok((theta.stage().to_string(), report))
}

pub fn cmd_eval(ctx: &Ctx, model: &str, out: Option<&str>) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[format!(
        "evaluate {} over {} seeds -> eval_<stage>.csv",
        c.artifact(model).display(),
        c.eval_n
    )]) {
        return Ok(());
    }
    let (stage, report) = eval_checkpoint(ctx, model)?;
    print_report(&stage, &report);
    let default_name = format!("eval_{stage}.csv");
    let name = out.unwrap_or(&default_name);
    write_csv(
        ctx,
        name,
        &["model_stage", "metric", "value", "n", "seed_hash"],
        &report_rows(&stage, &report),
    )?;
    Ok(())
}

fn eval_pipeline_pair(ctx: &Ctx) -> Result<EvalReport> {
    let dyn_star = ctx.load(THETA_DYN_STAR)?;
    let con_star = ctx.load(THETA_CON_STAR)?;
    let spec = ctx.cfg.full_spec();
    let pair = ModelPair::new(&dyn_star, &con_star, &spec)?;
    let sched = ctx.schedule()?;
    Ok(eval_decoupled(
        &pair,
        &ctx.switch_schedule(None, None),
        &sched,
        &EVAL_COMMANDS,
        ctx.cfg.eval_n,
        &ctx.cfg.eval_seeds(),
        &ctx.sample_config(),
    )?)
}

pub fn cmd_pipeline(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[
        "gen-data, pretrain, finetune, extrapolate, isolate, build-enhanced".into(),
        format!(
            "decoupled-sample seed {} and evaluate pre/sft/dyn/pipeline over {} seeds",
            c.sample_seed, c.eval_n
        ),
        format!("artifacts under {}", c.workdir.display()),
    ]) {
        return Ok(());
    }
    println!("[1/8] gen-data");
    at_stage("gen-data", cmd_gen_data(ctx))?;
    println!("[2/8] pretrain");
    at_stage("pretrain", cmd_pretrain(ctx))?;
    println!("[3/8] finetune");
    at_stage("finetune", cmd_finetune(ctx))?;
    println!("[4/8] extrapolate");
    at_stage("extrapolate", cmd_extrapolate(ctx, None))?;
    println!("[5/8] isolate");
    at_stage("isolate", cmd_isolate(ctx))?;
    println!("[6/8] build-enhanced");
    at_stage("build-enhanced", cmd_build_enhanced(ctx))?;
    println!("[7/8] sample-decoupled");
    at_stage(
        "sample-decoupled",
        cmd_sample_decoupled(ctx, None, None, None, None, None),
    )?;
    println!("[8/8] eval");
    for (csv_name, model) in [
        ("eval_pre.csv", THETA_PRE),
        ("eval_sft.csv", THETA_SFT),
        ("eval_dyn.csv", THETA_DYN),
    ] {
        let (stage, report) = at_stage("eval", eval_checkpoint(ctx, model))?;
        print_report(&stage, &report);
        write_csv(
            ctx,
            csv_name,
            &["model_stage", "metric", "value", "n", "seed_hash"],
            &report_rows(&stage, &report),
        )?;
    }
    let report = at_stage("eval", eval_pipeline_pair(ctx))?;
    print_report("pipeline", &report);
    write_csv(
        ctx,
        "eval_pipeline.csv",
        &["model_stage", "metric", "value", "n", "seed_hash"],
        &report_rows("pipeline", &report),
    )?;
    Ok(())
}

pub fn cmd_sweep_alpha(ctx: &Ctx, alphas: Option<&str>) -> Result<()> {
    let c = &ctx.cfg;
    let grid: Vec<f64> = match alphas {
        Some(s) => s
            .split(',')
            .map(|a| {
                a.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad alpha {a:?}")))
            })
            .collect::<Result<_>>()?,
        None => vec![0.0, 0.35, 0.5, 0.7, 1.0, 2.0],
    };
    if ctx.plan(&[format!(
        "extrapolate and evaluate alpha grid {grid:?} -> {}",
        c.artifact("sweep_alpha.csv").display()
    )]) {
        return Ok(());
    }
    let pre = ctx.load(THETA_PRE)?;
    let sft = ctx.load(THETA_SFT)?;
    let partition = validate_compatibility(&sft, &pre)?;
    let sched = ctx.schedule()?;
    let spec = c.bare_spec();
    let mut rows = Vec::new();
    for &alpha in &grid {
        let dyn_map = extrapolate(&pre, &sft, alpha, &partition)?;
        let report = eval_model(
            &dyn_map,
            &spec,
            &sched,
            &EVAL_COMMANDS,
            c.eval_n,
            &c.eval_seeds(),
            &ctx.sample_config(),
        )?;
        println!(
            "alpha {alpha}: motion_degree {:.4}  consistency {:.4}",
            report.motion_degree, report.consistency
        );
        rows.push(vec![
            format!("{alpha}"),
            format!("{:.6}", report.motion_degree),
            format!("{:.6}", report.consistency),
        ]);
    }
    write_csv(
        ctx,
        "sweep_alpha.csv",
        &["alpha", "motion_degree", "consistency"],
        &rows,
    )?;
    Ok(())
}

pub fn cmd_sweep_k(ctx: &Ctx, ks: Option<&str>, strategy: Option<Strategy>) -> Result<()> {
    let c = &ctx.cfg;
    let strategy = strategy.unwrap_or(c.strategy);
    let grid: Vec<usize> = match ks {
        Some(s) => s
            .split(',')
            .map(|k| {
                k.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad switch step {k:?}")))
            })
            .collect::<Result<_>>()?,
        None => vec![0, c.steps / 4, c.steps / 2, c.steps],
    };
    if ctx.plan(&[format!(
        "decoupled-evaluate K grid {grid:?} ({}) -> {}",
        strategy.as_str(),
        c.artifact("sweep_k.csv").display()
    )]) {
        return Ok(());
    }
    let dyn_star = ctx.load(THETA_DYN_STAR)?;
    let con_star = ctx.load(THETA_CON_STAR)?;
    let spec = c.full_spec();
    let pair = ModelPair::new(&dyn_star, &con_star, &spec)?;
    let sched = ctx.schedule()?;
    let mut rows = Vec::new();
    for &k in &grid {
        let switch = ctx.switch_schedule(Some(k), Some(strategy));
        let report = eval_decoupled(
            &pair,
            &switch,
            &sched,
            &EVAL_COMMANDS,
            c.eval_n,
            &c.eval_seeds(),
            &ctx.sample_config(),
        )?;
        println!(
            "K {k}: motion_degree {:.4}  consistency {:.4}  control_adherence {:.4}",
            report.motion_degree,
            report.consistency,
            report.control_adherence.unwrap_or(f64::NAN)
        );
        rows.push(vec![
            k.to_string(),
            strategy.as_str().to_string(),
            format!("{:.6}", report.motion_degree),
            format!("{:.6}", report.consistency),
            report
                .control_adherence
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default(),
        ]);
    }
    write_csv(
        ctx,
        "sweep_k.csv",
        &["k", "strategy", "motion_degree", "consistency", "control_adherence"],
        &rows,
    )?;
    Ok(())
}

/// Train a small model pair and compare the measured metric change
/// along the extrapolation direction with its first-order prediction.
pub fn taylor_report(ctx: &Ctx) -> Result<TaylorReport> {
    let c = &ctx.cfg;
    let bare = DenoiserSpec {
        frames: c.taylor_frames,
        dim: c.taylor_dim,
        hidden: c.taylor_hidden,
        has_adapter: false,
        t_max: c.t_max,
    };
    let full = DenoiserSpec {
        has_adapter: true,
        ..bare.clone()
    };
    let sched = ctx.schedule()?;
    let pre_corpus = gen_corpus(&SyntheticCorpusSpec {
        count: c.taylor_clips,
        frames: c.taylor_frames,
        dim: c.taylor_dim,
        motion_magnitude: c.pretrain_magnitude,
        conditioned: false,
        seed: c.pretrain_corpus_seed,
    })?;
    let pre = train(
        &bare,
        &pre_corpus,
        &sched,
        &TrainConfig {
            lr: c.taylor_lr,
            batch: c.batch,
            steps: c.taylor_steps,
            seed: c.pretrain_seed,
            trainable: Trainable::All,
            cond_drop: 0.0,
            stage: "pretrained".into(),
        },
        None,
    )?;
    let ft_corpus = gen_corpus(&SyntheticCorpusSpec {
        count: c.taylor_clips,
        frames: c.taylor_frames,
        dim: c.taylor_dim,
        motion_magnitude: c.finetune_magnitude,
        conditioned: true,
        seed: c.finetune_corpus_seed,
    })?;
    let init = attach_adapter_init(&pre, &full, c.adapter_seed)?;
    let sft = train(
        &full,
        &ft_corpus,
        &sched,
        &TrainConfig {
            lr: c.taylor_lr,
            batch: c.batch,
            steps: c.taylor_steps,
            seed: c.finetune_seed,
            trainable: Trainable::AdapterAndTemporal,
            cond_drop: c.cond_drop,
            stage: "sft".into(),
        },
        Some(&init),
    )?;
    let partition = validate_compatibility(&sft, &pre)?;
    let direction = delta(&pre, &sft, &partition)?;

    let seeds: Vec<u64> = (0..c.taylor_eval_n as u64).map(|i| 600 + i).collect();
    let sample_steps = c.taylor_sample_steps;
    let d_fn = |m: &TensorMap| -> mmrg_core::Result<f64> {
        let mut acc = 0.0;
        for &s in &seeds {
            let v = ddim_sample(m, &bare, &sched, None, sample_steps, 0.0, s)?;
            acc += motion_degree(&v);
        }
        Ok(acc / seeds.len() as f64)
    };
    Ok(taylor_check(
        &pre,
        &direction,
        d_fn,
        &c.taylor_alphas,
        c.taylor_fd_step,
    )?)
}

pub fn cmd_taylor_check(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    if ctx.plan(&[format!(
        "train a {}x{}x{} model pair, probe the metric along the recovery direction (alphas {:?}) -> {}",
        c.taylor_frames,
        c.taylor_dim,
        c.taylor_hidden,
        c.taylor_alphas,
        c.artifact("taylor.csv").display()
    )]) {
        return Ok(());
    }
    let report = taylor_report(ctx)?;
    println!(
        "gamma_hat {:.6}  cosine_alignment {}",
        report.gamma_hat,
        report
            .cosine_alignment
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into())
    );
    let mut rows = Vec::new();
    for ((a, p), m) in report
        .alpha_grid
        .iter()
        .zip(&report.predicted)
        .zip(&report.measured)
    {
        println!("alpha {a}: predicted {p:.6}  measured {m:.6}");
        rows.push(vec![
            format!("{a}"),
            format!("{p:.6}"),
            format!("{m:.6}"),
        ]);
    }
    write_csv(ctx, "taylor.csv", &["alpha", "predicted", "measured"], &rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cond_strings_parse() {
        assert_eq!(
            parse_cond("right").unwrap(),
            (MotionCommand::Right, MagnitudeClass::High)
        );
        assert_eq!(
            parse_cond("down:low").unwrap(),
            (MotionCommand::Down, MagnitudeClass::Low)
        );
        assert!(parse_cond("sideways").is_err());
        assert!(parse_cond("up:medium").is_err());
    }

    #[test]
    fn conditioned_sampling_needs_adapter() {
        let cfg = ExperimentConfig::default();
        let err = embedding_for(Some("right"), &cfg.bare_spec(), cfg.dim).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(embedding_for(None, &cfg.bare_spec(), cfg.dim).unwrap().is_none());
        assert!(embedding_for(Some("up:low"), &cfg.full_spec(), cfg.dim)
            .unwrap()
            .is_some());
    }
}
