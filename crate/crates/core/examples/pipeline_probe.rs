//! Scratch harness: runs the full merge pipeline end to end and prints
//! every number the acceptance gate cares about, so hyperparameters can
//! be tuned quickly. Not part of the test suite.

use std::time::Instant;

use mmrg_core::diffusion::corpus::{gen_corpus, Clip, SyntheticCorpusSpec};
use mmrg_core::diffusion::denoiser::denoiser_forward;
use mmrg_core::diffusion::schedule::{build_schedule, forward_noise, NoiseSchedule, ScheduleKind};
use mmrg_core::diffusion::train::{attach_adapter_init, eval_loss, train, TrainConfig, Trainable};
use mmrg_core::diffusion::{DenoiserSpec, LatentVideo, MotionCommand};
use mmrg_core::tensor_store::TensorMap;
use mmrg_core::merge::{build_enhanced_models, extrapolate, isolate_parameter_sets};
use mmrg_core::metrics::{eval_decoupled, eval_model, motion_degree, EvalReport, SampleConfig};
use mmrg_core::sampler::{ModelPair, Strategy, SwitchSchedule};
use mmrg_core::tensor_store::validate_compatibility;

const FRAMES: usize = 8;
const DIM: usize = 16;
const HIDDEN: usize = 80;
const T_MAX: usize = 50;

const PRETRAIN_CLIPS: usize = 4096;
const PRETRAIN_MAG: f64 = 0.35;
const PRETRAIN_STEPS: usize = 40_000;
const PRETRAIN_LR: f64 = 0.2;

const FINETUNE_CLIPS: usize = 2048;
const FINETUNE_MAG: f64 = 0.07;
const FINETUNE_STEPS: usize = 30_000;
const FINETUNE_LR: f64 = 0.2;
const COND_DROP: f64 = 0.5;

const BATCH: usize = 64;
const SAMPLE_STEPS: usize = 50;
const CFG: f64 = 7.5;
const EVAL_N: usize = 24;
const PRUNE: f64 = 0.7;

/// Print the mean noise-prediction error at a few fixed timesteps plus
/// the latent-norm trajectory of an unconditioned DDIM run, to show
/// where the sampler leaves the data manifold.
fn diagnose(theta: &TensorMap, spec: &DenoiserSpec, sched: &NoiseSchedule, corpus: &[Clip]) {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xD1A6);
    let n = spec.frames * spec.dim;
    print!("  per-t loss:");
    for &t in &[1usize, 2, 5, 10, 20, 30, 40, 48, 50] {
        let mut acc = 0.0;
        let reps = 48;
        for _ in 0..reps {
            let clip = &corpus[rng.gen_range(0..corpus.len())];
            let eps_v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let eps = LatentVideo::from_f64(spec.frames, spec.dim, &eps_v).unwrap();
            let z_t = forward_noise(&clip.video, t, &eps, sched).unwrap();
            let out = denoiser_forward(theta, spec, &z_t, t, None).unwrap();
            let se: f64 = out
                .to_f64()
                .iter()
                .zip(&eps_v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc += se / n as f64;
        }
        print!("  t{t}={:.3}", acc / reps as f64);
    }
    println!();
    print!("  ddim |z|/sqrt(fd):");
    let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let steps = SAMPLE_STEPS;
    let times: Vec<usize> = (0..steps).map(|j| (j + 1) * spec.t_max / steps).collect();
    for j in (0..steps).rev() {
        let t = times[j];
        let zt = LatentVideo::from_f64(spec.frames, spec.dim, &z).unwrap();
        let eps_hat = denoiser_forward(theta, spec, &zt, t, None).unwrap().to_f64();
        let ab_t = sched.alpha_bar(t);
        let ab_prev = if j > 0 { sched.alpha_bar(times[j - 1]) } else { 1.0 };
        for i in 0..n {
            let pred_z0 = (z[i] - (1.0 - ab_t).sqrt() * eps_hat[i]) / ab_t.sqrt();
            z[i] = ab_prev.sqrt() * pred_z0 + (1.0 - ab_prev).sqrt() * eps_hat[i];
        }
        if j % 10 == 0 || j == steps - 1 {
            let norm = (z.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            print!("  t{t}->{:.2}", norm);
        }
    }
    println!();
}

fn report_line(tag: &str, r: &EvalReport) {
    println!(
        "{tag:<18} D={:.4}  cons={:.4}  adh={}",
        r.motion_degree,
        r.consistency,
        r.control_adherence
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into()),
    );
}

fn main() {
    let t0 = Instant::now();
    let bare = DenoiserSpec {
        frames: FRAMES,
        dim: DIM,
        hidden: HIDDEN,
        has_adapter: false,
        t_max: T_MAX,
    };
    let full = DenoiserSpec {
        has_adapter: true,
        ..bare.clone()
    };
    let sched = build_schedule(T_MAX, ScheduleKind::LinearBeta).unwrap();
    let commands = [
        MotionCommand::Right,
        MotionCommand::Left,
        MotionCommand::Up,
        MotionCommand::Down,
    ];
    let seeds: Vec<u64> = (0..EVAL_N as u64).map(|i| 9000 + i).collect();
    let cfg = SampleConfig {
        steps: SAMPLE_STEPS,
        cfg_scale: CFG,
    };
    let cfg_uncond = SampleConfig {
        steps: SAMPLE_STEPS,
        cfg_scale: 0.0,
    };

    // ---- stage 0: pretrain on fast clips -------------------------------
    let pre_corpus = gen_corpus(&SyntheticCorpusSpec {
        count: PRETRAIN_CLIPS,
        frames: FRAMES,
        dim: DIM,
        motion_magnitude: PRETRAIN_MAG,
        conditioned: false,
        seed: 101,
    })
    .unwrap();
    let pre = train(
        &bare,
        &pre_corpus,
        &sched,
        &TrainConfig {
            lr: PRETRAIN_LR,
            batch: BATCH,
            steps: PRETRAIN_STEPS,
            seed: 1001,
            trainable: Trainable::All,
            cond_drop: 0.0,
            stage: "pretrained".into(),
        },
        None,
    )
    .unwrap();
    println!(
        "pretrain done in {:.1?}; heldout loss {:.4}",
        t0.elapsed(),
        eval_loss(&pre, &bare, &pre_corpus, &sched, 5150, 128).unwrap()
    );
    std::fs::create_dir_all("target/probe_ckpt").unwrap();
    mmrg_core::tensor_store::save_checkpoint(&pre, "target/probe_ckpt/pre.mmrg".as_ref()).unwrap();
    let corpus_d: f64 = pre_corpus
        .iter()
        .map(|c| motion_degree(&c.video))
        .sum::<f64>()
        / pre_corpus.len() as f64;
    println!("  corpus D (mag {PRETRAIN_MAG}): {corpus_d:.4}");
    diagnose(&pre, &bare, &sched, &pre_corpus);
    let r_pre = eval_model(&pre, &bare, &sched, &commands, EVAL_N, &seeds, &cfg_uncond).unwrap();
    report_line("pre", &r_pre);

    // ---- stage 1: fine-tune with adapter on slow clips ------------------
    let t1 = Instant::now();
    let ft_corpus = gen_corpus(&SyntheticCorpusSpec {
        count: FINETUNE_CLIPS,
        frames: FRAMES,
        dim: DIM,
        motion_magnitude: FINETUNE_MAG,
        conditioned: true,
        seed: 202,
    })
    .unwrap();
    let sft_init = attach_adapter_init(&pre, &full, 77).unwrap();
    let sft = train(
        &full,
        &ft_corpus,
        &sched,
        &TrainConfig {
            lr: FINETUNE_LR,
            batch: BATCH,
            steps: FINETUNE_STEPS,
            seed: 2002,
            trainable: Trainable::AdapterAndTemporal,
            cond_drop: COND_DROP,
            stage: "sft".into(),
        },
        Some(&sft_init),
    )
    .unwrap();
    println!(
        "finetune done in {:.1?}; heldout loss {:.4}",
        t1.elapsed(),
        eval_loss(&sft, &full, &ft_corpus, &sched, 5151, 128).unwrap()
    );
    mmrg_core::tensor_store::save_checkpoint(&sft, "target/probe_ckpt/sft.mmrg".as_ref()).unwrap();
    let r_sft = eval_model(&sft, &full, &sched, &commands, EVAL_N, &seeds, &cfg).unwrap();
    report_line("sft", &r_sft);
    println!(
        "criterion 4: D(sft) {:.4} < 0.7*D(pre) {:.4} -> {}",
        r_sft.motion_degree,
        0.7 * r_pre.motion_degree,
        r_sft.motion_degree < 0.7 * r_pre.motion_degree
    );

    // ---- stage 2: extrapolate -------------------------------------------
    let partition = validate_compatibility(&sft, &pre).unwrap();
    let mut r_dyn_half = None;
    let mut degree_by_alpha = Vec::new();
    for alpha in [0.0, 0.35, 0.5, 0.7, 1.0, 2.0] {
        let dyn_m = extrapolate(&pre, &sft, alpha, &partition).unwrap();
        let r = eval_model(&dyn_m, &bare, &sched, &commands, EVAL_N, &seeds, &cfg_uncond).unwrap();
        report_line(&format!("dyn(a={alpha})"), &r);
        if alpha == 0.5 {
            r_dyn_half = Some(r.clone());
        }
        degree_by_alpha.push((alpha, r.motion_degree, r.consistency));
    }
    let r_dyn_half = r_dyn_half.unwrap();
    println!(
        "criterion 5a: D(dyn 0.5) {:.4} > D(sft) {:.4} -> {}",
        r_dyn_half.motion_degree,
        r_sft.motion_degree,
        r_dyn_half.motion_degree > r_sft.motion_degree
    );
    let d0 = degree_by_alpha[0].1;
    let d35 = degree_by_alpha[1].1;
    let d70 = degree_by_alpha[3].1;
    println!(
        "criterion 5b: D non-decreasing over [0,0.35,0.7]: {:.4} <= {:.4} <= {:.4} -> {}",
        d0,
        d35,
        d70,
        d0 <= d35 && d35 <= d70
    );
    let c0 = degree_by_alpha[0].2;
    let c20 = degree_by_alpha[5].2;
    println!("criterion 5c: cons(2.0) {:.4} < cons(0) {:.4} -> {}", c20, c0, c20 < c0);

    // ---- stage 3: isolate + decoupled sampling --------------------------
    let dyn_half = extrapolate(&pre, &sft, 0.5, &partition).unwrap();
    let sets = isolate_parameter_sets(&pre, &sft, &dyn_half, &partition, PRUNE, 31, 32).unwrap();
    let (dyn_star, con_star) = build_enhanced_models(&pre, &sets, 1.0, 1.0).unwrap();
    let pair = ModelPair::new(&dyn_star, &con_star, &full).unwrap();
    for k in [0usize, 12, 25, 50] {
        let switch = SwitchSchedule {
            t_total: SAMPLE_STEPS,
            k,
            strategy: Strategy::DynFirst,
        };
        let r = eval_decoupled(&pair, &switch, &sched, &commands, EVAL_N, &seeds, &cfg).unwrap();
        report_line(&format!("decoupled(K={k})"), &r);
        if k == 25 {
            println!(
                "criterion 7a: D {:.4} > D(sft) {:.4} -> {}",
                r.motion_degree,
                r_sft.motion_degree,
                r.motion_degree > r_sft.motion_degree
            );
            println!(
                "criterion 7b: cons {:.4} >= 0.95*cons(sft) {:.4} -> {}",
                r.consistency,
                0.95 * r_sft.consistency,
                r.consistency >= 0.95 * r_sft.consistency
            );
            println!(
                "criterion 7c: adh {:.4} > adh(dyn) {:.4} -> {}",
                r.control_adherence.unwrap(),
                r_dyn_half.control_adherence.unwrap(),
                r.control_adherence.unwrap() > r_dyn_half.control_adherence.unwrap()
            );
        }
    }
    println!("total {:.1?}", t0.elapsed());
}
