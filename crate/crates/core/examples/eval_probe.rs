//! Scratch harness: loads the checkpoints saved by pipeline_probe and
//! sweeps evaluation-side knobs (guidance scale, switch points) without
//! retraining. Not part of the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mmrg_core::diffusion::corpus::{gen_corpus, SyntheticCorpusSpec};
use mmrg_core::diffusion::denoiser::denoiser_forward;
use mmrg_core::diffusion::schedule::{build_schedule, forward_noise, ScheduleKind};
use mmrg_core::diffusion::{DenoiserSpec, LatentVideo, MotionCommand};
use mmrg_core::metrics::{eval_model, EvalReport, SampleConfig};
use mmrg_core::tensor_store::load_checkpoint;

const FRAMES: usize = 8;
const DIM: usize = 16;
const HIDDEN: usize = 80;
const T_MAX: usize = 50;
const EVAL_N: usize = 24;

fn report_line(tag: &str, r: &EvalReport) {
    println!(
        "{tag:<16} D={:.4}  cons={:.4}  adh={}",
        r.motion_degree,
        r.consistency,
        r.control_adherence
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into()),
    );
}

fn main() {
    let full = DenoiserSpec {
        frames: FRAMES,
        dim: DIM,
        hidden: HIDDEN,
        has_adapter: true,
        t_max: T_MAX,
    };
    let sched = build_schedule(T_MAX, ScheduleKind::LinearBeta).unwrap();
    let sft = load_checkpoint("target/probe_ckpt/sft.mmrg".as_ref()).unwrap();
    let commands = [
        MotionCommand::Right,
        MotionCommand::Left,
        MotionCommand::Up,
        MotionCommand::Down,
    ];
    let seeds: Vec<u64> = (0..EVAL_N as u64).map(|i| 9000 + i).collect();

    // Guidance sweep on the fine-tuned model.
    for s in [0.0, 1.0, 1.5, 2.0, 3.0, 5.0, 7.5] {
        let cfg = SampleConfig { steps: 50, cfg_scale: s };
        let r = eval_model(&sft, &full, &sched, &commands, EVAL_N, &seeds, &cfg).unwrap();
        report_line(&format!("sft(s={s})"), &r);
    }

    // Conditional-vs-null gap along noised fine-tune clips: size of the
    // per-step guidance push where training actually constrained it.
    let ft_corpus = gen_corpus(&SyntheticCorpusSpec {
        count: 256,
        frames: FRAMES,
        dim: DIM,
        motion_magnitude: 0.07,
        conditioned: true,
        seed: 202,
    })
    .unwrap();
    let n = FRAMES * DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1A7);
    print!("on-manifold |cond-null|/sqrt(fd):");
    for &t in &[5usize, 10, 15, 20, 25, 30, 40, 50] {
        let mut acc = 0.0;
        let reps = 32;
        for _ in 0..reps {
            let clip = &ft_corpus[rng.gen_range(0..ft_corpus.len())];
            let eps_v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let eps = LatentVideo::from_f64(FRAMES, DIM, &eps_v).unwrap();
            let z_t = forward_noise(&clip.video, t, &eps, &sched).unwrap();
            let e_c = denoiser_forward(&sft, &full, &z_t, t, clip.cond.as_ref())
                .unwrap()
                .to_f64();
            let e_u = denoiser_forward(&sft, &full, &z_t, t, None).unwrap().to_f64();
            let d2: f64 = e_c.iter().zip(&e_u).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += (d2 / n as f64).sqrt();
        }
        print!("  t{t}={:.3}", acc / reps as f64);
    }
    println!();
}
