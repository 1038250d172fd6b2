//! Scratch sweep over pretraining hyperparameters. Prints held-out loss,
//! the noise-prediction error at a few timesteps, and the worst latent
//! norm reached by an unconditioned DDIM trajectory.

use std::time::Instant;

use mmrg_core::diffusion::corpus::{gen_corpus, Clip, SyntheticCorpusSpec};
use mmrg_core::diffusion::denoiser::denoiser_forward;
use mmrg_core::diffusion::schedule::{build_schedule, forward_noise, NoiseSchedule, ScheduleKind};
use mmrg_core::diffusion::train::{eval_loss, train, TrainConfig, Trainable};
use mmrg_core::diffusion::{DenoiserSpec, LatentVideo};
use mmrg_core::metrics::motion_degree;
use mmrg_core::sampler::ddim_sample;
use mmrg_core::tensor_store::TensorMap;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

fn per_t_losses(
    theta: &TensorMap,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    corpus: &[Clip],
    ts: &[usize],
) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xD1A6);
    let n = spec.frames * spec.dim;
    ts.iter()
        .map(|&t| {
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
            acc / reps as f64
        })
        .collect()
}

/// Worst per-entry rms along an uncond DDIM trajectory, plus final rms.
fn trajectory_peak(
    theta: &TensorMap,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    seed: u64,
) -> (f64, f64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = spec.frames * spec.dim;
    let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let steps = 50;
    let times: Vec<usize> = (0..steps).map(|j| (j + 1) * spec.t_max / steps).collect();
    let mut peak: f64 = 0.0;
    let mut last = 0.0;
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
        let norm = (z.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        peak = peak.max(norm);
        last = norm;
    }
    (peak, last)
}

fn main() {
    let sched = build_schedule(50, ScheduleKind::LinearBeta).unwrap();
    let corpus = gen_corpus(&SyntheticCorpusSpec {
        count: 4096,
        frames: 8,
        dim: 16,
        motion_magnitude: 0.35,
        conditioned: false,
        seed: 101,
    })
    .unwrap();
    let corpus_d: f64 =
        corpus.iter().map(|c| motion_degree(&c.video)).sum::<f64>() / corpus.len() as f64;
    println!("corpus D: {corpus_d:.4}");

    // (hidden, lr, batch, steps)
    let cases: &[(usize, f64, usize, usize)] = &[(80, 0.2, 64, 60_000)];
    for &(hidden, lr, batch, steps) in cases {
        let spec = DenoiserSpec {
            frames: 8,
            dim: 16,
            hidden,
            has_adapter: false,
            t_max: 50,
        };
        let t0 = Instant::now();
        let theta = train(
            &spec,
            &corpus,
            &sched,
            &TrainConfig {
                lr,
                batch,
                steps,
                seed: 1001,
                trainable: Trainable::All,
                cond_drop: 0.0,
                stage: "pretrained".into(),
            },
            None,
        )
        .unwrap();
        let held = eval_loss(&theta, &spec, &corpus, &sched, 5150, 128).unwrap();
        let lt = per_t_losses(&theta, &spec, &sched, &corpus, &[10, 20, 30, 40, 48, 50]);
        let mut worst_peak: f64 = 0.0;
        let mut mean_d = 0.0;
        for s in 0..8u64 {
            let (p, _) = trajectory_peak(&theta, &spec, &sched, 7000 + s);
            worst_peak = worst_peak.max(p);
            let v = ddim_sample(&theta, &spec, &sched, None, 50, 0.0, 7000 + s).unwrap();
            mean_d += motion_degree(&v) / 8.0;
        }
        println!(
            "h={hidden:<4} lr={lr:<6} batch={batch:<3} steps={steps:<6} held={held:.4}  t-loss {}  peak={worst_peak:.2}  D={mean_d:.3}  [{:.0?}]",
            lt.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>().join("/"),
            t0.elapsed()
        );
    }
}
