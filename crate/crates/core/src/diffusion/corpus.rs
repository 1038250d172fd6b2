//! Synthetic latent-video corpus: a Gaussian bump gliding across a
//! coarse 2-D grid, embedded into latent space by a fixed random
//! linear code. The code is invertible enough to decode bump positions
//! back out, which is what the motion-control metric relies on.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{CondEmbedding, LatentVideo, MagnitudeClass, MotionCommand};
use crate::error::{Error, Result};
use crate::tensor_store::{self, Tensor, TensorMap};

/// Grid positions run over [0, GRID_SIDE-1] per axis.
pub const GRID_SIDE: usize = 6;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
/// Width of the Gaussian bump rendered onto the grid.
pub const BUMP_SIGMA: f64 = 1.0;
/// Sharpness of the soft-argmax used when decoding positions.
pub const DECODE_BETA: f64 = 8.0;
/// Every corpus and every metric decodes through the code drawn from
/// this seed; changing it invalidates nothing but cross-run artifacts.
const CODE_SEED: u64 = 0xC0DE_5EED;

/// Fixed linear map between grid-cell bump intensities and latent
/// vectors, with a left-inverse for decoding.
#[derive(Debug, Clone)]
pub struct LatentCode {
    dim: usize,
    /// dim x GRID_CELLS, row-major.
    encode_w: Vec<f64>,
    /// GRID_CELLS x dim, row-major: the Moore-Penrose left inverse.
    decode_w: Vec<f64>,
}

/// Bump intensities over the grid for a blob centered at `pos`.
fn bump(pos: [f64; 2]) -> [f64; GRID_CELLS] {
    let mut v = [0.0; GRID_CELLS];
    for gy in 0..GRID_SIDE {
        for gx in 0..GRID_SIDE {
            let dx = gx as f64 - pos[0];
            let dy = gy as f64 - pos[1];
            v[gy * GRID_SIDE + gx] = (-(dx * dx + dy * dy) / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
        }
    }
    v
}

/// Invert a square matrix by Gauss-Jordan elimination with partial
/// pivoting. `a` is n x n row-major; fails on (near-)singular input.
fn invert(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                m[r1 * n + col]
                    .abs()
                    .total_cmp(&m[r2 * n + col].abs())
            })
            .unwrap();
        if m[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular matrix in code inversion".into()));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let diag = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= diag;
            inv[col * n + j] /= diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = m[row * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                m[row * n + j] -= factor * m[col * n + j];
                inv[row * n + j] -= factor * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

impl LatentCode {
    /// The canonical code at latent width `dim`, deterministic across
    /// runs. Scaled so a centered bump encodes to norm √dim.
    pub fn new(dim: usize) -> Result<LatentCode> {
        if dim == 0 || dim > GRID_CELLS {
            return Err(Error::Invalid(format!(
                "latent dim {dim} must lie in 1..={GRID_CELLS}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED);
        let mut encode_w: Vec<f64> = (0..dim * GRID_CELLS)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        let center = [
            (GRID_SIDE - 1) as f64 / 2.0,
            (GRID_SIDE - 1) as f64 / 2.0,
        ];
        let v = bump(center);
        let norm: f64 = (0..dim)
            .map(|i| {
                let zi: f64 = (0..GRID_CELLS).map(|g| encode_w[i * GRID_CELLS + g] * v[g]).sum();
                zi * zi
            })
            .sum::<f64>()
            .sqrt();
        let scale = (dim as f64).sqrt() / norm;
        for w in &mut encode_w {
            *w *= scale;
        }

        // decode_w = Eᵀ(EEᵀ)⁻¹, the minimum-norm right-inverse of E.
        let mut gram = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                gram[i * dim + j] = (0..GRID_CELLS)
                    .map(|g| encode_w[i * GRID_CELLS + g] * encode_w[j * GRID_CELLS + g])
                    .sum();
            }
        }
        let gram_inv = invert(&gram, dim)?;
        let mut decode_w = vec![0.0; GRID_CELLS * dim];
        for g in 0..GRID_CELLS {
            for j in 0..dim {
                decode_w[g * dim + j] = (0..dim)
                    .map(|i| encode_w[i * GRID_CELLS + g] * gram_inv[i * dim + j])
                    .sum();
            }
        }
        Ok(LatentCode {
            dim,
            encode_w,
            decode_w,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Latent vector for a blob at `pos` (grid coordinates).
    pub fn encode(&self, pos: [f64; 2]) -> Vec<f64> {
        let v = bump(pos);
        (0..self.dim)
            .map(|i| (0..GRID_CELLS).map(|g| self.encode_w[i * GRID_CELLS + g] * v[g]).sum())
            .collect()
    }

    /// Soft-argmax estimate of the blob position behind a latent
    /// vector: recover grid intensities with the left inverse, then
    /// take the softmax-weighted centroid of the cells.
    pub fn decode(&self, z: &[f64]) -> [f64; 2] {
        let mut logits = [0.0f64; GRID_CELLS];
        for (g, l) in logits.iter_mut().enumerate() {
            *l = DECODE_BETA
                * (0..self.dim)
                    .map(|j| self.decode_w[g * self.dim + j] * z[j])
                    .sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for gy in 0..GRID_SIDE {
            for gx in 0..GRID_SIDE {
                let w = (logits[gy * GRID_SIDE + gx] - max).exp();
                total += w;
                cx += w * gx as f64;
                cy += w * gy as f64;
            }
        }
        [cx / total, cy / total]
    }

    /// Decoded blob position of one video frame.
    pub fn decode_frame(&self, v: &LatentVideo, k: usize) -> [f64; 2] {
        let z: Vec<f64> = v.frame(k).iter().map(|&x| x as f64).collect();
        self.decode(&z)
    }
}

/// Recipe for a batch of synthetic clips.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub count: usize,
    pub frames: usize,
    pub dim: usize,
    /// Per-frame displacement of the blob along the command direction.
    pub motion_magnitude: f64,
    /// Whether clips carry their command as a condition embedding.
    pub conditioned: bool,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Invalid("corpus needs at least one clip".into()));
        }
        if self.frames < 2 {
            return Err(Error::Invalid("clips need at least two frames".into()));
        }
        if !self.motion_magnitude.is_finite() || self.motion_magnitude < 0.0 {
            return Err(Error::Invalid(format!(
                "motion magnitude {} must be finite and non-negative",
                self.motion_magnitude
            )));
        }
        LatentCode::new(self.dim).map(|_| ())
    }
}

/// One training clip: the latent video, its (optional) condition, and
/// the ground-truth labels it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video: LatentVideo,
    pub cond: Option<CondEmbedding>,
    pub command: MotionCommand,
    pub magnitude: f64,
}

const DIRECTIONS: [MotionCommand; 4] = [
    MotionCommand::Right,
    MotionCommand::Left,
    MotionCommand::Up,
    MotionCommand::Down,
];

/// Generate a deterministic corpus of blob-trajectory clips. Each clip
/// picks a direction uniformly, centers its trajectory on the grid
/// middle with a small uniform jitter, and advances the blob by
/// `motion_magnitude` per frame along the command direction.
pub fn gen_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    let code = LatentCode::new(spec.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center = (GRID_SIDE - 1) as f64 / 2.0;
    let mut clips = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let command = DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())];
        let jitter = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let dir = command.direction();
        let m = spec.motion_magnitude;
        let half_span = (spec.frames - 1) as f64 * m / 2.0;
        let start = [
            center - dir[0] * half_span + jitter[0],
            center - dir[1] * half_span + jitter[1],
        ];
        let mut data = Vec::with_capacity(spec.frames * spec.dim);
        for k in 0..spec.frames {
            let pos = [
                start[0] + k as f64 * m * dir[0],
                start[1] + k as f64 * m * dir[1],
            ];
            data.extend(code.encode(pos));
        }
        let video = LatentVideo::from_f64(spec.frames, spec.dim, &data)?;
        let cond = if spec.conditioned {
            Some(CondEmbedding::for_command(
                command,
                MagnitudeClass::from_magnitude(m),
                spec.dim,
            )?)
        } else {
            None
        };
        clips.push(Clip {
            video,
            cond,
            command,
            magnitude: m,
        });
    }
    Ok(clips)
}

/// Pack a corpus into the checkpoint container (stage `corpus`): one
/// tensor per clip plus a meta table of labels.
pub fn corpus_to_map(clips: &[Clip], conditioned: bool) -> Result<TensorMap> {
    if clips.is_empty() {
        return Err(Error::Invalid("cannot serialize an empty corpus".into()));
    }
    let mut map = TensorMap::new("corpus")?;
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip{i:04}");
        let t = Tensor::new(
            vec![clip.video.frames(), clip.video.dim()],
            clip.video.data().to_vec(),
        )?;
        map.insert(&name, t)?;
        map.set_meta(&format!("{name}.command"), clip.command.as_str())?;
        map.set_meta(&format!("{name}.magnitude"), &format!("{}", clip.magnitude))?;
    }
    map.set_meta("conditioned", if conditioned { "true" } else { "false" })?;
    Ok(map)
}

/// Reverse of [`corpus_to_map`]; condition embeddings are rebuilt from
/// the stored command labels.
pub fn corpus_from_map(map: &TensorMap) -> Result<Vec<Clip>> {
    if map.stage() != "corpus" {
        return Err(Error::Invalid(format!(
            "expected stage corpus, found {:?}",
            map.stage()
        )));
    }
    let conditioned = map.meta("conditioned") == Some("true");
    let mut clips = Vec::new();
    for (name, t) in map.iter() {
        let [frames, dim] = t.shape() else {
            return Err(Error::Format(format!(
                "clip tensor {name} must be 2-D, got {:?}",
                t.shape()
            )));
        };
        let command = MotionCommand::parse(
            map.meta(&format!("{name}.command"))
                .ok_or_else(|| Error::Format(format!("missing command label for {name}")))?,
        )?;
        let magnitude: f64 = map
            .meta(&format!("{name}.magnitude"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("missing magnitude label for {name}")))?;
        let video = LatentVideo::new(*frames, *dim, t.data().to_vec())?;
        let cond = if conditioned {
            Some(CondEmbedding::for_command(
                command,
                MagnitudeClass::from_magnitude(magnitude),
                *dim,
            )?)
        } else {
            None
        };
        clips.push(Clip {
            video,
            cond,
            command,
            magnitude,
        });
    }
    Ok(clips)
}

pub fn save_corpus(clips: &[Clip], conditioned: bool, path: &Path) -> Result<()> {
    tensor_store::save_checkpoint(&corpus_to_map(clips, conditioned)?, path)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Clip>> {
    corpus_from_map(&tensor_store::load_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, m: f64, conditioned: bool, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            count,
            frames: 8,
            dim: 16,
            motion_magnitude: m,
            conditioned,
            seed,
        }
    }

    #[test]
    fn code_round_trips_positions_approximately() {
        // The 16-dim code keeps 16 of 36 cells' worth of information, so
        // decoding is approximate. What sampling quality rests on is that
        // positions come back near the truth and, more importantly, that
        // small displacements decode with the right direction.
        let code = LatentCode::new(16).unwrap();
        let mut total = 0.0;
        let mut worst = 0.0f64;
        let mut n = 0;
        for iy in 0..4 {
            for ix in 0..4 {
                let pos = [1.0 + ix as f64, 1.0 + iy as f64];
                let got = code.decode(&code.encode(pos));
                let err = ((got[0] - pos[0]).powi(2) + (got[1] - pos[1]).powi(2)).sqrt();
                total += err;
                worst = worst.max(err);
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!(mean < 0.35, "mean decode error {mean}");
        assert!(worst < 0.7, "worst decode error {worst}");

        for dir in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            for start in [[2.0, 2.0], [2.5, 3.0], [3.0, 2.5]] {
                let stop = [start[0] + 0.5 * dir[0], start[1] + 0.5 * dir[1]];
                let a = code.decode(&code.encode(start));
                let b = code.decode(&code.encode(stop));
                let d = [b[0] - a[0], b[1] - a[1]];
                let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let cos = (d[0] * dir[0] + d[1] * dir[1]) / norm;
                assert!(
                    cos > 0.5,
                    "move {dir:?} from {start:?} decoded with cosine {cos}"
                );
            }
        }
    }

    #[test]
    fn code_is_calibrated_and_deterministic() {
        let a = LatentCode::new(16).unwrap();
        let b = LatentCode::new(16).unwrap();
        assert_eq!(a.encode_w, b.encode_w);
        let center = [2.5, 2.5];
        let norm: f64 = a.encode(center).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 4.0).abs() < 1e-9, "norm {norm}");
    }

    #[test]
    fn invert_recovers_identity() {
        let a = vec![2.0, 1.0, 0.0, 0.5, 3.0, -1.0, 1.0, 0.0, 4.0];
        let inv = invert(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let got: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((got - want).abs() < 1e-10);
            }
        }
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_err());
    }

    #[test]
    fn zero_magnitude_means_still_frames() {
        let clips = gen_corpus(&spec(3, 0.0, false, 5)).unwrap();
        for clip in &clips {
            let first = clip.video.frame(0);
            for k in 1..clip.video.frames() {
                assert_eq!(clip.video.frame(k), first);
            }
        }
    }

    #[test]
    fn right_command_positions_increase() {
        let clips = gen_corpus(&spec(40, 0.35, true, 11)).unwrap();
        let code = LatentCode::new(16).unwrap();
        let mut seen_right = false;
        for clip in clips.iter().filter(|c| c.command == MotionCommand::Right) {
            seen_right = true;
            let mut prev = f64::NEG_INFINITY;
            for k in 0..clip.video.frames() {
                let pos = code.decode_frame(&clip.video, k);
                assert!(pos[0] > prev, "frame {k}: x {} after {prev}", pos[0]);
                prev = pos[0];
            }
        }
        assert!(seen_right);
    }

    #[test]
    fn same_seed_reproduces_corpus() {
        let a = gen_corpus(&spec(6, 0.2, true, 33)).unwrap();
        let b = gen_corpus(&spec(6, 0.2, true, 33)).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&spec(6, 0.2, true, 34)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn conditioned_clips_carry_matching_embedding() {
        let clips = gen_corpus(&spec(10, 0.35, true, 7)).unwrap();
        for clip in &clips {
            let cond = clip.cond.as_ref().unwrap();
            assert_eq!(cond.command, clip.command);
            assert_eq!(cond.magnitude, MagnitudeClass::High);
        }
        let bare = gen_corpus(&spec(10, 0.35, false, 7)).unwrap();
        assert!(bare.iter().all(|c| c.cond.is_none()));
    }

    #[test]
    fn corpus_round_trips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.mmrg");
        let clips = gen_corpus(&spec(4, 0.35, true, 21)).unwrap();
        save_corpus(&clips, true, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(clips, loaded);
    }

    #[test]
    fn spec_validation_rejects_nonsense() {
        assert!(gen_corpus(&SyntheticCorpusSpec {
            count: 0,
            ..spec(1, 0.1, false, 0)
        })
        .is_err());
        assert!(gen_corpus(&SyntheticCorpusSpec {
            motion_magnitude: -0.1,
            ..spec(1, 0.1, false, 0)
        })
        .is_err());
        assert!(gen_corpus(&SyntheticCorpusSpec {
            dim: 99,
            ..spec(1, 0.1, false, 0)
        })
        .is_err());
    }
}
