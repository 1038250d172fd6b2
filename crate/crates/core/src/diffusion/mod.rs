//! Self-contained latent-video diffusion testbed.
//!
//! A clip is a short sequence of latent frames; the denoiser is a
//! per-frame MLP with temporal self-attention and an optional
//! conditioning adapter; training and sampling are deterministic given
//! their seeds. Small enough to train on a CPU in seconds, structured
//! enough that fine-tuning visibly changes motion statistics.

pub mod corpus;
pub mod denoiser;
pub mod schedule;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// Sinusoidal time-embedding width (four frequencies, sin and cos).
pub const TIME_FEATURES: usize = 8;
/// Sinusoidal frame-position embedding width, same layout as the time
/// features but over the frame index.
pub const POS_FEATURES: usize = 8;
/// Condition embeddings carry this many tokens.
pub const COND_TOKENS: usize = 4;

/// A latent video clip: `frames` rows of `dim` features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LatentVideo {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames < 2 {
            return Err(Error::Invalid(format!(
                "a video needs at least 2 frames, got {frames}"
            )));
        }
        if dim == 0 || data.len() != frames * dim {
            return Err(Error::Invalid(format!(
                "latent data length {} does not match {frames}x{dim}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite latent value {bad}")));
        }
        Ok(LatentVideo { frames, dim, data })
    }

    pub fn from_f64(frames: usize, dim: usize, data: &[f64]) -> Result<Self> {
        Self::new(frames, dim, data.iter().map(|&v| v as f32).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// The five motion commands a clip can follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionCommand {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl MotionCommand {
    pub fn as_str(self) -> &'static str {
        match self {
            MotionCommand::Left => "left",
            MotionCommand::Right => "right",
            MotionCommand::Up => "up",
            MotionCommand::Down => "down",
            MotionCommand::Still => "still",
        }
    }

    pub fn parse(s: &str) -> Result<MotionCommand> {
        match s {
            "left" => Ok(MotionCommand::Left),
            "right" => Ok(MotionCommand::Right),
            "up" => Ok(MotionCommand::Up),
            "down" => Ok(MotionCommand::Down),
            "still" => Ok(MotionCommand::Still),
            other => Err(Error::Invalid(format!("unknown motion command {other:?}"))),
        }
    }

    /// Unit direction in grid coordinates; `Still` is the zero vector.
    pub fn direction(self) -> [f64; 2] {
        match self {
            MotionCommand::Left => [-1.0, 0.0],
            MotionCommand::Right => [1.0, 0.0],
            MotionCommand::Up => [0.0, 1.0],
            MotionCommand::Down => [0.0, -1.0],
            MotionCommand::Still => [0.0, 0.0],
        }
    }
}

/// Coarse per-clip displacement scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagnitudeClass {
    Low,
    High,
}

/// Clips moving at least this far per frame count as high-magnitude.
pub const MAGNITUDE_HIGH_MIN: f64 = 0.2;

impl MagnitudeClass {
    pub fn from_magnitude(m: f64) -> MagnitudeClass {
        if m >= MAGNITUDE_HIGH_MIN {
            MagnitudeClass::High
        } else {
            MagnitudeClass::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MagnitudeClass::Low => "low",
            MagnitudeClass::High => "high",
        }
    }
}

/// Token embedding standing in for an encoded text prompt. Tokens are
/// a fixed pseudo-random function of the command alone, so the same
/// command always produces the same embedding at a given width.
#[derive(Debug, Clone, PartialEq)]
pub struct CondEmbedding {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
    pub command: MotionCommand,
    pub magnitude: MagnitudeClass,
}

impl CondEmbedding {
    pub fn for_command(
        command: MotionCommand,
        magnitude: MagnitudeClass,
        dim: usize,
    ) -> Result<CondEmbedding> {
        if dim == 0 {
            return Err(Error::Invalid("condition dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(command.as_str().as_bytes()));
        let data = (0..COND_TOKENS * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Ok(CondEmbedding {
            tokens: COND_TOKENS,
            dim,
            data,
            command,
            magnitude,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Architecture description: latent width, frame count, hidden width,
/// whether the conditioning adapter exists, and the time-embedding
/// normalization scale (the diffusion step count the model trains at).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub frames: usize,
    pub dim: usize,
    pub hidden: usize,
    pub has_adapter: bool,
    pub t_max: usize,
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.dim == 0 || self.hidden == 0 || self.t_max == 0 {
            return Err(Error::Invalid(format!(
                "bad denoiser spec: frames={} dim={} hidden={} t_max={}",
                self.frames, self.dim, self.hidden, self.t_max
            )));
        }
        Ok(())
    }
}
