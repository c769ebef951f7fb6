//! Frozen patch encoder and the token-grid type every stage consumes.
//!
//! The encoder maps a frame to N tokens of dimension D: each token is a
//! fixed linear projection of its patch plus a fixed sinusoidal positional
//! offset. Weights are generated once from a seed and never updated.
//!
//! The projection writes into the leading D/2 dims and the positional
//! offsets occupy the trailing D/2 dims, so patch content and position stay
//! linearly separable no matter what the frame holds.

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Square patch edge in pixels.
    pub patch: usize,
    /// Input channels per pixel.
    pub channels: usize,
    /// Tokens per frame; must equal (H/patch)·(W/patch) of incoming frames.
    pub tokens_per_frame: usize,
    /// Token dimension; must be even.
    pub dim: usize,
    /// Scale applied to the sinusoidal positional offsets.
    pub pos_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // 16x16 single-channel frames in 4x4 patches.
        EncoderConfig {
            patch: 4,
            channels: 1,
            tokens_per_frame: 16,
            dim: 32,
            pos_scale: 0.25,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Shape used only for token-count arithmetic checks against the full
    /// scale setup (576 tokens/frame, 96x96 frames).
    pub fn paper_shape() -> Self {
        EncoderConfig {
            patch: 4,
            channels: 1,
            tokens_per_frame: 576,
            dim: 64,
            pos_scale: 0.25,
            seed: 0,
        }
    }

    /// Edge length in pixels of the square frame this config expects.
    pub fn frame_edge(&self) -> usize {
        let side = (self.tokens_per_frame as f64).sqrt().round() as usize;
        side * self.patch
    }
}

/// Deterministic frozen feature extractor. Read-only after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    cfg: EncoderConfig,
    /// [patch·patch·channels, dim] — columns dim/2.. are zero.
    weights: Tensor,
    /// [tokens_per_frame, dim] — columns ..dim/2 are zero.
    pos: Tensor,
}

impl FrozenEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.channels == 0 || cfg.tokens_per_frame == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if cfg.dim < 2 || cfg.dim % 2 != 0 {
            return Err(Error::Config(format!("encoder dim must be even >= 2, got {}", cfg.dim)));
        }
        let side = (cfg.tokens_per_frame as f64).sqrt().round() as usize;
        if side * side != cfg.tokens_per_frame {
            return Err(Error::Config(format!(
                "tokens_per_frame must be a perfect square, got {}",
                cfg.tokens_per_frame
            )));
        }
        let fan_in = cfg.patch * cfg.patch * cfg.channels;
        let content = cfg.dim / 2;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut rng = substream(cfg.seed, "frozen-encoder");
        let dense = Tensor::rand_uniform(vec![fan_in, content], scale, &mut rng);
        let mut weights = Tensor::zeros(vec![fan_in, cfg.dim]);
        for r in 0..fan_in {
            for c in 0..content {
                weights.data_mut()[r * cfg.dim + c] = dense.data()[r * content + c];
            }
        }

        let mut pos = Tensor::zeros(vec![cfg.tokens_per_frame, cfg.dim]);
        let pdim = cfg.dim - content;
        for i in 0..cfg.tokens_per_frame {
            for k in 0..pdim {
                let pair = (k / 2) as f64;
                let freq = 1.0 / 10_000f64.powf(2.0 * pair / pdim as f64);
                let angle = i as f64 * freq;
                let v = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                pos.data_mut()[i * cfg.dim + content + k] = cfg.pos_scale * v;
            }
        }
        Ok(FrozenEncoder { cfg, weights, pos })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.cfg.tokens_per_frame
    }

    /// Raw weight bytes, for frozen-ness assertions.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.weights
            .data()
            .iter()
            .chain(self.pos.data())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// Positional offset of token `i` (length dim).
    pub fn positional_offset(&self, i: usize) -> &[f64] {
        self.pos.row(i)
    }

    /// Encode one [H, W, C] frame into [N, dim] tokens.
    pub fn encode_frame(&self, frame: &Tensor) -> Result<Tensor> {
        let s = frame.shape();
        if s.len() != 3 || s[2] != self.cfg.channels {
            return Err(Error::Config(format!(
                "expected [H, W, {}] frame, got {s:?}",
                self.cfg.channels
            )));
        }
        let p = self.cfg.patch;
        if s[0] % p != 0 || s[1] % p != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {p}",
                s[0], s[1]
            )));
        }
        let (gh, gw) = (s[0] / p, s[1] / p);
        if gh * gw != self.cfg.tokens_per_frame {
            return Err(Error::Config(format!(
                "frame yields {} patches, encoder expects {}",
                gh * gw,
                self.cfg.tokens_per_frame
            )));
        }
        let (c, d) = (self.cfg.channels, self.cfg.dim);
        let mut out = Tensor::zeros(vec![self.cfg.tokens_per_frame, d]);
        let mut patch_buf = vec![0.0; p * p * c];
        for py in 0..gh {
            for px in 0..gw {
                let token = py * gw + px;
                let mut idx = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            patch_buf[idx] = frame.at(&[py * p + dy, px * p + dx, ch]);
                            idx += 1;
                        }
                    }
                }
                let row = &mut out.data_mut()[token * d..(token + 1) * d];
                row.copy_from_slice(self.pos.row(token));
                for (j, &x) in patch_buf.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let wrow = self.weights.row(j);
                    for k in 0..d {
                        row[k] += x * wrow[k];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encode frames into a token grid with unit-spaced timestamps.
    pub fn encode_video(&self, frames: &[Tensor]) -> Result<FrameTokenGrid> {
        if frames.is_empty() {
            return Err(Error::Usage("encode_video on an empty frame list".into()));
        }
        let shape0 = frames[0].shape().to_vec();
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape0 {
                return Err(Error::shape(
                    "encode_video",
                    format!("frame 0 is {shape0:?} but frame {i} is {:?}", f.shape()),
                ));
            }
        }
        let (n, d) = (self.cfg.tokens_per_frame, self.cfg.dim);
        let mut data = Vec::with_capacity(frames.len() * n * d);
        for f in frames {
            data.extend_from_slice(self.encode_frame(f)?.data());
        }
        let tokens = Tensor::new(vec![frames.len(), n, d], data)?;
        FrameTokenGrid::new(tokens, (0..frames.len()).map(|t| t as f64).collect())
    }
}

/// Rank-3 token array [T, N, D] with per-frame timestamps. The universal
/// currency between encoder, compressor, masking, and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokenGrid {
    pub tokens: Tensor,
    pub timestamps: Vec<f64>,
}

impl FrameTokenGrid {
    pub fn new(tokens: Tensor, timestamps: Vec<f64>) -> Result<Self> {
        if tokens.shape().len() != 3 {
            return Err(Error::shape(
                "FrameTokenGrid",
                format!("expected rank-3 tokens, got {:?}", tokens.shape()),
            ));
        }
        if timestamps.len() != tokens.shape()[0] {
            return Err(Error::shape(
                "FrameTokenGrid",
                format!(
                    "{} timestamps for {} frames",
                    timestamps.len(),
                    tokens.shape()[0]
                ),
            ));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Usage("timestamps must be strictly increasing".into()));
        }
        Ok(FrameTokenGrid { tokens, timestamps })
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Token vector at (frame, token index).
    pub fn token(&self, t: usize, i: usize) -> &[f64] {
        self.tokens.slice3(t, i)
    }
}
