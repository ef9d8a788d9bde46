//! W-Conv, encoder (FB → ↓2 → W-Conv) and decoder (W-Conv → ↑2 → +skip → FB) blocks.

use crate::error::{arg_err, shape_err, Result};
use crate::fourier::FourierBlock;
use crate::nn::{Conv, ModelState, NormAct, Session};
use crate::tensor::{Tensor, Var};
use rand::Rng;

/// Bottleneck of three conv/BN/PReLU stages with an identity residual.
#[derive(Clone, Debug)]
pub struct WConv {
    pub channels: usize,
    conv1: Conv,
    norm1: NormAct,
    conv2: Conv,
    norm2: NormAct,
    conv3: Conv,
    norm3: NormAct,
}

impl WConv {
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(arg_err("w_conv", format!("channels must be divisible by 4, got {channels}")));
        }
        let mid = channels / 4;
        Ok(Self {
            channels,
            conv1: Conv::new(format!("{prefix}.conv1"), channels, mid, 1),
            norm1: NormAct::new(prefix, "bn1", "act1", mid),
            conv2: Conv::new(format!("{prefix}.conv2"), mid, mid, 3),
            norm2: NormAct::new(prefix, "bn2", "act2", mid),
            conv3: Conv::new(format!("{prefix}.conv3"), mid, channels, 1),
            norm3: NormAct::new(prefix, "bn3", "act3", channels),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, prelu_init: f64, rng: &mut R) {
        self.conv1.init(state, rng);
        self.norm1.init(state, prelu_init);
        self.conv2.init(state, rng);
        self.norm2.init(state, prelu_init);
        self.conv3.init(state, rng);
        self.norm3.init(state, prelu_init);
    }

    /// Name of the last batch-norm gain (zero it to make the block an identity).
    pub fn final_gain_name(&self) -> String {
        format!("{}.weight", self.norm3.bn)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.norm1.forward(s, y)?;
        let y = self.conv2.forward(s, y)?;
        let y = self.norm2.forward(s, y)?;
        let y = self.conv3.forward(s, y)?;
        let y = self.norm3.forward(s, y)?;
        s.graph.add(x, y)
    }
}

/// Encoder block: Fourier block, ×1/2 downscale, W-Conv.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub fb: FourierBlock,
    pub wconv: WConv,
}

impl EncoderBlock {
    pub fn new(prefix: &str, channels: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            fb: FourierBlock::new(&format!("{prefix}.fb"), channels, alpha)?,
            wconv: WConv::new(&format!("{prefix}.wconv"), channels)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, prelu_init: f64, rng: &mut R) {
        self.fb.init(state, prelu_init, rng);
        self.wconv.init(state, prelu_init, rng);
    }

    /// Returns `(out at s/2, skip at s)`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let skip = self.fb.forward(s, x)?;
        let down = s.graph.downsample2(skip)?;
        let out = self.wconv.forward(s, down)?;
        Ok((out, skip))
    }

    /// Encoder output added to the extractor map of the next scale.
    pub fn forward_fused(&self, s: &mut Session, x: Var, extractor: Var) -> Result<(Var, Var)> {
        let (out, skip) = self.forward(s, x)?;
        if s.graph.shape(out) != s.graph.shape(extractor) {
            return Err(shape_err(
                "encoder_block",
                format!("output {:?} vs extractor map {:?}", s.graph.shape(out), s.graph.shape(extractor)),
            ));
        }
        let fused = s.graph.add(out, extractor)?;
        Ok((fused, skip))
    }
}

/// Decoder block: W-Conv, ×2 upscale, weighted skip addition, Fourier block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub wconv: WConv,
    pub fb: FourierBlock,
    /// Name of the learned skip weight, when this block receives a skip.
    pub skip_weight: Option<String>,
}

impl DecoderBlock {
    pub fn new(prefix: &str, channels: usize, alpha: f64, with_skip: bool) -> Result<Self> {
        Ok(Self {
            wconv: WConv::new(&format!("{prefix}.wconv"), channels)?,
            fb: FourierBlock::new(&format!("{prefix}.fb"), channels, alpha)?,
            skip_weight: with_skip.then(|| format!("{prefix}.w_skip")),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, prelu_init: f64, skip_init: f64, rng: &mut R) {
        self.wconv.init(state, prelu_init, rng);
        self.fb.init(state, prelu_init, rng);
        if let Some(name) = &self.skip_weight {
            state.insert_param(name.clone(), Tensor::scalar(skip_init));
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, skip: Option<Var>) -> Result<Var> {
        let y = self.wconv.forward(s, x)?;
        let mut y = s.graph.upsample2(y)?;
        match (&self.skip_weight, skip) {
            (Some(name), Some(skip)) => {
                if s.graph.shape(skip) != s.graph.shape(y) {
                    return Err(shape_err(
                        "decoder_block",
                        format!("skip {:?} vs upscaled {:?}", s.graph.shape(skip), s.graph.shape(y)),
                    ));
                }
                let w = s.param(name)?;
                let weighted = s.graph.scale_by(skip, w)?;
                y = s.graph.add(y, weighted)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(arg_err("decoder_block", "block expects a skip connection")),
            (None, Some(_)) => return Err(arg_err("decoder_block", "block takes no skip connection")),
        }
        self.fb.forward(s, y)
    }
}
