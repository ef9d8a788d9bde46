//! The full encoder–decoder with semantic and depth heads.
//!
//! Scale plan for an `H × 2H` input:
//!
//! | stage            | scales                                  |
//! |------------------|-----------------------------------------|
//! | extractor        | /2, /4, /8, /16, /32, /64               |
//! | encoder skips    | /4, /8, /16, /32                        |
//! | encoder outputs  | /8 … /64 (each added to extractor map)  |
//! | decoder outputs  | /32, /16, /8, /4, /2, /1                |
//! | semantic head    | last `semantic_fusion` decoder outputs  |
//! | depth head       | last `depth_fusion` decoder outputs     |

mod blocks;
mod branches;
pub mod checkpoint;
mod config;

pub use blocks::{DecoderBlock, EncoderBlock, WConv};
pub use branches::Branch;
pub use config::{ModelConfig, EXTRACTOR_SCALES};

use crate::error::{shape_err, Result};
use crate::nn::{init_bn, init_prelu, prelu, Conv, Mode, ModelState, NormAct, Session};
use crate::tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ENCODER_BLOCKS: usize = 4;
pub const DECODER_BLOCKS: usize = 6;
/// Decoder blocks that receive an encoder skip (the deepest ones).
pub const SKIPPED_DECODERS: usize = 4;

pub const SEMANTIC_PREFIX: &str = "semantic.";
pub const DEPTH_PREFIX: &str = "depth.";

/// One downsampling stage of the residual feature extractor.
#[derive(Clone, Debug)]
struct ExtractorStage {
    prefix: String,
    down: Conv,
    down_norm: NormAct,
    res: Option<(Conv, NormAct, Conv)>,
    width: usize,
}

impl ExtractorStage {
    fn new(prefix: String, cin: usize, width: usize, residual: bool) -> Self {
        let res = residual.then(|| {
            (
                Conv::new(format!("{prefix}.res_a"), width, width, 3),
                NormAct::new(&prefix, "res_bn_a", "res_act_a", width),
                Conv::new(format!("{prefix}.res_b"), width, width, 3),
            )
        });
        Self {
            down: Conv::new(format!("{prefix}.down"), cin, width, 3).stride(2),
            down_norm: NormAct::new(&prefix, "down_bn", "down_act", width),
            res,
            width,
            prefix,
        }
    }

    fn init(&self, state: &mut ModelState, prelu_init: f64, rng: &mut ChaCha8Rng) {
        self.down.init(state, rng);
        self.down_norm.init(state, prelu_init);
        if let Some((a, na, b)) = &self.res {
            a.init(state, rng);
            na.init(state, prelu_init);
            b.init(state, rng);
            init_bn(state, &format!("{}.res_bn_b", self.prefix), self.width);
            init_prelu(state, &format!("{}.res_act_out", self.prefix), self.width, prelu_init);
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.down.forward(s, x)?;
        let y = self.down_norm.forward(s, y)?;
        let Some((a, na, b)) = &self.res else { return Ok(y) };
        let r = a.forward(s, y)?;
        let r = na.forward(s, r)?;
        let r = b.forward(s, r)?;
        let r = s.batch_norm(&format!("{}.res_bn_b", self.prefix), r)?;
        let sum = s.graph.add(y, r)?;
        prelu(s, &format!("{}.res_act_out", self.prefix), sum)
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[B, classes, H, W]` semantic logits.
    pub logits: Var,
    /// `[B, 1, H, W]` non-negative depth.
    pub depth: Var,
    /// Decoder outputs from /32 down to /1.
    pub decoder: Vec<Var>,
    /// Encoder skips from /4 to /32.
    pub skips: Vec<Var>,
}

/// Network topology; parameters live in a separate [`ModelState`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    extractor: Vec<ExtractorStage>,
    input_proj: Option<Conv>,
    encoders: Vec<EncoderBlock>,
    decoders: Vec<DecoderBlock>,
    semantic: Branch,
    depth: Branch,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ew = config.extractor_widths;
        let bw = config.block_width;
        let mut extractor = Vec::with_capacity(EXTRACTOR_SCALES);
        for i in 0..EXTRACTOR_SCALES {
            let cin = if i == 0 { 3 } else { ew[i - 1] };
            extractor.push(ExtractorStage::new(format!("extractor.{i}"), cin, ew[i], i > 0));
        }
        let input_proj = (ew[1] != bw).then(|| Conv::new("encoder.input_proj", ew[1], bw, 1).with_bias());
        let encoders = (0..ENCODER_BLOCKS)
            .map(|i| EncoderBlock::new(&format!("encoder.{i}"), bw, config.alpha_global))
            .collect::<Result<_>>()?;
        let decoders = (0..DECODER_BLOCKS)
            .map(|i| DecoderBlock::new(&format!("decoder.{i}"), bw, config.alpha_global, i < SKIPPED_DECODERS))
            .collect::<Result<_>>()?;
        let semantic = Branch::semantic("semantic", bw, config.semantic_fusion, config.branch_width, config.num_classes);
        let depth = Branch::depth("depth", bw, config.depth_fusion, config.branch_width);
        Ok(Self {
            config,
            extractor,
            input_proj,
            encoders,
            decoders,
            semantic,
            depth,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decoder_block(&self, i: usize) -> &DecoderBlock {
        &self.decoders[i]
    }

    pub fn encoder_block(&self, i: usize) -> &EncoderBlock {
        &self.encoders[i]
    }

    pub fn semantic_branch(&self) -> &Branch {
        &self.semantic
    }

    pub fn depth_branch(&self) -> &Branch {
        &self.depth
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(&self, seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::new();
        let pi = self.config.prelu_init;
        for stage in &self.extractor {
            stage.init(&mut state, pi, &mut rng);
        }
        if let Some(p) = &self.input_proj {
            p.init(&mut state, &mut rng);
        }
        for e in &self.encoders {
            e.init(&mut state, pi, &mut rng);
        }
        for d in &self.decoders {
            d.init(&mut state, pi, self.config.skip_init, &mut rng);
        }
        self.semantic.init(&mut state, pi, 0.0, &mut rng);
        self.depth.init(&mut state, pi, self.config.depth_bias_init, &mut rng);
        state
    }

    /// Open a session configured for this network.
    pub fn session<'a>(&self, state: &'a ModelState, mode: Mode, trainable: bool) -> Session<'a> {
        let mut s = Session::new(state, mode, trainable, self.config.padding);
        s.bn_eps = self.config.bn_eps;
        s
    }

    pub fn forward(&self, s: &mut Session, input: Var) -> Result<Outputs> {
        let [_, c, h, w] = s.graph.value(input).dims4("forward")?;
        if c != 3 || h != self.config.height || w != self.config.width {
            return Err(shape_err(
                "forward",
                format!(
                    "input {:?} does not match configured 3x{}x{}",
                    s.graph.shape(input),
                    self.config.height,
                    self.config.width
                ),
            ));
        }
        let mut maps = Vec::with_capacity(EXTRACTOR_SCALES);
        let mut x = input;
        for stage in &self.extractor {
            x = stage.forward(s, x)?;
            maps.push(x);
        }
        let mut x = match &self.input_proj {
            Some(p) => p.forward(s, maps[1])?,
            None => maps[1],
        };
        let mut skips = Vec::with_capacity(ENCODER_BLOCKS);
        for (i, enc) in self.encoders.iter().enumerate() {
            let (fused, skip) = enc.forward_fused(s, x, maps[i + 2])?;
            skips.push(skip);
            x = fused;
        }
        let mut decoder = Vec::with_capacity(DECODER_BLOCKS);
        for (i, dec) in self.decoders.iter().enumerate() {
            let skip = (i < SKIPPED_DECODERS).then(|| skips[SKIPPED_DECODERS - 1 - i]);
            x = dec.forward(s, x, skip)?;
            decoder.push(x);
        }
        let logits = self.semantic.forward(s, &decoder[DECODER_BLOCKS - self.config.semantic_fusion..])?;
        let depth = self.depth.forward(s, &decoder[DECODER_BLOCKS - self.config.depth_fusion..])?;
        Ok(Outputs {
            logits,
            depth,
            decoder,
            skips,
        })
    }

    /// Evaluation-mode forward without gradient tracking.
    pub fn predict(&self, state: &ModelState, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = self.session(state, Mode::Eval, false);
        let x = s.graph.constant(input.clone());
        let out = self.forward(&mut s, x)?;
        Ok((s.graph.value(out.logits).clone(), s.graph.value(out.depth).clone()))
    }
}

/// Arg-max class per pixel of `[B, C, H, W]` logits, as `B·H·W` ids.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let [b, c, h, w] = logits.dims4("argmax")?;
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(bi * c + k) * hw + p] > d[(bi * c + best) * hw + p] {
                    best = k;
                }
            }
            out[bi * hw + p] = best as u8;
        }
    }
    Ok(out)
}
