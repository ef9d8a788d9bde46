//! Fourier block: a local 3×3 path and a global spectral path exchanging
//! information in both directions.
//!
//! ```text
//! x ─split─┬─ x_l ─┬─ conv_ll ─┐
//!          │       └─ conv_lg ─┼──────────┐
//!          └─ x_g ─┬─ conv_gl ─┘          │
//!                  └─ spectral ───────────┤
//!   y_l = PReLU(BN(conv_ll(x_l) + conv_gl(x_g)))
//!   y_g = PReLU(BN(conv_lg(x_l) + spectral(x_g)))
//!   out = concat(y_l, y_g)
//! ```

use crate::error::{arg_err, Result};
use crate::nn::{Conv, ModelState, NormAct, Session};
use crate::tensor::Var;
use rand::Rng;

/// What the global→global map is. `Conv3x3` exists for receptive-field ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalPath {
    #[default]
    Spectral,
    Conv3x3,
}

/// The frequency-domain pipeline of the global path.
///
/// 1×1 conv, BN, PReLU, rfft2, stacked (re, im) 1×1 conv, BN, PReLU,
/// irfft2, 1×1 conv.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    pub channels: usize,
    pub hidden: usize,
    conv_in: Conv,
    norm_in: NormAct,
    conv_freq: Conv,
    norm_freq: NormAct,
    conv_out: Conv,
}

impl SpectralTransform {
    pub fn new(prefix: &str, channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            conv_in: Conv::new(format!("{prefix}.conv_in"), channels, hidden, 1),
            norm_in: NormAct::new(prefix, "bn_in", "act_in", hidden),
            conv_freq: Conv::new(format!("{prefix}.conv_freq"), 2 * hidden, 2 * hidden, 1),
            norm_freq: NormAct::new(prefix, "bn_freq", "act_freq", 2 * hidden),
            conv_out: Conv::new(format!("{prefix}.conv_out"), hidden, channels, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, prelu_init: f64, rng: &mut R) {
        self.conv_in.init(state, rng);
        self.norm_in.init(state, prelu_init);
        self.conv_freq.init(state, rng);
        self.norm_freq.init(state, prelu_init);
        self.conv_out.init(state, rng);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let [_, _, h, w] = s.graph.value(x).dims4("spectral_transform")?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(arg_err("spectral_transform", format!("extent {h}x{w} must be powers of two")));
        }
        let y = self.conv_in.forward(s, x)?;
        let y = self.norm_in.forward(s, y)?;
        let spec = s.graph.spectrum(y)?;
        let f = self.conv_freq.forward(s, spec)?;
        let f = self.norm_freq.forward(s, f)?;
        let y = s.graph.inverse_spectrum(f, w)?;
        self.conv_out.forward(s, y)
    }

    pub fn conv_names(&self) -> [String; 3] {
        [self.conv_in.weight_name(), self.conv_freq.weight_name(), self.conv_out.weight_name()]
    }
}

/// Fast-Fourier-convolution unit with PReLU activations.
#[derive(Clone, Debug)]
pub struct FourierBlock {
    pub prefix: String,
    pub channels: usize,
    pub global_channels: usize,
    pub global_path: GlobalPath,
    conv_ll: Conv,
    conv_lg: Conv,
    conv_gl: Conv,
    spectral: SpectralTransform,
    conv_gg: Conv,
    norm_l: NormAct,
    norm_g: NormAct,
}

impl FourierBlock {
    /// `alpha` is the fraction of channels routed through the global path.
    pub fn new(prefix: &str, channels: usize, alpha: f64) -> Result<Self> {
        Self::with_global_path(prefix, channels, alpha, GlobalPath::Spectral)
    }

    pub fn with_global_path(prefix: &str, channels: usize, alpha: f64, global_path: GlobalPath) -> Result<Self> {
        if channels < 2 {
            return Err(arg_err("fourier_block", format!("needs at least 2 channels, got {channels}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(arg_err("fourier_block", format!("global fraction must lie in (0, 1), got {alpha}")));
        }
        let cg = ((alpha * channels as f64).round() as usize).clamp(1, channels - 1);
        let cl = channels - cg;
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            global_channels: cg,
            global_path,
            conv_ll: Conv::new(format!("{prefix}.conv_ll"), cl, cl, 3),
            conv_lg: Conv::new(format!("{prefix}.conv_lg"), cl, cg, 3),
            conv_gl: Conv::new(format!("{prefix}.conv_gl"), cg, cl, 3),
            spectral: SpectralTransform::new(&format!("{prefix}.spectral"), cg, cg),
            conv_gg: Conv::new(format!("{prefix}.conv_gg"), cg, cg, 3),
            norm_l: NormAct::new(prefix, "bn_l", "act_l", cl),
            norm_g: NormAct::new(prefix, "bn_g", "act_g", cg),
        })
    }

    pub fn local_channels(&self) -> usize {
        self.channels - self.global_channels
    }

    pub fn spectral(&self) -> &SpectralTransform {
        &self.spectral
    }

    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, prelu_init: f64, rng: &mut R) {
        self.conv_ll.init(state, rng);
        self.conv_lg.init(state, rng);
        self.conv_gl.init(state, rng);
        match self.global_path {
            GlobalPath::Spectral => self.spectral.init(state, prelu_init, rng),
            GlobalPath::Conv3x3 => self.conv_gg.init(state, rng),
        }
        self.norm_l.init(state, prelu_init);
        self.norm_g.init(state, prelu_init);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let c = s.graph.value(x).dims4("fourier_block")?[1];
        if c != self.channels {
            return Err(arg_err("fourier_block", format!("expected {} channels, got {c}", self.channels)));
        }
        let cl = self.local_channels();
        let xl = s.graph.narrow_channels(x, 0, cl)?;
        let xg = s.graph.narrow_channels(x, cl, self.global_channels)?;

        let ll = self.conv_ll.forward(s, xl)?;
        let gl = self.conv_gl.forward(s, xg)?;
        let yl = s.graph.add(ll, gl)?;
        let yl = self.norm_l.forward(s, yl)?;

        let lg = self.conv_lg.forward(s, xl)?;
        let gg = match self.global_path {
            GlobalPath::Spectral => self.spectral.forward(s, xg)?,
            GlobalPath::Conv3x3 => self.conv_gg.forward(s, xg)?,
        };
        let yg = s.graph.add(lg, gg)?;
        let yg = self.norm_g.forward(s, yg)?;

        s.graph.concat_channels(&[yl, yg])
    }
}
