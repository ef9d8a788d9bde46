//! Output heads: learned-weighted fusion of decoder maps at full resolution.

use crate::error::{arg_err, Result};
use crate::nn::{init_prelu, prelu, upscale_to, Conv, ModelState, Session};
use crate::tensor::{Tensor, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Semantic,
    Depth,
}

/// Fuse-and-refine head shared by the semantic and depth outputs.
///
/// Each input map is convolved (3×3) to the branch width, activated, upscaled
/// to full resolution and summed with a learned scalar weight; the sum goes
/// through a 3×3 conv, an activation and a final 1×1 conv.
#[derive(Clone, Debug)]
pub struct Branch {
    head: Head,
    prefix: String,
    lateral: Vec<Conv>,
    refine: Conv,
    out: Conv,
}

impl Branch {
    /// Semantic head: ReLU activations, `classes` logits.
    pub fn semantic(prefix: &str, in_channels: usize, inputs: usize, width: usize, classes: usize) -> Self {
        Self::new(Head::Semantic, prefix, in_channels, inputs, width, classes)
    }

    /// Depth head: PReLU activations, one ReLU-clamped output channel.
    pub fn depth(prefix: &str, in_channels: usize, inputs: usize, width: usize) -> Self {
        Self::new(Head::Depth, prefix, in_channels, inputs, width, 1)
    }

    fn new(head: Head, prefix: &str, cin: usize, inputs: usize, width: usize, cout: usize) -> Self {
        Self {
            head,
            prefix: prefix.to_string(),
            lateral: (0..inputs)
                .map(|i| Conv::new(format!("{prefix}.lateral.{i}"), cin, width, 3).with_bias())
                .collect(),
            refine: Conv::new(format!("{prefix}.refine"), width, width, 3).with_bias(),
            out: Conv::new(format!("{prefix}.out"), width, cout, 1).with_bias(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.lateral.len()
    }

    pub fn fusion_name(&self, i: usize) -> String {
        format!("{}.fusion.{i}", self.prefix)
    }

    pub fn out_bias_name(&self) -> String {
        self.out.bias_name()
    }

    fn act_name(&self, what: &str) -> String {
        format!("{}.{what}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, prelu_init: f64, out_bias: f64, rng: &mut R) {
        let k = self.inputs() as f64;
        for (i, conv) in self.lateral.iter().enumerate() {
            conv.init(state, rng);
            state.insert_param(self.fusion_name(i), Tensor::scalar(1.0 / k));
            if self.head == Head::Depth {
                init_prelu(state, &self.act_name(&format!("act_lateral.{i}")), conv.cout, prelu_init);
            }
        }
        self.refine.init(state, rng);
        if self.head == Head::Depth {
            init_prelu(state, &self.act_name("act_refine"), self.refine.cout, prelu_init);
        }
        self.out.init(state, rng);
        if out_bias != 0.0 {
            let b = state.param_mut(&self.out.bias_name()).expect("bias just inserted");
            b.data_mut().iter_mut().for_each(|v| *v = out_bias);
        }
    }

    fn activate(&self, s: &mut Session, x: Var, what: &str) -> Result<Var> {
        match self.head {
            Head::Semantic => Ok(s.graph.relu(x)),
            Head::Depth => prelu(s, &self.act_name(what), x),
        }
    }

    /// `feats` are ordered from coarsest to finest; the last one is full resolution.
    pub fn forward(&self, s: &mut Session, feats: &[Var]) -> Result<Var> {
        if feats.len() != self.inputs() {
            return Err(arg_err(
                "branch",
                format!("expected {} feature maps, got {}", self.inputs(), feats.len()),
            ));
        }
        let full_h = s.graph.shape(*feats.last().expect("non-empty"))[2];
        let mut acc: Option<Var> = None;
        for (i, (&f, conv)) in feats.iter().zip(&self.lateral).enumerate() {
            let y = conv.forward(s, f)?;
            let y = self.activate(s, y, &format!("act_lateral.{i}"))?;
            let y = upscale_to(s, y, full_h)?;
            let w = s.param(&self.fusion_name(i))?;
            let y = s.graph.scale_by(y, w)?;
            acc = Some(match acc {
                Some(a) => s.graph.add(a, y)?,
                None => y,
            });
        }
        let fused = acc.expect("at least one input");
        let y = self.refine.forward(s, fused)?;
        let y = self.activate(s, y, "act_refine")?;
        let y = self.out.forward(s, y)?;
        Ok(match self.head {
            Head::Semantic => y,
            Head::Depth => s.graph.relu(y),
        })
    }
}
