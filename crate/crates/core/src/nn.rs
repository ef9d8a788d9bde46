//! Named parameter storage and the layer primitives the network is built from.

use crate::error::{shape_err, Error, Result};
use crate::tensor::gradcheck::{compare_entries, GradCheck, GradComparison};
use crate::tensor::{BatchStats, Graph, Padding, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};

/// Forward-pass behaviour of batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable parameters plus non-learnable buffers, keyed by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelState {
    pub params: BTreeMap<String, Tensor>,
    /// Batch-norm running statistics (`*.running_mean`, `*.running_var`).
    pub buffers: BTreeMap<String, Tensor>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert_param(&mut self, name: String, value: Tensor) {
        let prev = self.params.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        let get = |suffix: &str| {
            self.buffers
                .get(&format!("{prefix}.{suffix}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{prefix}.{suffix}`")))
        };
        Ok(RunningStats {
            mean: get("running_mean")?,
            var: get("running_var")?,
        })
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats) {
        let c = stats.mean.len();
        self.buffers.insert(
            format!("{prefix}.running_mean"),
            Tensor::new(&[c], stats.mean.clone()).expect("stat shape"),
        );
        self.buffers.insert(
            format!("{prefix}.running_var"),
            Tensor::new(&[c], stats.var.clone()).expect("stat shape"),
        );
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names of parameters under a dotted prefix.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| k.starts_with(prefix))
    }
}

/// One forward pass: a graph plus lazily bound parameters of a [`ModelState`].
pub struct Session<'a> {
    pub graph: Graph,
    state: &'a ModelState,
    bound: HashMap<String, Var>,
    mode: Mode,
    trainable: bool,
    pub padding: Padding,
    pub bn_eps: f64,
    /// Skip batch normalization entirely (identity). Test configurations only.
    pub bypass_norm: bool,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Session<'a> {
    /// `trainable` binds parameters as gradient-receiving leaves.
    pub fn new(state: &'a ModelState, mode: Mode, trainable: bool, padding: Padding) -> Self {
        Self {
            graph: Graph::new(),
            state,
            bound: HashMap::new(),
            mode,
            trainable,
            padding,
            bn_eps: 1e-5,
            bypass_norm: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> &ModelState {
        self.state
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.state.param(name)?.clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter that a backward pass reached.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.graph.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        if self.bypass_norm {
            return Ok(x);
        }
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm_train(x, gamma, beta, self.bn_eps)?;
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let stats = self.state.running_stats(prefix)?;
                self.graph.batch_norm_eval(x, gamma, beta, &stats, self.bn_eps)
            }
        }
    }

    /// Batch statistics observed in training mode, in recording order.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Apply batch statistics to a state's running buffers.
pub fn apply_bn_updates(state: &mut ModelState, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (prefix, stats) in updates {
        let mut rs = state.running_stats(prefix)?;
        rs.update(&stats.mean, &stats.var, momentum);
        state.set_running_stats(prefix, &rs);
    }
    Ok(())
}

/// Set running buffers to the given statistics directly (momentum 1).
pub fn overwrite_bn_stats(state: &mut ModelState, updates: &[(String, BatchStats)]) -> Result<()> {
    apply_bn_updates(state, updates, 1.0)
}

/// Finite-difference check of `∂loss/∂param` for the named parameters.
///
/// `open` builds a session over the given state (`trainable` selects
/// gradient-receiving leaves); `f` records a scalar loss in it.
pub fn check_params<O, F>(
    state: &ModelState,
    names: &[String],
    opts: &GradCheck,
    open: O,
    f: F,
) -> Result<Vec<GradComparison>>
where
    O: for<'a> Fn(&'a ModelState, bool) -> Session<'a>,
    F: Fn(&mut Session) -> Result<Var>,
{
    let (grads, f0) = {
        let mut s = open(state, true);
        let loss = f(&mut s)?;
        s.graph.backward(loss)?;
        (s.gradients(), s.graph.value(loss).item())
    };
    let eval = |st: &ModelState| -> Result<f64> {
        let mut s = open(st, false);
        let loss = f(&mut s)?;
        Ok(s.graph.value(loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = state.clone();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let orig = state.param(name)?;
        let grad = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(orig.shape()));
        let cmp = compare_entries(orig.len(), &grad, f0, opts, &mut rng, |i, delta| {
            work.param_mut(name)?.data_mut()[i] = orig.data()[i] + delta;
            let f = eval(&work);
            work.param_mut(name)?.data_mut()[i] = orig.data()[i];
            f
        })?;
        report.push(cmp);
    }
    Ok(report)
}

/// Convolution layer description.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kh: k,
            kw: k,
            stride: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, state: &mut ModelState, rng: &mut R) {
        let fan_in = (self.cin * self.kh * self.kw) as f64;
        let w = Tensor::randn(&[self.cout, self.cin, self.kh, self.kw], (2.0 / fan_in).sqrt(), rng);
        state.insert_param(self.weight_name(), w);
        if self.bias {
            state.insert_param(self.bias_name(), Tensor::zeros(&[self.cout]));
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = if self.bias { Some(s.param(&self.bias_name())?) } else { None };
        let padding = s.padding;
        s.graph.conv2d(x, w, b, self.stride, padding)
    }
}

/// Batch normalization followed by a channel-wise PReLU.
#[derive(Clone, Debug)]
pub struct NormAct {
    pub bn: String,
    pub act: String,
    pub channels: usize,
}

impl NormAct {
    pub fn new(prefix: &str, bn: &str, act: &str, channels: usize) -> Self {
        Self {
            bn: format!("{prefix}.{bn}"),
            act: format!("{prefix}.{act}"),
            channels,
        }
    }

    pub fn init(&self, state: &mut ModelState, prelu_init: f64) {
        init_bn(state, &self.bn, self.channels);
        init_prelu(state, &self.act, self.channels, prelu_init);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.batch_norm(&self.bn, x)?;
        prelu(s, &self.act, y)
    }
}

pub fn init_bn(state: &mut ModelState, prefix: &str, channels: usize) {
    state.insert_param(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0));
    state.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
    state.set_running_stats(prefix, &RunningStats::new(channels));
}

pub fn init_prelu(state: &mut ModelState, prefix: &str, channels: usize, slope: f64) {
    state.insert_param(format!("{prefix}.slope"), Tensor::full(&[channels], slope));
}

pub fn prelu(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let slope = s.param(&format!("{prefix}.slope"))?;
    s.graph.prelu(x, slope)
}

/// Upscale by repeated ×2 until the height reaches `target_h`.
pub fn upscale_to(s: &mut Session, mut x: Var, target_h: usize) -> Result<Var> {
    loop {
        let h = s.graph.shape(x)[2];
        if h == target_h {
            return Ok(x);
        }
        if h > target_h || target_h % h != 0 {
            return Err(shape_err("upscale_to", format!("cannot reach height {target_h} from {h} by doubling")));
        }
        x = s.graph.upsample2(x)?;
    }
}
