//! Optimisation: Adam, the learning-rate schedule, run configuration,
//! training modes, evaluation and best-checkpoint selection.

use crate::data::{classes, make_batch, Augment, Batch, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    depth_loss, margin_loss, object_loss, seg_loss, total_loss, LossComponents, LossValues, LossWeights,
};
use crate::metrics::{ConfusionMatrix, DepthAccumulator, LogBase, MetricsReport};
use crate::network::{argmax_labels, checkpoint, ModelConfig, Network, EXTRACTOR_SCALES};
use crate::nn::{apply_bn_updates, overwrite_bn_stats, Mode, ModelState};
use crate::tensor::{BatchStats, Padding, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Which loss terms drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Joint,
    /// Depth loss alone; the semantic branch is frozen.
    Depth,
    /// Segmentation loss alone; the depth branch is frozen.
    Semantic,
}

impl TrainMode {
    /// Parameter prefix that this mode never updates.
    pub fn frozen_prefix(self) -> Option<&'static str> {
        match self {
            TrainMode::Joint => None,
            TrainMode::Depth => Some("semantic."),
            TrainMode::Semantic => Some("depth."),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "depth" | "depth_only" => Ok(TrainMode::Depth),
            "semantic" | "semantic_only" => Ok(TrainMode::Semantic),
            _ => Err(Error::Config {
                field: "mode".into(),
                detail: format!("expected joint, depth or semantic, got {s:?}"),
            }),
        }
    }
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.0)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update every parameter that has a gradient, skipping names under `frozen`.
    pub fn update(
        &mut self,
        state: &mut ModelState,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        frozen: Option<&str>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            if frozen.is_some_and(|p| name.starts_with(p)) {
                continue;
            }
            let p = state.param_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// `lr · decay^epoch · step_factor^⌊epoch / step_every⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub step_every: usize,
    pub step_factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let steps = if self.step_every == 0 { 0 } else { epoch / self.step_every };
        self.initial * self.decay.powi(epoch as i32) * self.step_factor.powi(steps as i32)
    }
}

fn default_train_split() -> String {
    "train".into()
}

fn default_val_split() -> String {
    "val".into()
}

/// Flat run configuration; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_val_split")]
    pub val_split: String,
    pub out_dir: PathBuf,

    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub extractor_widths: [usize; EXTRACTOR_SCALES],
    pub block_width: usize,
    pub branch_width: usize,
    pub alpha_global: f64,
    pub prelu_init: f64,
    pub skip_init: f64,
    pub semantic_fusion: usize,
    pub depth_fusion: usize,
    pub padding: Padding,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub depth_bias_init: f64,

    pub mode: TrainMode,
    pub alpha_seg: f64,
    pub alpha_dep: f64,
    pub alpha_mar: f64,
    pub alpha_obj: f64,
    pub use_margin: bool,
    pub use_object: bool,
    pub margin_per_image: bool,
    pub class_balance: bool,

    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step_every: usize,
    pub lr_step_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment_roll: bool,
    /// Re-estimate batch-norm statistics over the training set before each validation.
    pub recalibrate_bn: bool,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let a = LossWeights::default().alpha;
        Self {
            data_dir: PathBuf::from("data"),
            train_split: default_train_split(),
            val_split: default_val_split(),
            out_dir: PathBuf::from("runs"),
            height: m.height,
            width: m.width,
            num_classes: m.num_classes,
            extractor_widths: m.extractor_widths,
            block_width: m.block_width,
            branch_width: m.branch_width,
            alpha_global: m.alpha_global,
            prelu_init: m.prelu_init,
            skip_init: m.skip_init,
            semantic_fusion: m.semantic_fusion,
            depth_fusion: m.depth_fusion,
            padding: m.padding,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
            depth_bias_init: m.depth_bias_init,
            mode: TrainMode::Joint,
            alpha_seg: a[0],
            alpha_dep: a[1],
            alpha_mar: a[2],
            alpha_obj: a[3],
            use_margin: true,
            use_object: true,
            margin_per_image: false,
            class_balance: true,
            lr: 1e-5,
            lr_decay: 0.98,
            lr_step_every: 20,
            lr_step_factor: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            augment_roll: true,
            recalibrate_bn: true,
            val_every: 1,
        }
    }
}

fn field_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        detail: detail.into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| field_err("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            extractor_widths: self.extractor_widths,
            block_width: self.block_width,
            branch_width: self.branch_width,
            alpha_global: self.alpha_global,
            prelu_init: self.prelu_init,
            skip_init: self.skip_init,
            semantic_fusion: self.semantic_fusion,
            depth_fusion: self.depth_fusion,
            padding: self.padding,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            depth_bias_init: self.depth_bias_init,
        }
    }

    /// Effective weights: task-specific modes keep only their own term at weight 1;
    /// joint mode drops disabled terms.
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let alpha = match self.mode {
            TrainMode::Depth => [0.0, 1.0, 0.0, 0.0],
            TrainMode::Semantic => [1.0, 0.0, 0.0, 0.0],
            TrainMode::Joint => [
                self.alpha_seg,
                self.alpha_dep,
                if self.use_margin { self.alpha_mar } else { 0.0 },
                if self.use_object { self.alpha_obj } else { 0.0 },
            ],
        };
        LossWeights::new(alpha).map_err(|e| field_err("alpha", e.to_string()))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            decay: self.lr_decay,
            step_every: self.lr_step_every,
            step_factor: self.lr_step_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        for (name, v) in [
            ("alpha_seg", self.alpha_seg),
            ("alpha_dep", self.alpha_dep),
            ("alpha_mar", self.alpha_mar),
            ("alpha_obj", self.alpha_obj),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(field_err(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(field_err("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(field_err("lr_decay", format!("must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.lr_step_factor > 0.0 && self.lr_step_factor <= 1.0) {
            return Err(field_err("lr_step_factor", format!("must lie in (0, 1], got {}", self.lr_step_factor)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(field_err("adam_beta1", "betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(field_err("adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(field_err("weight_decay", "must be non-negative"));
        }
        if self.val_every == 0 {
            return Err(field_err("val_every", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be positive"));
        }
        if self.mode == TrainMode::Joint && self.alpha_seg + self.alpha_dep == 0.0 {
            return Err(field_err("alpha_seg", "joint mode needs a segmentation or depth weight"));
        }
        Ok(())
    }
}

/// Loss values of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub validation: Option<MetricsReport>,
    pub score: Option<f64>,
}

/// Validation ranking: joint uses mIoU − MRE, depth uses −MRE, semantic uses mIoU.
pub fn selection_score(mode: TrainMode, report: &MetricsReport) -> f64 {
    match mode {
        TrainMode::Joint => report.miou - report.mre,
        TrainMode::Depth => -report.mre,
        TrainMode::Semantic => report.miou,
    }
}

/// One model being trained, with its optimizer and loss settings.
pub struct Trainer {
    pub net: Network,
    pub state: ModelState,
    pub adam: Adam,
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub class_weights: Vec<f64>,
    pub margin_per_image: bool,
    pub bn_momentum: f64,
    pub step: usize,
}

impl Trainer {
    pub fn new(net: Network, state: ModelState, cfg: &RunConfig, class_weights: Vec<f64>) -> Result<Self> {
        if class_weights.len() != net.config().num_classes {
            return Err(field_err("num_classes", "class weight count does not match the model"));
        }
        Ok(Self {
            bn_momentum: net.config().bn_momentum,
            net,
            state,
            adam: Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay),
            mode: cfg.mode,
            weights: cfg.loss_weights()?,
            class_weights,
            margin_per_image: cfg.margin_per_image,
            step: 0,
        })
    }

    /// Forward, backward and one Adam update on a batch.
    pub fn step(&mut self, batch: &Batch, epoch: usize, lr: f64) -> Result<StepLog> {
        let (values, grads, bn) = {
            let mut s = self.net.session(&self.state, Mode::Train, true);
            let x = s.graph.constant(batch.input.clone());
            let out = self.net.forward(&mut s, x)?;
            let [w_seg, w_dep, w_mar, w_obj] = self.weights.alpha;
            let mut comps = LossComponents::default();
            let g = &mut s.graph;
            if w_seg > 0.0 {
                comps.seg = Some(seg_loss(g, out.logits, &batch.labels, &self.class_weights)?);
            }
            if w_dep > 0.0 {
                let d = depth_loss(g, out.depth, &batch.depth, &batch.mask, self.net.config().padding)?;
                comps.dep = Some(d.loss);
                comps.c1 = Some(d.c1);
                comps.c2 = Some(d.c2);
            }
            if w_mar > 0.0 {
                comps.mar = Some(margin_loss(g, out.depth, &batch.depth, &batch.mask, self.margin_per_image)?);
            }
            if w_obj > 0.0 {
                let c = self.net.config().num_classes;
                comps.obj = Some(object_loss(g, out.depth, &batch.depth, &batch.labels, &batch.mask, c)?);
            }
            let bundle = total_loss(g, comps, &self.weights)?;
            let values = bundle.values(g);
            if !values.l_total.is_finite() {
                return Err(Error::InvalidArgument {
                    op: "train",
                    detail: format!("non-finite loss at step {}", self.step),
                });
            }
            g.backward(bundle.total)?;
            (values, s.gradients(), s.take_bn_updates())
        };
        self.adam.update(&mut self.state, &grads, lr, self.mode.frozen_prefix())?;
        apply_bn_updates(&mut self.state, &bn, self.bn_momentum)?;
        self.step += 1;
        Ok(StepLog {
            epoch,
            step: self.step,
            lr,
            losses: values,
        })
    }

    /// One pass over `samples` in a seed-determined order.
    pub fn epoch(
        &mut self,
        samples: &[Sample],
        batch_size: usize,
        augment: Augment,
        epoch: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StepLog>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        let mut logs = Vec::new();
        for chunk in order.chunks(batch_size) {
            let group: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let batch = make_batch(&group, augment, rng)?;
            logs.push(self.step(&batch, epoch, lr)?);
        }
        Ok(logs)
    }
}

/// Replace running batch-norm statistics with averages of training-mode batch
/// statistics over `samples` (parameters are untouched).
pub fn recalibrate_bn(net: &Network, state: &mut ModelState, samples: &[Sample], batch_size: usize) -> Result<()> {
    let mut sums: BTreeMap<String, (BatchStats, usize)> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, Augment::None, &mut rng)?;
        let mut s = net.session(state, Mode::Train, false);
        let x = s.graph.constant(batch.input);
        net.forward(&mut s, x)?;
        for (name, st) in s.take_bn_updates() {
            let e = sums.entry(name).or_insert_with(|| {
                (
                    BatchStats {
                        mean: vec![0.0; st.mean.len()],
                        var: vec![0.0; st.var.len()],
                    },
                    0,
                )
            });
            e.0.mean.iter_mut().zip(&st.mean).for_each(|(a, b)| *a += b);
            e.0.var.iter_mut().zip(&st.var).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    let averaged: Vec<(String, BatchStats)> = sums
        .into_iter()
        .map(|(name, (mut st, n))| {
            st.mean.iter_mut().for_each(|v| *v /= n as f64);
            st.var.iter_mut().for_each(|v| *v /= n as f64);
            (name, st)
        })
        .collect();
    overwrite_bn_stats(state, &averaged)
}

/// Predicted depth and labels for one panorama.
pub struct Prediction {
    pub depth: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn predict_sample(net: &Network, state: &ModelState, sample: &Sample) -> Result<Prediction> {
    let cfg = net.config();
    if (sample.height, sample.width) != (cfg.height, cfg.width) {
        return Err(Error::Shape {
            op: "predict",
            detail: format!(
                "{}: {}x{} does not match model extent {}x{}",
                sample.id, sample.height, sample.width, cfg.height, cfg.width
            ),
        });
    }
    let (logits, depth) = net.predict(state, &sample.input_tensor())?;
    Ok(Prediction {
        depth: depth.data().to_vec(),
        labels: argmax_labels(&logits)?,
    })
}

/// Eval-mode metrics over a dataset.
pub fn evaluate<D: Dataset + ?Sized>(net: &Network, state: &ModelState, data: &D) -> Result<MetricsReport> {
    let c = net.config().num_classes;
    let mut depth = DepthAccumulator::new(LogBase::Natural);
    let mut seg = ConfusionMatrix::new(c, Some(classes::UNKNOWN));
    for i in 0..data.len() {
        let sample = data.get(i)?;
        let p = predict_sample(net, state, &sample)?;
        depth.update(&p.depth, &sample.depth, Some(&sample.valid_mask()))?;
        seg.update(&p.labels, &sample.labels)?;
    }
    Ok(MetricsReport::new(&depth.finish()?, &seg.finish()))
}

/// Metrics of ground truth scored against itself; exercises the metric path.
pub fn evaluate_oracle<D: Dataset + ?Sized>(data: &D, num_classes: usize) -> Result<MetricsReport> {
    let mut depth = DepthAccumulator::new(LogBase::Natural);
    let mut seg = ConfusionMatrix::new(num_classes, Some(classes::UNKNOWN));
    for i in 0..data.len() {
        let s = data.get(i)?;
        depth.update(&s.depth, &s.depth, Some(&s.valid_mask()))?;
        seg.update(&s.labels, &s.labels)?;
    }
    Ok(MetricsReport::new(&depth.finish()?, &seg.finish()))
}

/// Everything a finished run produced.
pub struct TrainOutcome {
    pub state: ModelState,
    pub best_state: ModelState,
    pub best_epoch: Option<usize>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Train on in-memory splits. `val` may be empty, in which case the final
/// state counts as best.
pub fn train_samples(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty {
            op: "train",
            detail: "training split is empty".into(),
        });
    }
    for s in train.iter().chain(val) {
        s.validate(cfg.num_classes)?;
        if (s.height, s.width) != (cfg.height, cfg.width) {
            return Err(field_err(
                "height",
                format!("sample {} is {}x{}, config is {}x{}", s.id, s.height, s.width, cfg.height, cfg.width),
            ));
        }
    }
    let net = Network::new(cfg.model_config())?;
    let state = net.init(cfg.seed);
    let class_weights = if cfg.class_balance {
        crate::data::class_weights(train.iter().map(|s| s.labels.as_slice()), cfg.num_classes)?
    } else {
        vec![1.0; cfg.num_classes]
    };
    let mut trainer = Trainer::new(net, state, cfg, class_weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let augment = if cfg.augment_roll { Augment::CircularRoll } else { Augment::None };
    let schedule = cfg.schedule();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelState)> = None;
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch);
        let logs = trainer.epoch(train, cfg.batch_size, augment, epoch, lr, &mut rng)?;
        for l in &logs {
            on_step(l);
        }
        let mean_total = logs.iter().map(|l| l.losses.l_total).sum::<f64>() / logs.len() as f64;
        steps.extend(logs);
        let checkpoint_epoch = (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs;
        if cfg.recalibrate_bn && checkpoint_epoch {
            recalibrate_bn(&trainer.net, &mut trainer.state, train, cfg.batch_size)?;
        }
        let (validation, score) = if val.is_empty() || !checkpoint_epoch {
            (None, None)
        } else {
            let r = evaluate(&trainer.net, &trainer.state, val)?;
            let score = selection_score(cfg.mode, &r);
            (Some(r), Some(score))
        };
        log::info!("epoch {epoch} lr {lr:.3e} mean loss {mean_total:.5} score {score:?}");
        if let Some(sc) = score {
            if best.as_ref().is_none_or(|(b, _, _)| sc > *b) {
                best = Some((sc, epoch, trainer.state.clone()));
            }
        }
        epochs.push(EpochLog {
            epoch,
            lr,
            mean_total,
            validation,
            score,
        });
    }
    let (best_epoch, best_state) = match best {
        Some((_, e, s)) => (Some(e), s),
        None => (None, trainer.state.clone()),
    };
    Ok(TrainOutcome {
        state: trainer.state,
        best_state,
        best_epoch,
        steps,
        epochs,
    })
}

/// Full run from disk: loads splits, trains, and writes `best.ckpt`,
/// `last.ckpt`, `steps.jsonl`, `epochs.jsonl` and `config.toml` to `out_dir`.
pub fn run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let train = crate::data::DiskDataset::open(&cfg.data_dir, &cfg.train_split)?.load_all()?;
    let val = match crate::data::DiskDataset::open(&cfg.data_dir, &cfg.val_split) {
        Ok(d) => d.load_all()?,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("steps.jsonl"))?);
    let mut write_err = None;
    let outcome = train_samples(cfg, &train, &val, |s| {
        if let Err(e) = serde_json::to_writer(&mut log, s).map_err(Error::from).and_then(|_| Ok(writeln!(log)?)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.flush()?;
    let mut epochs = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("epochs.jsonl"))?);
    for e in &outcome.epochs {
        serde_json::to_writer(&mut epochs, e)?;
        writeln!(epochs)?;
    }
    epochs.flush()?;
    let mc = cfg.model_config();
    checkpoint::save(&cfg.out_dir.join("best.ckpt"), &mc, &outcome.best_state)?;
    checkpoint::save(&cfg.out_dir.join("last.ckpt"), &mc, &outcome.state)?;
    Ok(outcome)
}
