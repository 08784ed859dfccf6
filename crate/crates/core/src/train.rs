//! SGD training, evaluation and the four-variant ablation runner.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{markdown_table, ConfusionMatrix, Scores};
use crate::nn::{Module, ModelConfig, SegModel, Variant};
use crate::tensor::{NoGradGuard, Parameter};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / total_steps)^power`
    Poly(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeighting {
    None,
    /// `N / (K * N_c)` over the training masks.
    InverseFrequency,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub class_weights: ClassWeighting,
    pub seed: u64,
    /// Metrics are computed on the training set every this many epochs
    /// and after the last one.
    pub eval_interval: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Poly(0.9),
            class_weights: ClassWeighting::InverseFrequency,
            seed: 0,
            eval_interval: 10,
            variant: Variant::CamMsffm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if let LrSchedule::Poly(p) = self.schedule {
            if !(p >= 0.0 && p.is_finite()) {
                return bad(format!("poly power must be non-negative, got {p}"));
            }
        }
        if let ClassWeighting::Fixed(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("class weights must be finite and non-negative, got {w:?}"));
            }
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly(p) => self.lr * (1.0 - step as f64 / total.max(1) as f64).max(0.0).powf(p),
        }
    }
}

/// Momentum buffers, one per parameter in [`Module::parameters`] order.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
}

/// One momentum-SGD update followed by zeroing the gradients:
///
/// ```text
/// v <- momentum * v + g + weight_decay * w
/// w <- w - lr * v
/// ```
///
/// A parameter without a gradient is treated as having a zero gradient.
/// Every gradient is checked before any parameter changes.
pub fn sgd_step(params: &[Parameter], state: &mut SgdState, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.grad()).collect();
    for (p, g) in params.iter().zip(&grads) {
        if let Some(i) = g.as_ref().and_then(|g| g.iter().position(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {} (element {i}) at step {}",
                p.name(),
                state.step
            )));
        }
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&mut state.velocity) {
        let mut w = p.data_mut();
        for i in 0..w.len() {
            let gi = g.as_ref().map_or(0.0, |g| g[i]);
            v[i] = momentum * v[i] + gi + weight_decay * w[i];
            w[i] -= lr * v[i];
        }
        drop(w);
        p.zero_grad();
    }
    state.step += 1;
    Ok(())
}

/// Per-class weights `N / (K * N_c)` over all mask pixels; classes that
/// never occur get weight 1.
pub fn inverse_frequency_weights(samples: &[Sample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &c in s.mask.data() {
            if (c as usize) < num_classes {
                counts[c as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { total as f64 / (num_classes as f64 * n as f64) })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub miou: Option<f64>,
    pub mfsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const HEADER: &'static str = "epoch,loss,miou,mfsc";

    /// CSV with header `epoch,loss,miou,mfsc`; metric cells are empty on
    /// epochs without evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        let cell = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(out, "{},{:?},{},{}", r.epoch, r.loss, cell(r.miou), cell(r.mfsc));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.loss).reduce(f64::min)
    }
}

fn check_channels(model: &SegModel, samples: &[Sample]) -> Result<()> {
    let want = model.config().in_channels;
    match samples.iter().find(|s| s.channels() != want) {
        Some(s) => Err(Error::Dimension(format!(
            "sample {:?} has {} channels but the model expects {want}",
            s.id,
            s.channels()
        ))),
        None => Ok(()),
    }
}

/// Trains `model` in place with batch size 1.
///
/// Each epoch visits the samples in an order shuffled by a generator seeded
/// from `cfg.seed`. The loss covers the padded extent of each sample.
pub fn train(model: &SegModel, samples: &[Sample], cfg: &TrainConfig) -> Result<History> {
    train_with_progress(model, samples, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(model: &SegModel, samples: &[Sample], cfg: &TrainConfig, mut progress: impl FnMut(&HistoryRow)) -> Result<History> {
    train_until(model, samples, cfg, |row| {
        progress(row);
        ControlFlow::Continue(())
    })
}

/// [`train`] where the callback may stop training early by returning
/// `ControlFlow::Break`. The learning-rate schedule still spans
/// `cfg.epochs`, so a stopped run matches the prefix of a full one.
pub fn train_until(
    model: &SegModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&HistoryRow) -> ControlFlow<()>,
) -> Result<History> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_channels(model, samples)?;
    let k = model.config().num_classes;
    for s in samples {
        s.mask.check_classes(k)?;
    }
    let weights = match &cfg.class_weights {
        ClassWeighting::None => None,
        ClassWeighting::InverseFrequency => Some(inverse_frequency_weights(samples, k)),
        ClassWeighting::Fixed(w) if w.len() == k => Some(w.clone()),
        ClassWeighting::Fixed(w) => {
            return Err(Error::Config(format!("{} class weights for {k} classes", w.len())));
        }
    };
    let params = model.parameters();
    let mut state = SgdState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let total = (cfg.epochs * samples.len()) as u64;
    let mut history = History::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let s = &samples[i];
            let loss = model.forward(&s.image)?.cross_entropy_loss(&s.mask, weights.as_deref())?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {value} at epoch {epoch}, step {} (sample {:?})",
                    state.step, s.id
                )));
            }
            loss.backward()?;
            let lr = cfg.lr_at(state.step, total);
            sgd_step(&params, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += value;
        }
        let mut row = HistoryRow {
            epoch,
            loss: loss_sum / samples.len() as f64,
            miou: None,
            mfsc: None,
        };
        if epoch % cfg.eval_interval == 0 || epoch == cfg.epochs {
            let scores = evaluate(model, samples)?;
            row.miou = Some(scores.miou);
            row.mfsc = Some(scores.mfsc);
        }
        let flow = progress(&row);
        history.rows.push(row);
        if flow.is_break() {
            break;
        }
    }
    Ok(history)
}

/// Confusion matrix of `model` over `samples`, restricted to each sample's
/// unpadded region. Runs without recording gradients.
pub fn confusion(model: &SegModel, samples: &[Sample]) -> Result<ConfusionMatrix> {
    check_channels(model, samples)?;
    let _guard = NoGradGuard::new();
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for s in samples {
        let (h, w) = s.original;
        let pred = model.predict(&s.image)?.crop(h, w)?;
        cm.accumulate(&pred, &s.original_mask()?)?;
    }
    Ok(cm)
}

pub fn evaluate(model: &SegModel, samples: &[Sample]) -> Result<Scores> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    Scores::from_confusion(confusion(model, samples)?)
}

/// Result of training every variant under one configuration.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub rows: Vec<(Variant, Scores, History)>,
}

impl Ablation {
    /// Mean-over-classes table followed by a pothole-class-only table.
    pub fn markdown(&self) -> String {
        let main: Vec<(String, f64, f64)> = self
            .rows
            .iter()
            .map(|(v, s, _)| (v.label().to_string(), s.miou, s.mfsc))
            .collect();
        let pothole: Vec<(String, f64, f64)> = self
            .rows
            .iter()
            .map(|(v, s, _)| (v.label().to_string(), s.pothole_iou.unwrap_or(0.0), s.pothole_fsc.unwrap_or(0.0)))
            .collect();
        format!(
            "{}\nPothole class only:\n\n{}",
            markdown_table(&main),
            markdown_table(&pothole)
        )
    }
}

/// Trains all four variants from the same seed and configuration and
/// scores each on `eval_set`.
pub fn run_ablation(model_cfg: &ModelConfig, cfg: &TrainConfig, train_set: &[Sample], eval_set: &[Sample]) -> Result<Ablation> {
    run_ablation_with_progress(model_cfg, cfg, train_set, eval_set, |_, _| {})
}

pub fn run_ablation_with_progress(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    mut progress: impl FnMut(Variant, &HistoryRow),
) -> Result<Ablation> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let run = TrainConfig { variant, ..cfg.clone() };
        let model = SegModel::new(model_cfg, variant, run.seed)?;
        let history = train_with_progress(&model, train_set, &run, |r| progress(variant, r))?;
        rows.push((variant, evaluate(&model, eval_set)?, history));
    }
    Ok(Ablation { rows })
}
