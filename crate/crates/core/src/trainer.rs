//! Alternating three-player training of the mask network, the classifier `h`
//! and the adversary `d`.
//!
//! Each batch runs three sub-steps in order, sharing one stochastic mask draw
//! and one counterfactual drop pattern:
//!
//! * **A** — the adversary takes an Adam step *descending* `L_adv`, i.e. it
//!   learns to predict the label from `z_nc`. The mask, in turn, ascends
//!   `L_adv` through the `-alpha * L_adv` term of the total loss.
//! * **B** — the classifier takes a step on `cls + beta * inv`.
//! * **C** — the mask network takes a step on the total loss, with gradients
//!   reaching it through both classifier branches (including the
//!   counterfactual one), the adversary input, the L1 term and HSIC.

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::dataset::LabeledBatch;
use crate::error::{Error, Result};
use crate::independence::MIN_HSIC_BATCH;
use crate::mask::{compute_mask, compute_mask_with_noise, split_features, MaskMode, MaskNet, SplitFeatures};
use crate::matrix::DenseMatrix;
use crate::metrics::{accuracy, DEFAULT_THRESHOLD};
use crate::mlp::{MlpParams, OutputActivation};
use crate::noise::NoiseSource;
use crate::objective::{
    adversary_objective, classifier_objective, objective_pass, sample_drop_mask, total_loss, AdversaryInput,
    GradRequest, LossBreakdown, LossParts, LossWeights, MaskInput, ObjectiveConfig,
};

/// Initial output bias of the mask network: `sigmoid(1) ≈ 0.73`, a permissive
/// starting mask.
pub const MASK_LOGIT_BIAS: f64 = 1.0;

const VALIDATION_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Learned mask with L1 and HSIC; no adversary, no counterfactual term.
    FactorizationOnly,
    /// Mask pinned to all-ones; adversary (on a copy of `E`) and the
    /// counterfactual term stay on.
    MaskingOnly,
    /// Mask pinned to all-ones and every regulariser off.
    BothOff,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BothOff,
        Variant::FactorizationOnly,
        Variant::MaskingOnly,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FactorizationOnly => "factorization_only",
            Variant::MaskingOnly => "masking_only",
            Variant::BothOff => "both_off",
        }
    }

    pub fn learns_mask(self) -> bool {
        matches!(self, Variant::Full | Variant::FactorizationOnly)
    }

    pub fn adversary_input(self) -> AdversaryInput {
        if self.learns_mask() {
            AdversaryInput::Complement
        } else {
            AdversaryInput::Embedding
        }
    }

    /// The weights actually used by this variant.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Variant::Full => *base,
            Variant::FactorizationOnly => LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..*base
            },
            Variant::MaskingOnly => LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
                ..*base
            },
            Variant::BothOff => LossWeights::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Truncated to the dataset size.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-total improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_min: f64,
    pub loss_weights: LossWeights,
    /// Used when no explicit validation set is supplied.
    pub validation_fraction: f64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 256,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            tau_start: 5.0,
            tau_min: 0.5,
            loss_weights: LossWeights::default(),
            validation_fraction: 0.1,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.validate_step()
    }

    /// Checks everything except the learning-rate sign, so single steps can
    /// be taken with `learning_rate = 0`.
    fn validate_step(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < MIN_HSIC_BATCH {
            return Err(Error::InsufficientBatch {
                what: "batch_size",
                required: MIN_HSIC_BATCH,
                actual: self.batch_size,
            });
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if !(self.tau_min > 0.0 && self.tau_start >= self.tau_min) || !self.tau_start.is_finite() {
            return Err(Error::Config(format!(
                "need 0 < tau_min <= tau_start, got tau_min {} and tau_start {}",
                self.tau_min, self.tau_start
            )));
        }
        self.loss_weights.validate()
    }

    /// Temperature for `epoch`: geometric decay from `tau_start` that reaches
    /// `tau_min` at the last epoch.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.max_epochs <= 1 {
            return self.tau_start;
        }
        let frac = epoch as f64 / (self.max_epochs - 1) as f64;
        (self.tau_start * (self.tau_min / self.tau_start).powf(frac)).max(self.tau_min)
    }

    pub fn weights(&self) -> LossWeights {
        self.variant.weights(&self.loss_weights)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            adversary_input: self.variant.adversary_input(),
            ..ObjectiveConfig::new(self.weights())
        }
    }
}

/// Hidden width of the adversary and the probe.
pub fn adversary_width(d: usize) -> usize {
    (d / 4).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub mask_net: MaskNet,
    /// `[d, 1]`, sigmoid output.
    pub classifier_h: MlpParams,
    /// `[d, max(d/4, 1), 1]`, ReLU hidden layer, sigmoid output.
    pub adversary_d: MlpParams,
    /// When false the mask is pinned to all-ones.
    pub mask_enabled: bool,
}

impl ModelBundle {
    /// Xavier-uniform mask network and adversary; the classifier starts at
    /// zero so that no causal coordinate begins with a wrong-signed weight
    /// the mask could learn to switch off.
    pub fn init(d: usize, cfg: &TrainConfig, noise: &mut NoiseSource) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mask_net = MaskNet::new(d, cfg.tau_at(0), MASK_LOGIT_BIAS, noise)?;
        let classifier_h = MlpParams::zeros(&[d, 1], OutputActivation::Sigmoid)?;
        let adversary_d = MlpParams::xavier(&[d, adversary_width(d), 1], OutputActivation::Sigmoid, noise)?;
        Ok(Self {
            mask_net,
            classifier_h,
            adversary_d,
            mask_enabled: cfg.variant.learns_mask(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mask_net.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.mask_net.validate()?;
        let d = self.dim();
        for (name, net) in [("classifier_h", &self.classifier_h), ("adversary_d", &self.adversary_d)] {
            net.validate()?;
            if net.input_dim() != d || net.output_dim() != 1 {
                return Err(Error::dim(
                    format!("{name} shape"),
                    format!("{d} -> 1"),
                    format!("{} -> {}", net.input_dim(), net.output_dim()),
                ));
            }
            if net.output_activation != OutputActivation::Sigmoid {
                return Err(Error::Config(format!("{name} must have a sigmoid output")));
            }
        }
        Ok(())
    }

    /// Deterministic (`g = 0`) mask at the stored temperature.
    pub fn deterministic_mask(&self, embeddings: &DenseMatrix) -> Result<DenseMatrix> {
        if embeddings.cols() != self.dim() {
            return Err(Error::dim("embedding width", self.dim(), embeddings.cols()));
        }
        if !self.mask_enabled {
            return Ok(DenseMatrix::filled(embeddings.rows(), embeddings.cols(), 1.0));
        }
        Ok(compute_mask_with_noise(embeddings, &self.mask_net, None)?.0)
    }

    pub fn deterministic_split(&self, embeddings: &DenseMatrix) -> Result<SplitFeatures> {
        split_features(embeddings, &self.deterministic_mask(embeddings)?)
    }

    /// Per-dimension mean of the deterministic mask.
    pub fn mask_means(&self, embeddings: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self.deterministic_mask(embeddings)?.column_means())
    }
}

/// `h(z_c)` under the deterministic mask.
pub fn predict(bundle: &ModelBundle, embeddings: &DenseMatrix) -> Result<Vec<f64>> {
    let split = bundle.deterministic_split(embeddings)?;
    Ok(bundle.classifier_h.predict(&split.z_c)?.into_data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub mask: AdamState,
    pub classifier: AdamState,
    pub adversary: AdamState,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle) -> Self {
        let cfg = AdamConfig::default();
        Self {
            mask: AdamState::new(&bundle.mask_net.net, cfg),
            classifier: AdamState::new(&bundle.classifier_h, cfg),
            adversary: AdamState::new(&bundle.adversary_d, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubStep {
    Adversary,
    Classifier,
    Mask,
}

impl SubStep {
    pub fn label(self) -> &'static str {
        match self {
            SubStep::Adversary => "A (adversary)",
            SubStep::Classifier => "B (classifier)",
            SubStep::Mask => "C (mask)",
        }
    }
}

fn tag_step(err: Error, step: SubStep) -> Error {
    match err {
        Error::PoisonedLoss { term, .. } => Error::PoisonedLoss {
            term,
            step: Some(step.label()),
        },
        Error::PoisonedGradient(p) => Error::PoisonedGradient(format!("{p} in step {}", step.label())),
        other => other,
    }
}

fn finite_or(term: &str, v: f64, step: SubStep) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::PoisonedLoss {
            term: term.into(),
            step: Some(step.label()),
        })
    }
}

/// Validation-set diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub classifier_accuracy: f64,
    /// Co-trained adversary on the deterministic `z_nc`.
    pub adversary_accuracy: f64,
    pub mask_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub temperature: f64,
    /// Mean of the step-C breakdowns over the epoch.
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    pub classifier_accuracy: f64,
    pub adversary_accuracy: f64,
    pub mask_sparsity: f64,
    pub hsic: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }
}

/// Mean of per-batch loss parts, accumulated over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct PartsAccumulator {
    pub(crate) sum: LossParts,
    pub(crate) weight: f64,
}

impl PartsAccumulator {
    fn add(&mut self, p: &LossParts, w: f64) {
        self.sum.cls += w * p.cls;
        self.sum.adv += w * p.adv;
        self.sum.mask_l1 += w * p.mask_l1;
        self.sum.mask_hsic += w * p.mask_hsic;
        self.sum.inv += w * p.inv;
        self.weight += w;
    }

    fn mean(&self) -> LossParts {
        let w = if self.weight > 0.0 { self.weight } else { 1.0 };
        LossParts {
            cls: self.sum.cls / w,
            adv: self.sum.adv / w,
            mask_l1: self.sum.mask_l1 / w,
            mask_hsic: self.sum.mask_hsic / w,
            inv: self.sum.inv / w,
        }
    }
}

/// Splits `0..n` into contiguous chunks of at most `batch_size`, folding a
/// tail shorter than the HSIC minimum into the previous chunk.
pub fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let bs = batch_size.min(n).max(1);
    let mut out = Vec::with_capacity(n.div_ceil(bs));
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 {
        let (s, e) = out[out.len() - 1];
        if e - s < MIN_HSIC_BATCH {
            out.pop();
            out.last_mut().expect("at least one chunk").1 = e;
        }
    }
    out
}

/// Full training state; everything needed for a bit-exact resume.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub optimizers: Optimizers,
    pub(crate) noise: NoiseSource,
    /// Completed epochs.
    pub(crate) epoch: usize,
    /// Batches done in the current epoch.
    pub(crate) cursor: usize,
    pub(crate) steps: u64,
    pub(crate) accumulator: PartsAccumulator,
    pub(crate) history: TrainHistory,
    pub(crate) best: Option<(f64, ModelBundle)>,
    pub(crate) bad_epochs: usize,
}

impl Trainer {
    pub fn new(d: usize, config: TrainConfig) -> Result<Self> {
        config.validate_step()?;
        let mut noise = NoiseSource::new(config.seed);
        let bundle = ModelBundle::init(d, &config, &mut noise)?;
        let optimizers = Optimizers::new(&bundle);
        Ok(Self {
            config,
            bundle,
            optimizers,
            noise,
            epoch: 0,
            cursor: 0,
            steps: 0,
            accumulator: PartsAccumulator::default(),
            history: TrainHistory::default(),
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.history.stopped_early
    }

    /// One A → B → C step on a batch; returns the step-C breakdown.
    pub fn step(&mut self, embeddings: &DenseMatrix, labels: &[f64]) -> Result<LossBreakdown> {
        self.step_observed(embeddings, labels, |_, _| {})
    }

    /// Like [`Trainer::step`], calling `observer` after each sub-step.
    pub fn step_observed(
        &mut self,
        embeddings: &DenseMatrix,
        labels: &[f64],
        mut observer: impl FnMut(SubStep, &ModelBundle),
    ) -> Result<LossBreakdown> {
        let n = embeddings.rows();
        if n < MIN_HSIC_BATCH {
            return Err(Error::InsufficientBatch {
                what: "training batch",
                required: MIN_HSIC_BATCH,
                actual: n,
            });
        }
        if labels.len() != n {
            return Err(Error::dim("batch labels", n, labels.len()));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        let cfg = self.config.objective();
        let w = cfg.weights;
        let lr = self.config.learning_rate;
        let learns_mask = self.bundle.mask_enabled;

        let tape = if learns_mask {
            Some(compute_mask(embeddings, &self.bundle.mask_net, MaskMode::Stochastic, &mut self.noise)?.1)
        } else {
            None
        };
        let drop = sample_drop_mask(n, embeddings.cols(), w.drop_p, &mut self.noise);
        let split = match &tape {
            Some(t) => split_features(embeddings, t.mask())?,
            None => split_features(embeddings, &DenseMatrix::filled(n, embeddings.cols(), 1.0))?,
        };

        // A: adversary.
        if w.alpha > 0.0 {
            let input = match cfg.adversary_input {
                AdversaryInput::Complement => &split.z_nc,
                AdversaryInput::Embedding => embeddings,
            };
            let (loss, grads) = adversary_objective(&self.bundle.adversary_d, input, labels)?;
            finite_or("adv", loss.total(), SubStep::Adversary)?;
            adam_step(&mut self.bundle.adversary_d, &grads, &mut self.optimizers.adversary, lr)
                .map_err(|e| tag_step(e, SubStep::Adversary))?;
        }
        observer(SubStep::Adversary, &self.bundle);

        // B: classifier.
        let (cls, inv, grads) = classifier_objective(&self.bundle.classifier_h, &split.z_c, &drop, labels, w.beta)?;
        finite_or("cls", cls, SubStep::Classifier)?;
        finite_or("inv", inv, SubStep::Classifier)?;
        adam_step(&mut self.bundle.classifier_h, &grads, &mut self.optimizers.classifier, lr)
            .map_err(|e| tag_step(e, SubStep::Classifier))?;
        observer(SubStep::Classifier, &self.bundle);

        // C: mask, against the updated h and d.
        let mask_input = match &tape {
            Some(t) => MaskInput::Learned {
                net: &self.bundle.mask_net,
                tape: t,
            },
            None => MaskInput::AllOnes,
        };
        let want = GradRequest {
            mask: learns_mask,
            ..GradRequest::NONE
        };
        let pass = objective_pass(
            embeddings,
            labels,
            mask_input,
            &self.bundle.classifier_h,
            &self.bundle.adversary_d,
            &drop,
            &cfg,
            want,
        )
        .map_err(|e| tag_step(e, SubStep::Mask))?;
        if let Some(g) = &pass.mask_grads {
            adam_step(&mut self.bundle.mask_net.net, g, &mut self.optimizers.mask, lr)
                .map_err(|e| tag_step(e, SubStep::Mask))?;
        }
        observer(SubStep::Mask, &self.bundle);
        self.steps += 1;
        Ok(pass.breakdown)
    }

    /// Row order of epoch `epoch`; depends only on the seed and the epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        NoiseSource::with_stream(self.config.seed, SHUFFLE_STREAM_BASE + epoch as u64).permutation(n)
    }

    fn begin_epoch_if_needed(&mut self) {
        if self.cursor == 0 {
            self.bundle.mask_net.temperature = self.config.tau_at(self.epoch);
            self.accumulator = PartsAccumulator::default();
        }
    }

    /// Runs up to `max_steps` batches of the current epoch. Returns the number
    /// of steps taken; fewer than requested means the epoch's batches ran out.
    pub fn train_steps(&mut self, train: &LabeledBatch, max_steps: usize) -> Result<usize> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training set".into()));
        }
        if train.dim() != self.bundle.dim() {
            return Err(Error::dim("training embeddings", self.bundle.dim(), train.dim()));
        }
        if train.len() < MIN_HSIC_BATCH {
            return Err(Error::InsufficientBatch {
                what: "training set",
                required: MIN_HSIC_BATCH,
                actual: train.len(),
            });
        }
        self.begin_epoch_if_needed();
        let order = self.epoch_order(self.epoch, train.len());
        let bounds = batch_bounds(train.len(), self.config.batch_size);
        let mut taken = 0;
        while taken < max_steps && self.cursor < bounds.len() {
            let (s, e) = bounds[self.cursor];
            let batch = train.select(&order[s..e])?;
            let b = self.step(&batch.embeddings, &batch.labels_f64())?;
            self.accumulator.add(&b.parts(), (e - s) as f64);
            self.cursor += 1;
            taken += 1;
        }
        Ok(taken)
    }

    /// Loss and diagnostics on `data`. Losses use the stochastic mask with a
    /// fixed noise stream, so repeated calls on the same bundle agree.
    pub fn evaluate(&self, data: &LabeledBatch) -> Result<Evaluation> {
        evaluate_bundle(&self.bundle, &self.config, data)
    }

    /// Finishes the current epoch, evaluates on `val` and applies the
    /// early-stopping rule.
    pub fn run_epoch(&mut self, train: &LabeledBatch, val: &LabeledBatch) -> Result<&EpochRecord> {
        self.train_steps(train, usize::MAX)?;
        let train_loss = total_loss(self.accumulator.mean(), &self.config.weights())?;
        let eval = self.evaluate(val)?;
        let record = EpochRecord {
            epoch: self.epoch,
            temperature: self.bundle.mask_net.temperature,
            train: train_loss,
            validation: eval.loss,
            classifier_accuracy: eval.classifier_accuracy,
            adversary_accuracy: eval.adversary_accuracy,
            mask_sparsity: eval.mask_sparsity,
            hsic: eval.loss.mask_hsic,
        };
        let improved = self.best.as_ref().map_or(true, |(b, _)| eval.loss.total < *b);
        if improved {
            self.best = Some((eval.loss.total, self.bundle.clone()));
            self.history.best_epoch = Some(self.epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.early_stop_patience {
                self.history.stopped_early = true;
            }
        }
        self.history.records.push(record);
        self.epoch += 1;
        self.cursor = 0;
        Ok(self.history.records.last().expect("just pushed"))
    }

    /// Best-validation snapshot (or the current bundle before any epoch) and
    /// the history.
    pub fn finish(self) -> (ModelBundle, TrainHistory) {
        let bundle = self.best.map_or(self.bundle, |(_, b)| b);
        (bundle, self.history)
    }
}

fn evaluate_bundle(bundle: &ModelBundle, config: &TrainConfig, data: &LabeledBatch) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    if data.len() < MIN_HSIC_BATCH {
        return Err(Error::InsufficientBatch {
            what: "validation set",
            required: MIN_HSIC_BATCH,
            actual: data.len(),
        });
    }
    let cfg = config.objective();
    let w = cfg.weights;
    let labels = data.labels_f64();
    let mut noise = NoiseSource::with_stream(config.seed, VALIDATION_STREAM);
    let mut acc = PartsAccumulator::default();
    for (s, e) in batch_bounds(data.len(), config.batch_size) {
        let rows: Vec<usize> = (s..e).collect();
        let x = data.embeddings.select_rows(&rows);
        let y = &labels[s..e];
        let tape = if bundle.mask_enabled {
            Some(compute_mask(&x, &bundle.mask_net, MaskMode::Stochastic, &mut noise)?.1)
        } else {
            None
        };
        let drop = sample_drop_mask(x.rows(), x.cols(), w.drop_p, &mut noise);
        let mask = match &tape {
            Some(t) => MaskInput::Learned {
                net: &bundle.mask_net,
                tape: t,
            },
            None => MaskInput::AllOnes,
        };
        let pass = objective_pass(
            &x,
            y,
            mask,
            &bundle.classifier_h,
            &bundle.adversary_d,
            &drop,
            &cfg,
            GradRequest::NONE,
        )?;
        acc.add(&pass.breakdown.parts(), (e - s) as f64);
    }
    let loss = total_loss(acc.mean(), &w)?;

    let split = bundle.deterministic_split(&data.embeddings)?;
    let p = bundle.classifier_h.predict(&split.z_c)?.into_data();
    let adv_in = match cfg.adversary_input {
        AdversaryInput::Complement => &split.z_nc,
        AdversaryInput::Embedding => &data.embeddings,
    };
    let pd = bundle.adversary_d.predict(adv_in)?.into_data();
    Ok(Evaluation {
        loss,
        classifier_accuracy: accuracy(&p, &data.labels, DEFAULT_THRESHOLD)?,
        adversary_accuracy: accuracy(&pd, &data.labels, DEFAULT_THRESHOLD)?,
        mask_sparsity: crate::mask::mask_sparsity(&split.mask),
    })
}

/// Trains from scratch with early stopping and returns the best-validation
/// snapshot.
pub fn fit(train: &LabeledBatch, val: &LabeledBatch, config: &TrainConfig) -> Result<(ModelBundle, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    if train.dim() != val.dim() {
        return Err(Error::dim("validation embeddings", train.dim(), val.dim()));
    }
    let mut trainer = Trainer::new(train.dim(), config.clone())?;
    resume_fit(&mut trainer, train, val)?;
    Ok(trainer.finish())
}

/// Continues a (possibly restored) trainer until it finishes.
pub fn resume_fit(trainer: &mut Trainer, train: &LabeledBatch, val: &LabeledBatch) -> Result<()> {
    while !trainer.is_finished() {
        trainer.run_epoch(train, val)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 128,
            held_out_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Trains a fresh `[d, d/4, 1]` probe on the deterministic `z_nc` of a
/// random part of `data` and returns its accuracy on the rest.
pub fn adversary_probe(bundle: &ModelBundle, data: &LabeledBatch, cfg: &ProbeConfig) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::EmptyDataset("probe data needs at least two rows".into()));
    }
    let mut noise = NoiseSource::new(cfg.seed);
    let split = bundle.deterministic_split(&data.embeddings)?;
    let features = LabeledBatch::new(split.z_nc, data.labels.clone(), data.domain_id)?;
    let (train, held) = features.split(cfg.held_out_fraction, &mut noise)?;
    if train.is_empty() || held.is_empty() {
        return Err(Error::Config("probe split leaves an empty part".into()));
    }
    let d = data.dim();
    let mut probe = MlpParams::xavier(&[d, adversary_width(d), 1], OutputActivation::Sigmoid, &mut noise)?;
    let mut state = AdamState::new(&probe, AdamConfig::default());
    let labels = train.labels_f64();
    for _ in 0..cfg.epochs {
        let order = noise.permutation(train.len());
        for (s, e) in batch_bounds(train.len(), cfg.batch_size) {
            let rows = &order[s..e];
            let x = train.embeddings.select_rows(rows);
            let y: Vec<f64> = rows.iter().map(|&r| labels[r]).collect();
            let (_, grads) = adversary_objective(&probe, &x, &y)?;
            adam_step(&mut probe, &grads, &mut state, cfg.learning_rate)?;
        }
    }
    let p = probe.predict(&held.embeddings)?.into_data();
    accuracy(&p, &held.labels, DEFAULT_THRESHOLD)
}
