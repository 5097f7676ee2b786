//! Minibatch SGD for the weighted adversarial objective
//!
//! ```text
//! C = mean_s(g_y * L_y) + lambda * (mean_s(g_y * L_d(source)) + mean_t(L_d(target)))
//! ```
//!
//! where `g_y` is the class weight of a source sample's label. The tape
//! minimizes `C` with a unit reversal node between the features and the
//! discriminator: the discriminator descends `lambda * L_d` while the feature
//! extractor receives `-lambda * dL_d/df`, so one backward pass serves both
//! players.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::weight_stats;
use crate::matrix::Matrix;
use crate::model::{
    classify_forward, discriminate_forward, feature_forward, init_params, predict_proba,
    BoundParams, ModelConfig, NetworkParams, ParamGroup, SOURCE_DOMAIN, TARGET_DOMAIN,
};
use crate::textio::{numbered_lines, parse_f64, parse_usize};
use crate::weighting::{
    estimate_class_weights, normalize_weights, weights_for_labels, ClassWeights,
};

/// Which loss terms use the class weights, and whether the adversary runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Classifier only; the adversarial penalty is held at zero.
    SourceOnly,
    /// Unweighted adversarial adaptation.
    Dann,
    /// Class weights on both the classifier and the discriminator terms.
    Pada,
    /// Class weights on the classifier term only (no weight on the
    /// discriminator). CLI name `pada-no-adversarial-weight`.
    PadaClassifierOnly,
    /// Class weights on the discriminator term only (no weight on the
    /// classifier). CLI name `pada-no-classifier-weight`.
    PadaAdversarialOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SourceOnly,
        Mode::Dann,
        Mode::Pada,
        Mode::PadaClassifierOnly,
        Mode::PadaAdversarialOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source-only",
            Mode::Dann => "dann",
            Mode::Pada => "pada",
            Mode::PadaClassifierOnly => "pada-no-adversarial-weight",
            Mode::PadaAdversarialOnly => "pada-no-classifier-weight",
        }
    }

    pub fn weights_classifier(self) -> bool {
        matches!(self, Mode::Pada | Mode::PadaClassifierOnly)
    }

    pub fn weights_discriminator(self) -> bool {
        matches!(self, Mode::Pada | Mode::PadaAdversarialOnly)
    }

    pub fn uses_class_weights(self) -> bool {
        self.weights_classifier() || self.weights_discriminator()
    }

    pub fn adversarial(self) -> bool {
        self != Mode::SourceOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Parameter(format!(
                    "unknown mode `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub alpha: f64,
    /// Exponent of the learning-rate decay.
    pub decay: f64,
    pub momentum: f64,
    /// Final adversarial penalty.
    pub lambda_max: f64,
    /// Steepness of the penalty ramp `2 / (1 + exp(-ramp * p)) - 1`.
    pub lambda_ramp: f64,
    /// Learning-rate multiplier for the classifier and discriminator.
    pub head_lr_multiplier: f64,
    /// Keep the all-ones start instead of re-estimating weights each epoch.
    pub freeze_class_weights: bool,
    /// Epochs trained with uniform weights before estimates are applied.
    /// Estimates from an untrained classifier are close to arbitrary.
    pub class_weight_warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pada,
            epochs: 60,
            batch_size: 32,
            eta0: 0.02,
            alpha: 10.0,
            decay: 0.75,
            momentum: 0.9,
            lambda_max: 0.3,
            lambda_ramp: 10.0,
            head_lr_multiplier: 3.0,
            freeze_class_weights: false,
            class_weight_warmup: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Failures are [`Error::Config`] naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.to_string(),
                    msg: msg.to_string(),
                })
            }
        };
        let finite_nonneg = |v: f64| v >= 0.0 && v.is_finite();
        check(
            self.eta0 > 0.0 && self.eta0.is_finite(),
            "eta0",
            "must be finite and > 0",
        )?;
        check(
            finite_nonneg(self.alpha),
            "alpha",
            "must be finite and >= 0",
        )?;
        check(
            finite_nonneg(self.decay),
            "decay",
            "must be finite and >= 0",
        )?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            "must be in [0, 1)",
        )?;
        check(
            finite_nonneg(self.lambda_max),
            "lambda_max",
            "must be finite and >= 0",
        )?;
        check(
            finite_nonneg(self.lambda_ramp),
            "lambda_ramp",
            "must be finite and >= 0",
        )?;
        check(
            self.head_lr_multiplier >= 1.0 && self.head_lr_multiplier.is_finite(),
            "head_lr_multiplier",
            "must be finite and >= 1",
        )?;
        check(self.batch_size > 0, "batch_size", "must be positive")
    }
}

fn check_progress(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "training progress must be in [0, 1], got {p}"
        )))
    }
}

/// `eta0 / (1 + alpha * p)^decay`.
pub fn lr_at(config: &TrainConfig, p: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(config.eta0 / (1.0 + config.alpha * p).powf(config.decay))
}

/// `lambda_max * (2 / (1 + exp(-ramp * p)) - 1)`: zero at the start,
/// saturating toward `lambda_max`.
pub fn lambda_at(config: &TrainConfig, p: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(config.lambda_max * (2.0 / (1.0 + (-config.lambda_ramp * p).exp()) - 1.0))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: NetworkParams,
    pub velocity: NetworkParams,
    pub class_weights: ClassWeights,
    pub epoch: usize,
    step: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: NetworkParams, total_steps: usize, seed: u64) -> Self {
        let classes = params.num_classes();
        Self {
            velocity: params.zeros_like(),
            params,
            class_weights: ClassWeights::uniform(classes),
            epoch: 0,
            step: 0,
            total_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Completed steps over planned steps, capped at 1.
    pub fn progress(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            (self.step as f64 / self.total_steps as f64).min(1.0)
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub source_cls_loss: f64,
    pub source_domain_loss: f64,
    pub target_domain_loss: f64,
    pub total_objective: f64,
}

/// The forward graph of one training step.
#[derive(Debug)]
pub struct StepGraph {
    pub tape: Tape,
    pub params: BoundParams,
    pub source_cls: NodeId,
    pub source_domain: NodeId,
    pub target_domain: NodeId,
    /// `source_cls + lambda * (source_domain + target_domain)`; the node
    /// backpropagated during training.
    pub train_loss: NodeId,
    pub lambda: f64,
}

impl StepGraph {
    pub fn losses(&self) -> StepLosses {
        let cls = self.tape.value(self.source_cls).item();
        let sd = self.tape.value(self.source_domain).item();
        let td = self.tape.value(self.target_domain).item();
        StepLosses {
            source_cls_loss: cls,
            source_domain_loss: sd,
            target_domain_loss: td,
            total_objective: cls + self.lambda * (sd + td),
        }
    }
}

/// Per-sample weights for the classifier and discriminator source terms.
fn term_weights(
    mode: Mode,
    weights: &ClassWeights,
    labels: &[usize],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let per_sample = if mode.uses_class_weights() {
        Some(weights_for_labels(weights, labels)?)
    } else {
        None
    };
    let cls = per_sample.clone().filter(|_| mode.weights_classifier());
    let dom = per_sample.filter(|_| mode.weights_discriminator());
    Ok((cls, dom))
}

/// Builds the tape for one step without touching any parameters.
pub fn build_step_graph(
    params: &NetworkParams,
    mode: Mode,
    class_weights: &ClassWeights,
    lambda: f64,
    source_x: &Matrix,
    source_y: &[usize],
    target_x: &Matrix,
) -> Result<StepGraph> {
    let lambda = if mode.adversarial() { lambda } else { 0.0 };
    let (cls_w, dom_w) = term_weights(mode, class_weights, source_y)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let xs = tape.leaf(source_x.clone())?;
    let xt = tape.leaf(target_x.clone())?;

    let fs = feature_forward(&mut tape, &bound, xs)?;
    let ft = feature_forward(&mut tape, &bound, xt)?;
    let ys = classify_forward(&mut tape, &bound, fs)?;
    let grl = if mode.adversarial() { 1.0 } else { 0.0 };
    let ds = discriminate_forward(&mut tape, &bound, fs, grl)?;
    let dt = discriminate_forward(&mut tape, &bound, ft, grl)?;

    let source_cls = tape.cross_entropy(ys, source_y, cls_w.as_deref())?;
    let source_domains = vec![SOURCE_DOMAIN; source_y.len()];
    let source_domain = tape.cross_entropy(ds, &source_domains, dom_w.as_deref())?;
    let target_domains = vec![TARGET_DOMAIN; target_x.rows()];
    let target_domain = tape.cross_entropy(dt, &target_domains, None)?;

    let domain = tape.add(source_domain, target_domain)?;
    let domain = tape.scale(domain, lambda)?;
    let train_loss = tape.add(source_cls, domain)?;
    Ok(StepGraph {
        tape,
        params: bound,
        source_cls,
        source_domain,
        target_domain,
        train_loss,
        lambda,
    })
}

/// One SGD-with-momentum update on a source batch and a target batch.
pub fn pada_step(
    state: &mut TrainState,
    config: &TrainConfig,
    source_x: &Matrix,
    source_y: &[usize],
    target_x: &Matrix,
) -> Result<StepLosses> {
    if let Some(&y) = source_y.iter().find(|&&y| y >= state.params.num_classes()) {
        return Err(Error::Index {
            what: "source label",
            index: y,
            bound: state.params.num_classes(),
        });
    }
    let p = state.progress();
    let lr = lr_at(config, p)?;
    let lambda = lambda_at(config, p)?;

    let graph = build_step_graph(
        &state.params,
        config.mode,
        &state.class_weights,
        lambda,
        source_x,
        source_y,
        target_x,
    )
    .map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence { step: state.step },
        other => other,
    })?;
    let losses = graph.losses();
    let finite = [
        losses.source_cls_loss,
        losses.source_domain_loss,
        losses.target_domain_loss,
        losses.total_objective,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Divergence { step: state.step });
    }

    let grads = graph.tape.backward(graph.train_loss)?;
    let grads = graph.params.gradients(&grads);
    let grad_list = grads.named();
    let head = config.head_lr_multiplier;
    for (((group, theta), (_, vel)), (_, _, g)) in state
        .params
        .matrices_mut()
        .into_iter()
        .zip(state.velocity.matrices_mut())
        .zip(grad_list)
    {
        let rate = match group {
            ParamGroup::Feature => lr,
            ParamGroup::Classifier | ParamGroup::Discriminator => lr * head,
        };
        for ((t, v), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(vel.data_mut())
            .zip(g.data())
        {
            *v = config.momentum * *v + gi;
            *t -= rate * *v;
        }
    }
    if !state.params.named().iter().all(|(_, _, m)| m.is_finite()) {
        return Err(Error::Divergence { step: state.step });
    }
    state.step += 1;
    Ok(losses)
}

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub losses: StepLosses,
    pub source_accuracy: f64,
    /// `None` when the target domain has no evaluation labels.
    pub target_accuracy: Option<f64>,
    /// Normalized class weights estimated from the model at the end of the
    /// epoch. Pada modes train the next epoch with these.
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
}

pub(crate) fn accuracy(predicted: &Matrix, labels: &[Option<usize>]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, y) in labels.iter().enumerate() {
        if let Some(y) = y {
            total += 1;
            if predicted.argmax_row(i) == *y {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Steps per epoch: enough batches to cover the larger domain once.
pub fn steps_per_epoch(dataset: &Dataset, batch_size: usize) -> usize {
    let n = dataset.source_x().rows().max(dataset.target_x().rows());
    n.div_ceil(batch_size)
}

fn cyclic_batch(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    (0..batch)
        .map(|i| order[(step * batch + i) % order.len()])
        .collect()
}

/// Trains from a fresh initialization and records one [`EpochRecord`] per
/// epoch. Deterministic for fixed configs.
pub fn train_run(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if model_config.num_source_classes != dataset.num_source_classes() {
        return Err(Error::Parameter(format!(
            "model has {} classes, dataset has {}",
            model_config.num_source_classes,
            dataset.num_source_classes()
        )));
    }
    if model_config.input_dim != dataset.feature_dim() {
        return Err(Error::dimension(
            "model input",
            (model_config.input_dim, 0),
            (dataset.feature_dim(), 0),
        ));
    }

    let params = init_params(model_config)?;
    let steps = steps_per_epoch(dataset, config.batch_size);
    let mut state = TrainState::new(params, steps * config.epochs, config.seed);
    let view = dataset.training_view();
    let source_eval: Vec<Option<usize>> = view.source_y.iter().map(|&y| Some(y)).collect();

    let mut source_order: Vec<usize> = (0..view.source_x.rows()).collect();
    let mut target_order: Vec<usize> = (0..view.target_x.rows()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        source_order.shuffle(&mut state.rng);
        target_order.shuffle(&mut state.rng);

        let mut sum = StepLosses::default();
        for step in 0..steps {
            let si = cyclic_batch(&source_order, step, config.batch_size);
            let ti = cyclic_batch(&target_order, step, config.batch_size);
            let xs = view.source_x.select_rows(&si)?;
            let ys: Vec<usize> = si.iter().map(|&i| view.source_y[i]).collect();
            let xt = view.target_x.select_rows(&ti)?;
            let l = pada_step(&mut state, config, &xs, &ys, &xt)?;
            sum.source_cls_loss += l.source_cls_loss;
            sum.source_domain_loss += l.source_domain_loss;
            sum.target_domain_loss += l.target_domain_loss;
            sum.total_objective += l.total_objective;
        }
        let n = steps as f64;
        let losses = StepLosses {
            source_cls_loss: sum.source_cls_loss / n,
            source_domain_loss: sum.source_domain_loss / n,
            target_domain_loss: sum.target_domain_loss / n,
            total_objective: sum.total_objective / n,
        };

        let target_probs = predict_proba(&state.params, view.target_x)?;
        let estimate = normalize_weights(&estimate_class_weights(&target_probs)?)?;
        let source_probs = predict_proba(&state.params, view.source_x)?;
        history.push(EpochRecord {
            epoch,
            losses,
            source_accuracy: accuracy(&source_probs, &source_eval).unwrap_or(0.0),
            target_accuracy: accuracy(&target_probs, dataset.target_y_eval()),
            gamma: estimate.gamma().to_vec(),
        });
        if config.mode.uses_class_weights()
            && !config.freeze_class_weights
            && epoch + 1 >= config.class_weight_warmup
        {
            state.class_weights = estimate;
        }
    }

    Ok(TrainOutcome {
        params: state.params,
        history,
    })
}

const HISTORY_FIXED: [&str; 7] = [
    "epoch",
    "src_cls_loss",
    "src_dom_loss",
    "tgt_dom_loss",
    "objective",
    "src_acc",
    "tgt_acc",
];

/// History as CSV. When `shared` is given, per-epoch means of the weights
/// over shared and outlier classes are appended as two extra columns.
pub fn history_to_csv(
    history: &[EpochRecord],
    num_classes: usize,
    shared: Option<&[usize]>,
) -> Result<String> {
    let mut out = HISTORY_FIXED.join(",");
    for k in 0..num_classes {
        write!(out, ",gamma_{k}").unwrap();
    }
    if shared.is_some() {
        out.push_str(",gamma_shared_mean,gamma_outlier_mean");
    }
    out.push('\n');
    for r in history {
        if r.gamma.len() != num_classes {
            return Err(Error::dimension(
                "history",
                (r.gamma.len(), 1),
                (num_classes, 1),
            ));
        }
        let l = &r.losses;
        write!(
            out,
            "{},{},{},{},{},{},",
            r.epoch,
            l.source_cls_loss,
            l.source_domain_loss,
            l.target_domain_loss,
            l.total_objective,
            r.source_accuracy
        )
        .unwrap();
        match r.target_accuracy {
            Some(a) => write!(out, "{a}").unwrap(),
            None => out.push_str("NA"),
        }
        for g in &r.gamma {
            write!(out, ",{g}").unwrap();
        }
        if let Some(shared) = shared {
            let w = ClassWeights::from_vec(r.gamma.clone(), true)?;
            let stats = weight_stats(&w, shared)?;
            write!(out, ",{},{}", stats.mean_shared, stats.mean_outlier).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses a history file written by [`history_to_csv`]. Weight-statistic
/// columns, if present, are validated and dropped.
pub fn history_from_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = numbered_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty history"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < HISTORY_FIXED.len() || cols[..HISTORY_FIXED.len()] != HISTORY_FIXED {
        return Err(Error::parse(hline, "unexpected history header"));
    }
    let mut num_classes = 0;
    for c in &cols[HISTORY_FIXED.len()..] {
        if *c == format!("gamma_{num_classes}") {
            num_classes += 1;
        } else {
            break;
        }
    }
    let extra = &cols[HISTORY_FIXED.len() + num_classes..];
    if !(extra.is_empty() || extra == ["gamma_shared_mean", "gamma_outlier_mean"]) {
        return Err(Error::parse(hline, "unexpected trailing history columns"));
    }
    if num_classes == 0 {
        return Err(Error::parse(hline, "history has no gamma columns"));
    }

    let mut out = Vec::new();
    for (line, content) in lines {
        let f: Vec<&str> = content.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::parse(
                line,
                format!("expected {} fields, found {}", cols.len(), f.len()),
            ));
        }
        let target_accuracy = match f[6].trim() {
            "NA" => None,
            v => Some(parse_f64(v, line)?),
        };
        let gamma = f[7..7 + num_classes]
            .iter()
            .map(|v| parse_f64(v, line))
            .collect::<Result<Vec<_>>>()?;
        for v in &f[7 + num_classes..] {
            parse_f64(v, line)?;
        }
        out.push(EpochRecord {
            epoch: parse_usize(f[0], line)?,
            losses: StepLosses {
                source_cls_loss: parse_f64(f[1], line)?,
                source_domain_loss: parse_f64(f[2], line)?,
                target_domain_loss: parse_f64(f[3], line)?,
                total_objective: parse_f64(f[4], line)?,
            },
            source_accuracy: parse_f64(f[5], line)?,
            target_accuracy,
            gamma,
        });
    }
    Ok(out)
}
