//! Adam, dataset splits, metrics and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::graph::TribeStyleGraph;
use crate::losses::{bce_loss, infonce_loss, total_loss, LossConfig, LossError};
use crate::model::{Ablation, Model, ModelConfig, ModelError, Mode, PreparedGraph};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("need at least 10 labeled nodes with both classes in every split, got {0} labels")]
    TooFewLabels(usize),
    #[error("AUC needs both classes")]
    OneClassOnly,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFiniteLoss { .. } => true,
            TrainError::Model(e) => e.is_numerical(),
            TrainError::Loss(LossError::Autodiff(AutodiffError::NonFinite(_))) => true,
            TrainError::Autodiff(AutodiffError::NonFinite(_)) => true,
            _ => false,
        }
    }
}

type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters of a training run. Read from JSON; unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub cl_batch: usize,
    pub d_e: usize,
    pub gin_layers: usize,
    pub ggrl_layers: usize,
    pub no_tse: bool,
    pub no_ggrl: bool,
    pub no_cl: bool,
    pub no_fusion: bool,
    pub no_attrs: bool,
    pub no_emb: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 1e-4,
            alpha: 0.1,
            tau: 0.2,
            epochs: 60,
            hidden: 32,
            dropout: 0.1,
            seed: 0,
            train_ratio: 0.6,
            cl_batch: 256,
            d_e: 16,
            gin_layers: 2,
            ggrl_layers: 2,
            no_tse: false,
            no_ggrl: false,
            no_cl: false,
            no_fusion: false,
            no_attrs: false,
            no_emb: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_tse: self.no_tse,
            no_ggrl: self.no_ggrl,
            no_cl: self.no_cl,
            no_fusion: self.no_fusion,
            no_attrs: self.no_attrs,
            no_emb: self.no_emb,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.no_tse = a.no_tse;
        self.no_ggrl = a.no_ggrl;
        self.no_cl = a.no_cl;
        self.no_fusion = a.no_fusion;
        self.no_attrs = a.no_attrs;
        self.no_emb = a.no_emb;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            d_e: self.d_e,
            gin_layers: self.gin_layers,
            ggrl_layers: self.ggrl_layers,
            dropout: self.dropout,
            ablation: self.ablation(),
            ..ModelConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, tau: self.tau, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad("train_ratio must lie in (0, 1)");
        }
        if self.cl_batch < 2 {
            return bad("cl_batch must be at least 2");
        }
        self.model_config().validate()?;
        self.loss_config().validate()?;
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).rows(), store.value(id).cols())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update using the gradients held in `store`,
/// with L2 regularization added to the gradient first.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(AutodiffError::ShapeMismatch { op: "adam_step", lhs: (state.m.len(), 1), rhs: (store.len(), 1) }.into());
    }
    state.t += 1;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = c(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, wd, eps) = (c(cfg.lr), c(cfg.weight_decay), c(cfg.eps));
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = store.grad(id).clone();
        if g.shape() != store.value(id).shape() || state.m[k].shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "adam_step", lhs: g.shape(), rhs: state.m[k].shape() }.into());
        }
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i] + wd * p[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Node indices of the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split of the labeled nodes. Per class, `round(ratio * n)` nodes
/// go to train; the rest is halved between validation (rounded down) and test.
pub fn split_dataset(labels: &[Option<bool>], train_ratio: f64, seed: u64) -> Result<Split> {
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    if labeled < 10 {
        return Err(TrainError::TooFewLabels(labeled));
    }
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(TrainError::BadConfig("train_ratio must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_5b17);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(class)).collect();
        idx.shuffle(&mut rng);
        let n_train = ((train_ratio * idx.len() as f64).round() as usize).min(idx.len());
        let n_val = (idx.len() - n_train) / 2;
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    let both = |part: &[usize]| {
        part.iter().any(|&i| labels[i] == Some(true)) && part.iter().any(|&i| labels[i] == Some(false))
    };
    if !(both(&split.train) && both(&split.val) && both(&split.test)) {
        return Err(TrainError::TooFewLabels(labeled));
    }
    Ok(split)
}

/// Counts of a binary confusion matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(preds: &[bool], y: &[bool]) -> Self {
        assert_eq!(preds.len(), y.len());
        let mut c = Confusion::default();
        for (&p, &t) in preds.iter().zip(y) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    /// Harmonic mean of precision and recall, zero when both vanish.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Binary F1 of the positive class.
pub fn compute_f1(preds: &[bool], y: &[bool]) -> f64 {
    Confusion::new(preds, y).f1()
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn compute_auc(scores: &[f64], y: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), y.len());
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk groups of tied scores; each positive beats every earlier negative
    // and ties with negatives in its own group.
    let (mut neg_below, mut pairs2) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| y[k]).count() as u64;
        let neg = (j - i) as u64 - pos;
        pairs2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(pairs2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Threshold-0.5 metrics plus AUC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn compute(scores: &[f64], y: &[bool]) -> Result<Self> {
        let preds: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        let c = Confusion::new(&preds, y);
        Ok(Metrics { f1: c.f1(), auc: compute_auc(scores, y)?, precision: c.precision(), recall: c.recall(), accuracy: c.accuracy() })
    }
}

/// One row of the per-epoch curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce: f64,
    pub cl: f64,
    pub total: f64,
    pub val_auc: f64,
    pub val_f1: f64,
}

/// Test metrics at the best validation epoch, plus the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub test: Metrics,
    pub best_epoch: usize,
    #[serde(skip)]
    pub epochs: Vec<EpochRecord>,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch.
    pub model: Model<T>,
    pub report: MetricsReport,
    pub split: Split,
}

/// Eval-mode metrics of `model` on the nodes in `idx`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &PreparedGraph<T>, idx: &[usize]) -> Result<Metrics> {
    let probs = model.predict_proba(data)?;
    metrics_on(&probs, data.labels(), idx)
}

fn metrics_on<T: Scalar>(probs: &[T], labels: &[Option<bool>], idx: &[usize]) -> Result<Metrics> {
    let scores: Vec<f64> = idx.iter().map(|&i| probs[i].to_f64_lossy()).collect();
    let y: Vec<bool> = idx.iter().map(|&i| labels[i].expect("split holds labeled nodes")).collect();
    Metrics::compute(&scores, &y)
}

/// Mean InfoNCE over shuffled mini-batches of tribes. A trailing batch with a
/// single tribe is merged into the previous one.
pub fn contrastive_term<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    batch: usize,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = tape.value(q).rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chunks: Vec<&[usize]> = order.chunks(batch).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().expect("checked");
        let prev = chunks.pop().expect("checked");
        let start = n - prev.len() - tail.len();
        chunks.push(&order[start..]);
    }
    let mut acc: Option<Var> = None;
    for c in &chunks {
        let idx: std::rc::Rc<[usize]> = std::rc::Rc::from(*c);
        let qb = tape.row_gather(q, idx.clone())?;
        let kb = tape.row_gather(k, idx)?;
        let l = infonce_loss(tape, qb, kb, cfg)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let sum = acc.ok_or(LossError::BatchTooSmall(n))?;
    Ok(tape.scale(sum, T::one() / T::from_usize_lossy(chunks.len()))?)
}

/// Full-graph training with best-validation-AUC checkpoint selection.
pub fn train<T: Scalar>(g: &TribeStyleGraph, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let split = split_dataset(g.global().labels(), cfg.train_ratio, cfg.seed)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let mut model = Model::<T>::new(cfg.model_config(), g, &mut init_rng)?;
    let data = model.prepare(g)?;
    let labels = g.global().labels();
    let train_y: Vec<bool> = split.train.iter().map(|&i| labels[i].expect("labeled")).collect();
    let loss_cfg = cfg.loss_config();
    let adam_cfg = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut adam = AdamState::new(model.params());
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &data, Mode::Train { seed: cfg.seed, epoch: epoch as u64 })?;
        let bce = bce_loss(&mut tape, out.probs, &split.train, &train_y, loss_cfg.clamp_eps)?;
        let cl = if out.views.len() == 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2 + epoch as u64);
            contrastive_term(&mut tape, out.views[0], out.views[1], cfg.cl_batch, &loss_cfg, &mut rng)?
        } else {
            tape.constant(Tensor::scalar(T::zero()))
        };
        let total = total_loss(&mut tape, bce, cl, &loss_cfg)?;
        let (bce_v, cl_v, total_v) =
            (tape.value(bce).item().to_f64_lossy(), tape.value(cl).item().to_f64_lossy(), tape.value(total).item().to_f64_lossy());
        if !total_v.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let grads = tape.backward(total)?;
        model.params_mut().zero_grad();
        grads.accumulate_into(model.params_mut());
        adam_step(model.params_mut(), &mut adam, &adam_cfg).map_err(|e| match e {
            TrainError::Autodiff(AutodiffError::NonFinite(_)) => TrainError::NonFiniteLoss { epoch },
            other => other,
        })?;
        if !model.params().entries().all(|(_, t)| t.is_finite()) {
            return Err(TrainError::NonFiniteLoss { epoch });
        }

        let val = evaluate(&model, &data, &split.val)?;
        epochs.push(EpochRecord { epoch, bce: bce_v, cl: cl_v, total: total_v, val_auc: val.auc, val_f1: val.f1 });
        if best.as_ref().is_none_or(|(auc, _, _)| val.auc > *auc) {
            best = Some((val.auc, epoch, model.params().clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params_mut().copy_values_from(&params);
    let test = evaluate(&model, &data, &split.test)?;
    Ok(TrainOutcome { model, report: MetricsReport { test, best_epoch, epochs }, split })
}
