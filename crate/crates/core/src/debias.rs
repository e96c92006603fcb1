//! Stage two: a target label classifier trained against an adversary that
//! tries to recover the estimated sensitive attribute from its representation.

use std::path::Path;

use log::debug;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::AttributeEstimate;
use crate::autodiff::{Graph, Matrix, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, dp_gap};
use crate::models::{
    encode, encoder_sizes, head_prob, head_sizes, hard_label, infer_probs, infer_repr, MlpParams,
};
use crate::optim::{shuffled_batches, RmsProp, Schedule};
use crate::{seeded_rng, streams};

/// Default weight of the estimated parity gap in the model-selection score.
pub const DEFAULT_SELECTION_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub encoder: MlpParams,
    pub label_head: MlpParams,
    pub bias_head: MlpParams,
    /// Strength of the reversed adversary gradient reaching the encoder.
    pub beta: f64,
}

/// Encoder and label head without an adversary.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: MlpParams,
    pub label_head: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Prediction {
    fn from_probs(probs: Vec<f64>) -> Self {
        Self {
            labels: hard_label(&probs, 0.5),
            probs,
        }
    }

    /// Writes `row,probability,label` lines.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("row,probability,label\n");
        for (i, (p, y)) in self.probs.iter().zip(&self.labels).enumerate() {
            text.push_str(&format!("{i},{p},{y}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl Classifier {
    /// Same initialization as the encoder and label head of
    /// [`Stage2Model::new`] with the same seed.
    pub fn new(input_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, streams::STAGE2_INIT);
        Ok(Self {
            encoder: MlpParams::init(&encoder_sizes(input_dim), &mut rng)?,
            label_head: MlpParams::init(&head_sizes(), &mut rng)?,
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        Ok(Prediction::from_probs(infer_probs(&self.encoder, &self.label_head, x)?))
    }

    pub fn representation(&self, x: &Matrix) -> Result<Matrix> {
        infer_repr(&self.encoder, x)
    }
}

impl Stage2Model {
    pub fn new(input_dim: usize, beta: f64, seed: u64) -> Result<Self> {
        let Classifier {
            encoder,
            label_head,
        } = Classifier::new(input_dim, seed)?;
        let model = Self {
            encoder,
            label_head,
            bias_head: MlpParams::init(&head_sizes(), &mut seeded_rng(seed, streams::ADVERSARY_INIT))?,
            beta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.encoder.is_finite() && self.label_head.is_finite() && self.bias_head.is_finite()) {
            return Err(Error::Contract("stage-two parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn classifier(&self) -> Classifier {
        Classifier {
            encoder: self.encoder.clone(),
            label_head: self.label_head.clone(),
        }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .tensors_mut()
            .chain(self.label_head.tensors_mut())
            .chain(self.bias_head.tensors_mut())
    }

    fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.label_head.zero_grad();
        self.bias_head.zero_grad();
    }
}

/// Label probabilities and hard labels at 0.5.
pub fn predict(model: &Stage2Model, x: &Matrix) -> Result<Prediction> {
    Ok(Prediction::from_probs(infer_probs(&model.encoder, &model.label_head, x)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Losses {
    pub label: f64,
    pub bias: f64,
}

fn labels_column(v: &[u8], idx: &[usize]) -> Matrix {
    Matrix::column(idx.iter().map(|&i| f64::from(v[i])).collect())
}

/// One pass over `tgt_train` in shuffled minibatches.
pub fn stage2_epoch(
    model: &mut Stage2Model,
    tgt_train: &Dataset,
    a_hat: &AttributeEstimate,
    opt: &mut RmsProp,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
) -> Result<Stage2Losses> {
    if a_hat.len() != tgt_train.n() {
        return Err(Error::Contract(format!(
            "{} estimated attributes for {} target rows",
            a_hat.len(),
            tgt_train.n()
        )));
    }
    let mut g = Graph::new();
    let (mut ly_sum, mut la_sum, mut batches) = (0.0, 0.0, 0usize);
    for idx in shuffled_batches(tgt_train.n(), batch_size, rng) {
        g.reset();
        let enc = model.encoder.bind(&mut g);
        let lab = model.label_head.bind(&mut g);
        let adv = model.bias_head.bind(&mut g);
        let x = g.constant(tgt_train.x.select_rows(&idx)?);
        let z = encode(&mut g, &enc, x)?.z;
        let py = head_prob(&mut g, &lab, z)?;
        let ly = g.bce_loss(py, &labels_column(&tgt_train.y, &idx), None)?;
        let r = g.grad_reverse(z, model.beta)?;
        let pa = head_prob(&mut g, &adv, r)?;
        let la = g.bce_loss(pa, &labels_column(&a_hat.a_hat, &idx), None)?;
        let total = g.add(ly, la)?;
        g.backward(total)?;
        model.zero_grad();
        model.encoder.collect_grads(&g, &enc)?;
        model.label_head.collect_grads(&g, &lab)?;
        model.bias_head.collect_grads(&g, &adv)?;
        opt.step(model.tensors_mut())?;
        ly_sum += g.scalar(ly);
        la_sum += g.scalar(la);
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(Stage2Losses {
        label: ly_sum / n,
        bias: la_sum / n,
    })
}

/// `acc - weight * gap`. The gap is measured against estimated attributes; if
/// they put every row in one group it counts as 0.
pub fn selection_score(y_hat: &[u8], y: &[u8], a_hat: &[u8], weight: f64) -> Result<f64> {
    let acc = accuracy(y_hat, y)?;
    if weight == 0.0 {
        return Ok(acc);
    }
    let gap = match dp_gap(y_hat, a_hat) {
        Ok(g) => g,
        Err(Error::UndefinedMetric(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(acc - weight * gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub beta: f64,
    pub schedule: Schedule,
    /// Weight of the estimated parity gap in model selection.
    pub selection_weight: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            beta: 0.01,
            schedule: Schedule::default(),
            selection_weight: DEFAULT_SELECTION_WEIGHT,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.selection_weight >= 0.0 && self.selection_weight.is_finite()) {
            return Err(Error::Config("selection weight must be finite and >= 0".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub model: Stage2Model,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_score: f64,
    /// Eval score of the last trained epoch.
    pub final_score: f64,
    pub history: Vec<Stage2Losses>,
}

/// Trains stage two and keeps the epoch with the best eval selection score,
/// stopping after `patience` epochs without improvement.
pub fn run_stage2(
    tgt_train: &Dataset,
    tgt_eval: &Dataset,
    train_est: &AttributeEstimate,
    eval_est: &AttributeEstimate,
    config: &Stage2Config,
    seed: u64,
) -> Result<Stage2Outcome> {
    config.validate()?;
    if eval_est.len() != tgt_eval.n() {
        return Err(Error::Contract("eval estimate does not cover the eval split".into()));
    }
    let mut model = Stage2Model::new(tgt_train.d(), config.beta, seed)?;
    let mut opt = RmsProp::new(config.schedule.lr);
    let mut rng = seeded_rng(seed, streams::STAGE2_SHUFFLE);

    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut final_score = f64::NEG_INFINITY;
    let mut history = Vec::new();
    for epoch in 0..config.schedule.max_epochs {
        let losses = stage2_epoch(
            &mut model,
            tgt_train,
            train_est,
            &mut opt,
            &mut rng,
            config.schedule.batch_size,
        )?;
        history.push(losses);
        let pred = predict(&model, &tgt_eval.x)?;
        final_score = selection_score(
            &pred.labels,
            &tgt_eval.y,
            &eval_est.a_hat,
            config.selection_weight,
        )?;
        debug!(
            "stage2 epoch {epoch}: L_Y={:.4} L_a={:.4} score={final_score:.4}",
            losses.label, losses.bias
        );
        if final_score > best_score {
            best_score = final_score;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.schedule.patience {
            break;
        }
    }
    Ok(Stage2Outcome {
        model: best,
        best_epoch,
        epochs_run: history.len(),
        best_score,
        final_score,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct VanillaOutcome {
    pub classifier: Classifier,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_accuracy: f64,
}

/// Plain label classifier: no adversary, selection on eval accuracy.
pub fn train_vanilla(
    tgt_train: &Dataset,
    tgt_eval: &Dataset,
    schedule: &Schedule,
    seed: u64,
) -> Result<VanillaOutcome> {
    schedule.validate()?;
    let mut clf = Classifier::new(tgt_train.d(), seed)?;
    let mut opt = RmsProp::new(schedule.lr);
    let mut rng = seeded_rng(seed, streams::STAGE2_SHUFFLE);
    let mut g = Graph::new();

    let mut best = clf.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    for epoch in 0..schedule.max_epochs {
        for idx in shuffled_batches(tgt_train.n(), schedule.batch_size, &mut rng) {
            g.reset();
            let enc = clf.encoder.bind(&mut g);
            let lab = clf.label_head.bind(&mut g);
            let x = g.constant(tgt_train.x.select_rows(&idx)?);
            let z = encode(&mut g, &enc, x)?.z;
            let p = head_prob(&mut g, &lab, z)?;
            let loss = g.bce_loss(p, &labels_column(&tgt_train.y, &idx), None)?;
            g.backward(loss)?;
            clf.encoder.zero_grad();
            clf.label_head.zero_grad();
            clf.encoder.collect_grads(&g, &enc)?;
            clf.label_head.collect_grads(&g, &lab)?;
            opt.step(clf.encoder.tensors_mut().chain(clf.label_head.tensors_mut()))?;
        }
        epochs_run += 1;
        let acc = accuracy(&clf.predict(&tgt_eval.x)?.labels, &tgt_eval.y)?;
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch;
            best = clf.clone();
        } else if epoch - best_epoch >= schedule.patience {
            break;
        }
    }
    Ok(VanillaOutcome {
        classifier: best,
        best_epoch,
        epochs_run,
        best_accuracy: best_acc,
    })
}

/// Held-out accuracy of a freshly trained linear probe predicting `a` from
/// frozen representations.
pub fn probe_accuracy(
    z_train: &Matrix,
    a_train: &[u8],
    z_test: &Matrix,
    a_test: &[u8],
    epochs: usize,
    seed: u64,
) -> Result<f64> {
    if z_train.rows() != a_train.len() || z_test.rows() != a_test.len() {
        return Err(Error::Contract("probe inputs and labels differ in length".into()));
    }
    let mut rng = seeded_rng(seed, streams::PROBE);
    let mut head = MlpParams::init(&[z_train.cols(), 1], &mut rng)?;
    let mut opt = RmsProp::new(0.01);
    let mut g = Graph::new();
    for _ in 0..epochs {
        for idx in shuffled_batches(z_train.rows(), 64, &mut rng) {
            g.reset();
            let h = head.bind(&mut g);
            let z = g.constant(z_train.select_rows(&idx)?);
            let p = head_prob(&mut g, &h, z)?;
            let loss = g.bce_loss(p, &labels_column(a_train, &idx), None)?;
            g.backward(loss)?;
            head.zero_grad();
            head.collect_grads(&g, &h)?;
            opt.step(head.tensors_mut())?;
        }
    }
    let mut g = Graph::new();
    let h = head.bind(&mut g);
    let z = g.constant(z_test.clone());
    let p = head_prob(&mut g, &h, z)?;
    accuracy(&hard_label(g.value(p).data(), 0.5), a_test)
}
