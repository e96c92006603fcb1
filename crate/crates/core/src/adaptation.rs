//! Stage one: adapt a sensitive-attribute predictor from the labeled source
//! domain to the unlabeled target domain, and estimate target attributes.

use std::path::Path;

use log::{debug, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::models::{
    encode, encoder_sizes, head_prob, head_sizes, hard_label, infer_probs, MlpParams,
};
use crate::optim::{shuffled_batches, RmsProp, Schedule};
use crate::{seeded_rng, streams};

/// Epochs between refreshes of the target proportion estimate.
pub const DEFAULT_REFRESH_EVERY: usize = 5;
/// Importance weights are clipped into this range.
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 10.0);

const SIMPLEX_TOL: f64 = 1e-9;

/// Source and estimated target attribute proportions, `[p(a=0), p(a=1)]`,
/// plus the per-class importance ratio applied to source rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub pi_source: [f64; 2],
    pub pi_target_hat: [f64; 2],
    /// `pi_target_hat[a] / pi_source[a]`, clipped; indexed by a source row's attribute.
    pub weights: [f64; 2],
    /// Set when the estimator could not separate the classes and fell back to
    /// the source proportions.
    pub degenerate: bool,
}

impl Proportions {
    /// No shift: both domains at `pi`, unit weights.
    pub fn unshifted(pi: [f64; 2]) -> Self {
        Self {
            pi_source: pi,
            pi_target_hat: pi,
            weights: [1.0, 1.0],
            degenerate: false,
        }
    }

    pub fn row_weights(&self, a: &[u8]) -> Vec<f64> {
        a.iter().map(|&v| self.weights[usize::from(v == 1)]).collect()
    }
}

impl Default for Proportions {
    fn default() -> Self {
        Self::unshifted([0.5, 0.5])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub encoder: MlpParams,
    pub attribute_head: MlpParams,
    pub domain_head: MlpParams,
    /// Strength of the reversed domain gradient reaching the encoder.
    pub alpha: f64,
    pub proportions: Proportions,
}

impl Stage1Model {
    pub fn new(input_dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, streams::STAGE1_INIT);
        let model = Self {
            encoder: MlpParams::init(&encoder_sizes(input_dim), &mut rng)?,
            attribute_head: MlpParams::init(&head_sizes(), &mut rng)?,
            domain_head: MlpParams::init(&head_sizes(), &mut rng)?,
            alpha,
            proportions: Proportions::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.encoder.is_finite()
            && self.attribute_head.is_finite()
            && self.domain_head.is_finite())
        {
            return Err(Error::Contract("stage-one parameters are not finite".into()));
        }
        Ok(())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .tensors_mut()
            .chain(self.attribute_head.tensors_mut())
            .chain(self.domain_head.tensors_mut())
    }

    fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.attribute_head.zero_grad();
        self.domain_head.zero_grad();
    }

    pub fn attribute_probs(&self, x: &Matrix) -> Result<Vec<f64>> {
        infer_probs(&self.encoder, &self.attribute_head, x)
    }

    /// Probability that each row comes from the source domain.
    pub fn domain_probs(&self, x: &Matrix) -> Result<Vec<f64>> {
        infer_probs(&self.encoder, &self.domain_head, x)
    }
}

/// Mean training losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub attribute: f64,
    pub domain: f64,
}

/// Minibatch order for stage one. Source and target orders come from
/// separate streams, so the source trajectory does not depend on the target.
#[derive(Debug, Clone)]
pub struct Stage1Sampler {
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    target_queue: Vec<usize>,
}

impl Stage1Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            source_rng: seeded_rng(seed, streams::STAGE1_SHUFFLE),
            target_rng: seeded_rng(seed, streams::TARGET_SHUFFLE),
            target_queue: Vec::new(),
        }
    }

    pub fn source_batches(&mut self, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
        shuffled_batches(n, batch_size, &mut self.source_rng)
    }

    /// Next `k` target rows, cycling through reshuffled passes.
    pub fn target_batch(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.target_queue.is_empty() {
                self.target_queue = shuffled_batches(n, n, &mut self.target_rng).concat();
                self.target_queue.reverse();
            }
            out.push(self.target_queue.pop().expect("refilled"));
        }
        out
    }
}

fn as_column(v: impl IntoIterator<Item = f64>) -> Matrix {
    Matrix::column(v.into_iter().collect())
}

/// One gradient step on a source batch paired with a target batch.
fn stage1_step(
    g: &mut Graph,
    model: &mut Stage1Model,
    xs: Matrix,
    a: &[u8],
    row_weights: Option<&[f64]>,
    xt: Matrix,
    opt: &mut RmsProp,
) -> Result<Stage1Losses> {
    g.reset();
    let enc = model.encoder.bind(g);
    let attr = model.attribute_head.bind(g);
    let dom = model.domain_head.bind(g);
    let (ns, nt) = (xs.rows(), xt.rows());
    let xs = g.constant(xs);
    let xt = g.constant(xt);
    let zs = encode(g, &enc, xs)?.z;
    let zt = encode(g, &enc, xt)?.z;

    let pa = head_prob(g, &attr, zs)?;
    let targets = as_column(a.iter().map(|&v| f64::from(v)));
    let w = row_weights.map(|w| as_column(w.iter().copied()));
    let la = g.bce_loss(pa, &targets, w.as_ref())?;

    let rs = g.grad_reverse(zs, model.alpha)?;
    let rt = g.grad_reverse(zt, model.alpha)?;
    let ps = head_prob(g, &dom, rs)?;
    let pt = head_prob(g, &dom, rt)?;
    let ls = g.bce_loss(ps, &Matrix::filled(ns, 1, 1.0), None)?;
    let lt = g.bce_loss(pt, &Matrix::zeros(nt, 1), None)?;
    let ld = g.add(ls, lt)?;
    let ld = g.scale(ld, 0.5);

    let total = g.add(la, ld)?;
    g.backward(total)?;
    model.zero_grad();
    model.encoder.collect_grads(g, &enc)?;
    model.attribute_head.collect_grads(g, &attr)?;
    model.domain_head.collect_grads(g, &dom)?;
    opt.step(model.tensors_mut())?;
    Ok(Stage1Losses {
        attribute: g.scalar(la),
        domain: g.scalar(ld),
    })
}

/// One pass over the source rows. Each source batch is paired with an equally
/// sized target batch. `weights`, when given, scale the attribute loss of each
/// source row by its class weight.
pub fn stage1_epoch(
    model: &mut Stage1Model,
    src: &Dataset,
    tgt: &Dataset,
    opt: &mut RmsProp,
    weights: Option<[f64; 2]>,
    sampler: &mut Stage1Sampler,
    batch_size: usize,
) -> Result<Stage1Losses> {
    let a_src = src.attributes()?;
    if tgt.domain != Domain::Target || tgt.a.is_some() {
        return Err(Error::Contract("stage one needs an unlabeled target dataset".into()));
    }
    let mut g = Graph::new();
    let mut sum = Stage1Losses {
        attribute: 0.0,
        domain: 0.0,
    };
    let mut batches = 0usize;
    for idx in sampler.source_batches(src.n(), batch_size) {
        let tidx = sampler.target_batch(tgt.n(), idx.len());
        let a: Vec<u8> = idx.iter().map(|&i| a_src[i]).collect();
        let rw = weights.map(|w| a.iter().map(|&v| w[usize::from(v == 1)]).collect::<Vec<_>>());
        let l = stage1_step(
            &mut g,
            model,
            src.x.select_rows(&idx)?,
            &a,
            rw.as_deref(),
            tgt.x.select_rows(&tidx)?,
            opt,
        )?;
        sum.attribute += l.attribute;
        sum.domain += l.domain;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(Stage1Losses {
        attribute: sum.attribute / n,
        domain: sum.domain / n,
    })
}

/// Estimated target attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEstimate {
    pub a_hat: Vec<u8>,
    pub a_prob: Vec<f64>,
    pub pi_source: [f64; 2],
    pub pi_target_hat: [f64; 2],
    pub weights: [f64; 2],
}

impl AttributeEstimate {
    pub fn from_probs(a_prob: Vec<f64>, proportions: &Proportions) -> Self {
        Self {
            a_hat: hard_label(&a_prob, 0.5),
            a_prob,
            pi_source: proportions.pi_source,
            pi_target_hat: proportions.pi_target_hat,
            weights: proportions.weights,
        }
    }

    pub fn len(&self) -> usize {
        self.a_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_hat.is_empty()
    }

    /// Writes `row,a_prob,a_hat` lines.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["row", "a_prob", "a_hat"])
            .map_err(|e| csv_error(path, e))?;
        for (i, (p, a)) in self.a_prob.iter().zip(&self.a_hat).enumerate() {
            w.write_record([i.to_string(), p.to_string(), a.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a sidecar written by [`AttributeEstimate::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>, proportions: &Proportions) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut a_prob = Vec::new();
        let mut a_hat = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let field = |k: usize| {
                rec.get(k)
                    .ok_or_else(|| Error::Format(format!("{}: short row {i}", path.display())))
            };
            let row: usize = field(0)?
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad row id", path.display())))?;
            if row != i {
                return Err(Error::Format(format!(
                    "{}: expected row {i}, found {row}",
                    path.display()
                )));
            }
            let p: f64 = field(1)?
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad probability", path.display())))?;
            let a: u8 = match field(2)? {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Format(format!("{}: bad label {other:?}", path.display())))
                }
            };
            a_prob.push(p);
            a_hat.push(a);
        }
        Ok(Self {
            a_hat,
            a_prob,
            pi_source: proportions.pi_source,
            pi_target_hat: proportions.pi_target_hat,
            weights: proportions.weights,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Attribute probabilities on `tgt`, hard labels at 0.5, and the model's
/// current proportion estimate.
pub fn estimate_attributes(model: &Stage1Model, tgt: &Dataset) -> Result<AttributeEstimate> {
    let p = model.attribute_probs(&tgt.x)?;
    Ok(AttributeEstimate::from_probs(p, &model.proportions))
}

/// Class-conditional source means of the predictor output and the target
/// mean, both over `(1 - p, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMatchInput {
    /// Column `a` is the mean of `(1 - p, p)` over source rows with attribute `a`.
    m1: [[f64; 2]; 2],
    mu2: [f64; 2],
}

fn on_simplex(v: [f64; 2]) -> bool {
    v.iter().all(|&x| x >= -SIMPLEX_TOL && x.is_finite()) && (v[0] + v[1] - 1.0).abs() <= SIMPLEX_TOL
}

impl MeanMatchInput {
    /// `m1[row][col]`; every column and `mu2` must lie on the simplex.
    pub fn new(m1: [[f64; 2]; 2], mu2: [f64; 2]) -> Result<Self> {
        for c in 0..2 {
            if !on_simplex([m1[0][c], m1[1][c]]) {
                return Err(Error::Contract(format!(
                    "mean-matching column {c} must be nonnegative and sum to 1"
                )));
            }
        }
        if !on_simplex(mu2) {
            return Err(Error::Contract("target mean must sum to 1".into()));
        }
        Ok(Self { m1, mu2 })
    }

    pub fn from_predictions(src_prob: &[f64], src_a: &[u8], tgt_prob: &[f64]) -> Result<Self> {
        if src_prob.len() != src_a.len() {
            return Err(Error::Contract("source probabilities and attributes differ in length".into()));
        }
        if tgt_prob.is_empty() {
            return Err(Error::Contract("mean matching needs target rows".into()));
        }
        let mut sum = [0.0; 2];
        let mut count = [0usize; 2];
        for (&p, &a) in src_prob.iter().zip(src_a) {
            let k = usize::from(a == 1);
            sum[k] += p;
            count[k] += 1;
        }
        if count.contains(&0) {
            return Err(Error::Contract(
                "mean matching needs both attribute values in the source".into(),
            ));
        }
        let p0 = sum[0] / count[0] as f64;
        let p1 = sum[1] / count[1] as f64;
        let q = tgt_prob.iter().sum::<f64>() / tgt_prob.len() as f64;
        Self::new([[1.0 - p0, 1.0 - p1], [p0, p1]], [1.0 - q, q])
    }

    pub fn m1(&self) -> [[f64; 2]; 2] {
        self.m1
    }

    pub fn mu2(&self) -> [f64; 2] {
        self.mu2
    }

    /// `||M1 w - mu2||^2`
    pub fn objective(&self, w: [f64; 2]) -> f64 {
        (0..2)
            .map(|r| (self.m1[r][0] * w[0] + self.m1[r][1] * w[1] - self.mu2[r]).powi(2))
            .sum()
    }
}

/// Least squares on the probability simplex: finds `w >= 0`, `w0 + w1 = 1`
/// minimizing `||M1 w - mu2||^2`, then derives clipped importance weights
/// `w[a] / pi_source[a]`. Equal class-conditional means leave the problem
/// unidentified; a warning is logged and `pi_source` is returned.
pub fn mean_match(mm: &MeanMatchInput, pi_source: [f64; 2]) -> Result<Proportions> {
    if !on_simplex(pi_source) || pi_source.contains(&0.0) {
        return Err(Error::Contract(format!(
            "source proportions must be positive and sum to 1, got {pi_source:?}"
        )));
    }
    // w = (1 - t, t) traces the segment from column 0 to column 1.
    let c0 = [mm.m1[0][0], mm.m1[1][0]];
    let d = [mm.m1[0][1] - c0[0], mm.m1[1][1] - c0[1]];
    let dd = d[0] * d[0] + d[1] * d[1];
    let (w, degenerate) = if dd < 1e-12 {
        warn!("mean matching is degenerate (equal class-conditional means); keeping source proportions");
        (pi_source, true)
    } else {
        let r = [c0[0] - mm.mu2[0], c0[1] - mm.mu2[1]];
        let t = (-(d[0] * r[0] + d[1] * r[1]) / dd).clamp(0.0, 1.0);
        ([1.0 - t, t], false)
    };
    let weights = [0, 1].map(|a| (w[a] / pi_source[a]).clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1));
    Ok(Proportions {
        pi_source,
        pi_target_hat: w,
        weights,
        degenerate,
    })
}

fn source_proportions(a: &[u8]) -> Result<[f64; 2]> {
    if a.is_empty() {
        return Err(Error::Contract("empty source attributes".into()));
    }
    let p1 = a.iter().filter(|&&v| v == 1).count() as f64 / a.len() as f64;
    Ok([1.0 - p1, p1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub alpha: f64,
    pub schedule: Schedule,
    /// Feed mean-matched importance weights into the attribute loss.
    pub importance_weighting: bool,
    pub refresh_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            schedule: Schedule::default(),
            importance_weighting: true,
            refresh_every: DEFAULT_REFRESH_EVERY,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh interval must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub model: Stage1Model,
    pub estimate: AttributeEstimate,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_source_accuracy: f64,
    pub history: Vec<Stage1Losses>,
}

/// Re-estimates target proportions with the current model. Source
/// class-conditional means come from the held-out source split.
pub fn refresh_proportions(
    model: &Stage1Model,
    src_eval: &Dataset,
    tgt: &Dataset,
    pi_source: [f64; 2],
) -> Result<Proportions> {
    let mm = MeanMatchInput::from_predictions(
        &model.attribute_probs(&src_eval.x)?,
        src_eval.attributes()?,
        &model.attribute_probs(&tgt.x)?,
    )?;
    mean_match(&mm, pi_source)
}

/// Trains stage one with early stopping on held-out source attribute
/// accuracy, refreshing target proportions every `refresh_every` epochs.
/// The returned estimate covers the rows of `tgt`.
pub fn run_stage1(
    src_train: &Dataset,
    src_eval: &Dataset,
    tgt: &Dataset,
    config: &Stage1Config,
    seed: u64,
) -> Result<Stage1Outcome> {
    config.validate()?;
    let pi_source = source_proportions(src_train.attributes()?)?;
    let eval_a = src_eval.attributes()?;
    let mut model = Stage1Model::new(src_train.d(), config.alpha, seed)?;
    model.proportions = Proportions::unshifted(pi_source);
    let mut opt = RmsProp::new(config.schedule.lr);
    let mut sampler = Stage1Sampler::new(seed);

    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    for epoch in 0..config.schedule.max_epochs {
        if epoch > 0 && epoch % config.refresh_every == 0 {
            model.proportions = refresh_proportions(&model, src_eval, tgt, pi_source)?;
        }
        let weights = config.importance_weighting.then_some(model.proportions.weights);
        let losses = stage1_epoch(
            &mut model,
            src_train,
            tgt,
            &mut opt,
            weights,
            &mut sampler,
            config.schedule.batch_size,
        )?;
        history.push(losses);
        let acc = accuracy(&hard_label(&model.attribute_probs(&src_eval.x)?, 0.5), eval_a)?;
        debug!(
            "stage1 epoch {epoch}: L_A={:.4} L_d={:.4} source-eval acc={acc:.4}",
            losses.attribute, losses.domain
        );
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.schedule.patience {
            break;
        }
    }
    best.proportions = refresh_proportions(&best, src_eval, tgt, pi_source)?;
    let estimate = estimate_attributes(&best, tgt)?;
    Ok(Stage1Outcome {
        model: best,
        estimate,
        best_epoch,
        epochs_run: history.len(),
        best_source_accuracy: best_acc,
        history,
    })
}
