//! End-to-end runs: data preparation, both stages, evaluation and sweeps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    estimate_attributes, run_stage1, stage1_epoch, AttributeEstimate, Stage1Config, Stage1Model,
    Stage1Sampler, DEFAULT_REFRESH_EVERY,
};
use crate::data::{
    builtin_experiments, find_experiment, prepare_splits, DomainTables, FeatureSchema,
    PreparedSplits,
};
use crate::debias::{
    predict, run_stage2, stage2_epoch, train_vanilla, Prediction, Stage2Config, Stage2Model,
    DEFAULT_SELECTION_WEIGHT,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, aggregate, Aggregate, MeanStd, MetricsReport};
use crate::optim::{RmsProp, Schedule, DEFAULT_LR};
use crate::{seeded_rng, streams};

/// Printed with every report: the tradeoff coefficients are chosen here, not
/// taken from a published configuration.
pub const COEFFICIENT_NOTE: &str =
    "alpha and beta default to 0.01 (middle of the range reported to work well); override per run";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Domain-adapted attribute estimates and adversarial debiasing.
    Full,
    /// Attribute classifier trained on the source only, then debiasing.
    NoDa,
    /// Full stage one, but stage two without the adversary.
    NoDebias,
    /// Label classifier alone.
    Vanilla,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoDa, Variant::NoDebias, Variant::Vanilla];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDa => "no-da",
            Variant::NoDebias => "no-debias",
            Variant::Vanilla => "vanilla",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected full, no-da, no-debias or vanilla)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub experiment: u32,
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Importance-weight the attribute loss with mean-matched proportions.
    pub mean_match: bool,
    pub refresh_every: usize,
    pub selection_weight: f64,
    /// Extra epochs alternating both stages after sequential training.
    pub joint_finetune_epochs: usize,
    pub output: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            experiment: 1,
            variant: Variant::Full,
            alpha: 0.01,
            beta: 0.01,
            lr: DEFAULT_LR,
            batch_size: s.batch_size,
            max_epochs: s.max_epochs,
            patience: s.patience,
            seeds: (0..5).collect(),
            mean_match: true,
            refresh_every: DEFAULT_REFRESH_EVERY,
            selection_weight: DEFAULT_SELECTION_WEIGHT,
            joint_finetune_epochs: 0,
            output: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.experiment) {
            return Err(Error::UnsupportedExperiment(self.experiment));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.stage1().validate()?;
        self.stage2().validate()
    }

    /// Stage-one settings after applying the variant.
    pub fn stage1(&self) -> Stage1Config {
        let adapt = self.variant != Variant::NoDa;
        Stage1Config {
            alpha: if adapt { self.alpha } else { 0.0 },
            schedule: self.schedule(),
            importance_weighting: adapt && self.mean_match,
            refresh_every: self.refresh_every,
        }
    }

    /// Stage-two settings after applying the variant.
    pub fn stage2(&self) -> Stage2Config {
        let debias = !matches!(self.variant, Variant::NoDebias | Variant::Vanilla);
        Stage2Config {
            beta: if debias { self.beta } else { 0.0 },
            schedule: self.schedule(),
            selection_weight: if debias { self.selection_weight } else { 0.0 },
        }
    }
}

/// Stage-one diagnostics for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDiagnostics {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub source_eval_accuracy: f64,
    pub pi_source: [f64; 2],
    pub pi_target_hat: [f64; 2],
    pub weights: [f64; 2],
    /// Agreement of estimated with true target-train attributes.
    pub agreement: f64,
    /// Share of the larger true group in target train.
    pub majority_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub test: MetricsReport,
    pub label_best_epoch: usize,
    pub label_epochs_run: usize,
    pub attributes: Option<AttributeDiagnostics>,
}

/// Everything one seed produced, including test predictions.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub record: SeedRecord,
    pub prediction: Prediction,
    pub estimate: Option<AttributeEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: u32,
    pub experiment_name: String,
    pub note: String,
    pub config: TrainConfig,
    pub seeds: Vec<SeedRecord>,
    pub aggregate: Aggregate,
    pub attribute_agreement: Option<MeanStd>,
    /// Not serialized, so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn joint_finetune(
    s1: &mut Stage1Model,
    s2: &mut Stage2Model,
    splits: &PreparedSplits,
    config: &TrainConfig,
    seed: u64,
) -> Result<()> {
    let weights = config.stage1().importance_weighting.then_some(s1.proportions.weights);
    let mut opt1 = RmsProp::new(config.lr);
    let mut opt2 = RmsProp::new(config.lr);
    let mut sampler = Stage1Sampler::new(seed.wrapping_add(1));
    let mut rng = seeded_rng(seed.wrapping_add(1), streams::STAGE2_SHUFFLE);
    for _ in 0..config.joint_finetune_epochs {
        stage1_epoch(
            s1,
            &splits.source_train,
            &splits.target_train,
            &mut opt1,
            weights,
            &mut sampler,
            config.batch_size,
        )?;
        let est = estimate_attributes(s1, &splits.target_train)?;
        stage2_epoch(s2, &splits.target_train, &est, &mut opt2, &mut rng, config.batch_size)?;
    }
    Ok(())
}

/// Runs one seed on already prepared splits.
pub fn run_on_splits(splits: &PreparedSplits, config: &TrainConfig, seed: u64) -> Result<SeedOutcome> {
    let test = &splits.target_test;
    if config.variant == Variant::Vanilla {
        let v = train_vanilla(&splits.target_train, &splits.target_eval, &config.schedule(), seed)?;
        let prediction = v.classifier.predict(&test.x)?;
        return Ok(SeedOutcome {
            record: SeedRecord {
                seed,
                test: MetricsReport::evaluate(&prediction.labels, &test.y, splits.sealed_test.reveal())?,
                label_best_epoch: v.best_epoch,
                label_epochs_run: v.epochs_run,
                attributes: None,
            },
            prediction,
            estimate: None,
        });
    }

    let s1 = run_stage1(
        &splits.source_train,
        &splits.source_eval,
        &splits.target_train,
        &config.stage1(),
        seed,
    )?;
    let eval_est = estimate_attributes(&s1.model, &splits.target_eval)?;
    let s2 = run_stage2(
        &splits.target_train,
        &splits.target_eval,
        &s1.estimate,
        &eval_est,
        &config.stage2(),
        seed,
    )?;
    let mut label_model = s2.model;
    let mut attr_model = s1.model;
    if config.joint_finetune_epochs > 0 {
        joint_finetune(&mut attr_model, &mut label_model, splits, config, seed)?;
    }
    let prediction = predict(&label_model, &test.x)?;

    let truth = splits.sealed_train.reveal();
    let ones = truth.iter().filter(|&&a| a == 1).count() as f64 / truth.len() as f64;
    let p = &attr_model.proportions;
    let attributes = AttributeDiagnostics {
        best_epoch: s1.best_epoch,
        epochs_run: s1.epochs_run,
        source_eval_accuracy: s1.best_source_accuracy,
        pi_source: p.pi_source,
        pi_target_hat: p.pi_target_hat,
        weights: p.weights,
        agreement: accuracy(&s1.estimate.a_hat, truth)?,
        majority_rate: ones.max(1.0 - ones),
    };
    Ok(SeedOutcome {
        record: SeedRecord {
            seed,
            test: MetricsReport::evaluate(&prediction.labels, &test.y, splits.sealed_test.reveal())?,
            label_best_epoch: s2.best_epoch,
            label_epochs_run: s2.epochs_run,
            attributes: Some(attributes),
        },
        prediction,
        estimate: Some(s1.estimate),
    })
}

/// Splits and runs one seed.
pub fn run_seed(
    tables: &DomainTables,
    schema: &FeatureSchema,
    config: &TrainConfig,
    seed: u64,
) -> Result<SeedOutcome> {
    let splits = prepare_splits(tables, schema, seed)?;
    run_on_splits(&splits, config, seed)
}

/// Runs every configured seed (in parallel) on loaded tables.
pub fn run_seeds(
    tables: &DomainTables,
    schema: &FeatureSchema,
    config: &TrainConfig,
) -> Result<Vec<SeedOutcome>> {
    config.validate()?;
    config
        .seeds
        .par_iter()
        .map(|&s| run_seed(tables, schema, config, s))
        .collect()
}

/// Builds the record for finished seeds.
pub fn assemble(
    name: &str,
    config: &TrainConfig,
    outcomes: &[SeedOutcome],
    wall_clock_secs: f64,
) -> Result<RunRecord> {
    let seeds: Vec<SeedRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let reports: Vec<MetricsReport> = seeds.iter().map(|s| s.test.clone()).collect();
    let agreement: Vec<f64> = seeds
        .iter()
        .filter_map(|s| s.attributes.as_ref().map(|a| a.agreement))
        .collect();
    Ok(RunRecord {
        experiment: config.experiment,
        experiment_name: name.to_string(),
        note: COEFFICIENT_NOTE.to_string(),
        config: config.clone(),
        aggregate: aggregate(&reports)?,
        attribute_agreement: if agreement.is_empty() {
            None
        } else {
            Some(MeanStd::of(&agreement)?)
        },
        seeds,
        wall_clock_secs,
    })
}

/// Loads the configured experiment from `data_root` and runs it.
pub fn run_experiment(config: &TrainConfig, data_root: &Path) -> Result<RunRecord> {
    config.validate()?;
    let spec = find_experiment(&builtin_experiments(), config.experiment)?;
    let tables = spec.load_tables(data_root)?;
    run_loaded(&spec.name, &tables, &spec.schema(), config)
}

pub fn run_loaded(
    name: &str,
    tables: &DomainTables,
    schema: &FeatureSchema,
    config: &TrainConfig,
) -> Result<RunRecord> {
    let start = Instant::now();
    let outcomes = run_seeds(tables, schema, config)?;
    let elapsed = start.elapsed().as_secs_f64();
    info!(
        "experiment {} variant {} finished {} seeds in {elapsed:.1}s",
        config.experiment,
        config.variant,
        outcomes.len()
    );
    assemble(name, config, &outcomes, elapsed)
}

/// One record per (alpha, beta) cell, row-major in alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub records: Vec<Vec<RunRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Acc,
    F1,
    DpGap,
    EoGap,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Acc, Metric::F1, Metric::DpGap, Metric::EoGap];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::F1 => "f1",
            Metric::DpGap => "dp_gap",
            Metric::EoGap => "eo_gap",
        }
    }

    pub fn of(self, a: &Aggregate) -> MeanStd {
        match self {
            Metric::Acc => a.acc,
            Metric::F1 => a.f1,
            Metric::DpGap => a.dp_gap,
            Metric::EoGap => a.eo_gap,
        }
    }
}

impl SweepResult {
    /// Mean of `metric` per cell; rows are alphas, columns betas.
    pub fn matrix(&self, metric: Metric) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|row| row.iter().map(|r| metric.of(&r.aggregate).mean).collect())
            .collect()
    }

    pub fn matrix_csv(&self, metric: Metric) -> String {
        let mut out = String::from("alpha\\beta");
        for b in &self.betas {
            out.push_str(&format!(",{b}"));
        }
        out.push('\n');
        for (a, row) in self.alphas.iter().zip(self.matrix(metric)) {
            out.push_str(&a.to_string());
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `config` once per (alpha, beta) pair.
pub fn run_sweep(
    config: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    data_root: &Path,
) -> Result<SweepResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    config.validate()?;
    let spec = find_experiment(&builtin_experiments(), config.experiment)?;
    let tables = spec.load_tables(data_root)?;
    let schema = spec.schema();
    let mut records = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut row = Vec::with_capacity(betas.len());
        for &beta in betas {
            let cell = TrainConfig {
                alpha,
                beta,
                ..config.clone()
            };
            row.push(run_loaded(&spec.name, &tables, &schema, &cell)?);
        }
        records.push(row);
    }
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("fair".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.lr, c.batch_size), (0.01, 0.01, 0.001, 64));
        assert_eq!((c.max_epochs, c.patience), (200, 20));
        assert_eq!(c.seeds.len(), 5);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn variants_adjust_stage_settings() {
        let base = TrainConfig {
            alpha: 0.3,
            beta: 0.7,
            ..TrainConfig::default()
        };
        let with = |variant| TrainConfig { variant, ..base.clone() };
        assert_eq!(with(Variant::Full).stage1().alpha, 0.3);
        assert_eq!(with(Variant::Full).stage2().beta, 0.7);
        assert_eq!(with(Variant::NoDa).stage1().alpha, 0.0);
        assert!(!with(Variant::NoDa).stage1().importance_weighting);
        assert_eq!(with(Variant::NoDa).stage2().beta, 0.7);
        let nd = with(Variant::NoDebias).stage2();
        assert_eq!((nd.beta, nd.selection_weight), (0.0, 0.0));
    }

    #[test]
    fn invalid_configs() {
        let bad = |c: TrainConfig| c.validate().is_err();
        assert!(bad(TrainConfig { experiment: 5, ..TrainConfig::default() }));
        assert!(bad(TrainConfig { seeds: vec![], ..TrainConfig::default() }));
        assert!(bad(TrainConfig { alpha: -1.0, ..TrainConfig::default() }));
        assert!(bad(TrainConfig { beta: f64::NAN, ..TrainConfig::default() }));
        assert!(TrainConfig::from_toml("variant = \"fair\"").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 0.1").is_err());
    }

    #[test]
    fn toml_overrides() {
        let c = TrainConfig::from_toml("experiment = 3\nvariant = \"no-da\"\nseeds = [7]\n").unwrap();
        assert_eq!(c.experiment, 3);
        assert_eq!(c.variant, Variant::NoDa);
        assert_eq!(c.seeds, [7]);
        assert_eq!(c.beta, 0.01);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let c = TrainConfig::default();
        assert!(matches!(
            run_sweep(&c, &[], &[0.1], Path::new("/nonexistent")),
            Err(Error::Config(_))
        ));
    }
}
