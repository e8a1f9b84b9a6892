//! The active-learning loop: seed labeling, select → annotate → fine-tune
//! rounds, evaluation, the ablation grid and results persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{generate_dataset, load_dataset, Dataset, DatasetSpec, Oracle};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LabeledRef, LossConfig};
use crate::model::{Adam, AdamConfig, ArchConfig, ModelParams};
use crate::query::{
    entropy_score, image_feature, select_batch, uncertainty_score, SamplePool, SampleScore, SampleSummary,
    SelectionRecord, Strategy,
};
use crate::seed;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Tags for the independent random streams of one experiment.
mod stream {
    pub const INIT: u64 = 1;
    pub const SEED_SET: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const UNLABELED: u64 = 4;
    pub const SELECT: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generate in memory from a spec.
    Spec(DatasetSpec),
    /// Load a dataset directory written by `save_dataset`.
    Path(PathBuf),
}

impl DatasetSource {
    pub fn resolve(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Spec(spec) => generate_dataset(spec),
            DatasetSource::Path(p) => load_dataset(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ALConfig {
    pub schema_version: u32,
    pub rounds: usize,
    pub budget: usize,
    pub initial_labeled: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub strategy: Strategy,
    pub dataset: DatasetSource,
    pub seed: u64,
    pub eval_threshold: f64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            rounds: 5,
            budget: 10,
            initial_labeled: 10,
            epochs_per_round: 5,
            batch_size: 4,
            lr: 5e-3,
            loss: LossConfig::default(),
            strategy: Strategy::Ours,
            dataset: DatasetSource::Spec(DatasetSpec::default()),
            seed: 0,
            eval_threshold: 0.5,
        }
    }
}

impl ALConfig {
    /// Checks everything that does not need the dataset; `n_train` is
    /// checked when known.
    pub fn validate(&self, n_train: Option<usize>) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.schema_version,
                supported: CONFIG_SCHEMA_VERSION,
            });
        }
        let mut bad = Vec::new();
        if self.budget < 1 {
            bad.push("budget must be >= 1".to_string());
        }
        if self.initial_labeled < 1 {
            bad.push("initial_labeled must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            bad.push(format!("eval_threshold must be in (0, 1), got {}", self.eval_threshold));
        }
        if let Err(Error::Validation(v)) = self.loss.validate() {
            bad.extend(v);
        }
        let n_train = match &self.dataset {
            DatasetSource::Spec(spec) => {
                if let Err(Error::Validation(v)) = spec.validate() {
                    bad.extend(v.into_iter().map(|m| format!("dataset.spec.{m}")));
                }
                Some(spec.n_train)
            }
            DatasetSource::Path(_) => n_train,
        };
        if let Some(n) = n_train {
            let need = self.initial_labeled.saturating_add(self.rounds.saturating_mul(self.budget));
            if need > n {
                bad.push(format!(
                    "initial_labeled + rounds * budget = {need} exceeds the training pool of {n}"
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if let Some(v) = version.filter(|&v| v != CONFIG_SCHEMA_VERSION as u64) {
            return Err(Error::UnsupportedVersion {
                found: v as u32,
                supported: CONFIG_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round_index: usize,
    pub labeled_count: usize,
    pub miou: f64,
    pub dice: f64,
    /// Ids queried in this round (empty for round 0).
    pub selected_ids: Vec<usize>,
    /// Scores of the queried samples at selection time.
    pub selected: Vec<SampleSummary>,
    /// Not persisted: results files must replay byte-for-byte.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Foreground IoU and Dice of one binary prediction, 0/0 counted as 1.
pub fn mask_scores(pred: &[bool], truth: &[u8]) -> (f64, f64) {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&pi, &gi) in pred.iter().zip(truth) {
        let gi = gi != 0;
        inter += (pi && gi) as usize;
        p += pi as usize;
        g += gi as usize;
    }
    let union = p + g - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    (inter as f64 / union as f64, 2.0 * inter as f64 / (p + g) as f64)
}

/// Mean per-image (IoU, Dice) of probability maps binarized at
/// `pred >= threshold`.
pub fn evaluate_predictions<'a>(
    pairs: impl IntoIterator<Item = (&'a [f64], &'a [u8])>,
    threshold: f64,
) -> Result<(f64, f64)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let (mut iou, mut dice, mut n) = (0.0, 0.0, 0usize);
    for (pred, truth) in pairs {
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, mask has {}",
                pred.len(),
                truth.len()
            )));
        }
        let bin: Vec<bool> = pred.iter().map(|&p| p >= threshold).collect();
        let (i, d) = mask_scores(&bin, truth);
        iou += i;
        dice += d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Usage("cannot evaluate on an empty test set".into()));
    }
    Ok((iou / n as f64, dice / n as f64))
}

/// (mIoU, Dice) of the model over `test`.
pub fn evaluate(params: &ModelParams, test: &[crate::data::Sample], threshold: f64) -> Result<(f64, f64)> {
    let preds = test
        .iter()
        .map(|s| params.predict(&s.image).map(|o| o.prediction))
        .collect::<Result<Vec<Tensor>>>()?;
    evaluate_predictions(
        preds.iter().zip(test).map(|(p, s)| (p.data(), s.mask.data.as_slice())),
        threshold,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_loss: f64,
}

/// Fine-tunes `params` in place: `epochs` seeded-shuffled passes over
/// `labeled`, each minibatch paired with an equal-size uniform draw from
/// `unlabeled`.
pub fn train_round(
    params: &mut ModelParams,
    adam: &mut Adam,
    labeled: &[LabeledRef<'_>],
    unlabeled: &[&Tensor],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainStats> {
    if labeled.is_empty() {
        return Err(Error::Usage("train_round needs a non-empty labeled set".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Usage("batch_size must be >= 1".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::SHUFFLE]));
    let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::UNLABELED]));
    let use_unlabeled = settings.loss.lambda_c != 0.0 && !unlabeled.is_empty();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut stats = TrainStats::default();
    let mut loss_sum = 0.0;
    for _ in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<LabeledRef<'_>> = chunk.iter().map(|&i| labeled[i]).collect();
            let unl: Vec<&Tensor> = if use_unlabeled {
                let k = chunk.len().min(unlabeled.len());
                let mut picks = index::sample(&mut unlabeled_rng, unlabeled.len(), k).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| unlabeled[i]).collect()
            } else {
                Vec::new()
            };
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let loss = total_loss(&mut tape, &vars, &batch, &unl, &settings.loss)?;
            let value = tape.value(loss.total).item();
            let grads = tape.backward(loss.total)?;
            let g: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zero(&tape, v)).collect();
            adam.step(params.tensors_mut(), &g)?;
            if !params.all_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at optimizer step {}",
                    adam.steps()
                )));
            }
            loss_sum += value;
            stats.steps += 1;
        }
    }
    if stats.steps > 0 {
        stats.mean_loss = loss_sum / stats.steps as f64;
    }
    Ok(stats)
}

/// Current-model scores for `ids`.
pub fn score_samples(params: &ModelParams, dataset: &Dataset, ids: impl IntoIterator<Item = usize>) -> Result<Vec<SampleScore>> {
    ids.into_iter()
        .map(|id| {
            let sample = dataset
                .train_sample(id)
                .ok_or_else(|| Error::Lookup(format!("no training sample {id}")))?;
            let out = params.predict(&sample.image)?;
            Ok(SampleScore {
                sample_id: id,
                uncertainty: uncertainty_score(&out.features, &out.prediction)?,
                entropy: entropy_score(&out.prediction),
                image_feature: image_feature(&out.features)?,
            })
        })
        .collect()
}

/// The seed set: `initial_labeled` training ids drawn uniformly from the
/// pool. Depends on the seed only, so every strategy starts from it.
pub fn initial_ids(dataset: &Dataset, count: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = dataset.train.iter().map(|s| s.sample_id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::SEED_SET])));
    ids.truncate(count);
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    /// Curve name: the strategy, or the ablation variant.
    pub label: String,
    pub config: ALConfig,
    pub dataset_checksum: String,
    pub rounds: Vec<RoundMetrics>,
}

impl ExperimentResult {
    pub fn final_round(&self) -> &RoundMetrics {
        self.rounds.last().expect("at least round 0")
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != RESULTS_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: RESULTS_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    /// `results_<label>_seed<seed>.json` with the label made file-safe.
    pub fn file_name(&self) -> String {
        let slug: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        format!("results_{slug}_seed{}.json", self.config.seed)
    }

    /// Writes through a temporary file and a rename so readers never see a
    /// partial result.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        write_atomic(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs one experiment on an already resolved dataset. `on_round` sees each
/// checkpoint as soon as it is evaluated.
pub fn run_experiment_on(
    cfg: &ALConfig,
    label: &str,
    dataset: &Dataset,
    on_round: &mut dyn FnMut(&RoundMetrics),
) -> Result<ExperimentResult> {
    cfg.validate(Some(dataset.train.len()))?;
    let oracle = Oracle::new(dataset);
    let mut params = ModelParams::init(&ArchConfig::default(), seed::derive(cfg.seed, &[stream::INIT]));
    let mut adam = Adam::new(cfg.adam(), params.tensors());
    let mut pool = SamplePool::new(dataset.train.iter().map(|s| s.sample_id));
    let mut targets: Vec<Option<(usize, Vec<f64>)>> = Vec::new();
    let annotate = |ids: &[usize], pool: &mut SamplePool, targets: &mut Vec<_>| -> Result<()> {
        pool.mark_labeled(ids)?;
        for &id in ids {
            targets.push(Some((id, oracle.annotate(id)?.to_target())));
        }
        Ok(())
    };

    let mut rounds = Vec::with_capacity(cfg.rounds + 1);
    for r in 0..=cfg.rounds {
        let started = Instant::now();
        let mut selected = Vec::new();
        let mut summaries = Vec::new();
        if r == 0 {
            let ids = initial_ids(dataset, cfg.initial_labeled, cfg.seed);
            annotate(&ids, &mut pool, &mut targets)?;
        } else {
            let unlabeled = score_samples(&params, dataset, pool.unlabeled().iter().copied())?;
            let labeled = if cfg.strategy == Strategy::Coreset {
                score_samples(&params, dataset, pool.labeled().iter().copied())?
            } else {
                Vec::new()
            };
            let ids = select_batch(
                cfg.strategy,
                &unlabeled,
                &labeled,
                cfg.budget,
                seed::derive(cfg.seed, &[stream::SELECT, r as u64]),
            )?;
            let picked: Vec<SampleScore> = unlabeled.into_iter().filter(|s| ids.binary_search(&s.sample_id).is_ok()).collect();
            summaries = SelectionRecord::new(r, cfg.strategy, ids.clone(), &picked).per_sample;
            annotate(&ids, &mut pool, &mut targets)?;
            selected = ids;
        }

        let flat: Vec<(usize, Vec<f64>)> = targets.iter().flatten().cloned().collect();
        let labeled: Vec<LabeledRef<'_>> = flat
            .iter()
            .map(|(id, t)| LabeledRef {
                image: &dataset.train_sample(*id).expect("labeled ids come from the pool").image,
                target: t,
            })
            .collect();
        let unlabeled: Vec<&Tensor> = pool
            .unlabeled()
            .iter()
            .map(|&id| &dataset.train_sample(id).expect("pool id").image)
            .collect();
        // The discrepancy term joins at the first query round so that every
        // variant shares the same warm start on the seed set.
        let loss = if r == 0 {
            LossConfig {
                lambda_c: 0.0,
                ..cfg.loss
            }
        } else {
            cfg.loss
        };
        let settings = TrainSettings {
            epochs: cfg.epochs_per_round,
            batch_size: cfg.batch_size,
            loss,
        };
        train_round(
            &mut params,
            &mut adam,
            &labeled,
            &unlabeled,
            &settings,
            seed::derive(cfg.seed, &[r as u64]),
        )?;
        let (miou, dice) = evaluate(&params, &dataset.test, cfg.eval_threshold)?;
        let metrics = RoundMetrics {
            round_index: r,
            labeled_count: pool.labeled().len(),
            miou,
            dice,
            selected_ids: selected,
            selected: summaries,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_round(&metrics);
        rounds.push(metrics);
    }
    Ok(ExperimentResult {
        schema_version: RESULTS_SCHEMA_VERSION,
        label: label.to_string(),
        config: cfg.clone(),
        dataset_checksum: dataset.checksum(),
        rounds,
    })
}

/// Validates, resolves the dataset and runs.
pub fn run_experiment(cfg: &ALConfig) -> Result<ExperimentResult> {
    cfg.validate(None)?;
    let dataset = cfg.dataset.resolve()?;
    run_experiment_on(cfg, cfg.strategy.name(), &dataset, &mut |_| {})
}

/// One component of the method removed at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoUncertainty,
    NoClustering,
    NoDiscrepancy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoUncertainty,
        Variant::NoClustering,
        Variant::NoDiscrepancy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "ours",
            Variant::NoUncertainty => "w/o UNC",
            Variant::NoClustering => "w/o CLU",
            Variant::NoDiscrepancy => "w/o DIS",
        }
    }

    pub fn configure(self, base: &ALConfig, seed: u64) -> ALConfig {
        let mut cfg = ALConfig {
            seed,
            strategy: Strategy::Ours,
            ..base.clone()
        };
        match self {
            Variant::Full => {}
            Variant::NoUncertainty => cfg.strategy = Strategy::PureKmeans,
            Variant::NoClustering => cfg.strategy = Strategy::UncertaintyTopB,
            Variant::NoDiscrepancy => cfg.loss.lambda_c = 0.0,
        }
        cfg
    }
}

/// Every (variant, seed) cell of the ablation grid, variant-major.
pub fn ablation_cells(base: &ALConfig, seeds: &[u64]) -> Vec<(Variant, ALConfig)> {
    Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, v.configure(base, s))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// One mIoU curve per seed, in seed order.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub labeled_counts: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Groups results by label (in [`Variant::ALL`] order) and averages over
    /// seeds.
    pub fn from_results(results: &[ExperimentResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Usage("no ablation results to tabulate".into()))?;
        let labeled_counts: Vec<usize> = first.rounds.iter().map(|m| m.labeled_count).collect();
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let mut mine: Vec<&ExperimentResult> = results.iter().filter(|r| r.label == v.label()).collect();
            mine.sort_by_key(|r| r.config.seed);
            if mine.is_empty() {
                return Err(Error::Usage(format!("no results for variant {}", v.label())));
            }
            let per_seed: Vec<Vec<f64>> = mine.iter().map(|r| r.rounds.iter().map(|m| m.miou).collect()).collect();
            if per_seed.iter().any(|c| c.len() != labeled_counts.len()) {
                return Err(Error::Usage("ablation runs disagree on the number of rounds".into()));
            }
            let n = per_seed.len() as f64;
            let mean = (0..labeled_counts.len())
                .map(|j| per_seed.iter().map(|c| c[j]).sum::<f64>() / n)
                .collect();
            rows.push(AblationRow {
                label: v.label().to_string(),
                per_seed,
                mean,
            });
        }
        Ok(AblationTable { labeled_counts, rows })
    }

    /// `variant,<count>,<count>,...` header then one row of mean mIoU per
    /// variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        for c in &self.labeled_counts {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.label);
            for v in &row.mean {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Sequential ablation over `seeds`.
pub fn run_ablation(base: &ALConfig, seeds: &[u64]) -> Result<(AblationTable, Vec<ExperimentResult>)> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    base.validate(None)?;
    let dataset = base.dataset.resolve()?;
    let results = ablation_cells(base, seeds)
        .into_iter()
        .map(|(v, cfg)| run_experiment_on(&cfg, v.label(), &dataset, &mut |_| {}))
        .collect::<Result<Vec<_>>>()?;
    Ok((AblationTable::from_results(&results)?, results))
}

pub const AGGREGATE_HEADER: &str = "strategy,seed,round,labeled_count,miou,dice";

/// One row per (run, round), runs in the given order.
pub fn aggregate_csv(results: &[ExperimentResult]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for r in results {
        for m in &r.rounds {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.label, r.config.seed, m.round_index, m.labeled_count, m.miou, m.dice
            )
            .unwrap();
        }
    }
    s
}

/// Every `results_*.json` under `dir`, sorted by file name.
pub fn load_results_dir(dir: &Path) -> Result<Vec<ExperimentResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("results_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ExperimentResult::from_json(&text)
        })
        .collect()
}
