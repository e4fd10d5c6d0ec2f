//! End-to-end co-design runs.
//!
//! Per fold: normalize, train the gated classifier, then for every gate
//! threshold `tau` freeze the gates, prune and retrain, quantize, evaluate on
//! the held-out subjects through both feature paths and cost the resulting
//! system. The candidate designs of a fold are reduced to their
//! accuracy-area Pareto front.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adc::AdcConfig;
use crate::analog::{self, AnalogConfig};
use crate::error::{Error, Result};
use crate::gating::{GammaSchedule, GateLayer};
use crate::hwcost::{self, CostLut, CostReport};
use crate::mlp::{self, Checkpoint, Examples, FeaturePath, MlpModel, TrainConfig, TrainHistory};
use crate::prune::{self, RoundMetrics, SparsitySchedule};
use crate::rng::{self, derive_seed};
use crate::signal::{self, CsvSchema, Dataset, FeatureId, FeatureKind, SyntheticSpec, Window, WindowSet};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub lambda: f64,
    pub warmup_epochs: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            lambda: 1e-2,
            warmup_epochs: 5,
        }
    }
}

/// Random search over `lambda` and the final temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Number of trials; 0 skips tuning and uses `gates.lambda` and
    /// `gamma.gamma_end` as given.
    pub trials: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gamma_end_min: f64,
    pub gamma_end_max: f64,
    /// Weight of the normalized expected cost in the trial score.
    pub mu: f64,
    /// Training epochs per trial; `None` uses `train.epochs`.
    pub epochs: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            trials: 0,
            lambda_min: 1e-5,
            lambda_max: 1e-1,
            gamma_end_min: 0.05,
            gamma_end_max: 1.0,
            mu: 0.2,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub target: f64,
    /// Rounds of the geometric schedule; 0 disables pruning.
    pub rounds: usize,
    /// Explicit per-round sparsities, overriding `target` and `rounds`.
    pub steps: Option<Vec<f64>>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target: 0.5,
            rounds: 3,
            steps: None,
        }
    }
}

impl PruneConfig {
    pub fn schedule(&self) -> Result<Option<SparsitySchedule>> {
        if let Some(steps) = &self.steps {
            let s = SparsitySchedule {
                steps: steps.clone(),
            };
            s.validate()?;
            return Ok(Some(s));
        }
        if self.rounds == 0 {
            return Ok(None);
        }
        SparsitySchedule::geometric(self.target, self.rounds).map(Some)
    }
}

pub const DEFAULT_TAUS: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub window_s: f64,
    pub folds: usize,
    /// Run only the first `max_folds` folds.
    pub max_folds: Option<usize>,
    pub kinds: Vec<FeatureKind>,
    pub train: TrainConfig,
    pub gamma: GammaSchedule,
    pub gates: GateConfig,
    pub search: SearchConfig,
    pub taus: Vec<f64>,
    pub prune: PruneConfig,
    pub analog: AnalogConfig,
    pub adc: AdcConfig,
    /// Cost table file; the built-in placeholder table when unset.
    pub cost_lut: Option<PathBuf>,
    /// Worker threads; all cores when unset. Results do not depend on it.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSource::default(),
            window_s: 1.0,
            folds: 5,
            max_folds: None,
            kinds: FeatureKind::ALL.to_vec(),
            train: TrainConfig::default(),
            gamma: GammaSchedule::default(),
            gates: GateConfig::default(),
            search: SearchConfig::default(),
            taus: DEFAULT_TAUS.to_vec(),
            prune: PruneConfig::default(),
            analog: AnalogConfig::default(),
            adc: AdcConfig::default(),
            cost_lut: None,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses a config, first applying `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        // A data table without a source tag describes synthetic data.
        if let Some(data) = root.get_mut("data").and_then(toml::Value::as_table_mut) {
            data.entry("source")
                .or_insert_with(|| toml::Value::String("synthetic".into()));
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)
            .map_err(|e| e.context(format!("loading {}", path.display())))?;
        // Relative file references resolve against the config's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Csv { path: p, .. } = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.cost_lut {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.gamma.validate()?;
        self.analog.validate()?;
        self.adc.validate()?;
        self.prune.schedule()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("kinds must name at least one feature kind".into()));
        }
        if self.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("tau values must lie in [0, 1]".into()));
        }
        if self.taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("taus {:?} must be strictly increasing", self.taus)));
        }
        if self.taus.is_empty() {
            return Err(Error::Config("taus is empty".into()));
        }
        if self.gates.lambda < 0.0 || self.gates.lambda.is_nan() {
            return Err(Error::Config("gates.lambda must be non-negative".into()));
        }
        let s = &self.search;
        if !(0.0 < s.lambda_min && s.lambda_min <= s.lambda_max) {
            return Err(Error::Config("search needs 0 < lambda_min <= lambda_max".into()));
        }
        if !(0.0 < s.gamma_end_min && s.gamma_end_min <= s.gamma_end_max) {
            return Err(Error::Config("search needs 0 < gamma_end_min <= gamma_end_max".into()));
        }
        if s.gamma_end_max > self.gamma.gamma_start {
            return Err(Error::Config("search.gamma_end_max exceeds gamma.gamma_start".into()));
        }
        if self.max_folds == Some(0) {
            return Err(Error::Config("max_folds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lut(&self) -> Result<CostLut> {
        match &self.cost_lut {
            Some(p) => CostLut::load(p),
            None => Ok(CostLut::placeholder()),
        }
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => signal::generate_synthetic(spec, derive_seed(cfg.seed, 1)),
        DataSource::Csv { path, schema } => signal::load_csv(path, schema),
    }
}

// ---------------------------------------------------------------------------
// Fold preparation
// ---------------------------------------------------------------------------

/// Normalized windows and ideal-path examples of one fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub candidates: Vec<FeatureId>,
    pub costs: Vec<f64>,
    pub samples_per_window: usize,
    pub fit: Examples,
    pub val: Examples,
    pub test_windows: Vec<Window>,
    pub test: Examples,
}

fn examples(windows: &[Window], candidates: &[FeatureId]) -> Examples {
    let mut e = Examples::default();
    for w in windows {
        e.x.push(mlp::ideal_inputs(w, candidates, mlp::INPUT_BITS));
        e.y.push(w.label);
    }
    e
}

/// Builds every fold of a dataset. Normalizers are fitted on the training
/// subjects of each fold only.
pub fn prepare_folds(cfg: &RunConfig, dataset: &Dataset, lut: &CostLut) -> Result<Vec<FoldData>> {
    let windows = signal::make_windows(dataset, cfg.window_s)?;
    let plan = signal::kfold_split(dataset, cfg.folds, derive_seed(cfg.seed, 2))?;
    let candidates = signal::candidate_features(dataset.num_channels(), &cfg.kinds);
    let costs = hwcost::feature_cost_vector(&candidates, lut)?;
    let limit = cfg.max_folds.unwrap_or(plan.folds.len()).min(plan.folds.len());
    plan.folds[..limit]
        .iter()
        .enumerate()
        .map(|(f, fold)| {
            let train = windows.for_subjects(&fold.train);
            let norm = signal::fit_normalizer(&train).map_err(|e| e.context(format!("fold {f}")))?;
            let (fit_ids, val_ids) =
                signal::split_validation(&fold.train, cfg.train.val_fraction, derive_seed(cfg.seed, 100 + f as u64));
            let fit_w = norm.apply_set(&windows.for_subjects(&fit_ids));
            let val_w = norm.apply_set(&windows.for_subjects(&val_ids));
            let test_w: WindowSet = norm.apply_set(&windows.for_subjects(&fold.test));
            Ok(FoldData {
                fold: f,
                candidates: candidates.clone(),
                costs: costs.clone(),
                samples_per_window: windows.samples_per_window,
                fit: examples(&fit_w.windows, &candidates),
                val: examples(&val_w.windows, &candidates),
                test: examples(&test_w.windows, &candidates),
                test_windows: test_w.windows,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gated training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: MlpModel,
    pub layer: GateLayer,
    pub history: TrainHistory,
}

/// Trains the dense gated classifier of one fold.
pub fn train_fold(
    cfg: &RunConfig,
    data: &FoldData,
    lambda: f64,
    gamma: &GammaSchedule,
    epochs: usize,
    train_seed: u64,
) -> Result<TrainedFold> {
    let d = data.candidates.len();
    let mut model = mlp::init_model(d, cfg.train.hidden, num_classes(data), derive_seed(cfg.seed, 200 + data.fold as u64))?;
    let mut layer = GateLayer::new(data.costs.clone(), gamma.gamma_start, lambda, cfg.gates.warmup_epochs)?;
    let tcfg = TrainConfig {
        seed: train_seed,
        patience: cfg.train.patience.min(epochs),
        ..cfg.train.clone()
    };
    let schedule = GammaSchedule {
        total_epochs: epochs,
        ..gamma.clone()
    };
    let history = mlp::train(&mut model, &mut layer, &data.fit, &data.val, &tcfg, &schedule, epochs)
        .map_err(|e| e.context(format!("fold {}", data.fold)))?;
    Ok(TrainedFold {
        model,
        layer,
        history,
    })
}

fn num_classes(data: &FoldData) -> usize {
    data.fit
        .y
        .iter()
        .chain(&data.val.y)
        .chain(&data.test.y)
        .max()
        .map_or(2, |m| (m + 1).max(2))
}

// ---------------------------------------------------------------------------
// Design points
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub fold: usize,
    pub tau: f64,
    pub lambda: f64,
    pub gamma_end: f64,
    pub selected: Vec<FeatureId>,
    pub sparsity: f64,
    pub acc_ideal: f64,
    pub acc_analog: f64,
    pub cost: CostReport,
    pub realtime_ok: bool,
    pub latency_margin_ms: f64,
    pub prune_rounds: Vec<RoundMetrics>,
    pub checkpoint: String,
}

impl ParetoPoint {
    pub fn selected_count(&self) -> usize {
        self.selected.len()
    }

    pub fn area(&self) -> f64 {
        self.cost.area_mm2.total
    }
}

/// One design point plus the artifacts behind it.
#[derive(Debug, Clone)]
pub struct Design {
    pub point: ParetoPoint,
    pub checkpoint: Checkpoint,
    /// Float-weight accuracy on the ideal path, before quantization.
    pub acc_float: f64,
}

/// Freezes the gates at `tau`, prunes, quantizes, evaluates and costs.
#[allow(clippy::too_many_arguments)]
pub fn design_point(
    cfg: &RunConfig,
    data: &FoldData,
    trained: &TrainedFold,
    tau: f64,
    gamma_end: f64,
    schedule: Option<&SparsitySchedule>,
    lut: &CostLut,
    train_seed: u64,
) -> Result<Design> {
    let ctx = |e: Error| e.context(format!("fold {} tau {tau}", data.fold));
    let mut model = trained.model.clone();
    let mut layer = trained.layer.clone();
    let keep = layer.prune_gates(tau).map_err(ctx)?;
    let selected: Vec<FeatureId> = data
        .candidates
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&id, _)| id)
        .collect();

    let prune_rounds = match schedule {
        Some(s) => {
            let tcfg = TrainConfig {
                seed: train_seed,
                ..cfg.train.clone()
            };
            prune::ltp_run(&mut model, &mut layer, &data.fit, &data.val, s, &tcfg).map_err(ctx)?
        }
        None => Vec::new(),
    };
    let sparsity = model.mask().sparsity();
    let gates = layer.deterministic_gates();
    let acc_float = mlp::evaluate_examples(&model, &gates, &data.test).map_err(ctx)?.accuracy;

    let mut q = mlp::quantize_weights(&model, mlp::WEIGHT_BITS).map_err(ctx)?;
    deploy_mask(&mut q, &keep);
    let acc_ideal = mlp::evaluate_examples(&q, &gates, &data.test).map_err(ctx)?.accuracy;
    let analog_path = FeaturePath::Analog {
        analog: cfg.analog.clone(),
        adc: cfg.adc.clone(),
    };
    let acc_analog = mlp::evaluate(&q, &layer, &data.test_windows, &data.candidates, &analog_path)
        .map_err(ctx)?
        .accuracy;

    let cost = hwcost::system_cost(&selected, &q, &cfg.adc, lut, cfg.window_s).map_err(ctx)?;
    let rt = hwcost::realtime_check(&cost, lut.timing.budget_ms, cfg.window_s);
    let checkpoint = format!("checkpoints/fold{}_tau{}.json", data.fold, tau);
    let point = ParetoPoint {
        fold: data.fold,
        tau,
        lambda: layer.lambda,
        gamma_end,
        selected,
        sparsity,
        acc_ideal,
        acc_analog,
        cost,
        realtime_ok: rt.ok,
        latency_margin_ms: rt.margin_ms,
        prune_rounds,
        checkpoint,
    };
    Ok(Design {
        point,
        checkpoint: Checkpoint::new(data.candidates.clone(), model, layer, Some(q)),
        acc_float,
    })
}

/// Drops the hardware for gated-off inputs: their first-layer weights are
/// masked and zeroed.
fn deploy_mask(q: &mut mlp::QuantizedModel, keep: &[bool]) {
    let h = q.arch.hidden;
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            for j in i * h..(i + 1) * h {
                q.mask.w1[j] = false;
                q.w1.q[j] = 0;
            }
        }
    }
    for (c, &k) in q.w1.q.iter_mut().zip(&q.mask.w1) {
        if !k {
            *c = 0;
        }
    }
    for (c, &k) in q.w2.q.iter_mut().zip(&q.mask.w2) {
        if !k {
            *c = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Pareto front
// ---------------------------------------------------------------------------

fn dominates(q: &ParetoPoint, p: &ParetoPoint) -> bool {
    q.acc_ideal >= p.acc_ideal && q.area() <= p.area() && (q.acc_ideal > p.acc_ideal || q.area() < p.area())
}

/// Points not dominated in (accuracy up, total area down). Input order is
/// preserved and exact ties are all kept.
pub fn pareto_filter(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p)))
        .cloned()
        .collect()
}

/// [`pareto_filter`] applied to each fold separately.
pub fn pareto_per_fold(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut folds: Vec<usize> = points.iter().map(|p| p.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    folds
        .into_iter()
        .flat_map(|f| {
            let of: Vec<ParetoPoint> = points.iter().filter(|p| p.fold == f).cloned().collect();
            pareto_filter(&of)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Hyperparameter search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub lambda: f64,
    pub gamma_end: f64,
    pub val_accuracy: f64,
    /// `cost_loss / sum(costs)`, in `[0, 1]`.
    pub expected_cost: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

fn log_uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (r.gen_range(lo.ln()..hi.ln())).exp()
}

/// Highest score wins; ties go to the lower cost, then the earlier trial.
pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials.iter().reduce(|best, t| {
        let better = t.score > best.score || (t.score == best.score && t.expected_cost < best.expected_cost);
        if better {
            t
        } else {
            best
        }
    })
}

/// Seeded random search over `(lambda, gamma_end)` on the first fold,
/// scoring `val_accuracy - mu * expected_cost`.
pub fn tune_hyperparams(cfg: &RunConfig, data: &FoldData, trials: usize, seed: u64) -> Result<TuneResult> {
    if trials == 0 {
        return Err(Error::Usage("tuning needs at least one trial".into()));
    }
    let s = &cfg.search;
    let mut r = rng::seeded(seed);
    let samples: Vec<(f64, f64)> = (0..trials)
        .map(|_| {
            let l = log_uniform(&mut r, s.lambda_min, s.lambda_max);
            let g = log_uniform(&mut r, s.gamma_end_min, s.gamma_end_max);
            (l, g)
        })
        .collect();
    let epochs = s.epochs.unwrap_or(cfg.train.epochs);
    let total_cost: f64 = data.costs.iter().sum();
    let results: Result<Vec<Trial>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, &(lambda, gamma_end))| {
            let gamma = GammaSchedule {
                gamma_end,
                ..cfg.gamma.clone()
            };
            let t = train_fold(cfg, data, lambda, &gamma, epochs, derive_seed(seed, i as u64))?;
            let z = t.layer.deterministic_gates();
            let val_accuracy = if data.val.is_empty() {
                mlp::evaluate_examples(&t.model, &z, &data.fit)?.accuracy
            } else {
                mlp::evaluate_examples(&t.model, &z, &data.val)?.accuracy
            };
            let expected_cost = if total_cost > 0.0 {
                t.layer.cost_loss() / total_cost
            } else {
                0.0
            };
            Ok(Trial {
                index: i,
                lambda,
                gamma_end,
                val_accuracy,
                expected_cost,
                score: val_accuracy - s.mu * expected_cost,
            })
        })
        .collect();
    let trials = results?;
    let best = best_trial(&trials).cloned().expect("at least one trial");
    Ok(TuneResult { best, trials })
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNmse {
    pub feature: FeatureId,
    pub nmse: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Every candidate design, fold-major, taus in config order.
    pub designs: Vec<Design>,
    /// Per-fold Pareto fronts.
    pub pareto: Vec<ParetoPoint>,
    pub tuning: Option<TuneResult>,
    pub histories: Vec<TrainHistory>,
    /// Extractor fidelity on the first fold's test windows.
    pub analog_nmse: Vec<FeatureNmse>,
}

impl RunOutput {
    pub fn points(&self) -> Vec<ParetoPoint> {
        self.designs.iter().map(|d| d.point.clone()).collect()
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let lut = cfg.lut()?;
    let dataset = load_dataset(cfg)?;
    run_pipeline_on(cfg, &dataset, &lut)
}

/// Tunes (when `search.trials > 0`), then trains and sweeps every fold.
/// Folds and taus run in parallel; each job seeds its own generator, so the
/// output does not depend on scheduling.
pub fn run_pipeline_on(cfg: &RunConfig, dataset: &Dataset, lut: &CostLut) -> Result<RunOutput> {
    with_pool(cfg.workers, || run_inner(cfg, dataset, lut))?
}

fn run_inner(cfg: &RunConfig, dataset: &Dataset, lut: &CostLut) -> Result<RunOutput> {
    let folds = prepare_folds(cfg, dataset, lut)?;
    let schedule = cfg.prune.schedule()?;
    let tuning = if cfg.search.trials > 0 {
        Some(tune_hyperparams(cfg, &folds[0], cfg.search.trials, derive_seed(cfg.seed, 400))?)
    } else {
        None
    };
    let (lambda, gamma_end) = match &tuning {
        Some(t) => (t.best.lambda, t.best.gamma_end),
        None => (cfg.gates.lambda, cfg.gamma.gamma_end),
    };
    let gamma = GammaSchedule {
        gamma_end,
        ..cfg.gamma.clone()
    };

    let trained: Vec<TrainedFold> = folds
        .par_iter()
        .map(|f| train_fold(cfg, f, lambda, &gamma, cfg.train.epochs, derive_seed(cfg.seed, 300 + f.fold as u64)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, f64)> = (0..folds.len())
        .flat_map(|f| cfg.taus.iter().map(move |&t| (f, t)))
        .collect();
    let designs: Vec<Design> = jobs
        .par_iter()
        .map(|&(f, tau)| {
            design_point(
                cfg,
                &folds[f],
                &trained[f],
                tau,
                gamma_end,
                schedule.as_ref(),
                lut,
                derive_seed(cfg.seed, 600 + f as u64),
            )
        })
        .collect::<Result<_>>()?;

    let points: Vec<ParetoPoint> = designs.iter().map(|d| d.point.clone()).collect();
    Ok(RunOutput {
        pareto: pareto_per_fold(&points),
        designs,
        tuning,
        histories: trained.into_iter().map(|t| t.history).collect(),
        analog_nmse: analog_fidelity(&folds[0], &cfg.analog)?,
    })
}

/// NMSE between extractor estimates and software statistics per candidate,
/// both on the classifier's `[0, 1]` input scale.
pub fn analog_fidelity(data: &FoldData, cfg: &AnalogConfig) -> Result<Vec<FeatureNmse>> {
    let n = data.samples_per_window;
    let mut hw = vec![Vec::new(); data.candidates.len()];
    let mut sw = vec![Vec::new(); data.candidates.len()];
    for w in &data.test_windows {
        let bank = analog::run_extractor_bank(w, &data.candidates, cfg)?;
        for (e, v) in bank.entries.iter().zip(bank.feature_values()) {
            let i = data
                .candidates
                .iter()
                .position(|&c| c == e.id)
                .expect("bank entries come from the candidate list");
            hw[i].push(signal::model_input(e.id.kind, v, n));
            sw[i].push(signal::model_input(e.id.kind, signal::statistic(&w.samples[e.id.channel], e.id.kind), n));
        }
    }
    data.candidates
        .iter()
        .enumerate()
        .map(|(i, &feature)| {
            let nmse = if sw[i].iter().all(|&v| v == 0.0) {
                0.0
            } else {
                analog::nmse(&hw[i], &sw[i])?
            };
            Ok(FeatureNmse { feature, nmse })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Export and reporting
// ---------------------------------------------------------------------------

/// Column order of `pareto.csv`.
pub const CSV_HEADER: [&str; 18] = [
    "fold",
    "tau",
    "lambda",
    "gamma_end",
    "selected_count",
    "features",
    "sparsity",
    "acc_ideal",
    "acc_analog",
    "area_mm2_total",
    "area_mm2_features",
    "area_mm2_adc",
    "area_mm2_classifier",
    "power_mw",
    "energy_uj",
    "latency_ms",
    "realtime_ok",
    "checkpoint",
];

pub fn write_points_csv<W: std::io::Write>(points: &[ParetoPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(fmt_err)?;
    for p in points {
        let features: Vec<String> = p.selected.iter().map(|f| f.to_string()).collect();
        let c = &p.cost;
        w.write_record([
            p.fold.to_string(),
            p.tau.to_string(),
            p.lambda.to_string(),
            p.gamma_end.to_string(),
            p.selected_count().to_string(),
            features.join(";"),
            p.sparsity.to_string(),
            p.acc_ideal.to_string(),
            p.acc_analog.to_string(),
            c.area_mm2.total.to_string(),
            c.area_mm2.analog_features.to_string(),
            c.area_mm2.adc.to_string(),
            c.area_mm2.classifier.to_string(),
            c.power_mw.total.to_string(),
            c.energy_uj.total.to_string(),
            c.latency.total_ms.to_string(),
            p.realtime_ok.to_string(),
            p.checkpoint.clone(),
        ])
        .map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `pareto.csv` and `pareto.json` for `points` into `dir`.
pub fn export(points: &[ParetoPoint], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    write_points_csv(points, &mut buf)?;
    write_file(&dir.join("pareto.csv"), &buf)?;
    let json = serde_json::to_string_pretty(points).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("pareto.json"), json.as_bytes())
}

pub fn read_points_json(path: &Path) -> Result<Vec<ParetoPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes the whole run: the Pareto files, `candidates.csv`/`.json` with
/// every design, per-design checkpoints, tuning and fidelity logs and
/// `report.txt`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    export(&out.pareto, dir)?;
    let points = out.points();
    let mut buf = Vec::new();
    write_points_csv(&points, &mut buf)?;
    write_file(&dir.join("candidates.csv"), &buf)?;
    let json = serde_json::to_string_pretty(&points).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("candidates.json"), json.as_bytes())?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    for d in &out.designs {
        d.checkpoint.save(dir.join(&d.point.checkpoint))?;
    }
    if let Some(t) = &out.tuning {
        let json = serde_json::to_string_pretty(t).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&dir.join("tuning.json"), json.as_bytes())?;
    }
    let json = serde_json::to_string_pretty(&out.analog_nmse).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("analog_nmse.json"), json.as_bytes())?;
    write_file(&dir.join("report.txt"), report(&points).as_bytes())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Fold-averaged summary per tau (mean ± std across folds).
pub fn report(points: &[ParetoPoint]) -> String {
    let mut taus: Vec<f64> = points.iter().map(|p| p.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut s = String::new();
    let folds = {
        let mut f: Vec<usize> = points.iter().map(|p| p.fold).collect();
        f.sort_unstable();
        f.dedup();
        f.len()
    };
    let _ = writeln!(s, "{} design points over {} fold(s)", points.len(), folds);
    let _ = writeln!(
        s,
        "{:>6} {:>11} {:>15} {:>15} {:>15} {:>15} {:>15} {:>9} {:>8}",
        "tau", "features", "acc_ideal", "acc_analog", "area_mm2", "power_mw", "energy_uj", "lat_ms", "rt_ok"
    );
    for t in taus {
        let at: Vec<&ParetoPoint> = points.iter().filter(|p| p.tau == t).collect();
        let col = |f: &dyn Fn(&ParetoPoint) -> f64| mean_std(&at.iter().map(|p| f(p)).collect::<Vec<_>>());
        let ms = |(m, sd): (f64, f64), prec: usize| format!("{m:.prec$}±{sd:.prec$}");
        let ok = at.iter().filter(|p| p.realtime_ok).count();
        let _ = writeln!(
            s,
            "{:>6} {:>11} {:>15} {:>15} {:>15} {:>15} {:>15} {:>9.3} {:>8}",
            t,
            ms(col(&|p| p.selected_count() as f64), 1),
            ms(col(&|p| p.acc_ideal), 3),
            ms(col(&|p| p.acc_analog), 3),
            ms(col(&|p| p.area()), 3),
            ms(col(&|p| p.cost.power_mw.total), 4),
            ms(col(&|p| p.cost.energy_uj.total), 4),
            col(&|p| p.cost.latency.total_ms).0,
            format!("{ok}/{}", at.len()),
        );
    }
    s
}
