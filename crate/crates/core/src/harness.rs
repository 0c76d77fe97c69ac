//! Training loops, evaluation records and scenario-analysis reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use savgrid_nn::{adam_step, AdamState, Gradients, Graph, LrAction, LrScheduler, ParamStore, Var};

use crate::cascade::{ExpertBundle, ModelRole, RoutingDecision, Separator, Strategy};
use crate::classifier::{Classifier, ClassifierConfig, ScenarioPrediction};
use crate::config::{key, Configurable, Settings};
use crate::error::{invalid, CoreError, Result};
use crate::gridnet::{Extractor, GridNetConfig};
use crate::loss::{bce_loss_var, hybrid_loss_var, si_sdr, HybridLossConfig, Magnitude, Resolution};
use crate::scene::{dynamic_mix, Scenario, Scene, SceneSpec, SourcePool};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub halve_after: usize,
    pub stop_after: usize,
    /// Scenes are cut to their first `clip_seconds`.
    pub clip_seconds: Option<f64>,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    /// Reshuffles the (id-sorted) training set each epoch.
    pub shuffle: bool,
    pub seed: u64,
    /// Draws fresh mixtures from the training sources every epoch.
    pub dynamic_mixing: bool,
    /// Mixtures per epoch under dynamic mixing; 0 means the training-set size.
    pub dynamic_count: usize,
    pub loss: HybridLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            lr: 1e-3,
            halve_after: 6,
            stop_after: 20,
            clip_seconds: Some(3.0),
            grad_clip: Some(5.0),
            shuffle: true,
            seed: 0,
            dynamic_mixing: false,
            dynamic_count: 0,
            loss: HybridLossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Classifier defaults: 2 s clips.
    pub fn classifier() -> Self {
        Self {
            clip_seconds: Some(2.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.clip_seconds.is_some_and(|c| !(c > 0.0)) || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(CoreError::Config("clip values must be positive".into()));
        }
        self.loss.validate().map_err(|e| CoreError::Config(e.to_string()))
    }
}

fn parse_optional(raw: &str) -> Option<Option<f64>> {
    match raw {
        "none" | "off" => Some(None),
        v => v.parse().ok().map(Some),
    }
}

fn fmt_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn parse_resolutions(raw: &str) -> Option<Vec<Resolution>> {
    if raw.trim().is_empty() {
        return Some(Vec::new());
    }
    raw.split(',')
        .map(|r| {
            let v: Vec<usize> = r.trim().split('/').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
            match v[..] {
                [fft, hop, win] => Some(Resolution::new(fft, hop, win)),
                _ => None,
            }
        })
        .collect()
}

impl Configurable for HybridLossConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "gamma"), &mut self.gamma)?;
        s.take_with(&key(prefix, "resolutions"), &mut self.resolutions, parse_resolutions)?;
        s.take_with(&key(prefix, "magnitude"), &mut self.magnitude, |m| match m {
            "linear" => Some(Magnitude::Linear),
            "log" => Some(Magnitude::Log),
            _ => None,
        })
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "gamma"), self.gamma);
        let r: Vec<String> = self
            .resolutions
            .iter()
            .map(|r| format!("{}/{}/{}", r.fft_size, r.hop_size, r.window_length))
            .collect();
        s.set(key(prefix, "resolutions"), r.join(","));
        let m = match self.magnitude {
            Magnitude::Linear => "linear",
            Magnitude::Log => "log",
        };
        s.set(key(prefix, "magnitude"), m);
    }
}

impl Configurable for TrainConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "epochs"), &mut self.epochs)?;
        s.take(&key(prefix, "batch_size"), &mut self.batch_size)?;
        s.take(&key(prefix, "lr"), &mut self.lr)?;
        s.take(&key(prefix, "halve_after"), &mut self.halve_after)?;
        s.take(&key(prefix, "stop_after"), &mut self.stop_after)?;
        s.take_with(&key(prefix, "clip_seconds"), &mut self.clip_seconds, parse_optional)?;
        s.take_with(&key(prefix, "grad_clip"), &mut self.grad_clip, parse_optional)?;
        s.take(&key(prefix, "shuffle"), &mut self.shuffle)?;
        s.take(&key(prefix, "seed"), &mut self.seed)?;
        s.take(&key(prefix, "dynamic_mixing"), &mut self.dynamic_mixing)?;
        s.take(&key(prefix, "dynamic_count"), &mut self.dynamic_count)?;
        self.loss.read_settings(s, &key(prefix, "loss"))
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "epochs"), self.epochs);
        s.set(key(prefix, "batch_size"), self.batch_size);
        s.set(key(prefix, "lr"), self.lr);
        s.set(key(prefix, "halve_after"), self.halve_after);
        s.set(key(prefix, "stop_after"), self.stop_after);
        s.set(key(prefix, "clip_seconds"), fmt_optional(self.clip_seconds));
        s.set(key(prefix, "grad_clip"), fmt_optional(self.grad_clip));
        s.set(key(prefix, "shuffle"), self.shuffle);
        s.set(key(prefix, "seed"), self.seed);
        s.set(key(prefix, "dynamic_mixing"), self.dynamic_mixing);
        s.set(key(prefix, "dynamic_count"), self.dynamic_count);
        self.loss.write_settings(s, &key(prefix, "loss"));
    }
}

/// Every tunable of a run, addressable by dotted key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Parameter-initialization seed for new models.
    pub seed: u64,
    pub scenes: SceneSpec,
    pub gridnet: GridNetConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub classifier_train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenes: SceneSpec::default(),
            gridnet: GridNetConfig::toy(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            classifier_train: TrainConfig::classifier(),
        }
    }
}

impl RunConfig {
    /// Applies `s` over the defaults; unknown keys are a configuration error.
    pub fn from_settings(mut s: Settings) -> Result<Self> {
        let mut c = Self::default();
        c.read_settings(&mut s, "")?;
        s.finish()?;
        c.scenes.validate()?;
        c.gridnet.validate()?;
        c.classifier.validate()?;
        c.train.validate()?;
        c.classifier_train.validate()?;
        Ok(c)
    }
}

impl Configurable for RunConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "seed"), &mut self.seed)?;
        self.scenes.read_settings(s, &key(prefix, "scenes"))?;
        self.gridnet.read_settings(s, &key(prefix, "gridnet"))?;
        self.classifier.read_settings(s, &key(prefix, "classifier"))?;
        self.train.read_settings(s, &key(prefix, "train"))?;
        self.classifier_train.read_settings(s, &key(prefix, "classifier_train"))
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "seed"), self.seed);
        self.scenes.write_settings(s, &key(prefix, "scenes"));
        self.gridnet.write_settings(s, &key(prefix, "gridnet"));
        self.classifier.write_settings(s, &key(prefix, "classifier"));
        self.train.write_settings(s, &key(prefix, "train"));
        self.classifier_train.write_settings(s, &key(prefix, "classifier_train"));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the epoch's examples, measured before each update.
    pub train_loss: f64,
    /// Development loss (the training loss when no dev set is given).
    pub dev_loss: f64,
    pub best_dev: f64,
    pub improved: bool,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Optimizer steps taken so far in this run.
    pub steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

pub type EpochCallback<'a> = &'a mut dyn FnMut(&EpochStats);

fn prepare(scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<Scene>> {
    let mut out: Vec<Scene> = match cfg.clip_seconds {
        Some(c) => scenes.iter().map(|s| s.truncated(c)).collect::<Result<_>>()?,
        None => scenes.to_vec(),
    };
    out.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(out)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Numerical(format!("{what} is {v}")))
    }
}

/// Generic loop: Adam from scratch, plateau schedule on the dev loss, best
/// parameters restored at the end.
fn fit(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    train: &[Scene],
    dev: &[Scene],
    pool: Option<&SourcePool>,
    noise_ratio: f64,
    loss: &dyn Fn(&mut Graph<'_>, &Scene) -> Result<Var>,
    on_epoch: EpochCallback<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = AdamState::new(cfg.lr);
    let mut sched = LrScheduler::new(cfg.halve_after, cfg.stop_after);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        best_dev: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best_params = store.named_tensors();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = adam.lr;
        let fresh: Vec<Scene>;
        let items: Vec<&Scene> = match pool {
            Some(p) => {
                let n = if cfg.dynamic_count == 0 { train.len() } else { cfg.dynamic_count };
                fresh = (0..n)
                    .map(|i| dynamic_mix(&mut rng, p, noise_ratio, format!("dm{epoch:04}_{i:05}")))
                    .collect::<Result<_>>()?;
                fresh.iter().collect()
            }
            None => {
                if cfg.shuffle {
                    order.shuffle(&mut rng);
                }
                order.iter().map(|&i| &train[i]).collect()
            }
        };
        let mut total = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            let mut acc = Gradients::default();
            for scene in batch {
                let mut g = Graph::with_params(store);
                let l = loss(&mut g, scene)?;
                let value = check_finite(g.value(l).item()?, "training loss")?;
                total += value;
                acc.accumulate(&g.backward(l)?);
            }
            acc.scale(1.0 / batch.len() as f64);
            let norm = check_finite(acc.global_norm(), "gradient norm")?;
            if let Some(max) = cfg.grad_clip {
                if norm > max {
                    acc.scale(max / norm);
                }
            }
            adam_step(store, &acc, &mut adam)?;
        }
        let train_loss = total / items.len() as f64;
        let dev_loss = if dev.is_empty() {
            train_loss
        } else {
            let mut sum = 0.0;
            for scene in dev {
                let mut g = Graph::inference(store);
                let l = loss(&mut g, scene)?;
                sum += g.value(l).item()?;
            }
            check_finite(sum / dev.len() as f64, "dev loss")?
        };
        let (improved, action) = sched.observe(dev_loss);
        if improved {
            report.best_dev = dev_loss;
            report.best_epoch = epoch;
            best_params = store.named_tensors();
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            dev_loss,
            best_dev: sched.best(),
            improved,
            lr,
            steps: adam.step,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
        match action {
            LrAction::Halve => adam.lr *= 0.5,
            LrAction::Stop => {
                report.stopped_early = epoch < cfg.epochs;
                break;
            }
            LrAction::None => {}
        }
    }
    store.load_named(&best_params, true)?;
    Ok(report)
}

/// Scenes the role trains on.
pub fn role_scenes(role: ModelRole, scenes: &[Scene]) -> Vec<Scene> {
    scenes
        .iter()
        .filter(|s| role.scenario().is_none_or(|r| r == s.scenario))
        .cloned()
        .collect()
}

/// Trains `ex` in place on the role's scenes. Warm starts load the
/// checkpoint into `ex` beforehand; the optimizer always starts fresh.
pub fn train_extractor(
    ex: &mut Extractor,
    role: ModelRole,
    train: &[Scene],
    dev: &[Scene],
    cfg: &TrainConfig,
    on_epoch: EpochCallback<'_>,
) -> Result<TrainReport> {
    let train = prepare(&role_scenes(role, train), cfg)?;
    let dev = prepare(&role_scenes(role, dev), cfg)?;
    if train.is_empty() {
        return Err(CoreError::Config(format!("no training scenes match the {role} role")));
    }
    let pool = cfg.dynamic_mixing.then(|| SourcePool::from_scenes(&train));
    let noise_ratio = match role.scenario() {
        Some(Scenario::Noise) => 1.0,
        Some(Scenario::Speech) => 0.0,
        None => train.iter().filter(|s| s.scenario == Scenario::Noise).count() as f64 / train.len() as f64,
    };
    let Extractor { store, net } = ex;
    let av = net.config().visual.is_some();
    let loss_cfg = cfg.loss.clone();
    let loss = move |g: &mut Graph<'_>, s: &Scene| -> Result<Var> {
        let y = net.forward(g, &s.mixture.samples, av.then_some(&s.face_track))?;
        hybrid_loss_var(g, y, &s.target.samples, &loss_cfg)
    };
    fit(store, cfg, &train, &dev, pool.as_ref(), noise_ratio, &loss, on_epoch)
}

/// Trains the classifier in place with mean binary cross-entropy.
pub fn train_classifier(
    cls: &mut Classifier,
    train: &[Scene],
    dev: &[Scene],
    cfg: &TrainConfig,
    on_epoch: EpochCallback<'_>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return invalid("classifier training set is empty");
    }
    let train = prepare(train, cfg)?;
    let dev = prepare(dev, cfg)?;
    let mut warnings = Vec::new();
    let noise = train.iter().filter(|s| s.scenario == Scenario::Noise).count();
    if noise == 0 || noise == train.len() {
        warnings.push(format!("classifier training set holds only {} scenes", train[0].scenario));
    }
    let Classifier { store, net } = cls;
    let loss = |g: &mut Graph<'_>, s: &Scene| -> Result<Var> {
        let p = net.forward(g, &s.mixture.samples, &s.face_track)?;
        bce_loss_var(g, p, &[s.scenario.label()])
    };
    let mut cfg = cfg.clone();
    cfg.dynamic_mixing = false;
    let mut report = fit(store, &cfg, &train, &dev, None, 0.0, &loss, on_epoch)?;
    report.warnings.extend(warnings);
    Ok(report)
}

/// Classifier accuracy against scene labels.
pub fn accuracy(cls: &Classifier, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return invalid("no scenes to score");
    }
    let mut hits = 0;
    for s in scenes {
        if cls.classify(&s.mixture, &s.face_track)?.label == s.scenario {
            hits += 1;
        }
    }
    Ok(hits as f64 / scenes.len() as f64)
}

pub fn predictions(cls: &Classifier, scenes: &[Scene]) -> Result<Vec<(String, ScenarioPrediction)>> {
    scenes
        .iter()
        .map(|s| Ok((s.scene_id.clone(), cls.classify(&s.mixture, &s.face_track)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub scene_id: String,
    pub scenario: Scenario,
    pub si_sdr_in: f64,
    pub si_sdr_out: f64,
    pub si_sdr_improvement: f64,
    pub decision: Option<RoutingDecision>,
}

impl EvalRecord {
    pub fn new(scene: &Scene, estimate: &[f64], decision: Option<RoutingDecision>) -> Result<Self> {
        let si_sdr_in = si_sdr(&scene.target.samples, &scene.mixture.samples)?;
        let si_sdr_out = si_sdr(&scene.target.samples, estimate)?;
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            scenario: scene.scenario,
            si_sdr_in,
            si_sdr_out,
            si_sdr_improvement: si_sdr_out - si_sdr_in,
            decision,
        })
    }
}

/// What produces the estimate under evaluation.
pub enum System<'a> {
    /// The mixture itself.
    Identity,
    /// The clean target.
    Oracle,
    Model(&'a dyn Separator),
    Cascade(&'a ExpertBundle, Strategy),
}

/// Scores every scene; records come back sorted by scene id.
pub fn evaluate(scenes: &[Scene], system: &System<'_>) -> Result<Vec<EvalRecord>> {
    let mut order: Vec<&Scene> = scenes.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    order
        .into_iter()
        .map(|s| match system {
            System::Identity => EvalRecord::new(s, &s.mixture.samples, None),
            System::Oracle => EvalRecord::new(s, &s.target.samples, None),
            System::Model(m) => EvalRecord::new(s, &m.separate(&s.mixture.samples, &s.face_track)?, None),
            System::Cascade(b, st) => {
                let (out, d) = b.route_scene(*st, s)?;
                EvalRecord::new(s, &out, Some(d))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            count: v.len(),
            mean,
            p10: percentile(&v, 0.1),
            p50: percentile(&v, 0.5),
            p90: percentile(&v, 0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub si_sdr_out: Stats,
    pub si_sdr_improvement: Stats,
}

impl GroupSummary {
    fn of<'r>(records: impl Iterator<Item = &'r EvalRecord> + Clone) -> Self {
        let out: Vec<f64> = records.clone().map(|r| r.si_sdr_out).collect();
        let imp: Vec<f64> = records.map(|r| r.si_sdr_improvement).collect();
        Self {
            si_sdr_out: Stats::of(&out),
            si_sdr_improvement: Stats::of(&imp),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub per_scenario: BTreeMap<Scenario, GroupSummary>,
    pub overall: GroupSummary,
}

pub fn summarize(records: &[EvalRecord]) -> Summary {
    let mut per_scenario = BTreeMap::new();
    for sc in Scenario::ALL {
        if records.iter().any(|r| r.scenario == sc) {
            per_scenario.insert(sc, GroupSummary::of(records.iter().filter(|r| r.scenario == sc)));
        }
    }
    Summary {
        per_scenario,
        overall: GroupSummary::of(records.iter()),
    }
}

pub fn render_summary(s: &Summary) -> String {
    let mut out = String::from("group\tcount\tsi_sdr_out_mean\tsi_sdri_mean\tsi_sdri_p10\tsi_sdri_p50\tsi_sdri_p90\n");
    let mut row = |name: &str, g: &GroupSummary| {
        let i = &g.si_sdr_improvement;
        let _ = writeln!(
            out,
            "{name}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            i.count, g.si_sdr_out.mean, i.mean, i.p10, i.p50, i.p90
        );
    };
    for (sc, g) in &s.per_scenario {
        row(sc.name(), g);
    }
    row("overall", &s.overall);
    out
}

const RECORDS_HEADER: [&str; 7] = [
    "scene_id",
    "scenario",
    "si_sdr_in",
    "si_sdr_out",
    "si_sdr_improvement",
    "final_label",
    "chosen_model",
];

/// Per-scene CSV with metric-named columns.
pub fn records_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CoreError::InvalidInput(e.to_string());
    w.write_record(RECORDS_HEADER).map_err(err)?;
    for r in records {
        let (label, model) = r
            .decision
            .as_ref()
            .map_or(("-", "-"), |d| (d.final_label.name(), d.chosen.name()));
        w.write_record([
            r.scene_id.as_str(),
            r.scenario.name(),
            &r.si_sdr_in.to_string(),
            &r.si_sdr_out.to_string(),
            &r.si_sdr_improvement.to_string(),
            label,
            model,
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| CoreError::InvalidInput(e.to_string()))
}

/// Reads a CSV written by [`records_csv`]. Routing decisions are not
/// reconstructed.
pub fn parse_records_csv(bytes: &[u8]) -> Result<Vec<EvalRecord>> {
    let err = |m: String| CoreError::Format {
        kind: "evaluation records",
        detail: m,
    };
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(RECORDS_HEADER) {
        return Err(err(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 7 {
            return Err(err(format!("row {}: {} fields", i + 1, rec.len())));
        }
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| err(format!("row {}: {:?} is not a number", i + 1, &rec[j])))
        };
        out.push(EvalRecord {
            scene_id: rec[0].to_string(),
            scenario: Scenario::from_name(&rec[1]).ok_or_else(|| err(format!("row {}: scenario {:?}", i + 1, &rec[1])))?,
            si_sdr_in: num(2)?,
            si_sdr_out: num(3)?,
            si_sdr_improvement: num(4)?,
            decision: None,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutlierReport {
    pub count: usize,
    pub per_scenario: BTreeMap<Scenario, usize>,
    pub scene_ids: Vec<String>,
}

/// Scenes whose SI-SDR improvement falls below `threshold_db`.
pub fn analyze_outliers(records: &[EvalRecord], threshold_db: f64) -> OutlierReport {
    let mut r = OutlierReport::default();
    for rec in records.iter().filter(|r| r.si_sdr_improvement < threshold_db) {
        r.count += 1;
        *r.per_scenario.entry(rec.scenario).or_default() += 1;
        r.scene_ids.push(rec.scene_id.clone());
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyComparison {
    /// Scenes where `b` scores higher than `a`.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub mean_delta_db: f64,
    pub outliers_a: usize,
    pub outliers_b: usize,
}

pub fn compare_strategies(a: &[EvalRecord], b: &[EvalRecord], threshold_db: f64) -> Result<StrategyComparison> {
    if a.len() != b.len() {
        return invalid(format!("record sets differ in size: {} vs {}", a.len(), b.len()));
    }
    let by_id: HashMap<&str, &EvalRecord> = b.iter().map(|r| (r.scene_id.as_str(), r)).collect();
    let (mut wins, mut losses, mut ties, mut delta) = (0, 0, 0, 0.0);
    for ra in a {
        let rb = by_id
            .get(ra.scene_id.as_str())
            .ok_or_else(|| CoreError::InvalidInput(format!("scene {} missing from the second record set", ra.scene_id)))?;
        let d = rb.si_sdr_out - ra.si_sdr_out;
        delta += d;
        if d > 0.0 {
            wins += 1;
        } else if d < 0.0 {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    Ok(StrategyComparison {
        wins,
        losses,
        ties,
        mean_delta_db: if a.is_empty() { 0.0 } else { delta / a.len() as f64 },
        outliers_a: analyze_outliers(a, threshold_db).count,
        outliers_b: analyze_outliers(b, threshold_db).count,
    })
}

/// Binary confusion counts with noise as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn add(&mut self, predicted: Scenario, truth: Scenario) {
        match (predicted, truth) {
            (Scenario::Noise, Scenario::Noise) => self.tp += 1,
            (Scenario::Noise, Scenario::Speech) => self.fp += 1,
            (Scenario::Speech, Scenario::Noise) => self.fn_ += 1,
            (Scenario::Speech, Scenario::Speech) => self.tn += 1,
        }
    }
}

/// Confusion of the trail's final labels against ground truth.
pub fn confusion(trail: &[RoutingDecision], truth: &[(String, Scenario)]) -> Result<ConfusionMatrix> {
    if trail.len() != truth.len() {
        return invalid(format!("{} decisions for {} labelled scenes", trail.len(), truth.len()));
    }
    let labels: HashMap<&str, Scenario> = truth.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let mut m = ConfusionMatrix::default();
    for d in trail {
        let t = labels
            .get(d.scene_id.as_str())
            .ok_or_else(|| CoreError::InvalidInput(format!("no ground truth for scene {}", d.scene_id)))?;
        m.add(d.final_label, *t);
    }
    Ok(m)
}

pub fn scene_labels(scenes: &[Scene]) -> Vec<(String, Scenario)> {
    scenes.iter().map(|s| (s.scene_id.clone(), s.scenario)).collect()
}

pub fn render_confusion(m: &ConfusionMatrix) -> String {
    format!(
        "\tpred_noise\tpred_speech\ntrue_noise\t{}\t{}\ntrue_speech\t{}\t{}\naccuracy\t{:.4}\n",
        m.tp,
        m.fn_,
        m.fp,
        m.tn,
        m.accuracy()
    )
}
