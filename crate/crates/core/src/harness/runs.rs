//! Experiment pipelines. Every run owns a directory under `cfg.out`, keeps
//! a manifest there and finishes with `summary.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{AblationAxis, ExperimentConfig, Task, UqMethod};
use super::manifest::{RunManifest, RunRecorder};
use crate::bayes::{convert_to_bayesian, train_bayesian, BayesianModel, ElboConfig, MopedConfig, PriorConfig};
use crate::bench::{
    apply_region_mask, fgsm_attack, generate_dataset, make_loo_split, stratified_split, write_dataset,
    AdversarialConfig, GeneratorId, GeneratorSpec, LabelKind, RegionMask, RegionMaskKind, SyntheticDataset,
    CHANNELS, SIZE,
};
use crate::error::{Error, Result};
use crate::maps::{bayesian_saliency_map, render_map, saliency_map, uncertainty_map, ActivationSource, MapKind, SpatialMap};
use crate::metrics::{
    density_histogram, evaluate, retention_curve, HistogramSplit, RetentionCurve, StochasticPredictor, UncertaintyKey,
    UncertaintyReport,
};
use crate::nn::{build_model, train, DeterministicModel, DropoutModel, LabeledData, ModelSpec, TrainConfig};
use crate::tensor::{RngState, Tensor};

pub const SUMMARY_HEADER: &str = "task,setting,subset,model,accuracy,pu,mu,var_u,n_samples";
pub const CONFUSION_HEADER: &str = "true,pred,count";
pub const PERTURBATION_HEADER: &str = "setting,epsilon,max_abs_perturbation,n_samples";
pub const MAPS_HEADER: &str = "sample_id,source,kind,raw_max,nonzero,inside_mean,outside_mean";

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: String,
    pub setting: String,
    pub subset: String,
    /// `det`, `bnn` or `mcd`.
    pub model: String,
    pub accuracy: f64,
    pub pu: f64,
    pub mu: f64,
    pub var_u: f64,
    pub n_samples: usize,
}

impl SummaryRow {
    fn new(task: Task, setting: &str, subset: &str, model: &str, r: &UncertaintyReport) -> Self {
        SummaryRow {
            task: task.to_string(),
            setting: setting.to_string(),
            subset: subset.to_string(),
            model: model.to_string(),
            accuracy: r.accuracy,
            pu: r.mean_pu,
            mu: r.mean_mu,
            var_u: r.mean_var_u,
            n_samples: r.len(),
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.task, r.setting, r.subset, r.model, r.accuracy, r.pu, r.mu, r.var_u, r.n_samples
        );
    }
    s
}

/// Per-sample statistics of one rendered map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapStat {
    pub sample_id: usize,
    /// `real` or the generator name.
    pub source: String,
    pub kind: MapKind,
    /// Maximum before normalization.
    pub raw_max: f64,
    /// Pixels kept by the display cutoff.
    pub nonzero: usize,
    /// Mean normalized value (before the cutoff) inside and outside the
    /// artifact region of the maps generator.
    pub inside_mean: f64,
    pub outside_mean: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<SummaryRow>,
    pub maps: Vec<MapStat>,
    /// Attack runs: largest `|x' - x|` per setting.
    pub perturbations: Vec<(String, f64)>,
    /// Sub-run manifests first, the run's own manifest last.
    pub manifests: Vec<RunManifest>,
}

impl RunOutput {
    pub fn row(&self, setting: &str, subset: &str, model: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.subset == subset && r.model == model)
    }

    pub fn manifest(&self) -> &RunManifest {
        self.manifests.last().expect("a finished run has a manifest")
    }
}

/// Independent seed streams derived from `cfg.seed`.
struct Seeds {
    init: u64,
    train: u64,
    bayes: u64,
    eval: u64,
    maps: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let root = RngState::new(seed);
        Seeds {
            init: root.split(1).seed(),
            train: root.split(2).seed(),
            bayes: root.split(3).seed(),
            eval: root.split(4).seed(),
            maps: root.split(5).seed(),
        }
    }
}

fn generator_specs(cfg: &ExperimentConfig) -> Vec<GeneratorSpec> {
    cfg.generators.iter().map(|&g| GeneratorSpec::default_for(g)).collect()
}

fn dataset(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    generate_dataset(cfg.n_per_class, &generator_specs(cfg), cfg.seed)
}

/// Train/val/test data for one detector, with dataset sample ids.
struct TaskData {
    train: LabeledData,
    val: Option<LabeledData>,
    test: LabeledData,
    test_ids: Vec<usize>,
    num_classes: usize,
}

impl TaskData {
    fn new(ds: &SyntheticDataset, train: &[usize], val: &[usize], test: &[usize], kind: LabelKind) -> Self {
        TaskData {
            train: ds.labeled(train, kind),
            val: (!val.is_empty()).then(|| ds.labeled(val, kind)),
            test: ds.labeled(test, kind),
            test_ids: test.to_vec(),
            num_classes: match kind {
                LabelKind::Binary => 2,
                LabelKind::Source => ds.num_sources(),
            },
        }
    }

    /// Real vs the given sources, stratified on the binary label.
    fn binary(ds: &SyntheticDataset, sources: &[usize], seed: u64) -> Self {
        let mut wanted = vec![0];
        wanted.extend_from_slice(sources);
        let idx = ds.indices_of(&wanted);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i, LabelKind::Binary)).collect();
        let sp = stratified_split(&labels, seed);
        let pick = |v: &[usize]| v.iter().map(|&j| idx[j]).collect::<Vec<_>>();
        Self::new(ds, &pick(&sp.train), &pick(&sp.val), &pick(&sp.test), LabelKind::Binary)
    }

    fn source(ds: &SyntheticDataset, seed: u64) -> Self {
        let sp = stratified_split(&ds.source_labels(), seed);
        Self::new(ds, &sp.train, &sp.val, &sp.test, LabelKind::Source)
    }
}

struct Setting {
    name: String,
    data: TaskData,
}

fn binary_setting(ds: &SyntheticDataset, g: GeneratorId, seed: u64) -> Result<Setting> {
    Ok(Setting {
        name: g.to_string(),
        data: TaskData::binary(ds, &[ds.source_label_of(g)?], seed),
    })
}

/// Detector settings of the staged tasks.
fn settings(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<Vec<Setting>> {
    match cfg.task {
        Task::BinaryPerGenerator => cfg.generators.iter().map(|&g| binary_setting(ds, g, cfg.seed)).collect(),
        Task::BinaryAll => {
            let fakes: Vec<usize> = (1..ds.num_sources()).collect();
            Ok(vec![Setting {
                name: "all".into(),
                data: TaskData::binary(ds, &fakes, cfg.seed),
            }])
        }
        Task::SourceDetection => {
            if ds.num_sources() < 3 {
                return Err(Error::Config("source detection needs at least two generators".into()));
            }
            Ok(vec![Setting {
                name: "source".into(),
                data: TaskData::source(ds, cfg.seed),
            }])
        }
        other => Err(Error::Config(format!(
            "task {other} has no staged form; use binary_per_generator, binary_all or source_detection"
        ))),
    }
}

fn train_config(cfg: &ExperimentConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs,
        batch_size: cfg.batch_size,
        seed,
        ..Default::default()
    }
}

fn train_deterministic(cfg: &ExperimentConfig, data: &TaskData) -> Result<DeterministicModel> {
    let seeds = Seeds::new(cfg.seed);
    let spec = ModelSpec::compact_cnn(data.num_classes, cfg.dr);
    let model = build_model(&spec, &mut RngState::new(seeds.init))?;
    let tc = train_config(cfg, cfg.epochs, seeds.train);
    Ok(train(model, &data.train, data.val.as_ref(), &tc)?.0)
}

fn train_bnn(cfg: &ExperimentConfig, det: &DeterministicModel, data: &TaskData) -> Result<BayesianModel> {
    let seeds = Seeds::new(cfg.seed);
    let prior = PriorConfig {
        mu: cfg.prior_mu,
        sigma: cfg.prior_sigma,
    };
    let moped = MopedConfig {
        delta: cfg.delta_moped,
        enabled: true,
    };
    let model = convert_to_bayesian(det, prior, moped)?;
    if cfg.bayes_epochs == 0 {
        return Ok(model);
    }
    let tc = train_config(cfg, cfg.bayes_epochs, seeds.bayes);
    let elbo = ElboConfig::new(cfg.kl_factor, data.train.len());
    Ok(train_bayesian(model, &data.train, data.val.as_ref(), &tc, &elbo)?.0)
}

enum UqModel {
    Bnn(BayesianModel),
    Dropout(DropoutModel),
}

impl UqModel {
    fn label(&self) -> &'static str {
        match self {
            UqModel::Bnn(_) => "bnn",
            UqModel::Dropout(_) => "mcd",
        }
    }

    fn predictor(&self) -> &dyn StochasticPredictor {
        match self {
            UqModel::Bnn(m) => m,
            UqModel::Dropout(m) => m,
        }
    }
}

const DET_FILE: &str = "det.uql";

/// `dir/file`, or `file` at the run root when `dir` is empty.
fn rel(dir: &str, file: &str) -> String {
    if dir.is_empty() {
        file.to_string()
    } else {
        format!("{dir}/{file}")
    }
}
const BNN_FILE: &str = "bnn.uqb";

fn write_det(rec: &mut RunRecorder, dir: &str, det: &DeterministicModel) -> Result<()> {
    rec.write(&rel(dir, DET_FILE), &det.to_bytes()).map(drop)
}

fn fit_uq(rec: &mut RunRecorder, cfg: &ExperimentConfig, dir: &str, det: &DeterministicModel, data: &TaskData) -> Result<UqModel> {
    match cfg.uq_method {
        UqMethod::Bnn => {
            let bnn = train_bnn(cfg, det, data)?;
            rec.write(&rel(dir, BNN_FILE), &bnn.to_bytes())?;
            Ok(UqModel::Bnn(bnn))
        }
        UqMethod::McDropout => Ok(UqModel::Dropout(DropoutModel::new(det.clone(), cfg.dr)?)),
    }
}

fn file_stem(model: &str, subset: &str) -> String {
    if subset == "test" {
        model.to_string()
    } else {
        format!("{model}_{subset}")
    }
}

/// Writes the per-sample report of one (model, subset) pair.
fn emit_report(rec: &mut RunRecorder, dir: &str, model: &str, subset: &str, report: &UncertaintyReport) -> Result<()> {
    let stem = file_stem(model, subset);
    rec.write(&rel(dir, &format!("report_{stem}.csv")), report.to_csv().as_bytes()).map(drop)
}

/// Retention curve and density histogram derived from a report.
fn emit_calibration(
    rec: &mut RunRecorder,
    cfg: &ExperimentConfig,
    dir: &str,
    model: &str,
    subset: &str,
    report: &UncertaintyReport,
) -> Result<RetentionCurve> {
    let stem = file_stem(model, subset);
    let curve = retention_curve(report, &RetentionCurve::default_fractions(), UncertaintyKey::Pu)?;
    rec.write(&rel(dir, &format!("retention_{stem}.csv")), curve.to_csv().as_bytes())?;
    let hist = density_histogram(report, cfg.histogram_bins, HistogramSplit::Correctness, UncertaintyKey::Pu)?;
    rec.write(&rel(dir, &format!("histogram_{stem}.csv")), hist.to_csv().as_bytes())?;
    Ok(curve)
}

/// Evaluates the deterministic detector (one pass) and the uncertainty
/// model (`cfg.n` passes) on the test set.
fn evaluate_pair(
    cfg: &ExperimentConfig,
    det: &DeterministicModel,
    uq: &UqModel,
    data: &LabeledData,
    ids: &[usize],
) -> Result<[UncertaintyReport; 2]> {
    let seed = Seeds::new(cfg.seed).eval;
    Ok([
        evaluate(det, data, 1, seed, Some(ids))?,
        evaluate(uq.predictor(), data, cfg.n, seed, Some(ids))?,
    ])
}

/// Train, convert, evaluate and emit one detector setting.
fn full_setting(
    rec: &mut RunRecorder,
    cfg: &ExperimentConfig,
    task: Task,
    setting: &Setting,
    rows: &mut Vec<SummaryRow>,
) -> Result<(DeterministicModel, UqModel)> {
    let name = &setting.name;
    let det = rec.phase(&format!("train {name}"), |rec| {
        let det = train_deterministic(cfg, &setting.data)?;
        write_det(rec, name, &det)?;
        Ok(det)
    })?;
    let uq = rec.phase(&format!("convert {name}"), |rec| fit_uq(rec, cfg, name, &det, &setting.data))?;
    rec.phase(&format!("eval {name}"), |rec| {
        let reports = evaluate_pair(cfg, &det, &uq, &setting.data.test, &setting.data.test_ids)?;
        for (label, report) in ["det", uq.label()].into_iter().zip(&reports) {
            emit_report(rec, name, label, "test", report)?;
            emit_calibration(rec, cfg, name, label, "test", report)?;
            rows.push(SummaryRow::new(task, name, "test", label, report));
        }
        Ok(())
    })?;
    Ok((det, uq))
}

fn finish(mut rec: RunRecorder, rows: Vec<SummaryRow>, mut out: RunOutput) -> Result<RunOutput> {
    rec.write("summary.csv", summary_csv(&rows).as_bytes())?;
    out.rows = rows;
    out.manifests.push(rec.finish()?);
    Ok(out)
}

fn start(cfg: &ExperimentConfig, run: &str) -> Result<RunRecorder> {
    cfg.validate()?;
    RunRecorder::start(&cfg.out, run, cfg)
}

/// Per-generator (or all-vs-real) detection with a deterministic and an
/// uncertainty-aware detector per setting.
pub fn run_binary(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    if cfg.task != Task::BinaryAll {
        cfg.task = Task::BinaryPerGenerator;
    }
    let mut rec = start(&cfg, "binary")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let mut rows = Vec::new();
    for s in settings(&cfg, &ds)? {
        full_setting(&mut rec, &cfg, cfg.task, &s, &mut rows)?;
    }
    finish(rec, rows, RunOutput::default())
}

/// Multi-class attribution over real plus every generator.
pub fn run_source_detection(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.task = Task::SourceDetection;
    let mut rec = start(&cfg, "source")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let setting = settings(&cfg, &ds)?.remove(0);
    let mut names = vec!["real".to_string()];
    names.extend(ds.specs.iter().map(|s| s.id.to_string()));
    let mut rows = Vec::new();
    let (det, uq) = full_setting(&mut rec, &cfg, cfg.task, &setting, &mut rows)?;
    rec.phase("per class", |rec| {
        let reports = evaluate_pair(&cfg, &det, &uq, &setting.data.test, &setting.data.test_ids)?;
        for (label, report) in ["det", uq.label()].into_iter().zip(&reports) {
            for (c, cname) in names.iter().enumerate() {
                let part = report.filter(|r| r.true_label == c)?;
                rows.push(SummaryRow::new(cfg.task, &setting.name, &format!("class_{cname}"), label, &part));
            }
            let k = names.len();
            let mut counts = vec![0usize; k * k];
            for r in &report.records {
                counts[r.true_label * k + r.pred] += 1;
            }
            let mut csv = format!("{CONFUSION_HEADER}\n");
            for (t, tn) in names.iter().enumerate() {
                for (p, pn) in names.iter().enumerate() {
                    let _ = writeln!(csv, "{tn},{pn},{}", counts[t * k + p]);
                }
            }
            rec.write(&format!("{}/confusion_{label}.csv", setting.name), csv.as_bytes())?;
        }
        Ok(())
    })?;
    finish(rec, rows, RunOutput::default())
}

/// One binary detector per left-out generator, trained on real plus the
/// remaining generators. Each left-out run has its own directory and
/// manifest.
pub fn run_loo(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.task = Task::Loo;
    if cfg.generators.len() < 3 {
        return Err(Error::Config("leave-one-out needs at least three generators".into()));
    }
    let mut rec = start(&cfg, "loo")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let left_out = if cfg.left_out.is_empty() { cfg.generators.clone() } else { cfg.left_out.clone() };
    let mut rows = Vec::new();
    let mut out = RunOutput::default();
    for g in left_out {
        let name = format!("loo_{g}");
        let mut sub = RunRecorder::start(&cfg.out.join(&name), "loo", &cfg)?;
        let loo = make_loo_split(&ds, g, cfg.seed)?;
        let data = TaskData::new(&ds, &loo.split.train, &loo.split.val, &loo.split.test, LabelKind::Binary);
        let det = sub.phase("train", |sub| {
            let det = train_deterministic(&cfg, &data)?;
            write_det(sub, "", &det)?;
            Ok(det)
        })?;
        let uq = sub.phase("convert", |sub| fit_uq(sub, &cfg, "", &det, &data))?;
        sub.phase("eval", |sub| {
            let mut all: Vec<usize> = loo.held_out_test.iter().chain(&loo.in_dist_test).copied().collect();
            all.sort_unstable();
            let test = ds.labeled(&all, LabelKind::Binary);
            let reports = evaluate_pair(&cfg, &det, &uq, &test, &all)?;
            let out_label = ds.source_label_of(g)?;
            let source = |id: usize| ds.samples[id].source_label;
            for (label, report) in ["det", uq.label()].into_iter().zip(&reports) {
                let subsets = [
                    ("held_out", report.filter(|r| source(r.sample_id) == out_label)?),
                    ("in_dist", report.filter(|r| source(r.sample_id) != out_label)?),
                    ("held_out_mix", report.filter(|r| source(r.sample_id) == 0 || source(r.sample_id) == out_label)?),
                ];
                for (subset, part) in &subsets {
                    emit_report(sub, "", label, subset, part)?;
                    emit_calibration(sub, &cfg, "", label, subset, part)?;
                    rows.push(SummaryRow::new(cfg.task, &name, subset, label, part));
                }
            }
            Ok(())
        })?;
        let m = sub.finish()?;
        rec.track(&cfg.out.join(&name).join(RunManifest::file_name("loo")))?;
        out.manifests.push(m);
    }
    finish(rec, rows, out)
}

/// Detectors trained and tested on region-masked images, next to the
/// unmasked baseline with the same seeds.
pub fn run_region(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.task = Task::Region;
    let mut rec = start(&cfg, "region")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let mut kinds = vec![RegionMaskKind::Full];
    if cfg.mask != RegionMaskKind::Full {
        kinds.push(cfg.mask);
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let masked = apply_region_mask(&ds, &RegionMask::for_dataset(kind, &ds));
        for &g in &cfg.generators {
            let s = binary_setting(&masked, g, cfg.seed)?;
            let s = Setting {
                name: format!("{}/{}", kind.as_str(), s.name),
                data: s.data,
            };
            full_setting(&mut rec, &cfg, cfg.task, &s, &mut rows)?;
        }
    }
    finish(rec, rows, RunOutput::default())
}

fn ablation_label(axis: AblationAxis, v: f64) -> String {
    format!("{axis}_{v}")
}

fn validate_ablation(cfg: &ExperimentConfig) -> Result<()> {
    let vals = &cfg.ablation_values;
    if vals.len() < 2 {
        return Err(Error::Config("ablation needs at least two values".into()));
    }
    for (i, &v) in vals.iter().enumerate() {
        if vals[..i].contains(&v) {
            return Err(Error::Config(format!("ablation value {v} listed twice")));
        }
        let mut probe = cfg.clone();
        match cfg.ablation_axis {
            AblationAxis::N => {
                if !(v >= 1.0 && v.fract() == 0.0 && v <= 1e6) {
                    return Err(Error::Config(format!("n values must be positive integers, got {v}")));
                }
            }
            AblationAxis::DeltaMoped => probe.delta_moped = v,
            AblationAxis::KlFactor => probe.kl_factor = v,
            AblationAxis::Dr => probe.dr = v,
        }
        probe.validate()?;
    }
    Ok(())
}

/// One evaluation per value of the ablation axis, sharing the dataset,
/// seeds and deterministic detector. `dr` is applied at inference to the
/// detector trained with `cfg.dr`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.task = Task::Ablation;
    cfg.validate()?;
    validate_ablation(&cfg)?;
    let mut rec = start(&cfg, "ablation")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let axis = cfg.ablation_axis;
    let mut rows = Vec::new();
    for &g in &cfg.generators {
        let s = binary_setting(&ds, g, cfg.seed)?;
        let name = s.name.clone();
        let det = rec.phase(&format!("train {name}"), |rec| {
            let det = train_deterministic(&cfg, &s.data)?;
            write_det(rec, &name, &det)?;
            Ok(det)
        })?;
        let base = if axis == AblationAxis::N {
            Some(rec.phase(&format!("convert {name}"), |rec| fit_uq(rec, &cfg, &name, &det, &s.data))?)
        } else {
            None
        };
        for &v in &cfg.ablation_values {
            let label = ablation_label(axis, v);
            let dir = format!("{name}/{label}");
            let mut vcfg = cfg.clone();
            let uq = rec.phase(&format!("convert {dir}"), |rec| match axis {
                AblationAxis::N => {
                    vcfg.n = v as usize;
                    Ok(None)
                }
                AblationAxis::DeltaMoped | AblationAxis::KlFactor => {
                    if axis == AblationAxis::DeltaMoped {
                        vcfg.delta_moped = v;
                    } else {
                        vcfg.kl_factor = v;
                    }
                    vcfg.uq_method = UqMethod::Bnn;
                    fit_uq(rec, &vcfg, &dir, &det, &s.data).map(Some)
                }
                AblationAxis::Dr => {
                    vcfg.dr = v;
                    Ok(Some(UqModel::Dropout(DropoutModel::new(det.clone(), v)?)))
                }
            })?;
            let uq = uq.as_ref().or(base.as_ref()).expect("n axis has a base model");
            rec.phase(&format!("eval {dir}"), |rec| {
                let [_, report] = evaluate_pair(&vcfg, &det, uq, &s.data.test, &s.data.test_ids)?;
                emit_report(rec, &dir, uq.label(), "test", &report)?;
                emit_calibration(rec, &cfg, &dir, uq.label(), "test", &report)?;
                rows.push(SummaryRow::new(cfg.task, &name, &label, uq.label(), &report));
                Ok(())
            })?;
        }
    }
    finish(rec, rows, RunOutput::default())
}

/// FGSM with the deterministic detector as surrogate against both
/// detectors of every per-generator setting.
pub fn run_attack(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.task = Task::Attack;
    let adv = AdversarialConfig::new(cfg.epsilon);
    adv.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut rec = start(&cfg, "attack")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let mut rows = Vec::new();
    let mut out = RunOutput::default();
    let mut pert = format!("{PERTURBATION_HEADER}\n");
    for &g in &cfg.generators {
        let s = binary_setting(&ds, g, cfg.seed)?;
        let mut clean_rows = Vec::new();
        let (det, uq) = full_setting(&mut rec, &cfg, cfg.task, &s, &mut clean_rows)?;
        for mut r in clean_rows {
            r.subset = "clean".into();
            rows.push(r);
        }
        rec.phase(&format!("attack {}", s.name), |rec| {
            let test = &s.data.test;
            let clean = test.all();
            let attacked = fgsm_attack(&det, &clean, &test.labels, &adv)?;
            let max_abs = clean
                .data()
                .iter()
                .zip(attacked.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let _ = writeln!(pert, "{},{},{},{}", s.name, cfg.epsilon, max_abs, test.len());
            out.perturbations.push((s.name.clone(), max_abs));
            let adv_data = LabeledData::new(test.sample_shape, attacked.data().to_vec(), test.labels.clone())?;
            let reports = evaluate_pair(&cfg, &det, &uq, &adv_data, &s.data.test_ids)?;
            for (label, report) in ["det", uq.label()].into_iter().zip(&reports) {
                emit_report(rec, &s.name, label, "fgsm", report)?;
                emit_calibration(rec, &cfg, &s.name, label, "fgsm", report)?;
                rows.push(SummaryRow::new(cfg.task, &s.name, "fgsm", label, report));
            }
            Ok(())
        })?;
    }
    rec.write("perturbation.csv", pert.as_bytes())?;
    finish(rec, rows, out)
}

fn region_means(map: &SpatialMap, inside: &[bool]) -> (f64, f64) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.values.iter().zip(inside) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

/// Saliency, Bayesian saliency and uncertainty maps for the detector of
/// `cfg.maps_generator`. Ids default to the first `cfg.map_count` fake
/// test samples of that setting.
pub fn run_maps(cfg: &ExperimentConfig, ids: Option<&[usize]>) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.task = Task::Maps;
    if cfg.uq_method != UqMethod::Bnn {
        return Err(Error::Config("maps need uq_method = bnn".into()));
    }
    if !cfg.generators.contains(&cfg.maps_generator) {
        return Err(Error::Config(format!("maps_generator {} is not in generators", cfg.maps_generator)));
    }
    let mut rec = start(&cfg, "maps")?;
    let ds = rec.phase("data", |_| dataset(&cfg))?;
    let s = binary_setting(&ds, cfg.maps_generator, cfg.seed)?;
    let ids: Vec<usize> = match ids.filter(|v| !v.is_empty()).or((!cfg.map_ids.is_empty()).then_some(&cfg.map_ids[..])) {
        Some(v) => v.to_vec(),
        None => s
            .data
            .test_ids
            .iter()
            .copied()
            .filter(|&i| ds.samples[i].binary_label == 1)
            .take(cfg.map_count)
            .collect(),
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::invalid(format!("unknown sample id {bad} (dataset has {} samples)", ds.len())));
    }
    let name = s.name.clone();
    let det = rec.phase("train", |rec| {
        let det = train_deterministic(&cfg, &s.data)?;
        write_det(rec, &name, &det)?;
        Ok(det)
    })?;
    let UqModel::Bnn(bnn) = rec.phase("convert", |rec| fit_uq(rec, &cfg, &name, &det, &s.data))? else {
        unreachable!("uq_method checked above")
    };
    let spec = GeneratorSpec::default_for(cfg.maps_generator);
    let root = RngState::new(Seeds::new(cfg.seed).maps);
    let mut out = RunOutput::default();
    rec.phase("maps", |rec| {
        let dir = rec.dir().join("maps");
        let mut csv = format!("{MAPS_HEADER}\n");
        for &id in &ids {
            let image = ds.image(id);
            let x = Tensor::new(vec![1, CHANNELS, SIZE, SIZE], image.to_vec())?;
            let rng = root.split(id as u64);
            let maps = [
                saliency_map(&det, &x, id)?,
                bayesian_saliency_map(&bnn, &x, cfg.n, &mut rng.split(0), ActivationSource::MeanOverPasses, id)?,
                uncertainty_map(&bnn, &x, cfg.n, &mut rng.split(1), id)?,
            ];
            let sample = &ds.samples[id];
            let inside = spec.region_mask(&sample.params);
            let source = sample.generator.map_or("real".to_string(), |g| g.to_string());
            for map in &maps {
                let cut = map.with_cutoff(map.kind.default_cutoff())?;
                let files = render_map(&cut, Some(image), &dir)?;
                rec.track(&files.map)?;
                if let Some(o) = &files.overlay {
                    rec.track(o)?;
                }
                let (inside_mean, outside_mean) = region_means(map, &inside);
                let stat = MapStat {
                    sample_id: id,
                    source: source.clone(),
                    kind: map.kind,
                    raw_max: map.raw_max,
                    nonzero: cut.nonzero(),
                    inside_mean,
                    outside_mean,
                };
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    stat.sample_id, stat.source, stat.kind, stat.raw_max, stat.nonzero, stat.inside_mean, stat.outside_mean
                );
                out.maps.push(stat);
            }
        }
        rec.write("maps.csv", csv.as_bytes()).map(drop)
    })?;
    finish(rec, Vec::new(), out)
}

/// Writes the dataset as PPM images plus `labels.csv` under `out/data`.
pub fn run_gen_data(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut rec = start(cfg, "gen_data")?;
    let ds = rec.phase("data", |_| dataset(cfg))?;
    rec.phase("write", |rec| {
        let split = stratified_split(&ds.source_labels(), cfg.seed);
        for path in write_dataset(&ds, &split, &rec.dir().join("data"))? {
            rec.track(&path)?;
        }
        Ok(())
    })?;
    let mut out = RunOutput::default();
    out.manifests.push(rec.finish()?);
    Ok(out)
}

fn load_det(cfg: &ExperimentConfig, setting: &str) -> Result<DeterministicModel> {
    DeterministicModel::load(&cfg.out.join(setting).join(DET_FILE))
}

/// Stage 1: deterministic detectors for every setting of `cfg.task`.
pub fn stage_train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut rec = start(cfg, "train")?;
    let ds = rec.phase("data", |_| dataset(cfg))?;
    for s in settings(cfg, &ds)? {
        rec.phase(&format!("train {}", s.name), |rec| {
            let det = train_deterministic(cfg, &s.data)?;
            write_det(rec, &s.name, &det)
        })?;
    }
    let mut out = RunOutput::default();
    out.manifests.push(rec.finish()?);
    Ok(out)
}

/// Stage 2: MOPED conversion and ELBO fine-tuning of the stage-1 models.
pub fn stage_convert(cfg: &ExperimentConfig) -> Result<RunOutput> {
    if cfg.uq_method != UqMethod::Bnn {
        return Err(Error::Config("convert applies to uq_method = bnn".into()));
    }
    let mut rec = start(cfg, "convert")?;
    let ds = rec.phase("data", |_| dataset(cfg))?;
    for s in settings(cfg, &ds)? {
        rec.phase(&format!("convert {}", s.name), |rec| {
            let det = load_det(cfg, &s.name)?;
            fit_uq(rec, cfg, &s.name, &det, &s.data).map(drop)
        })?;
    }
    let mut out = RunOutput::default();
    out.manifests.push(rec.finish()?);
    Ok(out)
}

/// Stage 3: per-sample reports and `summary.csv` from the saved models.
pub fn stage_eval(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut rec = start(cfg, "eval")?;
    let ds = rec.phase("data", |_| dataset(cfg))?;
    let mut rows = Vec::new();
    for s in settings(cfg, &ds)? {
        rec.phase(&format!("eval {}", s.name), |rec| {
            let det = load_det(cfg, &s.name)?;
            let uq = match cfg.uq_method {
                UqMethod::Bnn => UqModel::Bnn(BayesianModel::load(&cfg.out.join(&s.name).join(BNN_FILE))?),
                UqMethod::McDropout => UqModel::Dropout(DropoutModel::new(det.clone(), cfg.dr)?),
            };
            let reports = evaluate_pair(cfg, &det, &uq, &s.data.test, &s.data.test_ids)?;
            for (label, report) in ["det", uq.label()].into_iter().zip(&reports) {
                emit_report(rec, &s.name, label, "test", report)?;
                rows.push(SummaryRow::new(cfg.task, &s.name, "test", label, report));
            }
            Ok(())
        })?;
    }
    finish(rec, rows, RunOutput::default())
}

/// Stage 4: retention curves and histograms from the stage-3 reports.
pub fn stage_retention(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut rec = start(cfg, "retention")?;
    let ds = rec.phase("data", |_| dataset(cfg))?;
    let uq_label = match cfg.uq_method {
        UqMethod::Bnn => "bnn",
        UqMethod::McDropout => "mcd",
    };
    for s in settings(cfg, &ds)? {
        rec.phase(&format!("retention {}", s.name), |rec| {
            for label in ["det", uq_label] {
                let path = cfg.out.join(&s.name).join(format!("report_{label}.csv"));
                let report = read_report(&path, s.data.num_classes)?;
                emit_calibration(rec, cfg, &s.name, label, "test", &report)?;
            }
            Ok(())
        })?;
    }
    let mut out = RunOutput::default();
    out.manifests.push(rec.finish()?);
    Ok(out)
}

fn read_report(path: &Path, num_classes: usize) -> Result<UncertaintyReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    UncertaintyReport::from_csv(&text, num_classes)
}

/// Dispatches on `cfg.task`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.task {
        Task::BinaryPerGenerator | Task::BinaryAll => run_binary(cfg),
        Task::SourceDetection => run_source_detection(cfg),
        Task::Loo => run_loo(cfg),
        Task::Region => run_region(cfg),
        Task::Ablation => run_ablation(cfg),
        Task::Attack => run_attack(cfg),
        Task::Maps => run_maps(cfg, None),
    }
}
