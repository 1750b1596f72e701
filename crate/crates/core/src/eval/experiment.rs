//! Cross-validated experiment: harmonize, oversample, build graphs, train
//! one classifier per atlas, fuse and score every fold.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, ConfusionMatrix, Metrics};
use super::stats::Stat;
use super::{EvalError, Result, Stage};
use crate::augment::{oversample_split, SmoteConfig, SplitKind, SplitMember};
use crate::dataset::{Cohort, Fold, Label, SplitPlan, SubjectRecord, TimeSeries};
use crate::ensemble::{fuse, FusionMethod, MemberPrediction};
use crate::gat::{self, GatConfig, GatModel, GraphInput, Sample, TrainConfig, TrainOutcome};
use crate::graphbuild::{build_graph, NeighborRanking};
use crate::harmonize::{apply_combat, fit_combat};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonizeScope {
    /// Fit on the fold's training subjects only.
    #[default]
    Train,
    /// Fit on every subject of the cohort.
    Cohort,
}

/// Everything a run needs besides the data. Seeds inside `smote` and
/// `train` are ignored; per-stage seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub fold_count: usize,
    pub harmonize: bool,
    pub empirical_bayes: bool,
    pub harmonize_scope: HarmonizeScope,
    pub smote_enabled: bool,
    pub smote: SmoteConfig,
    pub knn_k: usize,
    pub neighbor_ranking: NeighborRanking,
    pub gat: GatConfig,
    pub train: TrainConfig,
    pub methods: Vec<FusionMethod>,
    /// Atlases to use; empty means all atlases of the cohort.
    pub atlases: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fold_count: 10,
            harmonize: true,
            empirical_bayes: true,
            harmonize_scope: HarmonizeScope::Train,
            smote_enabled: true,
            smote: SmoteConfig::default(),
            knn_k: 10,
            neighbor_ranking: NeighborRanking::Absolute,
            gat: GatConfig::default(),
            train: TrainConfig::default(),
            methods: FusionMethod::ALL.to_vec(),
            atlases: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Smaller classifier and epoch budget that keep the synthetic
    /// 320-subject, 10-fold benchmark within minutes on one CPU.
    pub fn benchmark() -> Self {
        Self {
            gat: GatConfig {
                hidden_units: 8,
                heads: 2,
                ..GatConfig::default()
            },
            train: TrainConfig {
                learning_rate: 5e-3,
                max_epochs: 8,
                patience: 4,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.fold_count < 2 {
            return bad(format!("fold_count must be at least 2, got {}", self.fold_count));
        }
        if self.knn_k < 1 {
            return bad("knn_k must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("at least one fusion method is required".into());
        }
        self.smote.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        self.gat.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn resolve_atlases(&self, cohort: &Cohort) -> Result<Vec<String>> {
        if self.atlases.is_empty() {
            return Ok(cohort.atlas_names());
        }
        for a in &self.atlases {
            if cohort.atlas(a).is_none() {
                return Err(EvalError::Config(format!("atlas {a:?} is not in the cohort")));
            }
        }
        Ok(self.atlases.clone())
    }
}

const SMOTE_STREAM: u64 = 0x5307E;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

pub fn smote_seed(master: u64, fold: usize) -> u64 {
    seed::derive(master, &[fold as u64, SMOTE_STREAM])
}

pub fn init_seed(master: u64, fold: usize, atlas: usize) -> u64 {
    seed::derive(master, &[fold as u64, atlas as u64, INIT_STREAM])
}

pub fn train_seed(master: u64, fold: usize, atlas: usize) -> u64 {
    seed::derive(master, &[fold as u64, atlas as u64, TRAIN_STREAM])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_real: usize,
    pub train_total: usize,
    pub validation_real: usize,
    pub validation_total: usize,
    pub test: usize,
}

/// One atlas's graphs for one fold.
#[derive(Debug, Clone)]
pub struct AtlasFoldData {
    pub atlas: String,
    pub roi_count: usize,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test_ids: Vec<String>,
    pub test: Vec<Sample>,
    pub sizes: SplitSizes,
}

fn records<'a>(cohort: &'a Cohort, ids: &[String]) -> Vec<&'a SubjectRecord> {
    let index = cohort.index();
    ids.iter().map(|id| &cohort.subjects[index[id.as_str()]]).collect()
}

/// Harmonized (or raw) series of `subjects` for one atlas.
pub fn harmonized_series(
    cohort: &Cohort,
    fold: &Fold,
    atlas: &str,
    subjects: &[&SubjectRecord],
    cfg: &PipelineConfig,
) -> Result<Vec<TimeSeries>> {
    let stage_err = |e: &dyn std::fmt::Display, numerical: bool| EvalError::Stage {
        stage: Stage::Harmonize,
        fold: fold.index,
        atlas: Some(atlas.to_string()),
        numerical,
        message: e.to_string(),
    };
    if !cfg.harmonize {
        return subjects
            .iter()
            .map(|s| {
                s.series(atlas)
                    .cloned()
                    .ok_or_else(|| stage_err(&format!("subject {} lacks atlas {atlas}", s.id), false))
            })
            .collect();
    }
    let fit_on: Vec<&SubjectRecord> = match cfg.harmonize_scope {
        HarmonizeScope::Train => records(cohort, &fold.train),
        HarmonizeScope::Cohort => cohort.subjects.iter().collect(),
    };
    let model = fit_combat(&fit_on, atlas, cfg.empirical_bayes).map_err(|e| {
        let numerical = matches!(e, crate::harmonize::HarmonizeError::SingularDesign);
        stage_err(&e, numerical)
    })?;
    subjects
        .par_iter()
        .map(|s| apply_combat(&model, s).map_err(|e| stage_err(&e, false)))
        .collect()
}

fn graphs(
    fold: usize,
    atlas: &str,
    items: Vec<(Label, TimeSeries)>,
    cfg: &PipelineConfig,
) -> Result<Vec<Sample>> {
    items
        .into_par_iter()
        .map(|(label, series)| {
            let g = build_graph(&series, cfg.knn_k, cfg.neighbor_ranking).map_err(|e| EvalError::Stage {
                stage: Stage::Graphs,
                fold,
                atlas: Some(atlas.to_string()),
                numerical: false,
                message: e.to_string(),
            })?;
            Ok(Sample {
                graph: GraphInput::from_graph(&g),
                label,
            })
        })
        .collect()
}

fn oversample(
    fold: usize,
    atlas: &str,
    split: SplitKind,
    ids: &[String],
    subjects: &[&SubjectRecord],
    series: Vec<TimeSeries>,
    cfg: &PipelineConfig,
) -> Result<Vec<(Label, TimeSeries)>> {
    if !cfg.smote_enabled {
        return Ok(subjects.iter().map(|s| s.label).zip(series).collect());
    }
    let members: Vec<SplitMember<'_>> = ids
        .iter()
        .zip(subjects)
        .zip(&series)
        .map(|((id, s), ts)| SplitMember {
            id,
            label: s.label,
            series: ts,
        })
        .collect();
    let smote = SmoteConfig {
        seed: smote_seed(cfg.seed, fold),
        ..cfg.smote.clone()
    };
    let out = oversample_split(split, &members, &smote).map_err(|e| EvalError::Stage {
        stage: Stage::Oversample,
        fold,
        atlas: Some(atlas.to_string()),
        numerical: false,
        message: e.to_string(),
    })?;
    Ok(out.into_iter().map(|s| (s.label, s.series)).collect())
}

/// Runs harmonization, oversampling and graph construction for one
/// atlas of one fold. With `include_training` false only the test graphs
/// are built.
pub fn prepare_atlas(
    cohort: &Cohort,
    fold: &Fold,
    atlas: &str,
    cfg: &PipelineConfig,
    include_training: bool,
) -> Result<AtlasFoldData> {
    let roi_count = cohort
        .atlas(atlas)
        .map(|a| a.n_rois)
        .ok_or_else(|| EvalError::Config(format!("atlas {atlas:?} is not in the cohort")))?;
    let train_rec = records(cohort, &fold.train);
    let val_rec = records(cohort, &fold.validation);
    let test_rec = records(cohort, &fold.test);

    let mut wanted: Vec<&SubjectRecord> = test_rec.clone();
    if include_training {
        wanted.extend(&train_rec);
        wanted.extend(&val_rec);
    }
    let mut series = harmonized_series(cohort, fold, atlas, &wanted, cfg)?;
    let mut rest = series.split_off(test_rec.len());
    let test_items = test_rec.iter().map(|s| s.label).zip(series).collect();
    let test = graphs(fold.index, atlas, test_items, cfg)?;

    let mut sizes = SplitSizes {
        train_real: train_rec.len(),
        validation_real: val_rec.len(),
        test: test.len(),
        ..SplitSizes::default()
    };
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    if include_training {
        let vs = rest.split_off(train_rec.len());
        let items = oversample(fold.index, atlas, SplitKind::Train, &fold.train, &train_rec, rest, cfg)?;
        train = graphs(fold.index, atlas, items, cfg)?;
        let items = oversample(
            fold.index,
            atlas,
            SplitKind::Validation,
            &fold.validation,
            &val_rec,
            vs,
            cfg,
        )?;
        validation = graphs(fold.index, atlas, items, cfg)?;
        sizes.train_total = train.len();
        sizes.validation_total = validation.len();
    }
    Ok(AtlasFoldData {
        atlas: atlas.to_string(),
        roi_count,
        train,
        validation,
        test_ids: fold.test.clone(),
        test,
        sizes,
    })
}

/// Trains the classifier of atlas number `atlas_index` on prepared data.
pub fn train_member(
    data: &AtlasFoldData,
    fold: usize,
    atlas_index: usize,
    cfg: &PipelineConfig,
) -> Result<TrainOutcome> {
    let stage_err = |e: gat::GatError| EvalError::Stage {
        stage: Stage::Train,
        fold,
        atlas: Some(data.atlas.clone()),
        numerical: matches!(e, gat::GatError::Divergence { .. }),
        message: e.to_string(),
    };
    let model = GatModel::new(
        data.atlas.clone(),
        data.roi_count,
        cfg.gat.clone(),
        init_seed(cfg.seed, fold, atlas_index),
    )
    .map_err(stage_err)?;
    let tc = TrainConfig {
        seed: train_seed(cfg.seed, fold, atlas_index),
        ..cfg.train.clone()
    };
    gat::train(model, &data.train, &data.validation, &tc).map_err(stage_err)
}

/// Test-set probabilities of one member.
pub fn predict_test(model: &GatModel, data: &AtlasFoldData, fold: usize) -> Result<Vec<[f64; 2]>> {
    data.test
        .par_iter()
        .map(|s| {
            model.predict(&s.graph).map_err(|e| EvalError::Stage {
                stage: Stage::Predict,
                fold,
                atlas: Some(data.atlas.clone()),
                numerical: false,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub atlas: String,
    pub validation_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub id: String,
    pub truth: Label,
    pub members: Vec<MemberPrediction>,
    pub fused: BTreeMap<FusionMethod, Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub sizes: SplitSizes,
    pub members: Vec<MemberReport>,
    pub methods: BTreeMap<FusionMethod, MethodReport>,
    pub subjects: Vec<SubjectPrediction>,
}

/// A trained member's test predictions, as input to fusion.
#[derive(Debug, Clone)]
pub struct MemberResult {
    pub atlas: String,
    pub validation_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_probabilities: Vec<[f64; 2]>,
}

fn score(fold: usize, truth: &[Label], predicted: impl Iterator<Item = Label>) -> Result<(ConfusionMatrix, Metrics)> {
    let cm = ConfusionMatrix::from_pairs(truth.iter().copied().zip(predicted));
    let m = metrics(&cm).map_err(|e| EvalError::Stage {
        stage: Stage::Fuse,
        fold,
        atlas: None,
        numerical: false,
        message: e.to_string(),
    })?;
    Ok((cm, m))
}

/// Fuses member predictions and scores members and fusion methods.
pub fn assemble_fold(
    fold: usize,
    sizes: SplitSizes,
    test_ids: &[String],
    truth: &[Label],
    members: &[MemberResult],
    methods: &[FusionMethod],
) -> Result<FoldReport> {
    let mut member_reports = Vec::new();
    for m in members {
        let labels = m.test_probabilities.iter().map(|&p| gat::argmax(p));
        let (confusion, metrics) = score(fold, truth, labels)?;
        member_reports.push(MemberReport {
            atlas: m.atlas.clone(),
            validation_accuracy: m.validation_accuracy,
            best_epoch: m.best_epoch,
            epochs_run: m.epochs_run,
            confusion,
            metrics,
        });
    }
    let mut subjects = Vec::with_capacity(test_ids.len());
    for (i, id) in test_ids.iter().enumerate() {
        let preds: Vec<MemberPrediction> = members
            .iter()
            .map(|m| MemberPrediction::new(m.atlas.clone(), m.test_probabilities[i], m.validation_accuracy))
            .collect();
        let mut fused = BTreeMap::new();
        for &method in methods {
            let label = fuse(method, &preds).map_err(|e| EvalError::Stage {
                stage: Stage::Fuse,
                fold,
                atlas: None,
                numerical: false,
                message: e.to_string(),
            })?;
            fused.insert(method, label);
        }
        subjects.push(SubjectPrediction {
            id: id.clone(),
            truth: truth[i],
            members: preds,
            fused,
        });
    }
    let mut method_reports = BTreeMap::new();
    for &method in methods {
        let (confusion, metrics) = score(fold, truth, subjects.iter().map(|s| s.fused[&method]))?;
        method_reports.insert(method, MethodReport { confusion, metrics });
    }
    Ok(FoldReport {
        fold,
        sizes,
        members: member_reports,
        methods: method_reports,
        subjects,
    })
}

/// Runs every stage of one fold.
pub fn run_fold(cohort: &Cohort, fold: &Fold, cfg: &PipelineConfig) -> Result<FoldReport> {
    let atlases = cfg.resolve_atlases(cohort)?;
    let all = cohort.atlas_names();
    let results: Vec<(MemberResult, SplitSizes)> = atlases
        .par_iter()
        .map(|atlas| {
            let atlas_index = all.iter().position(|a| a == atlas).expect("resolved");
            let data = prepare_atlas(cohort, fold, atlas, cfg, true)?;
            let outcome = train_member(&data, fold.index, atlas_index, cfg)?;
            log::info!(
                "fold {} {atlas}: best epoch {} of {}, validation accuracy {:.3}",
                fold.index,
                outcome.best_epoch,
                outcome.history.len(),
                outcome.best_validation_accuracy
            );
            let probs = predict_test(&outcome.model, &data, fold.index)?;
            Ok((
                MemberResult {
                    atlas: atlas.clone(),
                    validation_accuracy: outcome.best_validation_accuracy,
                    best_epoch: outcome.best_epoch,
                    epochs_run: outcome.history.len(),
                    test_probabilities: probs,
                },
                data.sizes,
            ))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<Label> = records(cohort, &fold.test).iter().map(|s| s.label).collect();
    let sizes = results[0].1;
    let members: Vec<MemberResult> = results.into_iter().map(|(m, _)| m).collect();
    assemble_fold(fold.index, sizes, &fold.test, &truth, &members, &cfg.methods)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub accuracy: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
    pub precision: Stat,
    pub f1: Stat,
}

impl MetricStats {
    pub fn from_metrics<'a>(items: impl Iterator<Item = &'a Metrics> + Clone) -> Self {
        let column = |k: usize| {
            let v: Vec<f64> = items.clone().filter_map(|m| m.values()[k].value()).collect();
            Stat::from_values(&v)
        };
        Self {
            accuracy: column(0),
            sensitivity: column(1),
            specificity: column(2),
            precision: column(3),
            f1: column(4),
        }
    }

    pub fn stats(&self) -> [&Stat; 5] {
        [&self.accuracy, &self.sensitivity, &self.specificity, &self.precision, &self.f1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fold_count: usize,
    pub methods: BTreeMap<FusionMethod, MetricStats>,
    pub atlases: BTreeMap<String, MetricStats>,
}

pub fn summarize(folds: &[FoldReport]) -> Summary {
    let mut methods = BTreeMap::new();
    let mut atlases = BTreeMap::new();
    if let Some(first) = folds.first() {
        for method in first.methods.keys() {
            let it = folds.iter().filter_map(|f| f.methods.get(method)).map(|r| &r.metrics);
            methods.insert(*method, MetricStats::from_metrics(it));
        }
        for member in &first.members {
            let it = folds
                .iter()
                .flat_map(|f| f.members.iter().filter(|m| m.atlas == member.atlas))
                .map(|m| &m.metrics);
            atlases.insert(member.atlas.clone(), MetricStats::from_metrics(it));
        }
    }
    Summary {
        fold_count: folds.len(),
        methods,
        atlases,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
}

pub fn run_experiment(cohort: &Cohort, plan: &SplitPlan, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    cfg.resolve_atlases(cohort)?;
    let folds: Vec<FoldReport> = plan
        .folds
        .par_iter()
        .map(|fold| run_fold(cohort, fold, cfg))
        .collect::<Result<_>>()?;
    let summary = summarize(&folds);
    Ok(ExperimentReport { folds, summary })
}

fn cell(stat: &Stat) -> String {
    match (stat.mean, stat.sd) {
        (Some(m), Some(s)) => format!("{:6.2} ± {:5.2}", 100.0 * m, 100.0 * s),
        (Some(m), None) => format!("{:6.2}        ", 100.0 * m),
        _ => format!("{:>14}", "undefined"),
    }
}

/// Aligned text table of mean ± sd in percent, one row per model.
pub fn summary_table(summary: &Summary) -> String {
    let headers = ["Acc", "Sen", "Spe", "Pre", "F1"];
    let mut out = format!("{:<16}", "Model");
    for h in headers {
        out.push_str(&format!("  {h:^14}"));
    }
    out.push('\n');
    let mut row = |name: String, stats: &MetricStats| {
        out.push_str(&format!("{name:<16}"));
        for s in stats.stats() {
            out.push_str("  ");
            out.push_str(&cell(s));
        }
        out.push('\n');
    };
    for (atlas, stats) in &summary.atlases {
        row(atlas.clone(), stats);
    }
    for (method, stats) in &summary.methods {
        row(format!("ensemble/{method}"), stats);
    }
    out
}

/// One CSV row per test subject and fold with member probabilities of
/// the positive class and every fused label.
pub fn subject_csv(folds: &[FoldReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let Some(first) = folds.first().and_then(|f| f.subjects.first()) else {
        return Ok(String::new());
    };
    let methods: Vec<FusionMethod> = first.fused.keys().copied().collect();
    let mut header = vec!["fold".to_string(), "id".into(), "truth".into()];
    header.extend(first.members.iter().map(|m| format!("p_positive_{}", m.atlas)));
    header.extend(methods.iter().map(|m| m.to_string()));
    let csv_err = |e: csv::Error| EvalError::Config(format!("writing CSV: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for f in folds {
        for s in &f.subjects {
            let mut rec = vec![f.fold.to_string(), s.id.clone(), s.truth.to_string()];
            rec.extend(s.members.iter().map(|m| format!("{}", m.probabilities[1])));
            rec.extend(methods.iter().map(|m| s.fused[m].to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}
