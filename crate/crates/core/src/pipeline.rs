//! End-to-end run: extract, featurize, split by time, train, evaluate and
//! ablate, then write every artifact into one directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::cascade::Cascade;
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_ablation, temporal_split, AblationTable, EvalReport};
use crate::exposure::{save_instances, ChoiceInstance, ExposureDistribution};
use crate::features::{featurize_all, save_features, HistoryIndex, LabeledVector};
use crate::graph::FollowGraph;
use crate::model::{fit, ChoiceModel, FitConfig, TrainReport};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub tz_offset_hours: f64,
    /// Split point on original-post time. `None` picks the median
    /// instance root time.
    pub boundary: Option<i64>,
    pub threshold: f64,
    pub fit: FitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tz_offset_hours: crate::features::DEFAULT_TZ_OFFSET_HOURS,
            boundary: None,
            threshold: crate::eval::DEFAULT_THRESHOLD,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineCounts {
    pub cascades: usize,
    pub instances: usize,
    pub parent_mismatch: usize,
    pub tied_instances: usize,
    pub train: usize,
    pub test: usize,
    pub boundary: i64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub counts: PipelineCounts,
    pub distribution: ExposureDistribution,
    pub instances: Vec<ChoiceInstance>,
    pub train: Vec<LabeledVector>,
    pub test: Vec<LabeledVector>,
    pub model: ChoiceModel,
    pub train_report: TrainReport,
    pub eval: EvalReport,
    pub ablation: AblationTable,
}

/// Median root time over instances, so roughly half land on each side.
pub fn median_boundary(instances: &[ChoiceInstance]) -> Option<i64> {
    let mut times: Vec<i64> = instances.iter().map(|i| i.root_time).collect();
    if times.is_empty() {
        return None;
    }
    times.sort_unstable();
    Some(times[times.len() / 2])
}

/// Runs the whole chain in memory.
pub fn run(g: &FollowGraph, cascades: &[Cascade], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let distribution = ExposureDistribution::for_cascades(g, cascades);
    let extraction = crate::exposure::extract_instances(g, cascades);
    let instances = extraction.instances;
    if instances.is_empty() {
        return Err(Error::Data(
            "no choice instances: no user forwarded after exactly two exposures".into(),
        ));
    }
    let boundary = match cfg.boundary {
        Some(b) => b,
        None => median_boundary(&instances).expect("instances are non-empty"),
    };
    let (train_inst, test_inst) = temporal_split(&instances, boundary);
    if train_inst.is_empty() || test_inst.is_empty() {
        return Err(Error::Data(format!(
            "boundary {boundary} leaves {} training and {} test instances",
            train_inst.len(),
            test_inst.len()
        )));
    }
    let history = HistoryIndex::build(cascades, i64::MAX);
    // train and score on the values the feature files hold, so every
    // downstream artifact can be reproduced from those files
    let written = |rows: Vec<LabeledVector>| {
        rows.iter()
            .map(LabeledVector::as_written)
            .collect::<Vec<_>>()
    };
    let train = written(featurize_all(
        &train_inst,
        g,
        cascades,
        &history,
        cfg.tz_offset_hours,
    )?);
    let test = written(featurize_all(
        &test_inst,
        g,
        cascades,
        &history,
        cfg.tz_offset_hours,
    )?);

    let (model, train_report) = fit(&train, &cfg.fit)?;
    let eval = evaluate(&model, &test, cfg.threshold)?;
    let ablation = run_ablation(&train, &test, &cfg.fit.grouping, &cfg.fit, cfg.threshold)?;

    let counts = PipelineCounts {
        cascades: cascades.len(),
        instances: instances.len(),
        parent_mismatch: extraction.parent_mismatch,
        tied_instances: instances.iter().filter(|i| i.tied).count(),
        train: train.len(),
        test: test.len(),
        boundary,
    };
    Ok(PipelineOutput {
        counts,
        distribution,
        instances,
        train,
        test,
        model,
        train_report,
        eval,
        ablation,
    })
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Artifact file names, in the order they are written.
pub const ARTIFACTS: [&str; 8] = [
    "exposure_distribution.tsv",
    "instances.tsv",
    "features_train.tsv",
    "features_test.tsv",
    "model.json",
    "train_report.json",
    "eval.json",
    "ablation.tsv",
];

impl PipelineOutput {
    /// Writes all artifacts into `dir`, creating it if needed. The content
    /// depends only on the inputs and configuration.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = |name: &str| dir.join(name);

        let path = p(ARTIFACTS[0]);
        let mut w = create(&path)?;
        self.distribution
            .write_tsv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;

        save_instances(p(ARTIFACTS[1]), &self.instances)?;
        save_features(p(ARTIFACTS[2]), &self.train)?;
        save_features(p(ARTIFACTS[3]), &self.test)?;
        self.model.save(p(ARTIFACTS[4]))?;
        write_json(&p(ARTIFACTS[5]), &self.train_report)?;
        write_json(&p(ARTIFACTS[6]), &self.eval)?;

        let path = p(ARTIFACTS[7]);
        let mut w = create(&path)?;
        self.ablation
            .write_tsv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}
