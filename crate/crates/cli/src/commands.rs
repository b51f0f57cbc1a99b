use std::path::{Path, PathBuf};
use std::str::FromStr;

use ctshift::metrics::{
    build_report, read_report, render_csv, render_table, write_report, ExperimentReport, Method,
};
use ctshift::nncore::{load_checkpoint, save_checkpoint, Checkpoint, RngState, TrainingStage};
use ctshift::online::{run_baseline, run_online, write_event_log};
use ctshift::pipeline::{
    binary_recalls, build_base_datasets, train_base, AggregationMode, BaseModels, CascadeModels,
    Patient, PatientClass, ThresholdMultiplier,
};
use ctshift::synthgen::{gen_suite_with, SuiteSplit};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{load_split, write_split, DatasetManifest, ManifestPatient, FORMAT_VERSION};

pub const PRETEXT_FILE: &str = "pretext.ckpt";
pub const MODEL_A_FILE: &str = "model_a.ckpt";
pub const MODEL_B_FILE: &str = "model_b.ckpt";
pub const CASCADE_FILE: &str = "cascade.json";

/// Decision settings saved next to the three checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeMeta {
    pub format_version: u32,
    pub seed: u64,
    pub pretext: String,
    pub model_a: String,
    pub model_b: String,
    pub healthy_factor: f64,
    pub aggregation_mode: AggregationMode,
    pub mult_healthy: ThresholdMultiplier,
    pub mult_b: ThresholdMultiplier,
    /// Validation slice recalls (healthy, unhealthy) of model A.
    pub val_recalls_a: [Option<f64>; 2],
    /// Validation slice recalls (covid, cap) of model B.
    pub val_recalls_b: [Option<f64>; 2],
}

/// One row of the experiment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExperimentId {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    Exp6,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::Exp1,
        ExperimentId::Exp2,
        ExperimentId::Exp3,
        ExperimentId::Exp4,
        ExperimentId::Exp5,
        ExperimentId::Exp6,
    ];

    fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> String {
        format!("Exp{}", self.number())
    }

    pub fn method(self) -> Method {
        if self.number() <= 3 {
            Method::Baseline
        } else {
            Method::OnlineUnsupervised
        }
    }

    pub fn split(self) -> SuiteSplit {
        match (self.number() - 1) % 3 {
            0 => SuiteSplit::Test1,
            1 => SuiteSplit::Test2,
            _ => SuiteSplit::Test3,
        }
    }
}

impl FromStr for ExperimentId {
    type Err = CliError;

    /// Accepts `Exp1`..`Exp6` in any case, or a bare `1`..`6`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let digits = lower.strip_prefix("exp").unwrap_or(&lower);
        match digits.parse::<usize>() {
            Ok(n @ 1..=6) => Ok(ExperimentId::ALL[n - 1]),
            _ => Err(CliError::Config(format!(
                "unknown experiment {s:?} (expected Exp1..Exp6)"
            ))),
        }
    }
}

/// Write the synthetic suite under `<out>/data/<split>/`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<(SuiteSplit, usize)>, CliError> {
    cfg.validate()?;
    let suite = gen_suite_with(&cfg.suite, cfg.seed).map_err(CliError::Config)?;
    let mut written = Vec::new();
    for split in SuiteSplit::ALL {
        let dir = cfg.data_dir().join(split.name());
        let patients = suite.split(split);
        write_split(patients, &dir)?;
        log::info!(
            "{}: {} patients -> {}",
            split.name(),
            patients.len(),
            dir.display()
        );
        written.push((split, patients.len()));
    }
    Ok(written)
}

fn side(cfg: &RunConfig) -> usize {
    cfg.suite.image_side
}

fn load(cfg: &RunConfig, split: SuiteSplit) -> Result<Vec<Patient>, CliError> {
    load_split(&cfg.manifest_path(split), side(cfg))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
}

fn transfer_checkpoint(model: &ctshift::nncore::ClassifierModel) -> Checkpoint {
    Checkpoint::new(
        model.clone(),
        TrainingStage::PostTransfer,
        RngState::default(),
    )
}

fn save_cascade_models(cascade: &CascadeModels, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    save_checkpoint(
        &transfer_checkpoint(&cascade.model_a),
        &dir.join(MODEL_A_FILE),
    )?;
    save_checkpoint(
        &transfer_checkpoint(&cascade.model_b),
        &dir.join(MODEL_B_FILE),
    )?;
    Ok(())
}

/// Pretext pretraining, models A and B and both multipliers. Writes
/// `pretext.ckpt`, `model_a.ckpt`, `model_b.ckpt` and `cascade.json` under
/// `<out>/models/`.
pub fn cmd_train_base(cfg: &RunConfig) -> Result<CascadeMeta, CliError> {
    cfg.validate()?;
    let pipeline = cfg.seeded_pipeline();
    let train = load(cfg, SuiteSplit::Train)?;
    let val = load(cfg, SuiteSplit::Val)?;
    let base = train_base(&train, &val, &pipeline)?;
    let c = &base.cascade;
    log::info!(
        "multipliers: healthy {:.4} (class {}), B {:.4} (class {})",
        c.mult_healthy.factor,
        c.mult_healthy.favored_class,
        c.mult_b.factor,
        c.mult_b.favored_class
    );

    let dir = cfg.models_dir();
    create_dir(&dir)?;
    save_checkpoint(&base.pretext, &dir.join(PRETEXT_FILE))?;
    save_cascade_models(c, &dir)?;
    let meta = CascadeMeta {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        pretext: PRETEXT_FILE.into(),
        model_a: MODEL_A_FILE.into(),
        model_b: MODEL_B_FILE.into(),
        healthy_factor: c.healthy_factor,
        aggregation_mode: c.aggregation_mode,
        mult_healthy: c.mult_healthy,
        mult_b: c.mult_b,
        val_recalls_a: binary_recalls(&c.model_a, &base.datasets.val_a)?,
        val_recalls_b: binary_recalls(&c.model_b, &base.datasets.val_b)?,
    };
    write_json(&meta, &dir.join(CASCADE_FILE))?;
    Ok(meta)
}

/// Reload what `cmd_train_base` wrote, plus the base slice sets.
pub fn load_base(cfg: &RunConfig) -> Result<BaseModels, CliError> {
    let dir = cfg.models_dir();
    let meta_path = dir.join(CASCADE_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| CliError::io(&meta_path, e))?;
    let meta: CascadeMeta = serde_json::from_str(&text).map_err(|e| CliError::io(&meta_path, e))?;
    let pretext = load_checkpoint(&dir.join(&meta.pretext))?;
    if pretext.training_stage != TrainingStage::PostPretext {
        return Err(CliError::Data(format!(
            "{} is not a PostPretext checkpoint",
            meta.pretext
        )));
    }
    let model_a = load_checkpoint(&dir.join(&meta.model_a))?.model;
    let model_b = load_checkpoint(&dir.join(&meta.model_b))?.model;
    let train = load(cfg, SuiteSplit::Train)?;
    let val = load(cfg, SuiteSplit::Val)?;
    let datasets = build_base_datasets(&train, &val, &cfg.pipeline.selection)?;
    Ok(BaseModels {
        pretext,
        cascade: CascadeModels {
            model_a,
            model_b,
            healthy_factor: meta.healthy_factor,
            mult_healthy: meta.mult_healthy,
            mult_b: meta.mult_b,
            aggregation_mode: meta.aggregation_mode,
        },
        datasets,
    })
}

/// Run one experiment and write `<out>/reports/expN.json`. Online runs also
/// write `expN_events.jsonl` and the final retrained models under
/// `<out>/models/expN/`.
pub fn cmd_experiment(id: ExperimentId, cfg: &RunConfig) -> Result<ExperimentReport, CliError> {
    cfg.validate()?;
    let pipeline = cfg.seeded_pipeline();
    let base = load_base(cfg)?;
    let split = id.split();
    let test = load(cfg, split)?;
    let truth: Vec<PatientClass> = test
        .iter()
        .map(|p| {
            p.label.ok_or_else(|| {
                CliError::Data(format!(
                    "patient {} has no label; reports need labels",
                    p.id
                ))
            })
        })
        .collect::<Result<_, _>>()?;

    let reports = cfg.reports_dir();
    create_dir(&reports)?;
    let stem = id.name().to_ascii_lowercase();
    let report = match id.method() {
        Method::Baseline => {
            let run = run_baseline(&test, &base.cascade, &pipeline.selection)?;
            build_report(
                &id.name(),
                split.name(),
                Method::Baseline,
                &run.verdicts,
                &truth,
                None,
                None,
            )?
        }
        Method::OnlineUnsupervised => {
            let run = run_online(&test, &base, &pipeline, &cfg.online)?;
            let events = reports.join(format!("{stem}_events.jsonl"));
            write_event_log(&run.events, &events).map_err(|e| CliError::io(&events, e))?;
            save_cascade_models(run.final_cascade(), &cfg.models_dir().join(&stem))?;
            build_report(
                &id.name(),
                split.name(),
                Method::OnlineUnsupervised,
                &run.verdicts,
                &truth,
                run.per_quarter_accuracy(),
                Some(run.harvest_log()),
            )?
        }
    };
    write_report(&report, &reports.join(format!("{stem}.json")))?;
    log::info!(
        "{} on {}: accuracy {:.3} +- {:.3}",
        report.experiment_id,
        report.test_set,
        report.accuracy,
        report.ci_half_width
    );
    Ok(report)
}

/// Report files under `<out>/reports/` in experiment order.
pub fn default_report_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    ExperimentId::ALL
        .iter()
        .map(|id| {
            cfg.reports_dir()
                .join(format!("{}.json", id.name().to_ascii_lowercase()))
        })
        .filter(|p| p.is_file())
        .collect()
}

/// Read reports, returning the text table; the CSV goes to `csv_out`.
pub fn cmd_report(paths: &[PathBuf], csv_out: Option<&Path>) -> Result<String, CliError> {
    let reports = paths
        .iter()
        .map(|p| read_report(p).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(out) = csv_out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        std::fs::write(out, render_csv(&reports)?).map_err(|e| CliError::io(out, e))?;
    }
    Ok(render_table(&reports))
}

fn is_pgm(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::io(dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

fn ingest_patient(
    dir: &Path,
    label: Option<PatientClass>,
) -> Result<Option<ManifestPatient>, CliError> {
    let slices: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| is_pgm(p))
        .collect();
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if slices.is_empty() {
        log::warn!("skipping {}: no PGM slices", dir.display());
        return Ok(None);
    }
    Ok(Some(ManifestPatient {
        id,
        label,
        slice_files: slices,
        slice_labels: None,
    }))
}

/// Build a manifest from `<dir>/<patient>/*.pgm`, or from
/// `<dir>/<class>/<patient>/*.pgm` when every top-level folder is named
/// after a class (healthy, covid, cap). Slices are ordered by file name.
pub fn cmd_ingest(dir: &Path, manifest_out: &Path) -> Result<DatasetManifest, CliError> {
    let root = std::fs::canonicalize(dir).map_err(|e| CliError::io(dir, e))?;
    let folders: Vec<PathBuf> = sorted_entries(&root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let class_of = |p: &Path| {
        p.file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| PatientClass::from_str(n).ok())
    };
    let by_class = !folders.is_empty() && folders.iter().all(|f| class_of(f).is_some());

    let mut patients = Vec::new();
    if by_class {
        for class_dir in &folders {
            let label = class_of(class_dir);
            for p in sorted_entries(class_dir)?
                .into_iter()
                .filter(|p| p.is_dir())
            {
                patients.extend(ingest_patient(&p, label)?);
            }
        }
    } else {
        for p in &folders {
            patients.extend(ingest_patient(p, None)?);
        }
    }
    if patients.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no patient folders with PGM slices",
            dir.display()
        )));
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        patients,
    };
    manifest.validate(Path::new("/"))?;
    manifest.save(manifest_out)?;
    log::info!(
        "{} patients -> {}",
        manifest.patients.len(),
        manifest_out.display()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_table_rows() {
        use ExperimentId::*;
        let rows: Vec<_> = ExperimentId::ALL
            .iter()
            .map(|e| (e.method(), e.split()))
            .collect();
        assert_eq!(
            rows,
            vec![
                (Method::Baseline, SuiteSplit::Test1),
                (Method::Baseline, SuiteSplit::Test2),
                (Method::Baseline, SuiteSplit::Test3),
                (Method::OnlineUnsupervised, SuiteSplit::Test1),
                (Method::OnlineUnsupervised, SuiteSplit::Test2),
                (Method::OnlineUnsupervised, SuiteSplit::Test3),
            ]
        );
        assert_eq!(Exp5.name(), "Exp5");
    }

    #[test]
    fn experiment_ids_parse() {
        assert_eq!("Exp3".parse::<ExperimentId>().unwrap(), ExperimentId::Exp3);
        assert_eq!("exp6".parse::<ExperimentId>().unwrap(), ExperimentId::Exp6);
        assert_eq!("2".parse::<ExperimentId>().unwrap(), ExperimentId::Exp2);
        for bad in ["Exp0", "Exp7", "foo", ""] {
            assert_eq!(bad.parse::<ExperimentId>().unwrap_err().exit_code(), 2);
        }
    }
}
