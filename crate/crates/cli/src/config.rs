//! Run configuration: a JSON file, `--seed`/`--out` flags and dotted
//! `--set key=value` overrides, validated before any command runs.

use std::path::{Path, PathBuf};

use ctshift::online::OnlineConfig;
use ctshift::pipeline::PipelineConfig;
use ctshift::synthgen::{SuiteConfig, SuiteSplit};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Manifest locations. `None` means `<out>/data/<split>/manifest.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test1: Option<PathBuf>,
    pub test2: Option<PathBuf>,
    pub test3: Option<PathBuf>,
}

/// Every tunable of a run. Training seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Root for generated data, models and reports.
    pub out: PathBuf,
    pub data: DataPaths,
    pub suite: SuiteConfig,
    pub pipeline: PipelineConfig,
    pub online: OnlineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            data: DataPaths::default(),
            suite: SuiteConfig::default(),
            pipeline: PipelineConfig::default(),
            online: OnlineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read a JSON config; missing keys take defaults, unknown keys fail.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `key.path=value` overrides. Values parse as JSON, falling back
    /// to a plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(self).map_err(|e| CliError::Config(e.to_string()))?;
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set {set}: expected KEY=VALUE")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline
            .validate()
            .map_err(|e| CliError::Config(format!("pipeline: {e}")))?;
        self.online
            .validate()
            .map_err(|e| CliError::Config(format!("online: {e}")))?;
        for split in SuiteSplit::ALL {
            self.suite
                .gen_config(split, self.seed)
                .validate()
                .map_err(|e| CliError::Config(format!("suite.{}: {e}", split.name())))?;
        }
        if !self.suite.image_side.is_multiple_of(4) || self.suite.image_side < 8 {
            return Err(CliError::Config(format!(
                "suite.image_side {} must be >= 8 and divisible by 4",
                self.suite.image_side
            )));
        }
        Ok(())
    }

    /// Pipeline settings with training seeds derived from the run seed.
    pub fn seeded_pipeline(&self) -> PipelineConfig {
        self.pipeline.with_seed(self.seed)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn manifest_path(&self, split: SuiteSplit) -> PathBuf {
        let explicit = match split {
            SuiteSplit::Train => &self.data.train,
            SuiteSplit::Val => &self.data.val,
            SuiteSplit::Test1 => &self.data.test1,
            SuiteSplit::Test2 => &self.data.test2,
            SuiteSplit::Test3 => &self.data.test3,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.data_dir().join(split.name()).join("manifest.json"))
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Config(format!("--set {key}: unknown key"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(unknown());
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).ok_or_else(unknown)?;
    }
    Err(unknown())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.online, OnlineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 9}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"online": {"quarter": 3}}"#).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "online.confidence_threshold=0.95".into(),
                "pipeline.aggregation_mode=\"SliceCount\"".into(),
                "out=/tmp/x".into(),
            ])
            .unwrap();
        assert_eq!(cfg.online.confidence_threshold, 0.95);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x"));
        assert_ne!(
            cfg.pipeline.aggregation_mode,
            PipelineConfig::default().aggregation_mode
        );
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let base = RunConfig::default();
        for bad in [
            "online.nope=1",
            "online",
            "seed.x=1",
            "online.quarters=\"four\"",
        ] {
            let e = base.with_overrides(&[bad.into()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = RunConfig::default()
            .with_overrides(&["online.confidence_threshold=0.3".into()])
            .unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn manifest_paths_default_under_out() {
        let mut cfg = RunConfig::default();
        assert_eq!(
            cfg.manifest_path(SuiteSplit::Test2),
            PathBuf::from("out/data/test2/manifest.json")
        );
        cfg.data.test2 = Some("elsewhere.json".into());
        assert_eq!(
            cfg.manifest_path(SuiteSplit::Test2),
            PathBuf::from("elsewhere.json")
        );
    }
}
