//! Dataset manifests: per-patient ordered PGM slice files with optional
//! patient and slice labels. Relative paths resolve against the manifest's
//! directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ctshift::imaging::{read_pgm, resize, write_pgm};
use ctshift::pipeline::{Patient, PatientClass, SliceLabel};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPatient {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PatientClass>,
    pub slice_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_labels: Option<Vec<SliceLabel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub patients: Vec<ManifestPatient>,
}

impl DatasetManifest {
    /// Parse and validate, including that every slice file exists.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
        manifest.validate(base_dir(path))?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::io(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn validate(&self, base: &Path) -> Result<(), CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "manifest format_version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut ids = BTreeSet::new();
        for p in &self.patients {
            if !ids.insert(p.id.as_str()) {
                return Err(CliError::Data(format!("duplicate patient id {}", p.id)));
            }
            if p.slice_files.is_empty() {
                return Err(CliError::Data(format!("patient {} has no slices", p.id)));
            }
            if let Some(labels) = &p.slice_labels {
                if labels.len() != p.slice_files.len() {
                    return Err(CliError::Data(format!(
                        "patient {}: {} slice labels for {} slices",
                        p.id,
                        labels.len(),
                        p.slice_files.len()
                    )));
                }
            }
            for f in &p.slice_files {
                let full = base.join(f);
                if !full.is_file() {
                    return Err(CliError::Data(format!(
                        "patient {}: missing slice file {}",
                        p.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Read every slice, resizing to `side` when needed.
    pub fn load_patients(&self, base: &Path, side: usize) -> Result<Vec<Patient>, CliError> {
        self.patients
            .iter()
            .map(|p| {
                let slices = p
                    .slice_files
                    .iter()
                    .map(|f| {
                        let img = read_pgm(&base.join(f))?;
                        Ok(if img.height() == side && img.width() == side {
                            img
                        } else {
                            resize(&img, side)
                        })
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                let patient = Patient {
                    id: p.id.clone(),
                    slices,
                    label: p.label,
                    slice_labels: p.slice_labels.clone(),
                };
                patient.validate()?;
                Ok(patient)
            })
            .collect()
    }
}

/// Directory relative slice paths resolve against.
pub fn base_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or(Path::new("."))
}

/// Load and validate a manifest, then read its patients.
pub fn load_split(path: &Path, side: usize) -> Result<Vec<Patient>, CliError> {
    DatasetManifest::load(path)?.load_patients(base_dir(path), side)
}

/// Write `patients` as `<dir>/<id>/<k>.pgm` plus `<dir>/manifest.json`.
pub fn write_split(patients: &[Patient], dir: &Path) -> Result<DatasetManifest, CliError> {
    let mut entries = Vec::with_capacity(patients.len());
    for p in patients {
        let pdir = dir.join(&p.id);
        std::fs::create_dir_all(&pdir).map_err(|e| CliError::io(&pdir, e))?;
        let mut files = Vec::with_capacity(p.slices.len());
        for (k, img) in p.slices.iter().enumerate() {
            let rel = PathBuf::from(&p.id).join(format!("{k:03}.pgm"));
            write_pgm(img, &dir.join(&rel))?;
            files.push(rel);
        }
        entries.push(ManifestPatient {
            id: p.id.clone(),
            label: p.label,
            slice_files: files,
            slice_labels: p.slice_labels.clone(),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        patients: entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctshift::imaging::GrayImage;

    fn patient(id: &str, n: usize) -> Patient {
        Patient {
            id: id.into(),
            slices: (0..n)
                .map(|k| GrayImage::filled(8, 8, (k * 51) as f32 / 255.0))
                .collect(),
            label: Some(PatientClass::Covid),
            slice_labels: Some(vec![SliceLabel::InfectionPositive; n]),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let patients = vec![patient("a", 2), patient("b", 3)];
        write_split(&patients, dir.path()).unwrap();
        let back = load_split(&dir.path().join("manifest.json"), 8).unwrap();
        assert_eq!(back.len(), 2);
        for (p, q) in patients.iter().zip(&back) {
            assert_eq!(p.id, q.id);
            assert_eq!(p.label, q.label);
            assert_eq!(p.slice_labels, q.slice_labels);
            for (a, b) in p.slices.iter().zip(&q.slices) {
                assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn missing_slice_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write_split(&[patient("a", 2)], dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("a/001.pgm")).unwrap();
        let e = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("001.pgm"));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let json = r#"{"format_version":1,"patients":[{"id":"x","label":"Flu","slice_files":[]}]}"#;
        assert!(serde_json::from_str::<DatasetManifest>(json).is_err());
    }

    #[test]
    fn structural_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_split(&[patient("a", 2)], dir.path()).unwrap();
        m.patients.push(m.patients[0].clone());
        assert!(m.validate(dir.path()).is_err());
        m.patients.pop();
        m.patients[0].slice_labels = Some(vec![SliceLabel::InfectionNegative]);
        assert!(m.validate(dir.path()).is_err());
        m.patients[0].slice_labels = None;
        m.format_version = 2;
        assert!(m.validate(dir.path()).is_err());
    }

    #[test]
    fn other_sizes_are_resized_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_split(&[patient("a", 1)], dir.path()).unwrap();
        let back = load_split(&dir.path().join("manifest.json"), 4).unwrap();
        assert_eq!(back[0].slices[0].height(), 4);
    }
}
