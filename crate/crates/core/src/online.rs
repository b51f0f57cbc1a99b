//! Quarter-batch online pseudo-label learning.
//!
//! A test set arrives as `quarters` contiguous patient batches. Each batch is
//! scored by the current cascade, confident slices that agree with their
//! patient's predicted class join a pseudo-label pool, and both slice models
//! are retrained from the pretext checkpoint on the base data plus the pool.
//! True labels only ever reach the scoring side.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::imaging::{GrayImage, SelectionParams};
use crate::nncore::{Checkpoint, TrainingStage};
use crate::pipeline::{
    classify_scan, train_cascade, BaseDatasets, BaseModels, CascadeModels, Evaluation,
    LabeledSlice, Patient, PatientClass, PatientVerdict, PipelineConfig, PipelineError, CAP, COVID,
    HEALTHY, UNHEALTHY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Inclusive softmax cutoff for harvesting a slice.
    pub confidence_threshold: f32,
    pub quarters: usize,
    /// Keep earlier batches' harvests in the pool.
    pub cumulative: bool,
    /// Also add pool entries to the validation sets used for multipliers.
    pub pseudo_to_validation: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.9,
            quarters: 4,
            cumulative: true,
            pseudo_to_validation: false,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.confidence_threshold > 0.5 && self.confidence_threshold <= 1.0) {
            return Err(PipelineError::Input(format!(
                "confidence_threshold {} outside (0.5, 1]",
                self.confidence_threshold
            )));
        }
        if self.quarters == 0 {
            return Err(PipelineError::Input("quarters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Label-free view of a patient.
#[derive(Debug, Clone, Copy)]
pub struct Scan<'a> {
    pub id: &'a str,
    pub slices: &'a [GrayImage],
}

/// One arrival batch. Patients' labels stay private to this module's
/// scoring code; the learner sees [`Scan`]s only.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub batch_index: usize,
    patients: Vec<Patient>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn scans(&self) -> impl Iterator<Item = Scan<'_>> {
        self.patients.iter().map(|p| Scan {
            id: &p.id,
            slices: &p.slices,
        })
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.patients.iter().map(|p| p.id.as_str()).collect()
    }

    fn truth(&self) -> Option<Vec<PatientClass>> {
        self.patients.iter().map(|p| p.label).collect()
    }
}

/// Contiguous split into `k` groups whose sizes differ by at most one,
/// larger groups first (30 patients, k = 4 gives 8, 8, 7, 7).
pub fn split_quarters(patients: &[Patient], k: usize) -> Result<Vec<StreamBatch>, PipelineError> {
    if k == 0 || patients.is_empty() || k > patients.len() {
        return Err(PipelineError::Input(format!(
            "cannot split {} patients into {k} batches",
            patients.len()
        )));
    }
    let base = patients.len() / k;
    let extra = patients.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        out.push(StreamBatch {
            batch_index: i,
            patients: patients[start..start + size].to_vec(),
        });
        start += size;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelTarget {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub image: GrayImage,
    pub model_target: ModelTarget,
    pub pseudo_label: usize,
    pub source_batch: usize,
    pub source_patient: String,
    pub confidence: f32,
}

/// Harvest counts per (model, class).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HarvestCounts {
    pub a_healthy: usize,
    pub a_unhealthy: usize,
    pub b_covid: usize,
    pub b_cap: usize,
}

impl HarvestCounts {
    pub fn of(entries: &[PoolEntry]) -> Self {
        let mut c = Self::default();
        for e in entries {
            match (e.model_target, e.pseudo_label) {
                (ModelTarget::A, HEALTHY) => c.a_healthy += 1,
                (ModelTarget::A, _) => c.a_unhealthy += 1,
                (ModelTarget::B, COVID) => c.b_covid += 1,
                (ModelTarget::B, _) => c.b_cap += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.a_healthy + self.a_unhealthy + self.b_covid + self.b_cap
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoPool {
    entries: Vec<PoolEntry>,
}

impl PseudoPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pool entries are only ever appended.
    pub fn extend(&mut self, entries: impl IntoIterator<Item = PoolEntry>) {
        self.entries.extend(entries);
    }

    pub fn labeled_for(&self, target: ModelTarget) -> impl Iterator<Item = LabeledSlice> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.model_target == target)
            .map(|e| LabeledSlice {
                image: e.image.clone(),
                label: e.pseudo_label,
            })
    }
}

/// Confident slices that agree with their patient's predicted class.
///
/// Healthy patients give model-A healthy entries. COVID (CAP) patients give
/// model-A unhealthy entries and model-B COVID (CAP) entries; each model's
/// own softmax is the confidence. The threshold is inclusive.
pub fn harvest_confident(
    batch_index: usize,
    scans: &[Scan<'_>],
    verdicts: &[PatientVerdict],
    cfg: &OnlineConfig,
) -> Result<Vec<PoolEntry>, PipelineError> {
    let threshold = cfg.confidence_threshold;
    let mut out = Vec::new();
    for verdict in verdicts {
        let scan = scans
            .iter()
            .find(|s| s.id == verdict.patient_id)
            .ok_or_else(|| PipelineError::Input(format!("no scan for {}", verdict.patient_id)))?;
        let mut take = |slice_idx: usize, target: ModelTarget, label: usize, confidence: f32| {
            if confidence >= threshold {
                out.push(PoolEntry {
                    image: scan.slices[slice_idx].clone(),
                    model_target: target,
                    pseudo_label: label,
                    source_batch: batch_index,
                    source_patient: verdict.patient_id.clone(),
                    confidence,
                });
            }
        };
        let a_label = if verdict.predicted == PatientClass::Healthy {
            HEALTHY
        } else {
            UNHEALTHY
        };
        for (&idx, p) in verdict.selected.iter().zip(&verdict.slice_probs_a) {
            take(idx, ModelTarget::A, a_label, p[a_label]);
        }
        if verdict.predicted != PatientClass::Healthy {
            let b_label = if verdict.predicted == PatientClass::Covid {
                COVID
            } else {
                CAP
            };
            for (&idx, p) in verdict.selected.iter().zip(&verdict.slice_probs_b) {
                take(idx, ModelTarget::B, b_label, p[b_label]);
            }
        }
    }
    Ok(out)
}

/// Retrain both slice models from the pretext checkpoint on base data plus
/// pool entries. `retrain_index` offsets the training seeds; index 0 with an
/// empty pool reproduces base training exactly.
pub fn online_update(
    pretext: &Checkpoint,
    base: &BaseDatasets,
    pool: &PseudoPool,
    pipeline: &PipelineConfig,
    online: &OnlineConfig,
    retrain_index: u64,
) -> Result<CascadeModels, PipelineError> {
    if pretext.training_stage != TrainingStage::PostPretext {
        return Err(PipelineError::Input(format!(
            "online updates restart from a PostPretext checkpoint, got {:?}",
            pretext.training_stage
        )));
    }
    if let Some(bad) = pool.entries().iter().find(|e| e.pseudo_label > 1) {
        return Err(PipelineError::Input(format!(
            "pool entry from {} has label {}",
            bad.source_patient, bad.pseudo_label
        )));
    }
    let merged = |set: &[LabeledSlice], target| -> Vec<LabeledSlice> {
        set.iter()
            .cloned()
            .chain(pool.labeled_for(target))
            .collect()
    };
    let train_a = merged(&base.train_a, ModelTarget::A);
    let train_b = merged(&base.train_b, ModelTarget::B);
    let (val_a, val_b) = if online.pseudo_to_validation {
        (
            merged(&base.val_a, ModelTarget::A),
            merged(&base.val_b, ModelTarget::B),
        )
    } else {
        (base.val_a.clone(), base.val_b.clone())
    };
    train_cascade(
        pretext,
        &train_a,
        &train_b,
        &val_a,
        &val_b,
        pipeline,
        retrain_index,
    )
}

/// Log record written after each quarter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarterEvent {
    pub batch_index: usize,
    pub patients: usize,
    pub harvest: HarvestCounts,
    pub pool_size: usize,
    pub retrain_ms: u64,
    /// Retrain after the last quarter does not score anything.
    pub final_retrain: bool,
    pub mult_healthy: f64,
    pub mult_b: f64,
    pub quarter_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    /// All verdicts in arrival order.
    pub verdicts: Vec<PatientVerdict>,
    /// Number of verdicts belonging to each quarter.
    pub quarter_sizes: Vec<usize>,
    pub events: Vec<QuarterEvent>,
    /// Cascade after every retrain, in order (length == quarters).
    pub cascades: Vec<CascadeModels>,
    pub pool: PseudoPool,
    /// Present when every test patient carries a label.
    pub evaluation: Option<Evaluation>,
}

impl OnlineRun {
    pub fn per_quarter_accuracy(&self) -> Option<Vec<f64>> {
        self.events.iter().map(|e| e.quarter_accuracy).collect()
    }

    pub fn harvest_log(&self) -> Vec<HarvestCounts> {
        self.events.iter().map(|e| e.harvest).collect()
    }

    pub fn final_cascade(&self) -> &CascadeModels {
        self.cascades.last().expect("at least one retrain")
    }
}

fn score_batch(
    cascade: &CascadeModels,
    batch: &StreamBatch,
    selection: &SelectionParams,
) -> Result<Vec<PatientVerdict>, PipelineError> {
    batch
        .scans()
        .map(|s| classify_scan(cascade, s.id, s.slices, selection))
        .collect()
}

fn accuracy_of(truth: &[PatientClass], verdicts: &[PatientVerdict]) -> f64 {
    let predicted: Vec<_> = verdicts.iter().map(|v| v.predicted).collect();
    Evaluation::from_predictions(truth, &predicted).accuracy
}

/// Score quarter 0 with the base cascade and quarter `q` with the cascade
/// retrained after quarter `q - 1`; retrain once more after the final
/// quarter.
pub fn run_online(
    test_patients: &[Patient],
    base: &BaseModels,
    pipeline: &PipelineConfig,
    online: &OnlineConfig,
) -> Result<OnlineRun, PipelineError> {
    online.validate()?;
    pipeline.validate()?;
    let batches = split_quarters(test_patients, online.quarters)?;
    let mut cascade = base.cascade.clone();
    let mut pool = PseudoPool::new();
    let mut verdicts = Vec::with_capacity(test_patients.len());
    let mut quarter_sizes = Vec::with_capacity(batches.len());
    let mut events = Vec::with_capacity(batches.len());
    let mut cascades = Vec::with_capacity(batches.len());
    for batch in &batches {
        let batch_verdicts = score_batch(&cascade, batch, &pipeline.selection)?;
        let scans: Vec<Scan<'_>> = batch.scans().collect();
        let harvest = harvest_confident(batch.batch_index, &scans, &batch_verdicts, online)?;
        let counts = HarvestCounts::of(&harvest);
        if !online.cumulative {
            pool = PseudoPool::new();
        }
        pool.extend(harvest);

        let started = Instant::now();
        cascade = online_update(
            &base.pretext,
            &base.datasets,
            &pool,
            pipeline,
            online,
            batch.batch_index as u64,
        )?;
        let retrain_ms = started.elapsed().as_millis() as u64;

        let quarter_accuracy = batch.truth().map(|t| accuracy_of(&t, &batch_verdicts));
        let event = QuarterEvent {
            batch_index: batch.batch_index,
            patients: batch.len(),
            harvest: counts,
            pool_size: pool.len(),
            retrain_ms,
            final_retrain: batch.batch_index + 1 == batches.len(),
            mult_healthy: cascade.mult_healthy.factor,
            mult_b: cascade.mult_b.factor,
            quarter_accuracy,
        };
        log::info!(
            "quarter {}: harvested {} (pool {}), retrain {} ms, multipliers {:.3}/{:.3}",
            event.batch_index,
            counts.total(),
            event.pool_size,
            retrain_ms,
            event.mult_healthy,
            event.mult_b
        );
        events.push(event);
        cascades.push(cascade.clone());
        quarter_sizes.push(batch_verdicts.len());
        verdicts.extend(batch_verdicts);
    }
    let evaluation = batches
        .iter()
        .map(StreamBatch::truth)
        .collect::<Option<Vec<_>>>()
        .map(|t| {
            let truth: Vec<_> = t.into_iter().flatten().collect();
            let predicted: Vec<_> = verdicts.iter().map(|v| v.predicted).collect();
            Evaluation::from_predictions(&truth, &predicted)
        });
    Ok(OnlineRun {
        verdicts,
        quarter_sizes,
        events,
        cascades,
        pool,
        evaluation,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub verdicts: Vec<PatientVerdict>,
    pub evaluation: Option<Evaluation>,
}

/// Classify every patient with the frozen base cascade.
pub fn run_baseline(
    test_patients: &[Patient],
    cascade: &CascadeModels,
    selection: &SelectionParams,
) -> Result<BaselineRun, PipelineError> {
    let verdicts = test_patients
        .iter()
        .map(|p| classify_scan(cascade, &p.id, &p.slices, selection))
        .collect::<Result<Vec<_>, _>>()?;
    let evaluation = test_patients
        .iter()
        .map(|p| p.label)
        .collect::<Option<Vec<_>>>()
        .map(|truth| accuracy_eval(&truth, &verdicts));
    Ok(BaselineRun {
        verdicts,
        evaluation,
    })
}

fn accuracy_eval(truth: &[PatientClass], verdicts: &[PatientVerdict]) -> Evaluation {
    let predicted: Vec<_> = verdicts.iter().map(|v| v.predicted).collect();
    Evaluation::from_predictions(truth, &predicted)
}

/// One JSON object per line.
pub fn write_event_log(events: &[QuarterEvent], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut f, e)?;
        writeln!(f)?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patients(n: usize) -> Vec<Patient> {
        (0..n)
            .map(|i| Patient {
                id: format!("p{i}"),
                slices: vec![GrayImage::filled(8, 8, 0.5)],
                label: Some(PatientClass::Healthy),
                slice_labels: None,
            })
            .collect()
    }

    fn verdict(
        id: &str,
        predicted: PatientClass,
        a: &[[f32; 2]],
        b: &[[f32; 2]],
    ) -> PatientVerdict {
        PatientVerdict {
            patient_id: id.into(),
            predicted,
            healthy_score: 0.0,
            unhealthy_score: 0.0,
            covid_score: None,
            cap_score: None,
            selected: (0..a.len()).collect(),
            slice_probs_a: a.to_vec(),
            slice_probs_b: b.to_vec(),
        }
    }

    #[test]
    fn quarter_sizes() {
        let b = split_quarters(&patients(30), 4).unwrap();
        assert_eq!(
            b.iter().map(StreamBatch::len).collect::<Vec<_>>(),
            vec![8, 8, 7, 7]
        );
        let ids: Vec<String> = b
            .iter()
            .flat_map(|x| x.patient_ids().into_iter().map(String::from))
            .collect();
        let expected: Vec<String> = (0..30).map(|i| format!("p{i}")).collect();
        assert_eq!(ids, expected);
        let one = split_quarters(&patients(5), 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 5);
        assert!(split_quarters(&patients(3), 4).is_err());
        assert!(split_quarters(&patients(3), 0).is_err());
    }

    fn harvest(v: &[PatientVerdict], threshold: f32) -> Vec<PoolEntry> {
        let slices = vec![GrayImage::filled(8, 8, 0.5); 4];
        let ids: Vec<String> = v.iter().map(|x| x.patient_id.clone()).collect();
        let scans: Vec<Scan<'_>> = ids
            .iter()
            .map(|id| Scan {
                id,
                slices: &slices,
            })
            .collect();
        let cfg = OnlineConfig {
            confidence_threshold: threshold,
            ..OnlineConfig::default()
        };
        harvest_confident(2, &scans, v, &cfg).unwrap()
    }

    #[test]
    fn healthy_patient_confident_slice_is_harvested() {
        let h = harvest(
            &[verdict(
                "a",
                PatientClass::Healthy,
                &[[0.95, 0.05], [0.6, 0.4]],
                &[],
            )],
            0.9,
        );
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].model_target, ModelTarget::A);
        assert_eq!(h[0].pseudo_label, HEALTHY);
        assert_eq!(h[0].confidence, 0.95);
        assert_eq!(h[0].source_batch, 2);
    }

    #[test]
    fn disagreeing_confident_slice_is_rejected() {
        let h = harvest(
            &[verdict(
                "a",
                PatientClass::Covid,
                &[[0.95, 0.05]],
                &[[0.5, 0.5]],
            )],
            0.9,
        );
        assert!(h.is_empty());
    }

    #[test]
    fn threshold_is_inclusive() {
        let h = harvest(
            &[verdict("a", PatientClass::Healthy, &[[0.9, 0.1]], &[])],
            0.9,
        );
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn covid_and_cap_patients_feed_both_models() {
        let h = harvest(
            &[
                verdict("c", PatientClass::Covid, &[[0.02, 0.98]], &[[0.97, 0.03]]),
                verdict("p", PatientClass::Cap, &[[0.05, 0.95]], &[[0.08, 0.92]]),
            ],
            0.9,
        );
        let counts = HarvestCounts::of(&h);
        assert_eq!(
            counts,
            HarvestCounts {
                a_healthy: 0,
                a_unhealthy: 2,
                b_covid: 1,
                b_cap: 1
            }
        );
    }

    #[test]
    fn confidence_threshold_bounds() {
        for (t, ok) in [(0.5, false), (0.51, true), (1.0, true), (1.01, false)] {
            let cfg = OnlineConfig {
                confidence_threshold: t,
                ..OnlineConfig::default()
            };
            assert_eq!(cfg.validate().is_ok(), ok, "{t}");
        }
    }
}
