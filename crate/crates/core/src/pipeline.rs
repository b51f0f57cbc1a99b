//! Slice-model training and the two-stage patient cascade.
//!
//! Model A separates healthy from unhealthy slices, model B separates COVID
//! from CAP slices. Both start from a flip-pretext checkpoint. A patient's
//! large-lung slices are scored by A; the patient is healthy when the
//! (recall-adjusted) healthy aggregate exceeds `healthy_factor` times the
//! unhealthy aggregate, otherwise B decides between COVID and CAP.

use serde::{Deserialize, Serialize};

use crate::imaging::{hflip, select_large_lung_slices, GrayImage, ImagingError, SelectionParams};
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::nncore::{
    argmax, train_with_history, Checkpoint, ClassifierModel, InputNorm, ModelConfig, NnError,
    Sample, TrainConfig, TrainingStage, N_CLASSES,
};
use crate::synthgen::derive_seed;

/// Model A class indices.
pub const HEALTHY: usize = 0;
pub const UNHEALTHY: usize = 1;
/// Model B class indices.
pub const COVID: usize = 0;
pub const CAP: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("input error: {0}")]
    Input(String),
    #[error("threshold multiplier undefined: {0}")]
    MultiplierUndefined(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatientClass {
    Healthy,
    Covid,
    Cap,
}

impl PatientClass {
    pub const ALL: [PatientClass; 3] = [
        PatientClass::Healthy,
        PatientClass::Covid,
        PatientClass::Cap,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl std::str::FromStr for PatientClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "healthy" => Ok(PatientClass::Healthy),
            "covid" | "covid-19" | "covid19" => Ok(PatientClass::Covid),
            "cap" => Ok(PatientClass::Cap),
            other => Err(format!("unknown patient class {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceLabel {
    InfectionPositive,
    InfectionNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub slices: Vec<GrayImage>,
    pub label: Option<PatientClass>,
    pub slice_labels: Option<Vec<SliceLabel>>,
}

impl Patient {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.slices.is_empty() {
            return Err(PipelineError::Input(format!(
                "patient {} has no slices",
                self.id
            )));
        }
        if let Some(labels) = &self.slice_labels {
            if labels.len() != self.slices.len() {
                return Err(PipelineError::Input(format!(
                    "patient {} has {} slice labels for {} slices",
                    self.id,
                    labels.len(),
                    self.slices.len()
                )));
            }
        }
        Ok(())
    }
}

/// An image with a binary class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: GrayImage,
    pub label: usize,
}

pub fn as_samples(data: &[LabeledSlice]) -> Vec<Sample<'_>> {
    data.iter()
        .map(|s| Sample {
            pixels: s.image.pixels(),
            label: s.label,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Class score is the mean softmax column over the selected slices.
    #[default]
    MeanSoftmax,
    /// Class score is the number of slices whose argmax is the class.
    SliceCount,
}

/// Recall-ratio adjustment for a binary decision: the aggregate of the
/// class *other* than `favored_class` is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMultiplier {
    pub factor: f64,
    /// Lower-recall class, which the adjustment favors.
    pub favored_class: usize,
}

impl ThresholdMultiplier {
    pub const NEUTRAL: ThresholdMultiplier = ThresholdMultiplier {
        factor: 1.0,
        favored_class: 0,
    };

    /// `min(r0, r1) / max(r0, r1)`, favoring the lower-recall class.
    pub fn from_recalls(r0: f64, r1: f64) -> Result<Self, PipelineError> {
        if !(r0 > 0.0 && r1 > 0.0) {
            return Err(PipelineError::MultiplierUndefined(format!(
                "recalls ({r0}, {r1}) must both be positive"
            )));
        }
        let favored_class = if r1 < r0 { 1 } else { 0 };
        Ok(Self {
            factor: r0.min(r1) / r0.max(r1),
            favored_class,
        })
    }

    pub fn apply(&self, scores: [f64; 2]) -> [f64; 2] {
        let mut out = scores;
        out[1 - self.favored_class] *= self.factor;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModels {
    pub model_a: ClassifierModel,
    pub model_b: ClassifierModel,
    pub healthy_factor: f64,
    pub mult_healthy: ThresholdMultiplier,
    pub mult_b: ThresholdMultiplier,
    pub aggregation_mode: AggregationMode,
}

impl CascadeModels {
    pub fn bit_eq(&self, other: &CascadeModels) -> bool {
        self.model_a.bit_eq(&other.model_a)
            && self.model_b.bit_eq(&other.model_b)
            && self.healthy_factor.to_bits() == other.healthy_factor.to_bits()
            && self.mult_healthy.factor.to_bits() == other.mult_healthy.factor.to_bits()
            && self.mult_healthy.favored_class == other.mult_healthy.favored_class
            && self.mult_b.factor.to_bits() == other.mult_b.factor.to_bits()
            && self.mult_b.favored_class == other.mult_b.favored_class
            && self.aggregation_mode == other.aggregation_mode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVerdict {
    pub patient_id: String,
    pub predicted: PatientClass,
    /// Raw (unadjusted) model-A aggregates.
    pub healthy_score: f64,
    pub unhealthy_score: f64,
    /// Raw model-B aggregates; absent when model A declared the patient healthy.
    pub covid_score: Option<f64>,
    pub cap_score: Option<f64>,
    /// Indices of the slices that passed large-lung selection.
    pub selected: Vec<usize>,
    pub slice_probs_a: Vec<[f32; 2]>,
    pub slice_probs_b: Vec<[f32; 2]>,
}

/// Aggregate per-slice probability pairs into two class scores.
pub fn aggregate(probs: &[[f32; 2]], mode: AggregationMode) -> [f64; 2] {
    let mut out = [0.0f64; 2];
    match mode {
        AggregationMode::MeanSoftmax => {
            for p in probs {
                out[0] += f64::from(p[0]);
                out[1] += f64::from(p[1]);
            }
            if !probs.is_empty() {
                out[0] /= probs.len() as f64;
                out[1] /= probs.len() as f64;
            }
        }
        AggregationMode::SliceCount => {
            for p in probs {
                out[argmax(p)] += 1.0;
            }
        }
    }
    out
}

/// Healthy iff adjusted healthy score > `healthy_factor` x adjusted unhealthy score.
pub fn decide_healthy(scores: [f64; 2], mult: &ThresholdMultiplier, healthy_factor: f64) -> bool {
    let adj = mult.apply(scores);
    adj[HEALTHY] > healthy_factor * adj[UNHEALTHY]
}

/// COVID iff adjusted COVID score > adjusted CAP score; CAP otherwise.
pub fn decide_covid(scores: [f64; 2], mult: &ThresholdMultiplier) -> PatientClass {
    let adj = mult.apply(scores);
    if adj[COVID] > adj[CAP] {
        PatientClass::Covid
    } else {
        PatientClass::Cap
    }
}

fn probs_for(
    model: &ClassifierModel,
    slices: &[GrayImage],
    idx: &[usize],
) -> Result<Vec<[f32; 2]>, PipelineError> {
    idx.iter()
        .map(|&i| {
            let p = model.predict(slices[i].pixels())?;
            Ok([p[0], p[1]])
        })
        .collect()
}

/// Run the cascade on one scan. Reads only the slices, never labels.
pub fn classify_scan(
    cascade: &CascadeModels,
    id: &str,
    slices: &[GrayImage],
    selection: &SelectionParams,
) -> Result<PatientVerdict, PipelineError> {
    let selected = select_large_lung_slices(slices, selection)?;
    let slice_probs_a = probs_for(&cascade.model_a, slices, &selected)?;
    let a_scores = aggregate(&slice_probs_a, cascade.aggregation_mode);
    let mut verdict = PatientVerdict {
        patient_id: id.to_string(),
        predicted: PatientClass::Healthy,
        healthy_score: a_scores[HEALTHY],
        unhealthy_score: a_scores[UNHEALTHY],
        covid_score: None,
        cap_score: None,
        selected,
        slice_probs_a,
        slice_probs_b: Vec::new(),
    };
    if decide_healthy(a_scores, &cascade.mult_healthy, cascade.healthy_factor) {
        return Ok(verdict);
    }
    verdict.slice_probs_b = probs_for(&cascade.model_b, slices, &verdict.selected)?;
    let b_scores = aggregate(&verdict.slice_probs_b, cascade.aggregation_mode);
    verdict.covid_score = Some(b_scores[COVID]);
    verdict.cap_score = Some(b_scores[CAP]);
    verdict.predicted = decide_covid(b_scores, &cascade.mult_b);
    Ok(verdict)
}

pub fn classify_patient(
    cascade: &CascadeModels,
    patient: &Patient,
    selection: &SelectionParams,
) -> Result<PatientVerdict, PipelineError> {
    patient.validate()?;
    classify_scan(cascade, &patient.id, &patient.slices, selection)
}

/// Patient-level confusion matrix, accuracy and per-class recall.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated patients.
    pub recalls: [Option<f64>; 3],
}

impl Evaluation {
    pub fn from_predictions(truth: &[PatientClass], predicted: &[PatientClass]) -> Self {
        let mut confusion = ConfusionMatrix::new(3);
        for (t, p) in truth.iter().zip(predicted) {
            confusion.add(t.index(), p.index());
        }
        let recalls = [0, 1, 2].map(|c| confusion.recall(c).ok());
        Self {
            accuracy: confusion.accuracy(),
            confusion,
            recalls,
        }
    }
}

pub fn evaluate_patients(
    cascade: &CascadeModels,
    patients: &[Patient],
    selection: &SelectionParams,
) -> Result<(Vec<PatientVerdict>, Evaluation), PipelineError> {
    let truth = patients
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| PipelineError::Input(format!("patient {} is unlabeled", p.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let verdicts = patients
        .iter()
        .map(|p| classify_patient(cascade, p, selection))
        .collect::<Result<Vec<_>, _>>()?;
    let predicted: Vec<_> = verdicts.iter().map(|v| v.predicted).collect();
    Ok((verdicts, Evaluation::from_predictions(&truth, &predicted)))
}

/// Train a fresh model on the flip pretext: every image with label 0 and its
/// horizontal flip with label 1. The model's input mean is fitted on
/// `images` (unflipped) and scaled by `input_scale`; every model derived
/// from the checkpoint inherits it.
pub fn pretext_pretrain(
    images: &[GrayImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    input_scale: f32,
) -> Result<Checkpoint, PipelineError> {
    let set = pretext_set(images)?;
    let side = images[0].height();
    let pixels: Vec<&[f32]> = images.iter().map(GrayImage::pixels).collect();
    let norm = InputNorm::fit(&pixels, side, input_scale)?;
    let start = ClassifierModel::init(model_cfg, N_CLASSES, side, derive_seed(cfg.seed, 0x1417))?
        .with_input_norm(norm)?;
    let out = train_with_history(&start, &as_samples(&set), cfg)?;
    Ok(Checkpoint::new(
        out.model,
        TrainingStage::PostPretext,
        out.rng_state,
    ))
}

/// The flip-pretext training set, `2 * images.len()` long.
pub fn pretext_set(images: &[GrayImage]) -> Result<Vec<LabeledSlice>, PipelineError> {
    let first = images
        .first()
        .ok_or_else(|| PipelineError::Input("pretext needs at least one image".into()))?;
    if images
        .iter()
        .any(|i| i.height() != first.height() || i.width() != first.height())
    {
        return Err(PipelineError::Input(
            "pretext images must all be square with the same side".into(),
        ));
    }
    Ok(images
        .iter()
        .flat_map(|img| {
            [
                LabeledSlice {
                    image: img.clone(),
                    label: 0,
                },
                LabeledSlice {
                    image: hflip(img),
                    label: 1,
                },
            ]
        })
        .collect())
}

/// Training attempts before accepting a degenerate slice model.
pub const FIT_ATTEMPTS: u64 = 3;
/// A fit is degenerate when either class's training recall is below this.
pub const MIN_FIT_RECALL: f64 = 0.5;

/// Replace the pretext head (seeded from `cfg.seed`) and train on `data`.
/// A degenerate fit is retried from reseeded heads and shuffles; the best
/// attempt is kept if none passes.
pub fn train_slice_model(
    start: &Checkpoint,
    data: &[LabeledSlice],
    cfg: &TrainConfig,
) -> Result<ClassifierModel, PipelineError> {
    if start.training_stage != TrainingStage::PostPretext {
        return Err(PipelineError::Input(format!(
            "slice models start from a PostPretext checkpoint, got {:?}",
            start.training_stage
        )));
    }
    let samples = as_samples(data);
    let mut best: Option<(f64, ClassifierModel)> = None;
    for attempt in 0..FIT_ATTEMPTS {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            derive_seed(cfg.seed, attempt)
        };
        let fresh = start.model.replace_head(derive_seed(seed, 0x4EAD));
        let model = train_with_history(&fresh, &samples, &cfg.with_seed(seed))?.model;
        let worst = binary_recalls(&model, data)?
            .iter()
            .map(|r| r.unwrap_or(0.0))
            .fold(1.0, f64::min);
        if worst >= MIN_FIT_RECALL {
            return Ok(model);
        }
        log::warn!("slice model fit degenerate (training recall {worst:.2}), attempt {attempt}");
        if best.as_ref().is_none_or(|(w, _)| worst > *w) {
            best = Some((worst, model));
        }
    }
    Ok(best.expect("at least one attempt").1)
}

/// Per-class recalls of `model` on `data` under the argmax rule.
pub fn binary_recalls(
    model: &ClassifierModel,
    data: &[LabeledSlice],
) -> Result<[Option<f64>; 2], PipelineError> {
    let mut cm = ConfusionMatrix::new(2);
    for s in data {
        let p = model.predict(s.image.pixels())?;
        cm.add(s.label, argmax(&p));
    }
    Ok([cm.recall(0).ok(), cm.recall(1).ok()])
}

/// Recall-ratio multiplier of `model` on validation slices.
pub fn compute_multiplier(
    model: &ClassifierModel,
    val: &[LabeledSlice],
) -> Result<ThresholdMultiplier, PipelineError> {
    match binary_recalls(model, val)? {
        [Some(r0), Some(r1)] => ThresholdMultiplier::from_recalls(r0, r1),
        recalls => Err(PipelineError::MultiplierUndefined(format!(
            "a class is absent from validation (recalls {recalls:?})"
        ))),
    }
}

/// [`compute_multiplier`], falling back to a neutral multiplier with a warning.
pub fn compute_multiplier_or_neutral(
    model: &ClassifierModel,
    val: &[LabeledSlice],
    what: &str,
) -> Result<ThresholdMultiplier, PipelineError> {
    match compute_multiplier(model, val) {
        Ok(m) => Ok(m),
        Err(PipelineError::MultiplierUndefined(msg)) => {
            log::warn!("{what}: {msg}; using multiplier 1.0");
            Ok(ThresholdMultiplier::NEUTRAL)
        }
        Err(e) => Err(e),
    }
}

/// Labeled slice sets derived from the training and validation patients.
#[derive(Debug, Clone)]
pub struct BaseDatasets {
    pub pretext_images: Vec<GrayImage>,
    pub train_a: Vec<LabeledSlice>,
    pub train_b: Vec<LabeledSlice>,
    pub val_a: Vec<LabeledSlice>,
    pub val_b: Vec<LabeledSlice>,
}

/// Model-A and model-B slice sets for one group of labeled patients.
///
/// Healthy patients contribute their selected large-lung slices as model-A
/// class 0. COVID and CAP patients contribute their infection-positive slices
/// as model-A class 1 and as model-B classes 0 / 1.
pub fn slice_sets(
    patients: &[Patient],
    selection: &SelectionParams,
) -> Result<(Vec<LabeledSlice>, Vec<LabeledSlice>), PipelineError> {
    let mut set_a = Vec::new();
    let mut set_b = Vec::new();
    for p in patients {
        p.validate()?;
        match p.label {
            Some(PatientClass::Healthy) => {
                for i in select_large_lung_slices(&p.slices, selection)? {
                    set_a.push(LabeledSlice {
                        image: p.slices[i].clone(),
                        label: HEALTHY,
                    });
                }
            }
            Some(class) => {
                let b_label = if class == PatientClass::Covid {
                    COVID
                } else {
                    CAP
                };
                let Some(labels) = &p.slice_labels else {
                    continue;
                };
                for (img, l) in p.slices.iter().zip(labels) {
                    if *l == SliceLabel::InfectionPositive {
                        set_a.push(LabeledSlice {
                            image: img.clone(),
                            label: UNHEALTHY,
                        });
                        set_b.push(LabeledSlice {
                            image: img.clone(),
                            label: b_label,
                        });
                    }
                }
            }
            None => {
                return Err(PipelineError::Input(format!(
                    "training patient {} is unlabeled",
                    p.id
                )))
            }
        }
    }
    Ok((set_a, set_b))
}

pub fn build_base_datasets(
    train: &[Patient],
    val: &[Patient],
    selection: &SelectionParams,
) -> Result<BaseDatasets, PipelineError> {
    let (train_a, train_b) = slice_sets(train, selection)?;
    let (val_a, val_b) = slice_sets(val, selection)?;
    Ok(BaseDatasets {
        pretext_images: train_a.iter().map(|s| s.image.clone()).collect(),
        train_a,
        train_b,
        val_a,
        val_b,
    })
}

/// Everything that parameterizes base training and patient decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// Multiplier applied after subtracting the fitted input mean.
    pub input_scale: f32,
    pub pretext_train: TrainConfig,
    /// Slice-model training; `seed` is model A's base seed.
    pub slice_train: TrainConfig,
    /// Offset added to the model-A seed for model B.
    pub model_b_seed_offset: u64,
    pub selection: SelectionParams,
    pub healthy_factor: f64,
    pub aggregation_mode: AggregationMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            input_scale: 2.0,
            pretext_train: TrainConfig::default(),
            slice_train: TrainConfig {
                learning_rate: 0.03,
                epochs: 40,
                ..TrainConfig::default()
            },
            model_b_seed_offset: 1_000_000,
            selection: SelectionParams::default(),
            healthy_factor: 5.0,
            aggregation_mode: AggregationMode::MeanSoftmax,
        }
    }
}

impl PipelineConfig {
    /// Reseed pretext and slice training from one run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.pretext_train.seed = derive_seed(seed, 0x9E7);
        out.slice_train.seed = derive_seed(seed, 0x511CE);
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.pretext_train.validate()?;
        self.slice_train.validate()?;
        self.selection.validate()?;
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(PipelineError::Input(format!(
                "input_scale {} must be positive",
                self.input_scale
            )));
        }
        if !(self.healthy_factor > 0.0 && self.healthy_factor.is_finite()) {
            return Err(PipelineError::Input(format!(
                "healthy_factor {} must be positive",
                self.healthy_factor
            )));
        }
        Ok(())
    }

    /// Training config for model A (`B == false`) or B after `retrain_index` retrains.
    pub fn slice_cfg(&self, model_b: bool, retrain_index: u64) -> TrainConfig {
        let base = if model_b {
            self.slice_train.seed.wrapping_add(self.model_b_seed_offset)
        } else {
            self.slice_train.seed
        };
        self.slice_train.with_seed(base.wrapping_add(retrain_index))
    }
}

/// Base models plus the data they were trained on.
#[derive(Debug, Clone)]
pub struct BaseModels {
    pub pretext: Checkpoint,
    pub cascade: CascadeModels,
    pub datasets: BaseDatasets,
}

/// Train both slice models from `pretext` and compute both multipliers.
pub fn train_cascade(
    pretext: &Checkpoint,
    train_a: &[LabeledSlice],
    train_b: &[LabeledSlice],
    val_a: &[LabeledSlice],
    val_b: &[LabeledSlice],
    cfg: &PipelineConfig,
    retrain_index: u64,
) -> Result<CascadeModels, PipelineError> {
    let model_a = train_slice_model(pretext, train_a, &cfg.slice_cfg(false, retrain_index))?;
    let model_b = train_slice_model(pretext, train_b, &cfg.slice_cfg(true, retrain_index))?;
    let mult_healthy = compute_multiplier_or_neutral(&model_a, val_a, "model A")?;
    let mult_b = compute_multiplier_or_neutral(&model_b, val_b, "model B")?;
    Ok(CascadeModels {
        model_a,
        model_b,
        healthy_factor: cfg.healthy_factor,
        mult_healthy,
        mult_b,
        aggregation_mode: cfg.aggregation_mode,
    })
}

/// Pretext pretraining followed by transfer into models A and B.
pub fn train_base(
    train: &[Patient],
    val: &[Patient],
    cfg: &PipelineConfig,
) -> Result<BaseModels, PipelineError> {
    cfg.validate()?;
    let datasets = build_base_datasets(train, val, &cfg.selection)?;
    let pretext = pretext_pretrain(
        &datasets.pretext_images,
        &cfg.model,
        &cfg.pretext_train,
        cfg.input_scale,
    )?;
    let cascade = train_cascade(
        &pretext,
        &datasets.train_a,
        &datasets.train_b,
        &datasets.val_a,
        &datasets.val_b,
        cfg,
        0,
    )?;
    Ok(BaseModels {
        pretext,
        cascade,
        datasets,
    })
}
