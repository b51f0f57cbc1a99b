//! Small deterministic convolutional classifier: construction, inference,
//! backpropagation, SGD training, head replacement and checkpoints.

mod checkpoint;
mod gradcheck;
mod model;
mod tensor;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, TrainingStage, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use model::{
    init_bound, init_model, softmax, ClassifierModel, ConvLayer, DenseLayer, Gradients, InputNorm,
    ModelConfig, N_CLASSES, PENULT_WIDTH,
};
pub use tensor::Tensor;
pub use train::{accuracy, argmax, train, train_with_history, Sample, TrainConfig, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite values in {layer}")]
    NonFinite { layer: String },
    #[error("training error: {0}")]
    Training(String),
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
