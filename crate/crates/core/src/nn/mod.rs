//! Deterministic layers, the compact CNN detector, training and dropout.

mod checkpoint;
mod model;
mod spec;
mod train;

pub use checkpoint::DETERMINISTIC_MAGIC;
pub(crate) use checkpoint::{decode_container, encode_container, write_file, ValueReader};
pub use model::{
    argmax, build_model, cross_entropy, dropout_forward, dropout_mask, forward_graph,
    predict_deterministic, DeterministicModel, DropoutCtx, DropoutMode, DropoutModel,
    ForwardTrace, LayerParams, LayerVars,
};
pub use spec::{ActShape, LayerSpec, ModelSpec};
pub(crate) use train::{fit, Objective, EVAL_CHUNK};
pub use train::{mean_cross_entropy, train, Adam, LabeledData, TrainConfig, TrainTrace};
