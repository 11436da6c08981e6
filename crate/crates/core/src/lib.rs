//! Layer-wise contribution analysis for audio deepfake detection.
//!
//! A frozen transformer speech encoder produces per-layer hidden states,
//! which are mixed by softmax-normalized learnable layer weights and fed to a
//! small trainable back-end. The learned weights show which layers carry the
//! detection signal, and truncating the encoder to its first `X` layers
//! trades accuracy for inference cost.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases below fix the `f32` instantiations used for training and on-disk
//! artifacts.

pub mod aggregation;
pub mod analysis;
pub mod audio;
pub mod backend;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model_io;
pub mod optim;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use aggregation::{
    aggregate, grad_aggregate, softmax_normalize, AggregatedFeatures, LayerWeightVector,
};
pub use audio::{crop_or_pad, decode_wav, AudioSegment, CropMode};
pub use backend::{attentive_stat_pool, cross_entropy, Backend, BackendParams, ClassScores, Mode};
pub use dataset::{make_batches, parse_protocol, DatasetSplit, Label, ProtocolEntry};
pub use encoder::{EncoderConfig, EncoderModel, LayerFeatureStack};
pub use error::{Error, Result};
pub use features::{
    cache_layer_features, load_utterances, FeatureCache, FeatureExtractor, Utterance,
};
pub use model_io::{read_container, write_container, ModelContainer, TensorData};
pub use optim::{AdamConfig, AdamState};
pub use scalar::Scalar;
pub use synthetic::{generate_corpus, SynthSpec};
pub use tensor::Matrix;
pub use trainer::{train, RunStatus, TrainConfig, TrainRun};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Encoder32 = EncoderModel<f32>;
pub type Encoder64 = EncoderModel<f64>;
pub type FeatureStack32 = LayerFeatureStack<f32>;
pub type FeatureStack64 = LayerFeatureStack<f64>;
pub type LayerWeights32 = LayerWeightVector<f32>;
pub type LayerWeights64 = LayerWeightVector<f64>;
pub type FfnBackend32 = BackendParams<f32>;
pub type FfnBackend64 = BackendParams<f64>;
