//! Contrastive pretraining from videos with intra-video and cross-video hard
//! negatives, a hardness curriculum, and a downstream evaluation harness.
//!
//! Data flow of one pretraining step:
//!
//! ```text
//! Video ──sampler──► (a, p, n₁…n_k)
//!   a ──query encoder──► q                  (gradients)
//!   p, n_j ──key encoder──► z⁺, z_j⁻        (no gradients)
//!   q × queue ──mining──► ẑ⁻
//!   loss(q, z⁺, z_j⁻, ẑ⁻) ──► SGD on query ──► momentum update of key ──► enqueue z⁺
//! ```

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod dataset;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod mining;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use config::RunConfig;
pub use curriculum::{CurriculumConfig, CurriculumMode, CurriculumState, Phase};
pub use dataset::{
    AugConfig, GroundTruth, Image, ImageShape, LabeledImage, LabeledImageSet, Provenance, SyntheticSpec, Video,
    VideoCorpus,
};
pub use downstream::{Backbone, Classifier, CvReport, FinetuneConfig, Metrics};
pub use encoder::{EncoderArch, EncoderParams};
pub use error::{Error, Result};
pub use loss::LossInputs;
pub use mining::{AlphaWeights, HardNegative, NegativeQueue};
pub use nn::{BackboneArch, Pool};
pub use optim::SgdConfig;
pub use oracle::OracleReport;
pub use sampler::{SampleTuple, SamplerConfig};
pub use trainer::{MiningConfig, NegativeMix, PretrainConfig, PretrainSetup, Pretrainer, TrainState};
