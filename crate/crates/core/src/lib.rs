//! Parameter-efficient adaptation of a frozen promptable segmentation encoder:
//! a high-frequency adapter, a multi-scale adapter and a selection gate, trained
//! from a few exemplars under coarse box prompts.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod hf_adapter;
pub mod metrics;
pub mod model;
pub mod ms_adapter;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod selector;
pub mod tensor;
pub mod training;
pub mod types;

pub use backbone::{Encoder, EncoderConfig, LayerFeatures};
pub use checkpoint::{Checkpoint, LoadReport};
pub use config::{ResolvedConfig, RunConfigFile};
pub use decoder::{DecoderConfig, MaskDecoder, MaskLogits};
pub use error::{Error, Result};
pub use hf_adapter::{HfAdapter, HfaConfig};
pub use metrics::{dice_score, evaluate, hd95, iou, MetricsReport};
pub use model::{AdapterBank, AdapterToggles, Model, ModelConfig, Segmenter};
pub use ms_adapter::{MsAdapter, MsfaConfig};
pub use params::{Ctx, ParamStore};
pub use pipeline::{gen_synthetic, sample_exemplars, ExemplarSet, SampleMeta, SegSample};
pub use prompts::{coarse_bbox, fine_bbox, make_prompt, BBox, Phase, PromptSetting};
pub use selector::{Selector, SelectorConfig};
pub use tensor::Tensor;
pub use training::{train, RunRecord, TrainConfig};
pub use types::{FeatureMap, ImageTensor, Mask};
