//! Point cloud generation as a sequence of shape compositions.
//!
//! Shapes are put in dense correspondence with a canonical sphere, the
//! sphere is partitioned into `G` groups, each group is encoded and
//! quantized against its own codebook, and an autoregressive transformer
//! models the resulting token sequences.

pub mod assignment;
pub mod canonical;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod grouping;
pub mod metrics;
pub mod nn;
pub mod pcio;
pub mod train;
pub mod transformer;
pub mod vq;

pub use canonical::{CaeConfig, CanonicalAe, Correspondence, ShapeLatent};
pub use error::{Error, Result};
pub use geometry::{CanonicalSphere, EmdMode};
pub use grouping::{GroupAssignment, GroupOrder, GroupingConfig, GroupingNet};
pub use metrics::{Distance, MetricOptions, MetricReport};
pub use pcio::{DepthImage, PointCloud, ShapeDataset};
pub use train::TrainError;
pub use transformer::{ConditionFeature, SamplingConfig, Transformer, TransformerConfig};
pub use vq::{Codebook, CodebookLayout, TokenSequence, VqCodec, VqConfig};
