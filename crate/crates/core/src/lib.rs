//! Collusion-resistant fingerprinting of neural-network weights.
//!
//! Each user's model carries a spread-spectrum fingerprint built from a
//! column of an AND anti-collusion code derived from a balanced incomplete
//! block design. Averaging colluders' models leaves the AND of their
//! code-vectors, which identifies up to `k - 1` of them.

pub mod attacks;
pub mod bits;
pub mod codebook;
pub mod config;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod host;
pub mod marking;
pub mod registry;
pub mod rng;

pub use attacks::{collude_average, finetune_attack, prune_magnitude, AttackConfig, AttackKind, PruneScope};
pub use codebook::{AccCodebook, BibdParams, CodebookSpec, IncidenceMatrix};
pub use detection::{ColluderVerdict, CorrelationScores, DecodedCode};
pub use error::{Error, Result};
pub use evaluation::{MetricsReport, MetricsRow, Mode, Population, TrialConfig};
pub use fingerprint::{Fingerprint, OrthonormalBasis, OwnerKeys, ProjectionMatrix};
pub use host::{DataSplit, Dataset, HostArch, ImageShape, MarkedTensor, ToyHostModel};
pub use marking::{EmbedConfig, MarkedModel};
pub use registry::{RegistryRecord, WeightFile};
