//! Cross-modal contrastive localization toolkit.
//!
//! Two independent encoder branches (one for RGB imagery, one for stacked
//! elevation rasters) are trained jointly with a temperature-scaled
//! contrastive loss so that co-located patches map to correlated descriptors.
//! Localization is a two-stage workflow: build a feature map of every RGB
//! patch in a scene, then retrieve the cell that maximizes cosine similarity
//! with an elevation-patch query.
//!
//! Module map:
//! - [`raster`]: tile ingest, block-mean resampling, elevation stacking,
//!   channel normalization.
//! - [`sampling`]: sliding-window patch grids, splits, pair-batch sampling.
//! - [`encoder`]: the two branch networks, forward/backward, checkpoints.
//! - [`contrastive`]: cosine similarity and the NT-Xent loss with analytic
//!   gradients.
//! - [`trainer`]: joint optimization loop (SGD-momentum or LARS).
//! - [`mapstore`]: feature-map build and `.crocomap` serialization.
//! - [`localizer`]: exhaustive top-k retrieval and similarity heatmaps.
//! - [`evaluator`]: Top-1/Top-5 scoring and error maps.
//! - [`synthgen`]: seeded synthetic scenes and oracle encoders for testing.
//!
//! Heavy inner loops (feature-map builds, batch forward/backward, query
//! evaluation) are data-parallel via rayon when the `parallel` feature is on
//! (the default). Every parallel op has a sequential twin with bit-identical
//! output; see [`par`].

pub mod contrastive;
pub mod encoder;
pub mod evaluator;
pub mod localizer;
pub mod mapstore;
pub mod par;
pub mod raster;
pub mod sampling;
pub mod seeded;
pub mod synthgen;
pub mod trainer;

pub use encoder::{Arch, Embedding, Encoder, EncoderBranch, EMBED_DIM};
pub use raster::{Modality, RasterTile, TilePair};
pub use sampling::{PatchGrid, Patch};
