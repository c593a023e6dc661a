//! Desk-scale computational pathology foundation model pipeline: slide
//! tiling, self-supervised ViT training, tile embeddings, specimen-level
//! aggregation and evaluation statistics.

pub mod agata;
pub mod corpus;
pub mod dino;
pub mod evalstat;
pub mod featviz;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod slide;
pub mod splitter;
pub mod store;
pub mod tiler;
pub mod views;
pub mod vit;

pub use agata::{AgataConfig, SlideTiles, SpecimenBag};
pub use corpus::{CorpusConfig, SpecimenLabel};
pub use dino::{SslConfig, SslModel};
pub use evalstat::ScoreRow;
pub use nn::{ParamStore, Tensor};
pub use slide::{ManifestEntry, SlideBundle, SlideManifest};
pub use splitter::{Split, SplitSlide};
pub use store::EmbeddingRecord;
pub use tiler::TileRef;
pub use views::ViewConfig;
pub use vit::{TokenOutput, VitConfig};
