//! Dataset ingestion and the procedural ShadowSprites generator.

mod folder;
mod ood;
pub mod rle;
pub mod sprites;

pub use folder::{assign_splits, list_images, load_dataset, Dataset, DatasetItem, DatasetSpec, Split};
pub use ood::{make_ood_prompt_specs, OodKind, OodParams};
