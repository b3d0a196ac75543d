//! Images, masks, netpbm codecs, dataset manifests and the synthetic generator.

pub mod manifest;
pub mod pnm;
mod raster;
pub mod synth;

pub use manifest::{load_manifest, ManifestEntry, ManifestRecord, Split};
pub use raster::{Mask, RgbImage};
pub use synth::{synth_generate, SynthConfig};
