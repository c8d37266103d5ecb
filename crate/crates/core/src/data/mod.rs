//! Scene cubes, normalization, patch extraction, split protocols and the
//! synthetic scene generator.

mod cube;
mod patches;
mod synth;

pub use cube::{normalize, normalize_with, LabelMap, NormScope, SceneCube};
pub use patches::{extract_patches, Patch, PatchDataset, PatchRef, Split};
pub use synth::{synth_scene, NearestMeanReport, SynthConfig, SynthScene};
