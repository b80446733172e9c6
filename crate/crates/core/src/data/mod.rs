//! Synthetic spectral scenes, planted manipulations, RGB projection,
//! paired datasets and HS1 file I/O.

mod dataset;
mod hs1;
mod manipulation;
mod response;
mod scene;

pub use dataset::{
    assign_partitions, fake_of, make_dataset, manipulation_seed, read_dataset, read_manifest, scene_for,
    scene_seed, write_dataset, Dataset, DatasetSpec, Label, LabeledSample, ManifestEntry, Partition, ScenePair,
    MANIFEST_FILE,
};
pub use hs1::{decode as decode_hs1, encode as encode_hs1, load_hs1, load_hs1_cube, save_hs1, save_rgb_hs1, Hs1Cube};
pub use manipulation::{apply_manipulation, region_mask, Family, ManipulationKind, MASK_MAX_FRACTION, MASK_MIN_FRACTION};
pub use response::{check_pair, project_rgb, ResponseMatrix};
pub use scene::{spectral_roughness, synth_scene, Material, SceneParts};
