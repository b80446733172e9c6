use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hs1::{load_hs1, save_hs1};
use super::manipulation::{apply_manipulation, Family};
use super::response::{project_rgb, ResponseMatrix};
use super::scene::synth_scene;
use crate::error::{Error, Result};
use crate::image::{RgbImage, SpectralImage};
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub hsi: SpectralImage,
    pub rgb: RgbImage,
    pub label: Label,
    pub manip_id: Option<usize>,
    pub scene_seed: u64,
}

impl LabeledSample {
    /// Builds a sample, projecting `hsi` to RGB and checking that
    /// `manip_id` is present exactly for fakes.
    pub fn new(hsi: SpectralImage, label: Label, manip_id: Option<usize>, scene_seed: u64) -> Result<Self> {
        if label.is_fake() != manip_id.is_some() {
            return Err(Error::Label(format!("label {label:?} with manip_id {manip_id:?}")));
        }
        if let Some(id) = manip_id {
            if Family::from_id(id).is_none() {
                return Err(Error::Label(format!("manip_id {id} out of range")));
            }
        }
        let rgb = project_rgb(&hsi, &ResponseMatrix::standard());
        Ok(LabeledSample {
            hsi,
            rgb,
            label,
            manip_id,
            scene_seed,
        })
    }
}

/// One real sample and its manipulated counterpart from the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub real: LabeledSample,
    pub fake: LabeledSample,
}

impl ScenePair {
    pub fn scene_seed(&self) -> u64 {
        self.real.scene_seed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub size: usize,
    pub kinds: Vec<Family>,
    pub splits: [f64; 3],
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("dataset needs at least one manipulation kind".into()));
        }
        if self.n_scenes < 10 {
            return Err(Error::Config(format!("n_scenes {} below 10", self.n_scenes)));
        }
        if self.splits.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be in [0,1] and sum to 1", self.splits)));
        }
        if self.size == 0 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!("size {} must be a positive multiple of 4", self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<ScenePair>,
    pub val: Vec<ScenePair>,
    pub test: Vec<ScenePair>,
}

impl Dataset {
    pub fn partition(&self, p: Partition) -> &[ScenePair] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    fn partition_mut(&mut self, p: Partition) -> &mut Vec<ScenePair> {
        match p {
            Partition::Train => &mut self.train,
            Partition::Val => &mut self.val,
            Partition::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scene seed of scene `index` under dataset seed `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    SeedTree::new(seed).child("scene", index as u64).to_u64()
}

/// Seed for the manipulation applied to the scene with `scene_seed`.
pub fn manipulation_seed(scene_seed: u64, family: Family) -> u64 {
    SeedTree::new(scene_seed).child("manipulation", family.id() as u64).to_u64()
}

/// Generates the real scene with the given index (material count is drawn
/// from the scene's own stream).
pub fn scene_for(seed: u64, index: usize, size: usize) -> Result<(u64, SpectralImage)> {
    let s = scene_seed(seed, index);
    let n_materials = SeedTree::new(s).stream("n-materials", 0).random_range(2..=6);
    Ok((s, synth_scene(s, size, n_materials)?))
}

/// Builds the manipulated counterpart of a real sample.
pub fn fake_of(real: &LabeledSample, family: Family) -> Result<LabeledSample> {
    let hsi = apply_manipulation(&real.hsi, &family.default_kind(), manipulation_seed(real.scene_seed, family))?;
    LabeledSample::new(hsi, Label::Fake, Some(family.id()), real.scene_seed)
}

fn make_pair(spec: &DatasetSpec, index: usize) -> Result<ScenePair> {
    let (s, hsi) = scene_for(spec.seed, index, spec.size)?;
    let family = spec.kinds[SeedTree::new(spec.seed).stream("kind", index as u64).random_range(0..spec.kinds.len())];
    let real = LabeledSample::new(hsi, Label::Real, None, s)?;
    let fake = fake_of(&real, family)?;
    Ok(ScenePair { real, fake })
}

/// Which partition each scene index falls in: a seeded permutation cut by
/// the split fractions.
pub fn assign_partitions(spec: &DatasetSpec) -> Vec<Partition> {
    let n = spec.n_scenes;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(spec.seed).stream("split", 0));
    let n_train = (spec.splits[0] * n as f64).round() as usize;
    let n_val = ((spec.splits[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Partition::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Partition::Train
        } else if rank < n_train + n_val {
            Partition::Val
        } else {
            Partition::Test
        };
    }
    out
}

/// One real and one manipulated sample per scene, split scene-disjointly.
/// Scenes are generated in parallel; the result does not depend on
/// scheduling.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let parts = assign_partitions(spec);
    let pairs: Vec<ScenePair> = (0..spec.n_scenes)
        .into_par_iter()
        .map(|i| make_pair(spec, i))
        .collect::<Result<_>>()?;
    let mut ds = Dataset::default();
    for (pair, p) in pairs.into_iter().zip(parts) {
        ds.partition_mut(p).push(pair);
    }
    Ok(ds)
}

/// One line of the JSONL dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub manip_id: Option<usize>,
    pub scene_seed: u64,
    pub partition: Partition,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes every sample as HS1 under `dir/<partition>/` plus the manifest.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(2 * ds.len());
    for p in Partition::ALL {
        let sub = dir.join(p.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, pair) in ds.partition(p).iter().enumerate() {
            for s in [&pair.real, &pair.fake] {
                let tag = if s.label.is_fake() { "fake" } else { "real" };
                let rel = format!("{}/{i:05}_{tag}.hs1", p.name());
                save_hs1(&dir.join(&rel), &s.hsi)?;
                entries.push(ManifestEntry {
                    path: rel,
                    label: s.label,
                    manip_id: s.manip_id,
                    scene_seed: s.scene_seed,
                    partition: p,
                });
            }
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    for e in &entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset,
            reason: format!("{}: {e}", path.display()),
        })?;
        offset += line.len() as u64 + 1;
        out.push(entry);
    }
    Ok(out)
}

/// Reloads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(dir)?;
    let mut halves: BTreeMap<(Partition, u64), (Option<LabeledSample>, Option<LabeledSample>, usize)> = BTreeMap::new();
    for (line, e) in entries.iter().enumerate() {
        let hsi = load_hs1(&dir.join(&e.path))?;
        let sample = LabeledSample::new(hsi, e.label, e.manip_id, e.scene_seed)?;
        let slot = halves.entry((e.partition, e.scene_seed)).or_insert((None, None, line));
        let target = if e.label.is_fake() { &mut slot.1 } else { &mut slot.0 };
        if target.replace(sample).is_some() {
            return Err(Error::Protocol(format!(
                "scene {} has two {:?} samples in {}",
                e.scene_seed,
                e.label,
                e.partition.name()
            )));
        }
    }
    let mut ordered: Vec<_> = halves.into_iter().collect();
    ordered.sort_by_key(|(_, (_, _, line))| *line);
    let mut ds = Dataset::default();
    for ((p, seed), (real, fake, _)) in ordered {
        let (Some(real), Some(fake)) = (real, fake) else {
            return Err(Error::Protocol(format!("scene {seed} is missing its real or fake half")));
        };
        ds.partition_mut(p).push(ScenePair { real, fake });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            n_scenes: 12,
            size: 8,
            kinds: Family::ALL.to_vec(),
            splits: [0.5, 0.25, 0.25],
            seed: 5,
        }
    }

    #[test]
    fn partitions_are_scene_disjoint_and_balanced() {
        let ds = make_dataset(&spec()).unwrap();
        assert_eq!(ds.len(), 12);
        let mut seen = HashSet::new();
        for p in Partition::ALL {
            for pair in ds.partition(p) {
                assert!(seen.insert(pair.scene_seed()));
                assert_eq!(pair.real.label, Label::Real);
                assert_eq!(pair.fake.label, Label::Fake);
                assert_eq!(pair.fake.scene_seed, pair.real.scene_seed);
            }
        }
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (6, 3, 3));
    }

    #[test]
    fn deterministic() {
        assert_eq!(make_dataset(&spec()).unwrap(), make_dataset(&spec()).unwrap());
    }

    #[test]
    fn config_errors() {
        let mut s = spec();
        s.kinds.clear();
        assert!(matches!(make_dataset(&s), Err(Error::Config(_))));
        let mut s = spec();
        s.splits = [0.5, 0.5, 0.5];
        assert!(matches!(make_dataset(&s), Err(Error::Config(_))));
        let mut s = spec();
        s.n_scenes = 9;
        assert!(matches!(make_dataset(&s), Err(Error::Config(_))));
    }

    #[test]
    fn sample_label_invariant() {
        let img = SpectralImage::zeros(4, 4);
        assert!(matches!(LabeledSample::new(img.clone(), Label::Real, Some(0), 1), Err(Error::Label(_))));
        assert!(matches!(LabeledSample::new(img.clone(), Label::Fake, None, 1), Err(Error::Label(_))));
        assert!(matches!(LabeledSample::new(img, Label::Fake, Some(3), 1), Err(Error::Label(_))));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(&spec()).unwrap();
        let entries = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(entries.len(), 24);
        assert_eq!(entries.iter().filter(|e| e.label == Label::Real).count(), 12);
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }
}
