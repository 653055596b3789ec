//! Corpus ingestion: DCASE-layout scanning, WAV loading, synthetic corpora and
//! deterministic batching.

mod batch;
mod synth;
mod wav;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{epoch_order, make_batches, Batch, BatchStream, ClipStore};
pub use synth::{synth_clip, synth_generate, SynthConfig, SYNTH_MACHINE_TYPE};
pub use wav::{load_clip, read_wav, write_wav, AudioClip, ClipLoader, CLIP_SAMPLES, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A (machine type, machine id) pair. Orders lexicographically by type, then id,
/// which is also the order of global class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MachineKey {
    pub machine_type: String,
    pub machine_id: u32,
}

impl MachineKey {
    pub fn new(machine_type: impl Into<String>, machine_id: u32) -> Self {
        Self {
            machine_type: machine_type.into(),
            machine_id,
        }
    }
}

impl fmt::Display for MachineKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.machine_type, self.machine_id)
    }
}

/// Parses `fan/1`, `fan/01` or `fan/id_01`.
impl FromStr for MachineKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("machine key {s:?} is not of the form <type>/<id>"));
        let (ty, id) = s.rsplit_once('/').ok_or_else(bad)?;
        let id = id.strip_prefix("id_").unwrap_or(id);
        if ty.is_empty() {
            return Err(bad());
        }
        let id = id.parse::<u32>().map_err(|_| bad())?;
        Ok(MachineKey::new(ty, id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMetadata {
    pub machine_type: String,
    pub machine_id: u32,
    pub label: Label,
    pub split: Split,
    pub path: PathBuf,
}

impl ClipMetadata {
    pub fn key(&self) -> MachineKey {
        MachineKey::new(self.machine_type.clone(), self.machine_id)
    }

    /// Parses a DCASE 2020 clip path `<root>/<type>/<split>/<label>_id_<NN>_<seq>.wav`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let bad = || Error::BadFileName(path.to_path_buf());
        let stem = path
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_suffix(".wav").or_else(|| s.strip_suffix(".WAV")))
            .ok_or_else(bad)?;
        let split_dir = path.parent().ok_or_else(bad)?;
        let split = match split_dir.file_name().and_then(|s| s.to_str()) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad()),
        };
        let machine_type = split_dir
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .ok_or_else(bad)?
            .to_string();

        let parts: Vec<&str> = stem.split('_').collect();
        let [label, "id", id, seq] = parts.as_slice() else {
            return Err(bad());
        };
        let label = match *label {
            "normal" => Label::Normal,
            "anomaly" => Label::Anomaly,
            _ => return Err(bad()),
        };
        let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        if !all_digits(id) || !all_digits(seq) {
            return Err(bad());
        }
        let machine_id = id.parse().map_err(|_| bad())?;
        Ok(ClipMetadata {
            machine_type,
            machine_id,
            label,
            split,
            path: path.to_path_buf(),
        })
    }
}

/// Bijection between machine keys and dense class indices `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMap {
    index: BTreeMap<MachineKey, usize>,
    keys: Vec<MachineKey>,
}

impl ClassMap {
    /// Assigns indices in lexicographic (type, id) order.
    pub fn from_keys<I: IntoIterator<Item = MachineKey>>(keys: I) -> Self {
        let keys: Vec<MachineKey> = keys
            .into_iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        Self { index, keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &MachineKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn index_of(&self, key: &MachineKey) -> Result<usize> {
        self.get(key).ok_or_else(|| Error::UnknownMachine(key.to_string()))
    }

    pub fn key(&self, index: usize) -> Option<&MachineKey> {
        self.keys.get(index)
    }

    pub fn keys(&self) -> &[MachineKey] {
        &self.keys
    }

    pub fn machine_types(&self) -> Vec<String> {
        let mut types: Vec<String> = self.keys.iter().map(|k| k.machine_type.clone()).collect();
        types.dedup();
        types
    }
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    machine_type: String,
    machine_id: u32,
    index: usize,
}

impl Serialize for ClassMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<ClassEntry> = self
            .keys
            .iter()
            .enumerate()
            .map(|(index, k)| ClassEntry {
                machine_type: k.machine_type.clone(),
                machine_id: k.machine_id,
                index,
            })
            .collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<ClassEntry>::deserialize(d)?;
        let map = ClassMap::from_keys(
            entries
                .iter()
                .map(|e| MachineKey::new(e.machine_type.clone(), e.machine_id)),
        );
        for e in &entries {
            let key = MachineKey::new(e.machine_type.clone(), e.machine_id);
            if map.get(&key) != Some(e.index) {
                return Err(serde::de::Error::custom(format!(
                    "class map entry {key} has index {} but lexicographic order gives {:?}",
                    e.index,
                    map.get(&key)
                )));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub clips: Vec<ClipMetadata>,
    pub class_map: ClassMap,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Test)
    }

    fn split_indices(&self, split: Split) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_index(&self, clip: &ClipMetadata) -> Result<usize> {
        self.class_map.index_of(&clip.key())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn is_wav(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Scans `<root>/<machine_type>/{train,test}/*.wav`.
///
/// Every machine-type directory must contain `train/`; `test/` is optional.
/// Test clips of a machine that never appears in train are rejected.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let mut clips = Vec::new();
    for type_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let train_dir = type_dir.join("train");
        if !train_dir.is_dir() {
            return Err(Error::MissingDirectory(train_dir));
        }
        for split in [Split::Train, Split::Test] {
            let dir = type_dir.join(split.dir_name());
            if !dir.is_dir() {
                continue;
            }
            for path in sorted_entries(&dir)?.into_iter().filter(|p| is_wav(p)) {
                let meta = ClipMetadata::from_path(&path)?;
                if split == Split::Train && meta.label == Label::Anomaly {
                    return Err(Error::AnomalyInTrain(path));
                }
                clips.push(meta);
            }
        }
    }

    let class_map = ClassMap::from_keys(
        clips
            .iter()
            .filter(|c| c.split == Split::Train)
            .map(ClipMetadata::key),
    );
    if let Some(c) = clips
        .iter()
        .find(|c| c.split == Split::Test && class_map.get(&c.key()).is_none())
    {
        return Err(Error::UnseenTestMachine {
            path: c.path.clone(),
            machine_type: c.machine_type.clone(),
            machine_id: c.machine_id,
        });
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        clips,
        class_map,
    })
}
