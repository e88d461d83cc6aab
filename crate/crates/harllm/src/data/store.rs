//! On-disk prepared datasets: normalized window arrays plus manifest and
//! split indices. Values are stored already normalized; the statistics that
//! produced them are kept in the manifest so the transform is reproducible.

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::recording::CHANNELS;
use crate::data::split::Splits;
use crate::data::windows::{ChannelStats, WindowSet};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizationInfo {
    /// Train-split statistics per domain, indexed by domain id.
    Dataset { per_domain: Vec<ChannelStats> },
    /// Each window standardized by its own statistics.
    Window,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub w: usize,
    pub channels: usize,
    pub count: usize,
    pub rate: f64,
    pub overlap: f64,
    pub seed: u64,
    pub labels: Vec<String>,
    pub subjects: Vec<String>,
    pub domains: Vec<String>,
    pub normalization: NormalizationInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

fn write_f32s(path: &Path, vals: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(std::fs::write(path, bytes)?)
}

fn write_u32s(path: &Path, vals: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(std::fs::write(path, bytes)?)
}

fn read_words(path: &Path) -> Result<Vec<[u8; 4]>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::config(format!(
            "array file {} has a truncated record",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| c.try_into().expect("chunk of 4"))
        .collect())
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    Ok(read_words(path)?.into_iter().map(f32::from_le_bytes).collect())
}

fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    Ok(read_words(path)?.into_iter().map(u32::from_le_bytes).collect())
}

/// Writes manifest, arrays, and split indices into `dir`.
pub fn save_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    set: &WindowSet,
    splits: &Splits,
) -> Result<()> {
    if manifest.count != set.len() || manifest.w != set.w || manifest.channels != CHANNELS {
        return Err(Error::config("manifest does not describe the window set"));
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    std::fs::write(dir.join("splits.json"), serde_json::to_vec_pretty(splits)?)?;
    write_f32s(&dir.join("windows.f32"), &set.values)?;
    write_u32s(&dir.join("labels.u32"), &set.labels)?;
    write_u32s(&dir.join("subjects.u32"), &set.subjects)?;
    write_u32s(&dir.join("domains.u32"), &set.domains)?;
    Ok(())
}

/// A dataset opened from disk. Split materialization is recorded in an
/// access log, one `{split}/{domain}` entry per domain handed out.
#[derive(Debug)]
pub struct PreparedDataset {
    dir: PathBuf,
    pub manifest: DatasetManifest,
    pub splits: Splits,
    set: WindowSet,
    access_log: RefCell<Vec<String>>,
}

impl PreparedDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let bad = |msg: String| Error::config(format!("prepared dataset at {}: {msg}", dir.display()));
        let manifest_bytes = std::fs::read(dir.join("manifest.json"))
            .map_err(|e| bad(format!("cannot read manifest.json: {e}")))?;
        let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.version != DATASET_VERSION {
            return Err(bad(format!(
                "version {} unsupported (expected {DATASET_VERSION})",
                manifest.version
            )));
        }
        if manifest.channels != CHANNELS {
            return Err(bad(format!("channel count {} unsupported", manifest.channels)));
        }
        let splits: Splits = serde_json::from_slice(&std::fs::read(dir.join("splits.json"))?)?;
        let set = WindowSet {
            w: manifest.w,
            values: read_f32s(&dir.join("windows.f32"))?,
            labels: read_u32s(&dir.join("labels.u32"))?,
            subjects: read_u32s(&dir.join("subjects.u32"))?,
            domains: read_u32s(&dir.join("domains.u32"))?,
        };
        let n = manifest.count;
        if set.values.len() != n * manifest.w * CHANNELS
            || set.labels.len() != n
            || set.subjects.len() != n
            || set.domains.len() != n
        {
            return Err(bad("array lengths disagree with the manifest".into()));
        }
        if let Some(&l) = set.labels.iter().find(|&&l| l as usize >= manifest.labels.len()) {
            return Err(bad(format!("label id {l} out of range")));
        }
        if let Some(&s) = set.subjects.iter().find(|&&s| s as usize >= manifest.subjects.len()) {
            return Err(bad(format!("subject id {s} out of range")));
        }
        if let Some(&d) = set.domains.iter().find(|&&d| d as usize >= manifest.domains.len()) {
            return Err(bad(format!("domain id {d} out of range")));
        }
        let mut seen = HashSet::new();
        for idx in [&splits.train, &splits.val, &splits.test] {
            for &i in idx {
                if i >= n {
                    return Err(bad(format!("split index {i} out of range")));
                }
                if !seen.insert(i) {
                    return Err(bad(format!("split index {i} appears twice")));
                }
            }
        }
        Ok(PreparedDataset {
            dir: dir.to_path_buf(),
            manifest,
            splits,
            set,
            access_log: RefCell::new(Vec::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.labels.len()
    }

    pub fn n_domains(&self) -> usize {
        self.manifest.domains.len()
    }

    /// The full normalized window set; subset selection through this
    /// accessor bypasses the access log.
    pub fn window_set(&self) -> &WindowSet {
        &self.set
    }

    pub fn split_indices(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.splits.train,
            SplitName::Val => &self.splits.val,
            SplitName::Test => &self.splits.test,
        }
    }

    /// Materializes one split, optionally restricted to the given domain ids.
    /// Every domain that actually contributes windows is logged.
    pub fn split_set(&self, name: SplitName, domains: Option<&[u32]>) -> WindowSet {
        let indices: Vec<usize> = self
            .split_indices(name)
            .iter()
            .copied()
            .filter(|&i| match domains {
                Some(ds) => ds.contains(&self.set.domains[i]),
                None => true,
            })
            .collect();
        let out = self.set.select(&indices);
        let mut present: Vec<u32> = out.domains.clone();
        present.sort_unstable();
        present.dedup();
        let mut log = self.access_log.borrow_mut();
        for d in present {
            log.push(format!("{}/{}", name.as_str(), self.manifest.domains[d as usize]));
        }
        out
    }

    pub fn access_log(&self) -> Vec<String> {
        self.access_log.borrow().clone()
    }
}
