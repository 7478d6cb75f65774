//! Frame ingestion: fixed-rate sampling, average-hash dedup and group holdout.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{C2eError, Result};

pub const DEFAULT_DEDUP_THRESHOLD: u32 = 5;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "pgm", "ppm", "gif", "tif", "tiff"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub path: String,
    pub group: String,
    pub frame_idx: usize,
    #[serde(with = "hash_hex", rename = "hash_hex")]
    pub hash: u64,
    pub kept: bool,
}

mod hash_hex {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameManifest {
    pub entries: Vec<FrameEntry>,
    pub every_k: usize,
    pub threshold: Option<u32>,
    /// Groups removed by [`exclude`].
    pub excluded: Vec<String>,
}

impl FrameManifest {
    pub fn kept(&self) -> impl Iterator<Item = &FrameEntry> {
        self.entries.iter().filter(|e| e.kept)
    }

    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.group.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// CSV with a `#`-prefixed preamble carrying sampling rate, threshold and exclusions.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| C2eError::io(path, e))?;
        let threshold = self.threshold.map_or_else(|| "none".to_string(), |t| t.to_string());
        writeln!(file, "# every_k={}", self.every_k)
            .and_then(|_| writeln!(file, "# threshold={threshold}"))
            .and_then(|_| writeln!(file, "# excluded={}", self.excluded.join(";")))
            .map_err(|e| C2eError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| C2eError::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| C2eError::io(path, e))?;
        let mut m = FrameManifest::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| C2eError::io(path, e))?;
            let Some(meta) = line.strip_prefix("# ") else { break };
            let bad = || C2eError::Format(format!("{}: bad manifest preamble {line:?}", path.display()));
            let (key, value) = meta.split_once('=').ok_or_else(bad)?;
            match key {
                "every_k" => m.every_k = value.parse().map_err(|_| bad())?,
                "threshold" if value == "none" => m.threshold = None,
                "threshold" => m.threshold = Some(value.parse().map_err(|_| bad())?),
                "excluded" => m.excluded = value.split(';').filter(|s| !s.is_empty()).map(str::to_owned).collect(),
                _ => return Err(bad()),
            }
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        m.entries = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(m)
    }
}

/// 64-bit average hash: grayscale, 8×8 triangle-filtered downsample, one bit
/// per cell set when brighter than the mean (row-major, first cell in the
/// most significant bit).
pub fn average_hash(path: &Path) -> Result<u64> {
    let img = image::open(path).map_err(|e| C2eError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let small = image::imageops::resize(&img.to_luma8(), 8, 8, image::imageops::FilterType::Triangle);
    Ok(hash_of_cells(small.as_raw()))
}

pub fn hash_of_cells(cells: &[u8]) -> u64 {
    let mean = cells.iter().map(|&c| c as f64).sum::<f64>() / cells.len() as f64;
    cells.iter().fold(0u64, |h, &c| (h << 1) | u64::from(c as f64 > mean))
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

fn sorted_children(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| C2eError::io(dir, e))? {
        let p = entry.map_err(|e| C2eError::io(dir, e))?.path();
        let keep = if want_dirs {
            p.is_dir()
        } else {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        };
        if keep {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Every `every_k`-th frame (by sorted file name) of each group subdirectory,
/// hashed. Groups are visited in sorted order.
pub fn sample_frames(dir: &Path, every_k: usize) -> Result<FrameManifest> {
    if every_k == 0 {
        return Err(C2eError::Config("every_k must be >= 1".into()));
    }
    let root = fs::canonicalize(dir).map_err(|e| C2eError::io(dir, e))?;
    let mut entries = Vec::new();
    for group_dir in sorted_children(&root, true)? {
        let group = group_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for (idx, frame) in sorted_children(&group_dir, false)?.into_iter().enumerate() {
            if idx % every_k != 0 {
                continue;
            }
            entries.push(FrameEntry {
                hash: average_hash(&frame)?,
                path: frame.to_string_lossy().into_owned(),
                group: group.clone(),
                frame_idx: idx,
                kept: true,
            });
        }
    }
    if entries.is_empty() {
        return Err(C2eError::Ingest(format!("no frames found under {}", dir.display())));
    }
    Ok(FrameManifest {
        entries,
        every_k,
        threshold: None,
        excluded: Vec::new(),
    })
}

/// Greedy in-order dedup: a kept frame is dropped when its hash is within
/// `threshold` bits of an earlier kept frame of the same group.
pub fn dedup(manifest: &FrameManifest, threshold: u32) -> FrameManifest {
    let mut out = manifest.clone();
    out.threshold = Some(threshold);
    let mut order: Vec<usize> = (0..out.entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&out.entries[a], &out.entries[b]);
        (&ea.group, ea.frame_idx).cmp(&(&eb.group, eb.frame_idx))
    });
    let mut kept: Vec<(String, u64)> = Vec::new();
    for i in order {
        let e = &mut out.entries[i];
        if !e.kept {
            continue;
        }
        if kept.iter().any(|(g, h)| *g == e.group && hamming(*h, e.hash) <= threshold) {
            e.kept = false;
        } else {
            kept.push((e.group.clone(), e.hash));
        }
    }
    out
}

/// Removes every entry of the listed groups. Names that match no group are
/// reported back as warnings.
pub fn exclude(manifest: &FrameManifest, holdout: &[String]) -> (FrameManifest, Vec<String>) {
    let present = manifest.groups();
    let warnings = holdout
        .iter()
        .filter(|h| !present.contains(h))
        .map(|h| format!("holdout group {h:?} not present in manifest"))
        .collect();
    let mut out = manifest.clone();
    out.entries.retain(|e| !holdout.contains(&e.group));
    for h in holdout {
        if present.contains(h) && !out.excluded.contains(h) {
            out.excluded.push(h.clone());
        }
    }
    (out, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_bits_follow_mean() {
        let mut cells = [0u8; 64];
        cells[0] = 255;
        assert_eq!(hash_of_cells(&cells), 1 << 63);
        assert_eq!(hash_of_cells(&[7u8; 64]), 0);
        assert_eq!(hamming(0b1011, 0b0001), 2);
    }

    #[test]
    fn dedup_within_group_only() {
        let e = |g: &str, i, h| FrameEntry {
            path: format!("{g}/{i}.png"),
            group: g.into(),
            frame_idx: i,
            hash: h,
            kept: true,
        };
        let m = FrameManifest {
            entries: vec![e("a", 0, 0), e("a", 1, 0b111), e("a", 2, 0xff), e("b", 0, 0)],
            every_k: 1,
            ..Default::default()
        };
        let d = dedup(&m, 3);
        let kept: Vec<bool> = d.entries.iter().map(|e| e.kept).collect();
        assert_eq!(kept, vec![true, false, true, true]);
        assert_eq!(dedup(&d, 3), d);
        let zero = dedup(&m, 0);
        assert!(zero.entries.iter().all(|e| e.kept));
    }

    #[test]
    fn exclude_warns_on_unknown() {
        let m = FrameManifest {
            entries: vec![FrameEntry {
                path: "x".into(),
                group: "a".into(),
                frame_idx: 0,
                hash: 1,
                kept: true,
            }],
            every_k: 1,
            ..Default::default()
        };
        let (same, warn) = exclude(&m, &[]);
        assert_eq!(same, m);
        assert!(warn.is_empty());
        let (gone, warn) = exclude(&m, &["a".into(), "zz".into()]);
        assert!(gone.entries.is_empty());
        assert_eq!(gone.excluded, vec!["a".to_string()]);
        assert_eq!(warn.len(), 1);
    }
}
