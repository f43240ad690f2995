//! Market1501-style naming and directory layout.
//!
//! Filenames follow `{pid}_c{cam}s{seq}_{frame}_{bbox}.{ext}`. A pid of `-1`
//! marks junk detections; `0000` marks distractors.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

const IMAGE_EXTENSIONS: &[&str] = &["ppm", "pgm", "jpg", "jpeg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_DIR,
            Split::Query => QUERY_DIR,
            Split::Gallery => GALLERY_DIR,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// Fields encoded in a Market1501 filename.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarketName {
    pub pid: i64,
    pub camid: u32,
    pub seq: u32,
    pub frame: u32,
    pub bbox: u32,
}

impl MarketName {
    pub fn is_junk(&self) -> bool {
        self.pid == -1
    }

    pub fn is_distractor(&self) -> bool {
        self.pid == 0
    }
}

fn digits(s: &str) -> Option<u32> {
    (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .then(|| s.parse().ok())
        .flatten()
}

/// Parses `{pid}_c{cam}s{seq}_{frame}_{bbox}[.ext]`; `None` when it does not match.
pub fn parse_market_name(filename: &str) -> Option<MarketName> {
    let stem = match filename.rsplit_once('.') {
        Some((stem, ext)) if !ext.contains('_') => stem,
        _ => filename,
    };
    let mut parts = stem.split('_');
    let pid_s = parts.next()?;
    let camseq = parts.next()?;
    let frame = digits(parts.next()?)?;
    let bbox = digits(parts.next()?)?;
    if parts.next().is_some() {
        return None;
    }
    let pid = if pid_s == "-1" {
        -1
    } else {
        digits(pid_s)? as i64
    };
    let rest = camseq.strip_prefix('c')?;
    let (cam_s, seq_s) = rest.split_once('s')?;
    Some(MarketName {
        pid,
        camid: digits(cam_s)?,
        seq: digits(seq_s)?,
        frame,
        bbox,
    })
}

/// Inverse of [`parse_market_name`] for non-negative pids (4-digit pid, 6-digit frame, 2-digit bbox).
pub fn format_market_name(name: &MarketName, ext: &str) -> String {
    let pid = if name.pid < 0 {
        "-1".to_string()
    } else {
        format!("{:04}", name.pid)
    };
    format!(
        "{pid}_c{}s{}_{:06}_{:02}.{ext}",
        name.camid, name.seq, name.frame, name.bbox
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub pid: i64,
    pub camid: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
    /// Junk-labelled files, excluded from every split.
    pub junk: Vec<SampleRecord>,
    /// Image files whose names could not be parsed.
    pub rejects: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
}

impl DatasetSplits {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            query: self.query.len(),
            gallery: self.gallery.len(),
        }
    }

    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    /// Distinct training pids in ascending order; index = class label.
    pub fn train_classes(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.train.iter().map(|r| r.pid).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Reads the three Market1501 directories under `root`.
pub fn load_dataset(root: &Path) -> Result<DatasetSplits> {
    let mut out = DatasetSplits::default();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            return Err(Error::config(
                "dataset_root",
                format!("missing directory {}", dir.display()),
            ));
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let Some(parsed) = parse_market_name(name) else {
                out.rejects.push(path);
                continue;
            };
            let rec = SampleRecord {
                image_path: path,
                pid: parsed.pid,
                camid: parsed.camid,
                split,
            };
            if parsed.is_junk() {
                out.junk.push(rec);
                continue;
            }
            match split {
                Split::Train => out.train.push(rec),
                Split::Query => out.query.push(rec),
                Split::Gallery => out.gallery.push(rec),
            }
        }
    }
    Ok(out)
}

/// Parses an expected-counts manifest of `train=`, `query=`, `gallery=` lines.
pub fn parse_counts_manifest(text: &str) -> Result<SplitCounts> {
    let (mut train, mut query, mut gallery) = (None, None, None);
    for line in text.lines() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, "expected key=value"))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config(k.trim(), "expected a count"))?;
        match k.trim() {
            "train" => train = Some(v),
            "query" => query = Some(v),
            "gallery" => gallery = Some(v),
            other => return Err(Error::config(other, "unknown split in counts manifest")),
        }
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| Error::config(k, "missing count"));
    Ok(SplitCounts {
        train: need(train, "train")?,
        query: need(query, "query")?,
        gallery: need(gallery, "gallery")?,
    })
}

/// Human-readable comparison of measured against expected counts.
pub fn compare_counts(measured: SplitCounts, expected: SplitCounts) -> Vec<String> {
    [
        ("train", measured.train, expected.train),
        ("query", measured.query, expected.query),
        ("gallery", measured.gallery, expected.gallery),
    ]
    .into_iter()
    .filter(|(_, m, e)| m != e)
    .map(|(k, m, e)| format!("{k}: found {m}, expected {e}"))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_names() {
        let n = parse_market_name("0002_c1s1_000451_03.jpg").unwrap();
        assert_eq!((n.pid, n.camid), (2, 1));
        let j = parse_market_name("-1_c3s2_000000_00.jpg").unwrap();
        assert!(j.is_junk());
        assert_eq!(j.camid, 3);
        let d = parse_market_name("0000_c6s3_077419_05.jpg").unwrap();
        assert_eq!((d.pid, d.camid), (0, 6));
        assert!(d.is_distractor());
    }

    #[test]
    fn rejects_malformed_names() {
        for bad in ["Thumbs.db", "0002_c1_000451_03.jpg", "x002_c1s1_000451_03.jpg", "0002_c1s1_000451.jpg"] {
            assert!(parse_market_name(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn counts_manifest() {
        let c = parse_counts_manifest("train=14485\nquery = 2008\n# c\ngallery=7697\n").unwrap();
        assert_eq!(
            c,
            SplitCounts {
                train: 14485,
                query: 2008,
                gallery: 7697
            }
        );
        assert!(compare_counts(c, c).is_empty());
        assert!(parse_counts_manifest("train=1\nquery=2").is_err());
    }

    proptest::proptest! {
        #[test]
        fn format_then_parse_is_identity(pid in 0i64..10_000, camid in 1u32..10, seq in 1u32..9, frame in 0u32..999_999, bbox in 0u32..99) {
            let name = MarketName { pid, camid, seq, frame, bbox };
            let s = format_market_name(&name, "ppm");
            proptest::prop_assert_eq!(parse_market_name(&s), Some(name));
        }
    }
}
