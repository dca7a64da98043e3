//! Tab-separated dataset manifests and the 80:10:10 split.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DIGEST_FILE: &str = "manifest.sha256";
/// Preprocessing recorded in the digest so results trace back to the filter.
pub const RESIZE_TAG: &str = "resize=bilinear";
pub const MIN_SPLIT_ITEMS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}; expected train, val or test")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |why: String| Error::format(origin, format!("line {}: {why}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, path, label, split] = fields[..] else {
                return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
            };
            entries.push(Entry {
                id: id.to_string(),
                path: path.to_string(),
                label: label.parse().map_err(|_| bad(format!("bad label {label:?}")))?,
                split: split.parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.path, e.label, e.split)).collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.update(RESIZE_TAG.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    /// Writes the manifest and its digest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(DIGEST_FILE);
        fs::write(&path, format!("{}\n", self.digest())).map_err(|e| Error::io(&path, e))
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }
}

/// `(floor(0.8N), floor(0.1N), remainder)`.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Reassigns every entry's split from a seeded shuffle; needs at least 10 items.
pub fn split_dataset(mut manifest: Manifest, seed: u64) -> Result<Manifest> {
    let n = manifest.entries.len();
    if n < MIN_SPLIT_ITEMS {
        return Err(Error::InvalidArgument(format!("splitting needs at least {MIN_SPLIT_ITEMS} items, got {n}")));
    }
    let (train, val, _) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, "split", 0).shuffle(&mut order);
    for (rank, &i) in order.iter().enumerate() {
        manifest.entries[i].split = match rank {
            r if r < train => Split::Train,
            r if r < train + val => Split::Val,
            _ => Split::Test,
        };
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> Manifest {
        Manifest {
            entries: (0..n)
                .map(|i| Entry {
                    id: format!("item{i}"),
                    path: format!("images/item{i}.png"),
                    label: i % 3,
                    split: Split::Train,
                })
                .collect(),
        }
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        assert_eq!(split_counts(100), (80, 10, 10));
        assert_eq!(split_counts(27_588), (22_070, 2_758, 2_760));
        assert_eq!(split_counts(10), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_counts_match() {
        let a = split_dataset(manifest(100), 5).unwrap();
        let b = split_dataset(manifest(100), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)), (80, 10, 10));
        let c = split_dataset(manifest(100), 6).unwrap();
        assert_ne!(a, c);
        assert!(split_dataset(manifest(9), 0).is_err());
    }

    #[test]
    fn text_round_trip_and_digest() {
        let m = split_dataset(manifest(12), 1).unwrap();
        let back = Manifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        assert_eq!(m.digest().len(), 64);
        assert!(Manifest::parse("a\tb\tc\n", Path::new("m")).is_err());
        assert!(Manifest::parse("a\tb\tx\ttrain\n", Path::new("m")).is_err());
        assert!(Manifest::parse("a\tb\t1\tholdout\n", Path::new("m")).is_err());
    }
}
