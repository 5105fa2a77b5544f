//! On-disk dataset description.
//!
//! A dataset directory holds `manifest.csv` (header `path,<attr1>,...`, one
//! 0/1 record per image), `train.txt`/`val.txt`/`test.txt` listing the paths
//! in each split, and `mean.txt` with the train-split mean pixel as `r`, `g`,
//! `b` keys. Paths are relative to the directory.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use log::warn;

use super::image::{read_image, Image};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::matrix::LabelMatrix;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MEAN_FILE: &str = "mean.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}` (train|val|test)")))
    }

    fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub labels: Vec<u8>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    attributes: Vec<String>,
    records: Vec<Record>,
    mean: [f32; 3],
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("manifest csv: {e}"))
}

impl DatasetManifest {
    /// Validates names, label widths and path uniqueness. Images are not
    /// touched; [`DatasetManifest::load`] checks that they exist.
    pub fn new(root: impl Into<PathBuf>, attributes: Vec<String>, records: Vec<Record>, mean: [f32; 3]) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::data("manifest declares no attributes"));
        }
        let mut seen = HashSet::new();
        for a in &attributes {
            if a.is_empty() || a.contains([',', '\t', '\n', '"']) || a == "path" {
                return Err(Error::data(format!("invalid attribute name `{a}`")));
            }
            if !seen.insert(a.as_str()) {
                return Err(Error::data(format!("duplicate attribute `{a}`")));
            }
        }
        let mut paths = HashSet::new();
        for r in &records {
            if r.labels.len() != attributes.len() {
                return Err(Error::data(format!(
                    "`{}` has {} labels, expected {}",
                    r.path,
                    r.labels.len(),
                    attributes.len()
                )));
            }
            if r.labels.iter().any(|&v| v > 1) {
                return Err(Error::data(format!("`{}` has a non-binary label", r.path)));
            }
            if r.path.is_empty() || r.path.contains('\n') {
                return Err(Error::data("empty or multi-line image path"));
            }
            if !paths.insert(r.path.as_str()) {
                return Err(Error::data(format!("`{}` appears twice", r.path)));
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mean pixel {mean:?}")));
        }
        Ok(DatasetManifest { root: root.into(), attributes, records, mean })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut reader = csv::Reader::from_path(dir.join(MANIFEST_FILE)).map_err(csv_err)?;
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("path") {
            return Err(Error::data("manifest header must start with `path`"));
        }
        let attributes: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut split_of = HashMap::new();
        for split in Split::ALL {
            let file = dir.join(split.file_name());
            let text = match fs::read_to_string(&file) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
                Err(e) => return Err(e.into()),
            };
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                if let Some(prev) = split_of.insert(line.to_string(), split) {
                    return Err(Error::data(format!("`{line}` is listed in both {prev} and {split}")));
                }
            }
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(csv_err)?;
            let path = row.get(0).unwrap_or_default().trim().to_string();
            let labels = row
                .iter()
                .skip(1)
                .map(|v| match v.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::data(format!("row {}: label `{other}` is not 0/1", i + 2))),
                })
                .collect::<Result<Vec<u8>>>()?;
            let split = split_of
                .remove(&path)
                .ok_or_else(|| Error::data(format!("`{path}` is not assigned to any split")))?;
            if !dir.join(&path).is_file() {
                return Err(Error::data(format!("image `{path}` not found under {}", dir.display())));
            }
            records.push(Record { path, labels, split });
        }
        if let Some(extra) = split_of.keys().next() {
            return Err(Error::data(format!("split file lists `{extra}`, which the manifest lacks")));
        }
        let mean_kv = KvMap::parse(&fs::read_to_string(dir.join(MEAN_FILE))?)?;
        let channel = |k: &str| -> Result<f32> {
            mean_kv.parsed(k)?.ok_or_else(|| Error::data(format!("{MEAN_FILE} lacks `{k}`")))
        };
        let mean = [channel("r")?, channel("g")?, channel("b")?];
        let manifest = DatasetManifest::new(dir, attributes, records, mean)?;
        for m in manifest.flagged_attributes() {
            warn!("attribute `{}` has no positive example in the train split", manifest.attributes[m]);
        }
        Ok(manifest)
    }

    /// Writes the manifest, split lists and mean sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE)).map_err(csv_err)?;
        w.write_record(std::iter::once("path").chain(self.attributes.iter().map(String::as_str)))
            .map_err(csv_err)?;
        for r in &self.records {
            let labels = r.labels.iter().map(|v| if *v == 1 { "1" } else { "0" });
            w.write_record(std::iter::once(r.path.as_str()).chain(labels)).map_err(csv_err)?;
        }
        w.flush()?;
        for split in Split::ALL {
            let list: String = self.records.iter().filter(|r| r.split == split).map(|r| format!("{}\n", r.path)).collect();
            fs::write(dir.join(split.file_name()), list)?;
        }
        let mut kv = KvMap::new();
        for (k, v) in ["r", "g", "b"].into_iter().zip(self.mean) {
            kv.set(k, v);
        }
        fs::write(dir.join(MEAN_FILE), kv.to_text())?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn mean(&self) -> [f32; 3] {
        self.mean
    }

    pub fn set_mean(&mut self, mean: [f32; 3]) {
        self.mean = mean;
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Attributes with no positive train example.
    pub fn flagged_attributes(&self) -> Vec<usize> {
        (0..self.attributes.len())
            .filter(|&m| !self.records.iter().any(|r| r.split == Split::Train && r.labels[m] == 1))
            .collect()
    }

    /// Mean pixel of the train split's images.
    pub fn compute_mean(&self) -> Result<[f32; 3]> {
        let train = self.split(Split::Train);
        if train.is_empty() {
            return Err(Error::data("train split is empty"));
        }
        let mut sum = [0.0f64; 3];
        let mut pixels = 0.0f64;
        for &i in &train.indices {
            let img = read_image(&self.image_path(&self.records[i]))?;
            let n = (img.width() * img.height()) as f64;
            let m = img.mean_pixel();
            for c in 0..3 {
                sum[c] += m[c] * n;
            }
            pixels += n;
        }
        Ok(sum.map(|s| (s / pixels) as f32))
    }

    pub fn split(&self, split: Split) -> SplitView<'_> {
        let indices = (0..self.records.len()).filter(|&i| self.records[i].split == split).collect();
        SplitView { manifest: self, split, indices }
    }

    /// The only route to data that calibration accepts.
    pub fn train(&self) -> TrainSplit<'_> {
        TrainSplit(self.split(Split::Train))
    }
}

/// Records of one split, in manifest order.
#[derive(Clone, Debug)]
pub struct SplitView<'a> {
    manifest: &'a DatasetManifest,
    split: Split,
    indices: Vec<usize>,
}

impl<'a> SplitView<'a> {
    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn manifest(&self) -> &'a DatasetManifest {
        self.manifest
    }

    pub fn records(&self) -> impl Iterator<Item = &'a Record> + '_ {
        self.indices.iter().map(|&i| &self.manifest.records[i])
    }

    pub fn labels(&self) -> Result<LabelMatrix> {
        let m = self.manifest.num_attributes();
        LabelMatrix::binary(self.len(), m, self.records().flat_map(|r| r.labels.iter().copied()).collect())
    }

    /// Decodes every image of the split into memory.
    pub fn load(&self) -> Result<LoadedSplit> {
        let images = self.records().map(|r| read_image(&self.manifest.image_path(r))).collect::<Result<Vec<_>>>()?;
        Ok(LoadedSplit {
            split: self.split,
            attributes: self.manifest.attributes.clone(),
            paths: self.records().map(|r| r.path.clone()).collect(),
            images,
            labels: self.labels()?,
            mean: self.manifest.mean,
        })
    }
}

/// Handle on the train split; cannot be built from any other split.
#[derive(Clone, Debug)]
pub struct TrainSplit<'a>(SplitView<'a>);

impl<'a> TrainSplit<'a> {
    pub fn load(&self) -> Result<TrainData> {
        Ok(TrainData(self.0.load()?))
    }
}

impl<'a> Deref for TrainSplit<'a> {
    type Target = SplitView<'a>;

    fn deref(&self) -> &SplitView<'a> {
        &self.0
    }
}

/// Decoded images and labels of one split.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    split: Split,
    attributes: Vec<String>,
    paths: Vec<String>,
    images: Vec<Image>,
    labels: LabelMatrix,
    mean: [f32; 3],
}

impl LoadedSplit {
    pub fn split(&self) -> Split {
        self.split
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn mean(&self) -> [f32; 3] {
        self.mean
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Train-split data; only obtainable through [`TrainSplit::load`].
#[derive(Clone, Debug)]
pub struct TrainData(LoadedSplit);

impl Deref for TrainData {
    type Target = LoadedSplit;

    fn deref(&self) -> &LoadedSplit {
        &self.0
    }
}
