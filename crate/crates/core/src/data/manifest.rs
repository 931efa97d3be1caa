//! On-disk layout: `<root>/<DATASET>/manifest.csv` with columns
//! `path,mask_path,patient_id,category,split` (paths relative to the dataset
//! directory), 8-bit masks with foreground > 0, and for file-split datasets
//! `splits/{train,val,test}.txt` holding one image identifier per line.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use serde::Deserialize;

use super::splits::{build_splits, SplitPlan};
use super::{DatasetId, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub mask_path: String,
    pub patient_id: Option<String>,
    pub category: String,
    /// Predefined split, if the source provides one.
    pub split: Option<Split>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    mask_path: String,
    #[serde(default)]
    patient_id: Option<String>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for raw in rd.deserialize::<RawRow>() {
        let raw = raw?;
        rows.push(ManifestRow {
            path: raw.path,
            mask_path: raw.mask_path,
            patient_id: non_empty(raw.patient_id),
            category: non_empty(raw.category).unwrap_or_else(|| "default".into()),
            split: non_empty(raw.split).map(|s| s.parse()).transpose()?,
        });
    }
    Ok(rows)
}

/// Image identifiers per split, read from newline-delimited files.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitFiles {
    train: BTreeSet<String>,
    val: BTreeSet<String>,
    test: BTreeSet<String>,
}

impl SplitFiles {
    pub fn from_lists<'a>(
        train: impl IntoIterator<Item = &'a str>,
        val: impl IntoIterator<Item = &'a str>,
        test: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        Self {
            train: train.into_iter().map(str::to_string).collect(),
            val: val.into_iter().map(str::to_string).collect(),
            test: test.into_iter().map(str::to_string).collect(),
        }
    }

    /// Reads `train.txt` and `test.txt` (required) and `val.txt` (optional).
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str, required: bool| -> Result<BTreeSet<String>> {
            let p = dir.join(name);
            match fs::read_to_string(&p) {
                Ok(text) => Ok(text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(|l| {
                        Path::new(l)
                            .file_stem()
                            .map_or_else(|| l.to_string(), |s| s.to_string_lossy().into_owned())
                    })
                    .collect()),
                Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeSet::new()),
                Err(e) => Err(Error::Dataset(format!("split file {}: {e}", p.display()))),
            }
        };
        Ok(Self {
            train: read("train.txt", true)?,
            val: read("val.txt", false)?,
            test: read("test.txt", true)?,
        })
    }

    pub fn ids(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn load_gray(path: &Path, size: usize, filter: FilterType) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_luma8();
    let img = if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, filter)
    };
    Ok(img.into_raw())
}

/// Loads every record of one dataset, resized to `size`, with splits
/// assigned by `plan`.
pub fn load_dataset(root: impl AsRef<Path>, dataset: DatasetId, plan: &SplitPlan, size: usize) -> Result<Vec<SampleRecord>> {
    let dir = root.as_ref().join(dataset.as_str());
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("dataset directory {} not found", dir.display())));
    }
    let rows = read_manifest(dir.join("manifest.csv"))?;
    let rule = plan.rule(dataset)?;
    let files = match rule {
        super::SplitRule::ExternalFile => Some(SplitFiles::from_dir(dir.join("splits"))?),
        _ => None,
    };
    let splits = build_splits(&rows, rule, plan.seed, files.as_ref())?;
    rows.iter()
        .zip(splits)
        .map(|(row, split)| {
            let image = load_gray(&dir.join(&row.path), size, FilterType::Triangle)?;
            let mask = load_gray(&dir.join(&row.mask_path), size, FilterType::Nearest)?;
            let rec = SampleRecord {
                id: super::splits::row_identifier(row),
                image: image.into_iter().map(|v| v as f32 / 255.0).collect(),
                mask: BinaryMask::new(size, size, mask.into_iter().map(|v| v > 0).collect())?,
                size,
                dataset: dataset.to_string(),
                category: row.category.clone(),
                patient_id: row.patient_id.clone(),
                split,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, f: impl Fn(u32, u32) -> u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_fn(w, w, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
    }

    #[test]
    fn loads_busi_layout() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("BUSI");
        let mut csv = String::from("path,mask_path,patient_id,category,split\n");
        for i in 0..10 {
            write_png(&dir.join(format!("images/{i}.png")), 32, |x, _| (x * 8) as u8);
            write_png(&dir.join(format!("masks/{i}.png")), 32, |x, y| if x < 16 && y < 16 { 255 } else { 0 });
            csv.push_str(&format!("images/{i}.png,masks/{i}.png,,breast,\n"));
        }
        fs::write(dir.join("manifest.csv"), csv).unwrap();
        let recs = load_dataset(root.path(), DatasetId::Busi, &SplitPlan::standard(0), 16).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(recs.iter().filter(|r| r.split == Split::Train).count(), 7);
        assert_eq!(recs[0].mask.count(), 64);
        assert!(recs[0].patient_id.is_none());
        assert_eq!(recs[0].category, "breast");
    }

    #[test]
    fn missing_dataset_and_split_files() {
        let root = tempfile::tempdir().unwrap();
        assert!(load_dataset(root.path(), DatasetId::Ddti, &SplitPlan::standard(0), 16).is_err());
        let dir = root.path().join("TN3K");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("manifest.csv"), "path,mask_path,patient_id,category,split\n").unwrap();
        assert!(load_dataset(root.path(), DatasetId::Tn3k, &SplitPlan::standard(0), 16).is_err());
    }

    #[test]
    fn dataset_names_parse() {
        assert_eq!("hmc-qu".parse::<DatasetId>().unwrap(), DatasetId::HmcQu);
        assert_eq!("HMCQU".parse::<DatasetId>().unwrap(), DatasetId::HmcQu);
        assert_eq!("tn3k".parse::<DatasetId>().unwrap(), DatasetId::Tn3k);
        assert!("foo".parse::<DatasetId>().is_err());
    }
}
