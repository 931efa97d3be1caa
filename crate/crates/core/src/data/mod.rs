//! Samples, dataset layout, split protocols and the synthetic generator.

mod manifest;
mod splits;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

pub use manifest::{load_dataset, read_manifest, ManifestRow, SplitFiles};
pub use splits::{build_splits, SplitPlan, SplitRule};
pub use synth::synth_ultrasound;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
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
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// The seven ultrasound datasets with known split protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    Tn3k,
    Tg3k,
    Busi,
    Camus,
    Ddti,
    Udiat,
    HmcQu,
}

impl DatasetId {
    pub const ALL: [DatasetId; 7] = [
        DatasetId::Tn3k,
        DatasetId::Tg3k,
        DatasetId::Busi,
        DatasetId::Camus,
        DatasetId::Ddti,
        DatasetId::Udiat,
        DatasetId::HmcQu,
    ];

    /// Directory name under the data root.
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Tn3k => "TN3K",
            DatasetId::Tg3k => "TG3K",
            DatasetId::Busi => "BUSI",
            DatasetId::Camus => "CAMUS",
            DatasetId::Ddti => "DDTI",
            DatasetId::Udiat => "UDIAT",
            DatasetId::HmcQu => "HMC-QU",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('_', "-");
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str() == key || d.as_str().replace('-', "") == key)
            .ok_or_else(|| Error::Dataset(format!("unknown dataset `{s}`")))
    }
}

/// One grayscale image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Row-major intensities in `[0, 1]`, `size × size`.
    pub image: Vec<f32>,
    pub mask: BinaryMask,
    pub size: usize,
    pub dataset: String,
    /// Task / object category; selects the task-token bank in auto mode.
    pub category: String,
    pub patient_id: Option<String>,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.size * self.size;
        if self.image.len() != n || self.mask.width() != self.size || self.mask.height() != self.size {
            return Err(Error::Dataset(format!("record `{}`: image and mask sizes differ", self.id)));
        }
        Ok(())
    }
}
