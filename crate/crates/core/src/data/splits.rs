use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetId, ManifestRow, Split, SplitFiles};
use crate::error::{Error, Result};

/// How one dataset is partitioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// Identifiers listed in `splits/{train,val,test}.txt`.
    ExternalFile,
    /// Random per-image split with the given train/val/test weights.
    Ratio { train: u32, val: u32, test: u32 },
    /// Keep the manifest's train/test column; move a fraction of the train
    /// patients (whole patients) to val.
    PatientHoldout { val_fraction: f64 },
    /// Every record is test data.
    TestOnly,
}

/// Split rule per dataset plus the shared seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub rules: BTreeMap<DatasetId, SplitRule>,
    pub seed: u64,
}

impl SplitPlan {
    /// The protocol of the seven ultrasound datasets.
    pub fn standard(seed: u64) -> Self {
        let rules = DatasetId::ALL
            .into_iter()
            .map(|d| {
                let rule = match d {
                    DatasetId::Tn3k | DatasetId::Tg3k => SplitRule::ExternalFile,
                    DatasetId::Busi => SplitRule::Ratio {
                        train: 7,
                        val: 1,
                        test: 2,
                    },
                    DatasetId::Camus => SplitRule::PatientHoldout { val_fraction: 0.1 },
                    DatasetId::Ddti | DatasetId::Udiat | DatasetId::HmcQu => SplitRule::TestOnly,
                };
                (d, rule)
            })
            .collect();
        Self { rules, seed }
    }

    pub fn rule(&self, dataset: DatasetId) -> Result<&SplitRule> {
        self.rules
            .get(&dataset)
            .ok_or_else(|| Error::Dataset(format!("no split rule for {dataset}")))
    }
}

/// Identifier of a manifest row inside split files: the image file stem.
pub(crate) fn row_identifier(row: &ManifestRow) -> String {
    std::path::Path::new(&row.path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| row.path.clone())
}

/// One split per manifest row, in row order.
pub fn build_splits(
    rows: &[ManifestRow],
    rule: &SplitRule,
    seed: u64,
    split_files: Option<&SplitFiles>,
) -> Result<Vec<Split>> {
    match rule {
        SplitRule::TestOnly => Ok(vec![Split::Test; rows.len()]),
        SplitRule::ExternalFile => {
            let files = split_files.ok_or_else(|| Error::Dataset("split files are required for this dataset".into()))?;
            rows.iter()
                .map(|row| {
                    let id = row_identifier(row);
                    let hits: Vec<Split> = Split::ALL
                        .into_iter()
                        .filter(|s| files.ids(*s).contains(&id) || files.ids(*s).contains(&row.path))
                        .collect();
                    match hits.as_slice() {
                        [one] => Ok(*one),
                        [] => Err(Error::Dataset(format!("`{id}` is not listed in any split file"))),
                        _ => Err(Error::Dataset(format!("`{id}` is listed in several split files"))),
                    }
                })
                .collect()
        }
        SplitRule::Ratio { train, val, test } => {
            let total = (*train + *val + *test) as f64;
            if total == 0.0 {
                return Err(Error::Dataset("split ratio weights sum to zero".into()));
            }
            let n = rows.len();
            let n_train = (n as f64 * *train as f64 / total).round() as usize;
            let n_val = ((n as f64 * *val as f64 / total).round() as usize).min(n - n_train);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut out = vec![Split::Test; n];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
            Ok(out)
        }
        SplitRule::PatientHoldout { val_fraction } => {
            let mut train_patients = BTreeSet::new();
            for row in rows {
                let patient = row
                    .patient_id
                    .as_deref()
                    .ok_or_else(|| Error::Dataset(format!("`{}` has no patient id", row.path)))?;
                match row.split {
                    Some(Split::Train) => {
                        train_patients.insert(patient.to_string());
                    }
                    Some(Split::Test) => {}
                    Some(Split::Val) | None => {
                        return Err(Error::Dataset(format!(
                            "`{}` needs a train/test challenge split in the manifest",
                            row.path
                        )))
                    }
                }
            }
            let mut patients: Vec<String> = train_patients.into_iter().collect();
            patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_val = (patients.len() as f64 * val_fraction).round() as usize;
            let val: BTreeSet<&str> = patients[..n_val].iter().map(String::as_str).collect();
            let mut out = Vec::with_capacity(rows.len());
            for row in rows {
                let patient = row.patient_id.as_deref().unwrap_or_default();
                let split = match row.split {
                    Some(Split::Test) => Split::Test,
                    _ if val.contains(patient) => Split::Val,
                    _ => Split::Train,
                };
                out.push(split);
            }
            // a patient may not straddle train and test either
            let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
            for (row, split) in rows.iter().zip(&out) {
                let patient = row.patient_id.as_deref().unwrap_or_default();
                if let Some(prev) = seen.insert(patient, *split) {
                    if prev != *split {
                        return Err(Error::Dataset(format!("patient `{patient}` appears in {prev} and {split}")));
                    }
                }
            }
            Ok(out)
        }
    }
}
