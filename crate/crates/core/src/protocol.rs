//! Seeded train/validation/test splits for the four evaluation protocols.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProtocolName {
    FullMixed,
    DataScarce,
    CrossCtToMr,
    CrossMrToCt,
}

impl ProtocolName {
    pub const ALL: [ProtocolName; 4] = [
        ProtocolName::FullMixed,
        ProtocolName::DataScarce,
        ProtocolName::CrossCtToMr,
        ProtocolName::CrossMrToCt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolName::FullMixed => "FULL_MIXED",
            ProtocolName::DataScarce => "DATA_SCARCE",
            ProtocolName::CrossCtToMr => "CROSS_CT_TO_MR",
            ProtocolName::CrossMrToCt => "CROSS_MR_TO_CT",
        }
    }
}

impl std::str::FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        ProtocolName::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown protocol `{s}` (full_mixed|data_scarce|cross_ct_to_mr|cross_mr_to_ct)"
                ))
            })
    }
}

impl std::fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Volume identifiers of each split.
///
/// `test_ids` is the in-distribution test set. Cross-modality protocols also list every
/// volume of the unseen modality in `ood_test_ids`; it is empty otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: ProtocolName,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ood_test_ids: Vec<String>,
    pub seed: u64,
}

/// Per-modality split sizes `(train, val, test)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl ProtocolName {
    /// Split sizes for `(CT, MR)`; `None` when a modality is not used for training.
    pub fn counts(self) -> (Option<SplitCounts>, Option<SplitCounts>) {
        let full = SplitCounts { train: 10, val: 5, test: 5 };
        match self {
            ProtocolName::FullMixed => (Some(full), Some(full)),
            ProtocolName::DataScarce => {
                let c = SplitCounts { train: 1, val: 5, test: 14 };
                (Some(c), Some(c))
            }
            ProtocolName::CrossCtToMr => (Some(full), None),
            ProtocolName::CrossMrToCt => (None, Some(full)),
        }
    }
}

fn shuffled(mut ids: Vec<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    ids.sort();
    ids.shuffle(rng);
    ids
}

/// Builds the split for `name` from `(volume_id, modality)` pairs.
///
/// CT volumes are those tagged CT; every MR tag counts as MR, so callers select the MR
/// sequence beforehand. Identical inputs and seed give identical splits.
pub fn build_protocol(name: ProtocolName, inventory: &[(String, Modality)], seed: u64) -> Result<ProtocolSpec> {
    let mut ids = std::collections::HashSet::new();
    for (id, _) in inventory {
        if !ids.insert(id) {
            return Err(Error::Protocol(format!("duplicate volume id `{id}`")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |m: fn(Modality) -> bool| -> Vec<String> {
        inventory.iter().filter(|(_, x)| m(*x)).map(|(id, _)| id.clone()).collect()
    };
    let ct = shuffled(pick(|m| m == Modality::Ct), &mut rng);
    let mr = shuffled(pick(Modality::is_mr), &mut rng);
    let (ct_counts, mr_counts) = name.counts();
    let mut spec = ProtocolSpec {
        name,
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
        ood_test_ids: Vec::new(),
        seed,
    };
    for (label, pool, counts) in [("CT", &ct, ct_counts), ("MR", &mr, mr_counts)] {
        match counts {
            Some(c) => {
                if pool.len() < c.total() {
                    return Err(Error::Protocol(format!(
                        "{name} needs {} {label} volumes ({} train, {} val, {} test), found {}",
                        c.total(),
                        c.train,
                        c.val,
                        c.test,
                        pool.len()
                    )));
                }
                spec.train_ids.extend_from_slice(&pool[..c.train]);
                spec.val_ids.extend_from_slice(&pool[c.train..c.train + c.val]);
                spec.test_ids.extend_from_slice(&pool[c.train + c.val..c.total()]);
            }
            None => {
                if pool.is_empty() {
                    return Err(Error::Protocol(format!("{name} needs {label} volumes for its OOD test set, found 0")));
                }
                spec.ood_test_ids.extend_from_slice(pool);
            }
        }
    }
    Ok(spec)
}

impl ProtocolSpec {
    /// True when no identifier appears in two of train, validation and the test sets.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
            .chain(&self.ood_test_ids)
            .all(|id| seen.insert(id))
    }

    pub fn test_ids_for(&self, scope: crate::metrics::Scope) -> &[String] {
        match scope {
            crate::metrics::Scope::Id => &self.test_ids,
            crate::metrics::Scope::Ood => &self.ood_test_ids,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inventory(ct: usize, mr: usize) -> Vec<(String, Modality)> {
        (0..ct)
            .map(|i| (format!("ct{i}"), Modality::Ct))
            .chain((0..mr).map(|i| (format!("mr{i}"), Modality::MrT1Oop)))
            .collect()
    }

    #[test]
    fn parse_names() {
        assert_eq!("full_mixed".parse::<ProtocolName>().unwrap(), ProtocolName::FullMixed);
        assert_eq!("CROSS-MR-TO-CT".parse::<ProtocolName>().unwrap(), ProtocolName::CrossMrToCt);
        assert!("half".parse::<ProtocolName>().is_err());
    }

    #[test]
    fn insufficient_volumes_report_counts() {
        let err = build_protocol(ProtocolName::FullMixed, &inventory(3, 20), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("20 CT") && msg.contains("found 3"), "{msg}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut inv = inventory(20, 20);
        inv.push(("ct0".into(), Modality::Ct));
        assert!(build_protocol(ProtocolName::FullMixed, &inv, 0).is_err());
    }
}
