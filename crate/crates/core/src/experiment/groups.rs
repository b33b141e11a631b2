use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::hashing::{bucket, bucket_bound, hash_str};
use crate::metrics::GroupTag;

/// Control/experiment split of the user population by hash bucket:
/// experiment is `[0, f)`, control the adjacent slice `[f, 2f)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupAssignment {
    pub salt: String,
    pub fraction: f64,
    #[serde(skip)]
    salt_hash: u64,
    #[serde(skip)]
    bound: u64,
    pub sizes: GroupSizes,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSizes {
    pub population: u64,
    pub experiment: u64,
    pub control: u64,
    pub unassigned: u64,
}

impl GroupAssignment {
    pub fn group_of(&self, user: u64) -> GroupTag {
        let b = bucket(user, self.salt_hash);
        if b < self.bound {
            GroupTag::Experiment
        } else if b < 2 * self.bound {
            GroupTag::Control
        } else {
            GroupTag::Unassigned
        }
    }

    pub fn size(&self, group: GroupTag) -> u64 {
        match group {
            GroupTag::Global => self.sizes.population,
            GroupTag::Control => self.sizes.control,
            GroupTag::Experiment => self.sizes.experiment,
            GroupTag::Unassigned => self.sizes.unassigned,
        }
    }
}

/// Splits users `0..population`; sizes are counted exactly.
pub fn assign_groups(population: u64, fraction: f64, salt: &str) -> Result<GroupAssignment, ExperimentError> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(ExperimentError::config("group.fraction", "must be in (0, 0.5]"));
    }
    let mut a = GroupAssignment {
        salt: salt.to_string(),
        fraction,
        salt_hash: hash_str(salt),
        bound: bucket_bound(fraction),
        sizes: GroupSizes {
            population,
            ..Default::default()
        },
    };
    for u in 0..population {
        match a.group_of(u) {
            GroupTag::Experiment => a.sizes.experiment += 1,
            GroupTag::Control => a.sizes.control += 1,
            _ => a.sizes.unassigned += 1,
        }
    }
    Ok(a)
}
