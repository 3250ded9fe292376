use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};

/// Partition of class ids into training, validation and zero-shot test classes.
///
/// All three lists are sorted and pairwise disjoint. `validation` is carved
/// out of the seen classes and is empty unless requested.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    #[serde(default)]
    pub validation: Vec<usize>,
}

/// Draws `unseen` of `classes` class ids uniformly as the zero-shot test set.
pub fn make_zero_shot_split<R: Rng + ?Sized>(
    classes: usize,
    unseen: usize,
    rng: &mut R,
) -> Result<SplitSpec> {
    if unseen >= classes {
        return Err(Error::Contract(format!(
            "cannot hold out {unseen} of {classes} classes; at least one must be seen"
        )));
    }
    let mut ids: Vec<usize> = (0..classes).collect();
    ids.shuffle(rng);
    let mut test = ids[..unseen].to_vec();
    let mut seen = ids[unseen..].to_vec();
    test.sort_unstable();
    seen.sort_unstable();
    Ok(SplitSpec {
        seen,
        unseen: test,
        validation: Vec::new(),
    })
}

impl SplitSpec {
    /// Moves `count` seen classes into the validation list.
    pub fn carve_validation<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Self> {
        if count >= self.seen.len() {
            return Err(Error::Contract(format!(
                "cannot carve {count} validation classes from {} seen classes",
                self.seen.len()
            )));
        }
        let mut seen = self.seen.clone();
        seen.shuffle(rng);
        let mut validation: Vec<usize> = seen.drain(..count).collect();
        validation.extend_from_slice(&self.validation);
        validation.sort_unstable();
        seen.sort_unstable();
        let out = Self {
            seen,
            unseen: self.unseen.clone(),
            validation,
        };
        out.validate()?;
        Ok(out)
    }

    /// Checks pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        let seen: BTreeSet<_> = self.seen.iter().collect();
        let unseen: BTreeSet<_> = self.unseen.iter().collect();
        let val: BTreeSet<_> = self.validation.iter().collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::SplitViolation(format!(
                "class {c} is both seen and unseen"
            )));
        }
        if let Some(c) = seen.intersection(&val).next() {
            return Err(Error::SplitViolation(format!(
                "class {c} is both seen and validation"
            )));
        }
        if let Some(c) = unseen.intersection(&val).next() {
            return Err(Error::SplitViolation(format!(
                "class {c} is both unseen and validation"
            )));
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .seen
            .iter()
            .chain(&self.unseen)
            .chain(&self.validation)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Fails when any class appears in both sets.
pub fn assert_disjoint(train: &FeatureSet, eval: &FeatureSet) -> Result<()> {
    let t = train.classes_present();
    if let Some(c) = eval.classes_present().intersection(&t).next() {
        let name = eval
            .class_names()
            .get(*c)
            .cloned()
            .unwrap_or_else(|| c.to_string());
        return Err(Error::SplitViolation(format!(
            "class `{name}` appears in training and evaluation data"
        )));
    }
    Ok(())
}
