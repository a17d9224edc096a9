//! In-context unlearning sets: a few sub-classes get their label moved to
//! another category, in the demonstration pool and in the tests alike.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::types::{labels_equal, DemonstrationCandidate, LabelSet};

pub const UNLEARNED_SUBCLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearningSpec {
    /// Sub-class to replacement label.
    pub relabel_map: BTreeMap<String, String>,
    /// In selection order.
    pub affected_sublabels: Vec<String>,
    /// Sub-class to its label before relabeling.
    pub original_labels: BTreeMap<String, String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningSets {
    pub spec: UnlearningSpec,
    /// Relabeled tests of the affected sub-classes.
    pub unlearning_set: Vec<DemonstrationCandidate>,
    /// The unlearning set plus every untouched test, in test order.
    pub all_set: Vec<DemonstrationCandidate>,
    /// Every candidate, affected ones relabeled.
    pub demo_pool: Vec<DemonstrationCandidate>,
    /// Ids of candidates outside the affected sub-classes.
    pub standard_ids: BTreeSet<String>,
    /// Unlearning query id to the same-sub-class demonstration it must see.
    pub anchors: BTreeMap<String, String>,
}

impl UnlearningSets {
    pub fn is_affected(&self, c: &DemonstrationCandidate) -> bool {
        c.sublabel
            .as_ref()
            .is_some_and(|s| self.spec.relabel_map.contains_key(s))
    }
}

/// Distinct sub-classes in first-appearance order.
fn sublabels(items: &[DemonstrationCandidate]) -> Vec<&str> {
    let mut seen = BTreeSet::new();
    items
        .iter()
        .filter_map(|c| c.sublabel.as_deref())
        .filter(|s| seen.insert(*s))
        .collect()
}

pub fn build_unlearning_sets(
    candidates: &[DemonstrationCandidate],
    tests: &[DemonstrationCandidate],
    labels: &LabelSet,
    seed: u64,
) -> Result<UnlearningSets> {
    if labels.len() < 2 {
        return Err(Error::Unlearning(
            "relabeling needs at least two labels".into(),
        ));
    }
    // A sub-class must have a single label and appear on both sides.
    let mut label_of: HashMap<&str, &str> = HashMap::new();
    for c in candidates.iter().chain(tests) {
        if let Some(s) = c.sublabel.as_deref() {
            match label_of.get(s) {
                Some(l) if !labels_equal(l, &c.answer) => {
                    return Err(Error::Unlearning(format!(
                        "sub-class {s:?} spans labels {l:?} and {:?}",
                        c.answer
                    )))
                }
                Some(_) => {}
                None => {
                    label_of.insert(s, &c.answer);
                }
            }
        }
    }
    let in_tests: BTreeSet<&str> = sublabels(tests).into_iter().collect();
    let mut eligible: Vec<&str> = sublabels(candidates)
        .into_iter()
        .filter(|s| in_tests.contains(s))
        .collect();
    if eligible.len() < UNLEARNED_SUBCLASSES {
        return Err(Error::Unlearning(format!(
            "need {UNLEARNED_SUBCLASSES} sub-classes present in both candidates and tests, found {}",
            eligible.len()
        )));
    }

    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut eligible);
    let affected: Vec<String> = eligible[..UNLEARNED_SUBCLASSES]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut relabel_map = BTreeMap::new();
    let mut original_labels = BTreeMap::new();
    for s in &affected {
        let original = label_of[s.as_str()];
        let pos = labels.position(original).ok_or_else(|| {
            Error::Unlearning(format!("label {original:?} is not in the label set"))
        })?;
        let replacement = labels.labels()[(pos + 1) % labels.len()].clone();
        relabel_map.insert(s.clone(), replacement);
        original_labels.insert(s.clone(), labels.labels()[pos].clone());
    }

    let relabel = |c: &DemonstrationCandidate| {
        let mut c = c.clone();
        if let Some(new) = c.sublabel.as_ref().and_then(|s| relabel_map.get(s)) {
            c.answer = new.clone();
        }
        c
    };
    let affected_set: BTreeSet<&str> = affected.iter().map(String::as_str).collect();
    let hit = |c: &DemonstrationCandidate| {
        c.sublabel
            .as_deref()
            .is_some_and(|s| affected_set.contains(s))
    };
    let demo_pool: Vec<_> = candidates.iter().map(relabel).collect();
    let all_set: Vec<_> = tests.iter().map(relabel).collect();
    let unlearning_set: Vec<_> = tests.iter().filter(|t| hit(t)).map(relabel).collect();
    let standard_ids = candidates
        .iter()
        .filter(|c| !hit(c))
        .map(|c| c.id.clone())
        .collect();

    let mut members: HashMap<&str, Vec<&str>> = HashMap::new();
    for c in candidates.iter().filter(|c| hit(c)) {
        members
            .entry(c.sublabel.as_deref().expect("affected has sub-class"))
            .or_default()
            .push(&c.id);
    }
    let mut anchors = BTreeMap::new();
    for q in &unlearning_set {
        let group = &members[q.sublabel.as_deref().expect("affected has sub-class")];
        let pick = group[rng.below(group.len())];
        anchors.insert(q.id.clone(), pick.to_string());
    }

    Ok(UnlearningSets {
        spec: UnlearningSpec {
            relabel_map,
            affected_sublabels: affected,
            original_labels,
            seed,
        },
        unlearning_set,
        all_set,
        demo_pool,
        standard_ids,
        anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_dataset, SyntheticSpec};
    use proptest::prelude::*;

    fn data(sub: usize) -> crate::store::Dataset {
        synthetic_dataset(&SyntheticSpec {
            classes: 3,
            candidates_per_class: 12,
            tests_per_class: 6,
            sublabels_per_class: sub,
        })
        .unwrap()
    }

    #[test]
    fn seed_42_is_reproducible() {
        let d = data(2);
        let a = build_unlearning_sets(&d.candidates, &d.tests, &d.labels, 42).unwrap();
        let b = build_unlearning_sets(&d.candidates, &d.tests, &d.labels, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.spec.affected_sublabels.len(), 5);
        assert_eq!(a.spec.relabel_map.len(), 5);
        for (s, new) in &a.spec.relabel_map {
            assert_ne!(new, &a.spec.original_labels[s]);
        }
        let standard_tests = d
            .tests
            .iter()
            .filter(|t| {
                !a.spec
                    .relabel_map
                    .contains_key(t.sublabel.as_ref().unwrap())
            })
            .count();
        assert_eq!(a.all_set.len(), a.unlearning_set.len() + standard_tests);
        for q in &a.unlearning_set {
            let orig = d.tests.iter().find(|t| t.id == q.id).unwrap();
            assert_ne!(q.answer, orig.answer);
            let anchor = a
                .demo_pool
                .iter()
                .find(|c| c.id == a.anchors[&q.id])
                .unwrap();
            assert_eq!(anchor.sublabel, q.sublabel);
            assert_eq!(anchor.answer, q.answer);
        }
        assert_eq!(a.anchors.len(), a.unlearning_set.len());
    }

    #[test]
    fn too_few_subclasses() {
        let d = data(1);
        let err = build_unlearning_sets(&d.candidates, &d.tests, &d.labels, 1).unwrap_err();
        assert!(matches!(err, Error::Unlearning(_)));
    }

    proptest! {
        #[test]
        fn never_relabels_to_itself(seed in any::<u64>()) {
            let d = data(3);
            let s = build_unlearning_sets(&d.candidates, &d.tests, &d.labels, seed).unwrap();
            for (sub, new) in &s.spec.relabel_map {
                prop_assert_ne!(new, &s.spec.original_labels[sub]);
                prop_assert!(d.labels.find(new).is_some());
            }
            let distinct: BTreeSet<_> = s.spec.affected_sublabels.iter().collect();
            prop_assert_eq!(distinct.len(), 5);
        }
    }
}
