//! Pairwise human-evaluation bundles. The worker-facing bundle carries no
//! method identity; the key file that maps A/B back to methods is written
//! separately.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use empathic_core::model::seeded;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::records::GenerationRecord;

pub const RUBRIC: &str = "\
For each item, read the dialogue context and the two candidate replies, then pick \
the better reply (A or B) or Tie on each aspect.
Empathy: does the reply show understanding of the user's feelings and situation?
Coherence: is the reply on topic and consistent with the context?
Informativeness: does the reply say something substantive rather than generic?
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbItem {
    pub item_id: String,
    pub context: String,
    pub response_a: String,
    pub response_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbBundle {
    pub rubric: String,
    pub aspects: Vec<String>,
    pub items: Vec<AbItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbKeyEntry {
    pub item_id: String,
    pub sample_id: String,
    pub method_a: String,
    pub method_b: String,
    /// True when the first input file's response was placed in slot B.
    pub shuffled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbKey {
    pub seed: u64,
    pub entries: Vec<AbKeyEntry>,
}

fn single_method(records: &[GenerationRecord], which: &str) -> Result<String> {
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    match methods.len() {
        1 => Ok(methods.into_iter().next().expect("one method").to_string()),
        0 => Err(Error::Config(format!("{which} response file is empty"))),
        _ => Err(Error::Config(format!("{which} response file mixes methods: {methods:?}"))),
    }
}

/// Pairs the two files by sample id, draws `count` items under `seed`, and
/// assigns A/B per item by a seeded coin flip.
pub fn export_ab(first: &[GenerationRecord], second: &[GenerationRecord], seed: u64, count: usize) -> Result<(AbBundle, AbKey)> {
    let ma = single_method(first, "first")?;
    let mb = single_method(second, "second")?;
    if ma == mb {
        return Err(Error::Config(format!("both files come from method {ma}")));
    }
    let a: BTreeMap<&str, &GenerationRecord> = first.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let b: BTreeMap<&str, &GenerationRecord> = second.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let ka: BTreeSet<&str> = a.keys().copied().collect();
    let kb: BTreeSet<&str> = b.keys().copied().collect();
    if ka != kb {
        return Err(Error::SampleIdMismatch {
            only_a: ka.difference(&kb).map(|s| s.to_string()).collect(),
            only_b: kb.difference(&ka).map(|s| s.to_string()).collect(),
        });
    }
    if count == 0 || count > ka.len() {
        return Err(Error::Config(format!(
            "item count {count} must be between 1 and the {} shared samples",
            ka.len()
        )));
    }
    let mut rng = seeded(seed);
    let mut ids: Vec<&str> = ka.into_iter().collect();
    ids.shuffle(&mut rng);
    ids.truncate(count);

    let mut items = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for (i, id) in ids.into_iter().enumerate() {
        let (ra, rb) = (a[id], b[id]);
        let shuffled: bool = rng.random();
        let (x, y) = if shuffled { (rb, ra) } else { (ra, rb) };
        let item_id = format!("item-{:04}", i + 1);
        items.push(AbItem {
            item_id: item_id.clone(),
            context: ra.context.clone(),
            response_a: x.response.clone(),
            response_b: y.response.clone(),
        });
        entries.push(AbKeyEntry {
            item_id,
            sample_id: id.to_string(),
            method_a: x.method.clone(),
            method_b: y.method.clone(),
            shuffled,
        });
    }
    let bundle = AbBundle {
        rubric: RUBRIC.to_string(),
        aspects: vec!["Empathy".into(), "Coherence".into(), "Informativeness".into()],
        items,
    };
    let text = serde_json::to_string(&bundle).expect("bundle serializes");
    for m in [&ma, &mb] {
        if text.contains(m.as_str()) {
            return Err(Error::Config(format!(
                "method id {m:?} appears in the worker-facing bundle; rename the method"
            )));
        }
    }
    Ok((bundle, AbKey { seed, entries }))
}

/// Writes the bundle and the key to two separate files.
pub fn write_ab(bundle: &AbBundle, key: &AbKey, bundle_path: &Path, key_path: &Path) -> Result<()> {
    if bundle_path == key_path {
        return Err(Error::Config("bundle and key must be different files".into()));
    }
    io::write_json(bundle_path, bundle)?;
    io::write_json(key_path, key)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, method: &str) -> GenerationRecord {
        GenerationRecord {
            sample_id: id.into(),
            method: method.into(),
            response: format!("{method} says hi to {id}"),
            context: format!("user: ctx {id}"),
            reference: "ref".into(),
            emotion: "sad".into(),
            reasoned: None,
        }
    }

    fn files(n: usize) -> (Vec<GenerationRecord>, Vec<GenerationRecord>) {
        (
            (0..n).map(|i| rec(&format!("s{i:03}"), "alpha")).collect(),
            (0..n).map(|i| rec(&format!("s{i:03}"), "beta")).collect(),
        )
    }

    #[test]
    fn seeded_and_complete() {
        let (a, b) = files(150);
        let a: Vec<_> = a.into_iter().map(|mut r| {
            r.response = r.response.replace("alpha", "one");
            r
        }).collect();
        let b: Vec<_> = b.into_iter().map(|mut r| {
            r.response = r.response.replace("beta", "two");
            r
        }).collect();
        let (bundle, key) = export_ab(&a, &b, 9, 150).unwrap();
        assert_eq!(bundle.items.len(), 150);
        assert_eq!(key.entries.len(), 150);
        assert_eq!(export_ab(&a, &b, 9, 150).unwrap().0, bundle);
        assert_ne!(export_ab(&a, &b, 10, 150).unwrap().0, bundle);
        let flips = key.entries.iter().filter(|e| e.shuffled).count();
        assert!(flips > 40 && flips < 110, "{flips}");
    }

    #[test]
    fn leaked_method_id_is_rejected() {
        let (a, b) = files(3);
        assert!(export_ab(&a, &b, 1, 3).is_err());
    }

    #[test]
    fn mismatch_lists_symmetric_difference() {
        let a = vec![rec("x", "m1"), rec("y", "m1")];
        let b = vec![rec("y", "m2"), rec("z", "m2")];
        match export_ab(&a, &b, 1, 1) {
            Err(Error::SampleIdMismatch { only_a, only_b }) => {
                assert_eq!(only_a, vec!["x".to_string()]);
                assert_eq!(only_b, vec!["z".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
