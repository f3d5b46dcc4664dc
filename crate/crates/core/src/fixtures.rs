//! Synthetic drugs, knowledge graph and interaction events.
//!
//! Every drug belongs to a hidden group; an event's class is a fixed
//! function of the ordered group pair, and each drug is linked to its
//! group in the KG, so the labels are learnable from either input.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use kite_smiles::synth::{random_druglike, CURATED};
use kite_smiles::{canonical_form, parse_smiles};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::DrugRecord;
use crate::error::{CoreError, Result};
use crate::kg::{IdMap, Triple};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub drugs: usize,
    pub events: usize,
    pub classes: usize,
    pub groups: usize,
    pub genes: usize,
    /// Fraction of drugs that appear in the KG.
    pub kg_coverage: f64,
    /// Molecules in the pretraining corpus (the drugs come first).
    pub corpus: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            drugs: 40,
            events: 200,
            classes: 8,
            groups: 4,
            genes: 16,
            kg_coverage: 0.9,
            corpus: 100,
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let pairs = self.drugs * self.drugs.saturating_sub(1) / 2;
        if self.drugs < 2 || self.events == 0 || self.events > pairs {
            return Err(CoreError::Config(format!(
                "{} events cannot be drawn from {} drugs",
                self.events, self.drugs
            )));
        }
        if self.classes == 0 || self.groups == 0 || !(0.0..=1.0).contains(&self.kg_coverage) {
            return Err(CoreError::Config(format!("invalid fixture settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub drugs: Vec<DrugRecord>,
    pub groups: Vec<usize>,
    /// `(drug_a, drug_b, label)` as drug-table indices.
    pub events: Vec<(usize, usize, usize)>,
    pub labels: Vec<String>,
    pub triples: Vec<Triple>,
    pub corpus: Vec<String>,
}

/// Class of an ordered group pair.
pub fn group_label(ga: usize, gb: usize, groups: usize, classes: usize) -> usize {
    (ga * groups + gb) % classes
}

/// Distinct molecules: the curated set first, then drug-like random ones.
fn molecules<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut pool: Vec<&str> = CURATED.to_vec();
    pool.shuffle(rng);
    let mut pool = pool.into_iter();
    let mut attempts = 0;
    while out.len() < n {
        let s = match pool.next() {
            Some(s) => s.to_string(),
            None => random_druglike(rng),
        };
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(CoreError::Config(format!("could not draw {n} distinct molecules")));
        }
        if seen.insert(canonical_form(&parse_smiles(&s)?)) {
            out.push(s);
        }
    }
    Ok(out)
}

pub fn generate(config: &FixtureConfig, seed: u64) -> Result<Fixture> {
    config.validate()?;
    let mut rng = rng_for(seed, "fixture");
    let corpus = molecules(config.drugs.max(config.corpus), &mut rng)?;
    let drugs: Vec<DrugRecord> = corpus[..config.drugs]
        .iter()
        .enumerate()
        .map(|(i, s)| DrugRecord {
            id: format!("DB{:05}", i + 1),
            smiles: s.clone(),
        })
        .collect();
    let groups: Vec<usize> = (0..config.drugs).map(|i| i % config.groups).collect::<Vec<_>>();
    let mut groups = groups;
    groups.shuffle(&mut rng);

    let mut pairs: Vec<(usize, usize)> = (0..config.drugs)
        .flat_map(|a| (a + 1..config.drugs).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let events = pairs[..config.events]
        .iter()
        .map(|&(a, b)| {
            let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            (a, b, group_label(groups[a], groups[b], config.groups, config.classes))
        })
        .collect();
    let labels = (0..config.classes).map(|c| format!("event_{c:03}")).collect();

    let id_map = IdMap::default();
    let mut triples = BTreeSet::new();
    let mut covered: Vec<usize> = (0..config.drugs).collect();
    covered.shuffle(&mut rng);
    covered.truncate((config.kg_coverage * config.drugs as f64).round() as usize);
    covered.sort_unstable();
    for &d in &covered {
        let name = id_map.entity_name(&drugs[d].id);
        triples.insert(Triple {
            head: name.clone(),
            relation: "member_of".into(),
            tail: format!("Group::{}", groups[d]),
        });
        for _ in 0..2.min(config.genes) {
            triples.insert(Triple {
                head: name.clone(),
                relation: "targets".into(),
                tail: format!("Gene::{}", rng.gen_range(0..config.genes)),
            });
        }
    }
    for g in 0..config.groups {
        if config.genes > 0 {
            triples.insert(Triple {
                head: format!("Group::{g}"),
                relation: "associated_with".into(),
                tail: format!("Gene::{}", g % config.genes),
            });
        }
    }
    if triples.is_empty() {
        triples.insert(Triple {
            head: "Group::0".into(),
            relation: "self".into(),
            tail: "Group::0".into(),
        });
    }
    Ok(Fixture {
        drugs,
        groups,
        events,
        labels,
        triples: triples.into_iter().collect(),
        corpus,
    })
}

/// Paths of the files written by [`Fixture::write`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub drugs: PathBuf,
    pub events: PathBuf,
    pub labels: PathBuf,
    pub kg: PathBuf,
    pub corpus: PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: &Path) -> Self {
        FixturePaths {
            drugs: dir.join("drugs.tsv"),
            events: dir.join("events.tsv"),
            labels: dir.join("labels.txt"),
            kg: dir.join("kg.tsv"),
            corpus: dir.join("corpus.txt"),
        }
    }

    pub fn all(&self) -> [&Path; 5] {
        [&self.drugs, &self.events, &self.labels, &self.kg, &self.corpus]
    }
}

impl Fixture {
    pub fn drugs_tsv(&self) -> String {
        self.drugs.iter().map(|d| format!("{}\t{}\n", d.id, d.smiles)).collect()
    }

    pub fn events_tsv(&self) -> String {
        self.events
            .iter()
            .map(|&(a, b, l)| format!("{}\t{}\t{}\n", self.drugs[a].id, self.drugs[b].id, self.labels[l]))
            .collect()
    }

    pub fn labels_txt(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn kg_tsv(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
            .collect()
    }

    pub fn corpus_txt(&self) -> String {
        self.corpus.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<FixturePaths> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let paths = FixturePaths::in_dir(dir);
        let contents = [
            self.drugs_tsv(),
            self.events_tsv(),
            self.labels_txt(),
            self.kg_tsv(),
            self.corpus_txt(),
        ];
        for (p, c) in paths.all().into_iter().zip(contents) {
            crate::write_atomic(p, c.as_bytes())?;
        }
        Ok(paths)
    }
}
