//! Drug and event tables, inductive splits, cross-validation folds, the
//! shrinking-training-set series and token-length bins.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use kite_smiles::{parse_smiles, tokenize};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugRecord {
    pub id: String,
    pub smiles: String,
}

/// One labelled drug pair; drugs are indices into the drug table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DdiEvent {
    pub a: usize,
    pub b: usize,
    pub label: usize,
}

impl DdiEvent {
    /// Order-free key of the pair.
    pub fn pair(&self) -> (usize, usize) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub drugs: Vec<DrugRecord>,
    pub events: Vec<DdiEvent>,
    pub labels: Vec<String>,
    /// Repeated pairs (in either order) with the same label that were dropped.
    pub duplicates_dropped: usize,
}

impl Dataset {
    pub fn drug_index(&self) -> HashMap<&str, usize> {
        self.drugs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect()
    }

    pub fn smiles_of(&self, e: &DdiEvent) -> (&str, &str) {
        (&self.drugs[e.a].smiles, &self.drugs[e.b].smiles)
    }

    /// Parses the three tables, validating every cross-reference.
    pub fn parse(drugs: &str, events: &str, labels: &str, origin: [&Path; 3]) -> Result<Self> {
        let labels = parse_labels(labels, origin[2])?;
        let label_ids: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let drugs = parse_drugs(drugs, origin[0])?;
        let drug_ids: HashMap<&str, usize> = drugs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
        let mut out = Vec::new();
        let mut seen: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        let mut duplicates = 0;
        for (i, line) in events.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(CoreError::at(origin[1], line_no, "expected drug_a<TAB>drug_b<TAB>label"));
            }
            let drug = |id: &str| {
                drug_ids
                    .get(id)
                    .copied()
                    .ok_or_else(|| CoreError::at(origin[1], line_no, format!("unknown drug {id}")))
            };
            let (a, b) = (drug(f[0])?, drug(f[1])?);
            if a == b {
                return Err(CoreError::at(origin[1], line_no, format!("drug {} paired with itself", f[0])));
            }
            let label = *label_ids
                .get(f[2])
                .ok_or_else(|| CoreError::at(origin[1], line_no, format!("label {:?} is not in the label file", f[2])))?;
            let e = DdiEvent { a, b, label };
            match seen.get(&e.pair()) {
                Some(&(_, l)) if l == label => duplicates += 1,
                Some(&(first_line, _)) => {
                    return Err(CoreError::at(
                        origin[1],
                        line_no,
                        format!("pair {} {} relabelled (first seen on line {first_line})", f[0], f[1]),
                    ))
                }
                None => {
                    seen.insert(e.pair(), (line_no, label));
                    out.push(e);
                }
            }
        }
        if out.is_empty() {
            return Err(CoreError::at(origin[1], 0, "no events"));
        }
        Ok(Dataset {
            drugs,
            events: out,
            labels,
            duplicates_dropped: duplicates,
        })
    }

    pub fn load(drugs: &Path, events: &Path, labels: &Path) -> Result<Self> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| CoreError::io(p, e));
        Self::parse(&read(drugs)?, &read(events)?, &read(labels)?, [drugs, events, labels])
    }
}

fn parse_labels(text: &str, origin: &Path) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            return Err(CoreError::at(origin, i + 1, "empty label"));
        }
        if !seen.insert(line) {
            return Err(CoreError::at(origin, i + 1, format!("label {line:?} repeated")));
        }
        labels.push(line.to_string());
    }
    if labels.is_empty() {
        return Err(CoreError::at(origin, 0, "no labels"));
    }
    Ok(labels)
}

pub fn parse_drugs(text: &str, origin: &Path) -> Result<Vec<DrugRecord>> {
    let mut drugs: Vec<DrugRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, smiles)) = line.split_once('\t') else {
            return Err(CoreError::at(origin, i + 1, "expected drug_id<TAB>smiles"));
        };
        if id.is_empty() || !seen.insert(id.to_string()) {
            return Err(CoreError::at(origin, i + 1, format!("drug id {id:?} empty or repeated")));
        }
        parse_smiles(smiles).map_err(|e| CoreError::at(origin, i + 1, format!("SMILES of {id}: {e}")))?;
        drugs.push(DrugRecord {
            id: id.to_string(),
            smiles: smiles.to_string(),
        });
    }
    if drugs.is_empty() {
        return Err(CoreError::at(origin, 0, "no drugs"));
    }
    Ok(drugs)
}

/// Event-index lists of every split, as written to splits JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBundle {
    /// Drugs held out of training.
    pub test_drugs: Vec<usize>,
    /// Events with both drugs outside the test set.
    pub train: Vec<usize>,
    /// Partition of `train` into cross-validation folds.
    pub folds: Vec<Vec<usize>>,
    /// Events with exactly one test drug.
    pub u1: Vec<usize>,
    /// Events with two test drugs.
    pub u2: Vec<usize>,
}

impl SplitBundle {
    /// `train` minus one fold, and that fold.
    pub fn fold_split(&self, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let held = self
            .folds
            .get(fold)
            .ok_or_else(|| CoreError::Config(format!("fold {fold} out of range for {} folds", self.folds.len())))?;
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        Ok((train, held.clone()))
    }

    pub fn named(&self, name: &str) -> Result<Vec<usize>> {
        match name {
            "train" => Ok(self.train.clone()),
            "u1" => Ok(self.u1.clone()),
            "u2" => Ok(self.u2.clone()),
            _ => match name.strip_prefix("fold") {
                Some(k) => {
                    let k: usize = k.parse().map_err(|_| CoreError::Config(format!("unknown split {name}")))?;
                    Ok(self.fold_split(k)?.1)
                }
                None => Err(CoreError::Config(format!("unknown split {name}"))),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Data(format!("splits JSON: {e}")))
    }
}

/// Builds splits for a fixed set of test drugs.
pub fn split_with_test_drugs<R: Rng + ?Sized>(
    events: &[DdiEvent],
    test_drugs: &[usize],
    n_folds: usize,
    rng: &mut R,
) -> Result<SplitBundle> {
    if n_folds == 0 {
        return Err(CoreError::Config("at least one fold is required".into()));
    }
    let test: HashSet<usize> = test_drugs.iter().copied().collect();
    let (mut train, mut u1, mut u2) = (Vec::new(), Vec::new(), Vec::new());
    for (i, e) in events.iter().enumerate() {
        match usize::from(test.contains(&e.a)) + usize::from(test.contains(&e.b)) {
            0 => train.push(i),
            1 => u1.push(i),
            _ => u2.push(i),
        }
    }
    if train.is_empty() {
        return Err(CoreError::Data(
            "no training events remain; lower the test drug fraction".into(),
        ));
    }
    if !test.is_empty() && u1.is_empty() && u2.is_empty() {
        return Err(CoreError::Data(
            "test drugs take part in no events; raise the test drug fraction".into(),
        ));
    }
    let mut pool = train.clone();
    pool.shuffle(rng);
    let mut folds = vec![Vec::new(); n_folds];
    for (i, e) in pool.into_iter().enumerate() {
        folds[i % n_folds].push(e);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    let mut test_drugs: Vec<usize> = test.into_iter().collect();
    test_drugs.sort_unstable();
    Ok(SplitBundle {
        test_drugs,
        train,
        folds,
        u1,
        u2,
    })
}

/// Holds out `round(fraction · drugs)` random drugs and splits events by
/// how many held-out drugs they contain.
pub fn make_inductive_splits<R: Rng + ?Sized>(
    events: &[DdiEvent],
    n_drugs: usize,
    test_drug_fraction: f64,
    n_folds: usize,
    rng: &mut R,
) -> Result<SplitBundle> {
    if !(0.0..1.0).contains(&test_drug_fraction) {
        return Err(CoreError::Config(format!(
            "test drug fraction {test_drug_fraction} is outside [0, 1)"
        )));
    }
    let mut drugs: Vec<usize> = (0..n_drugs).collect();
    drugs.shuffle(rng);
    let k = (test_drug_fraction * n_drugs as f64).round() as usize;
    split_with_test_drugs(events, &drugs[..k], n_folds, rng)
}

/// Exhaustive check of the split invariants.
pub fn verify_splits(bundle: &SplitBundle, events: &[DdiEvent]) -> std::result::Result<(), String> {
    let test: HashSet<usize> = bundle.test_drugs.iter().copied().collect();
    let mut train_drugs = HashSet::new();
    for &i in &bundle.train {
        let e = events.get(i).ok_or(format!("train event {i} out of range"))?;
        if test.contains(&e.a) || test.contains(&e.b) {
            return Err(format!("train event {i} uses a test drug"));
        }
        train_drugs.insert(e.a);
        train_drugs.insert(e.b);
    }
    for &i in &bundle.u1 {
        let e = events.get(i).ok_or(format!("U1 event {i} out of range"))?;
        let known = usize::from(train_drugs.contains(&e.a)) + usize::from(train_drugs.contains(&e.b));
        let held = usize::from(test.contains(&e.a)) + usize::from(test.contains(&e.b));
        if held != 1 || known > 1 {
            return Err(format!("U1 event {i} does not have exactly one held-out drug"));
        }
    }
    for &i in &bundle.u2 {
        let e = events.get(i).ok_or(format!("U2 event {i} out of range"))?;
        if train_drugs.contains(&e.a) || train_drugs.contains(&e.b) || !test.contains(&e.a) || !test.contains(&e.b) {
            return Err(format!("U2 event {i} shares a drug with training"));
        }
    }
    let mut all = HashSet::new();
    for &i in bundle.train.iter().chain(&bundle.u1).chain(&bundle.u2) {
        if !all.insert(i) {
            return Err(format!("event {i} appears in two splits"));
        }
    }
    let mut folded: Vec<usize> = bundle.folds.iter().flatten().copied().collect();
    folded.sort_unstable();
    let mut train = bundle.train.clone();
    train.sort_unstable();
    if folded != train {
        return Err("folds do not partition the training pool".into());
    }
    let sizes: Vec<usize> = bundle.folds.iter().map(Vec::len).collect();
    if sizes.iter().max().unwrap_or(&0) - sizes.iter().min().unwrap_or(&0) > 1 {
        return Err(format!("fold sizes {sizes:?} differ by more than one"));
    }
    Ok(())
}

/// Per-class keep counts for a stratified `keep` fraction: floors plus
/// largest remainders up to `round(keep · total)`, and never below one for
/// a class that is present.
pub fn stratified_quota(class_sizes: &[usize], keep: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let target = (keep * total as f64).round() as usize;
    let exact: Vec<f64> = class_sizes.iter().map(|&n| keep * n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    // larger remainder first, lower class index breaks ties
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = quota.iter().sum();
    for &c in &order {
        if assigned >= target {
            break;
        }
        if quota[c] < class_sizes[c] {
            quota[c] += 1;
            assigned += 1;
        }
    }
    for (q, &n) in quota.iter_mut().zip(class_sizes) {
        if n > 0 && *q == 0 {
            *q = 1;
        }
    }
    quota
}

/// Shrinking training sets: step 0 is the filtered pool, each later step
/// keeps a stratified 90% of the previous one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StsSeries {
    /// Classes dropped for having fewer than the minimum count.
    pub removed_classes: Vec<usize>,
    pub steps: Vec<Vec<usize>>,
    /// True when a step could not shrink the set before the stop size.
    pub stalled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StsConfig {
    pub min_class_count: usize,
    pub keep_fraction: f64,
    pub stop_fraction: f64,
}

impl Default for StsConfig {
    fn default() -> Self {
        StsConfig {
            min_class_count: 5,
            keep_fraction: 0.9,
            stop_fraction: 0.075,
        }
    }
}

pub fn sts_series<R: Rng + ?Sized>(
    train: &[usize],
    events: &[DdiEvent],
    config: &StsConfig,
    rng: &mut R,
) -> Result<StsSeries> {
    if !(0.0..1.0).contains(&config.keep_fraction) || config.keep_fraction == 0.0 {
        return Err(CoreError::Config(format!("keep fraction {} is outside (0, 1)", config.keep_fraction)));
    }
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in train {
        *by_class.entry(events[i].label).or_default() += 1;
    }
    let removed: Vec<usize> = by_class
        .iter()
        .filter(|&(_, &n)| n < config.min_class_count)
        .map(|(&c, _)| c)
        .collect();
    let mut current: Vec<usize> = train.iter().copied().filter(|&i| !removed.contains(&events[i].label)).collect();
    current.sort_unstable();
    if current.is_empty() {
        return Err(CoreError::Data("every class falls below the minimum count".into()));
    }
    let stop = config.stop_fraction * current.len() as f64;
    let mut steps = vec![current.clone()];
    let mut stalled = false;
    while current.len() as f64 > stop {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &current {
            groups.entry(events[i].label).or_default().push(i);
        }
        let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        let quota = stratified_quota(&sizes, config.keep_fraction);
        let mut next = Vec::new();
        for (members, q) in groups.into_values().zip(quota) {
            let mut members = members;
            members.shuffle(rng);
            next.extend_from_slice(&members[..q]);
        }
        next.sort_unstable();
        if next.len() >= current.len() {
            stalled = true;
            break;
        }
        current = next;
        steps.push(current.clone());
    }
    Ok(StsSeries {
        removed_classes: removed,
        steps,
        stalled,
    })
}

/// Events grouped by token length of their encoded pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeqLenBins {
    pub width: usize,
    /// Token count of `a SEP b` for each event, before truncation or padding.
    pub lengths: Vec<usize>,
    /// Bin start → event indices.
    pub bins: BTreeMap<usize, Vec<usize>>,
}

pub fn seqlen_bins(events: &[usize], dataset: &Dataset, width: usize) -> Result<SeqLenBins> {
    if width == 0 {
        return Err(CoreError::Config("bin width must be positive".into()));
    }
    let mut cache: HashMap<usize, usize> = HashMap::new();
    let mut token_len = |drug: usize| -> Result<usize> {
        if let Some(&n) = cache.get(&drug) {
            return Ok(n);
        }
        let n = tokenize(&dataset.drugs[drug].smiles)
            .map_err(|e| CoreError::Data(format!("drug {}: {e}", dataset.drugs[drug].id)))?
            .len();
        cache.insert(drug, n);
        Ok(n)
    };
    let mut lengths = Vec::with_capacity(events.len());
    let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in events {
        let e = dataset.events[i];
        let len = token_len(e.a)? + 1 + token_len(e.b)?;
        lengths.push(len);
        bins.entry(len / width * width).or_default().push(i);
    }
    Ok(SeqLenBins { width, lengths, bins })
}
