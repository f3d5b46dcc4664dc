//! TransE embeddings of a knowledge graph and per-drug lookup.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Dense ids for entity and relation names, assigned in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityIndex {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

impl EntityIndex {
    pub fn from_triples(triples: &[Triple]) -> Self {
        let mut ents = BTreeSet::new();
        let mut rels = BTreeSet::new();
        for t in triples {
            ents.insert(t.head.clone());
            ents.insert(t.tail.clone());
            rels.insert(t.relation.clone());
        }
        let entities: Vec<String> = ents.into_iter().collect();
        let relations: Vec<String> = rels.into_iter().collect();
        let entity_ids = entities.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let relation_ids = relations.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        EntityIndex {
            entities,
            relations,
            entity_ids,
            relation_ids,
        }
    }

    pub fn entity(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    /// `[head, relation, tail]` ids of a triple known to the index.
    pub fn encode(&self, t: &Triple) -> Option<[usize; 3]> {
        Some([self.entity(&t.head)?, self.relation(&t.relation)?, self.entity(&t.tail)?])
    }
}

/// Parses `head<TAB>relation<TAB>tail` lines, dropping duplicates while
/// keeping first-seen order.
pub fn parse_triples(text: &str, origin: &Path) -> Result<Vec<Triple>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(CoreError::at(origin, i + 1, "expected head<TAB>relation<TAB>tail"));
        }
        let t = Triple {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
        };
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(CoreError::at(origin, 0, "no triples"));
    }
    Ok(out)
}

pub fn load_triples(path: &Path) -> Result<(Vec<Triple>, EntityIndex)> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let triples = parse_triples(&text, path)?;
    let index = EntityIndex::from_triples(&triples);
    Ok((triples, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub negatives: usize,
    /// Norm order of the score, 1 or 2.
    pub norm: u8,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            dim: 400,
            margin: 1.0,
            epochs: 100,
            batch_size: 128,
            lr: 0.01,
            negatives: 1,
            norm: 1,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && self.margin > 0.0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.negatives > 0
            && matches!(self.norm, 1 | 2);
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid TransE settings {self:?}")))
        }
    }
}

/// `‖h + r − t‖_p`.
pub fn transe_score(h: &[f32], r: &[f32], t: &[f32], p: u8) -> Result<f64> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(CoreError::Data(format!(
            "TransE score of rows with lengths {}, {}, {}",
            h.len(),
            r.len(),
            t.len()
        )));
    }
    let diffs = h.iter().zip(r).zip(t).map(|((&h, &r), &t)| f64::from(h) + f64::from(r) - f64::from(t));
    Ok(match p {
        1 => diffs.map(f64::abs).sum(),
        2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        _ => return Err(CoreError::Config(format!("norm order {p} is not 1 or 2"))),
    })
}

/// Entity and relation matrices, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entities: Vec<f32>,
    pub relations: Vec<f32>,
}

fn project_to_unit_ball(row: &mut [f32]) {
    let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm > 1.0 {
        for v in row {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
}

impl EmbeddingTable {
    /// Uniform in ±6/√d; relations normalized to unit length and entities
    /// projected into the unit ball.
    pub fn init<R: Rng + ?Sized>(entities: usize, relations: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 6.0 / (dim as f32).sqrt();
        let mut draw = |n: usize| (0..n * dim).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<f32>>();
        let mut table = EmbeddingTable {
            dim,
            entities: draw(entities),
            relations: draw(relations),
        };
        for row in table.relations.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm.max(f32::MIN_POSITIVE));
        }
        table.entities.chunks_mut(dim).for_each(project_to_unit_ball);
        table
    }

    pub fn entity(&self, i: usize) -> &[f32] {
        &self.entities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn relation(&self, i: usize) -> &[f32] {
        &self.relations[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len() / self.dim
    }

    pub fn score(&self, t: [usize; 3], p: u8) -> f64 {
        transe_score(self.entity(t[0]), self.relation(t[1]), self.entity(t[2]), p).expect("rows share one dimension")
    }

    pub fn max_entity_norm(&self) -> f64 {
        self.entities
            .chunks(self.dim)
            .map(|row| row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Replaces head or tail (50/50) with a uniformly drawn entity different
/// from the one it replaces.
pub fn corrupt<R: Rng + ?Sized>(t: [usize; 3], entities: usize, rng: &mut R) -> [usize; 3] {
    let slot = if rng.gen_bool(0.5) { 0 } else { 2 };
    let mut out = t;
    if entities < 2 {
        return out;
    }
    loop {
        out[slot] = rng.gen_range(0..entities);
        if out[slot] != t[slot] {
            return out;
        }
    }
}

/// Margin ranking hinge `max(0, margin + pos − neg)`.
pub fn margin_loss(margin: f64, pos: f64, neg: f64) -> f64 {
    (margin + pos - neg).max(0.0)
}

fn score_grad(h: &[f32], r: &[f32], t: &[f32], p: u8, out: &mut [f64]) {
    let d: Vec<f64> = h.iter().zip(r).zip(t).map(|((&h, &r), &t)| f64::from(h) + f64::from(r) - f64::from(t)).collect();
    match p {
        1 => {
            for (o, v) in out.iter_mut().zip(&d) {
                *o = if *v > 0.0 {
                    1.0
                } else if *v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        _ => {
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (o, v) in out.iter_mut().zip(&d) {
                *o = if norm > 0.0 { v / norm } else { 0.0 };
            }
        }
    }
}

/// One SGD step over `batch`. Returns the summed hinge loss.
pub fn transe_train_step<R: Rng + ?Sized>(
    batch: &[[usize; 3]],
    table: &mut EmbeddingTable,
    config: &TransEConfig,
    rng: &mut R,
) -> f64 {
    let dim = table.dim;
    let n_ent = table.num_entities();
    let mut ent_grad: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut rel_grad: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut g = vec![0.0; dim];
    let mut loss = 0.0;
    for &pos in batch {
        for _ in 0..config.negatives {
            let neg = corrupt(pos, n_ent, rng);
            let l = margin_loss(config.margin, table.score(pos, config.norm), table.score(neg, config.norm));
            if l <= 0.0 {
                continue;
            }
            loss += l;
            // d loss / d (h + r - t) is +grad for the positive, -grad for the negative
            for (triple, sign) in [(pos, 1.0), (neg, -1.0)] {
                score_grad(
                    table.entity(triple[0]),
                    table.relation(triple[1]),
                    table.entity(triple[2]),
                    config.norm,
                    &mut g,
                );
                let add = |map: &mut HashMap<usize, Vec<f64>>, key: usize, s: f64| {
                    let acc = map.entry(key).or_insert_with(|| vec![0.0; dim]);
                    acc.iter_mut().zip(&g).for_each(|(a, v)| *a += s * v);
                };
                add(&mut ent_grad, triple[0], sign);
                add(&mut rel_grad, triple[1], sign);
                add(&mut ent_grad, triple[2], -sign);
            }
        }
    }
    let lr = config.lr;
    for (e, grad) in ent_grad {
        let row = &mut table.entities[e * dim..(e + 1) * dim];
        row.iter_mut().zip(&grad).for_each(|(v, g)| *v = (f64::from(*v) - lr * g) as f32);
    }
    for (r, grad) in rel_grad {
        let row = &mut table.relations[r * dim..(r + 1) * dim];
        row.iter_mut().zip(&grad).for_each(|(v, g)| *v = (f64::from(*v) - lr * g) as f32);
    }
    table.entities.chunks_mut(dim).for_each(project_to_unit_ball);
    loss
}

/// Trains from scratch; returns the table and the mean hinge loss per
/// positive/negative pair for each epoch.
pub fn train_transe(
    triples: &[[usize; 3]],
    entities: usize,
    relations: usize,
    config: &TransEConfig,
    seed: u64,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    config.validate()?;
    if triples.is_empty() {
        return Err(CoreError::Data("no triples to train on".into()));
    }
    let mut rng = rng_for(seed, "kg");
    let mut table = EmbeddingTable::init(entities, relations, config.dim, &mut rng);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<[usize; 3]> = chunk.iter().map(|&i| triples[i]).collect();
            total += transe_train_step(&batch, &mut table, config, &mut rng);
        }
        history.push(total / (triples.len() * config.negatives) as f64);
    }
    Ok((table, history))
}

/// Named rows of one embedding matrix, as exported to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEmbeddings {
    pub dim: usize,
    pub names: Vec<String>,
    pub data: Vec<f32>,
    rows: HashMap<String, usize>,
}

impl NamedEmbeddings {
    pub fn new(dim: usize, names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != names.len() * dim {
            return Err(CoreError::Data(format!(
                "{} names with {} values do not form rows of width {dim}",
                names.len(),
                data.len()
            )));
        }
        let mut rows = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if rows.insert(n.clone(), i).is_some() {
                return Err(CoreError::Data(format!("embedding name {n} repeated")));
            }
        }
        Ok(NamedEmbeddings { dim, names, data, rows })
    }

    /// Entity rows of a trained table under their KG names.
    pub fn entities_of(table: &EmbeddingTable, index: &EntityIndex) -> Result<Self> {
        Self::new(table.dim, index.entities.clone(), table.entities.clone())
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.rows.get(name).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Rows for the given names, in that order; missing names are skipped.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out_names = Vec::new();
        let mut data = Vec::new();
        for n in names {
            if let Some(row) = self.get(n) {
                if !out_names.iter().any(|m: &String| m == n) {
                    out_names.push(n.to_string());
                    data.extend_from_slice(row);
                }
            }
        }
        Self::new(self.dim, out_names, data)
    }

    /// Writes `<stem>.bin` (u64 count, u64 dim, f32 values, little endian)
    /// and `<stem>.index` (one name per line, in row order).
    pub fn save(&self, bin: &Path, index: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.data.len());
        bytes.extend_from_slice(&(self.names.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(bin, bytes).map_err(|e| CoreError::io(bin, e))?;
        let mut f = fs::File::create(index).map_err(|e| CoreError::io(index, e))?;
        for n in &self.names {
            writeln!(f, "{n}").map_err(|e| CoreError::io(index, e))?;
        }
        Ok(())
    }

    pub fn load(bin: &Path, index: &Path) -> Result<Self> {
        let bytes = fs::read(bin).map_err(|e| CoreError::io(bin, e))?;
        if bytes.len() < 16 {
            return Err(CoreError::at(bin, 0, "truncated embedding header"));
        }
        let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let expect = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16));
        if expect != Some(bytes.len()) {
            return Err(CoreError::at(bin, 0, format!("{count}x{dim} table does not match file size {}", bytes.len())));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let text = fs::read_to_string(index).map_err(|e| CoreError::io(index, e))?;
        let names: Vec<String> = text.lines().map(str::to_string).collect();
        if names.len() != count {
            return Err(CoreError::at(index, names.len(), format!("index lists {} names for {count} rows", names.len())));
        }
        Self::new(dim, names, data)
    }
}

/// Maps dataset drug ids to KG entity names through a `{id}` template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdMap {
    pub template: String,
}

impl Default for IdMap {
    fn default() -> Self {
        IdMap {
            template: "Compound::{id}".into(),
        }
    }
}

impl IdMap {
    pub fn entity_name(&self, drug_id: &str) -> String {
        self.template.replace("{id}", drug_id)
    }
}

/// Counts drugs looked up and drugs absent from the KG.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MissCounter {
    pub lookups: usize,
    pub misses: usize,
}

impl MissCounter {
    pub fn rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.misses as f64 / self.lookups as f64
        }
    }
}

/// `[e(a) ‖ e(b)]`; a drug missing from the table contributes zeros.
pub fn pair_embedding(
    a: &str,
    b: &str,
    table: &NamedEmbeddings,
    id_map: &IdMap,
    misses: &mut MissCounter,
) -> Vec<f32> {
    let mut out = vec![0.0; 2 * table.dim];
    for (half, drug) in [a, b].into_iter().enumerate() {
        misses.lookups += 1;
        match table.get(&id_map.entity_name(drug)) {
            Some(row) => out[half * table.dim..(half + 1) * table.dim].copy_from_slice(row),
            None => misses.misses += 1,
        }
    }
    out
}
