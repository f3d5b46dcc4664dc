//! Subcommand bodies. Each reads its inputs through [`Run`] so the
//! manifest sees every checksum, and writes only into the output directory.

use std::path::{Path, PathBuf};

use kite_core::datasets::{make_inductive_splits, seqlen_bins, sts_series, verify_splits, Dataset, SplitBundle};
use kite_core::fixtures::generate;
use kite_core::kg::{parse_triples, train_transe, EntityIndex, MissCounter, NamedEmbeddings};
use kite_core::metrics::{argmax, curves_csv, evaluate};
use kite_core::model::{init_store, ModelConfig, StoreKind, TRANSFER_PREFIXES};
use kite_core::seed::{rng_for, RngState};
use kite_core::training::{
    accuracy_and_loss, finetune, finetune_history_csv, mlm_pretrain, predict, pretrain_history_csv,
    Checkpoint, CheckpointKind, FinetuneOutcome, PairSet,
};
use kite_core::{CoreError, Result};
use kite_smiles::Vocabulary;
use kite_tensor::ParamStore;
use serde_json::json;

use crate::manifest::Run;

/// Drug, event and label tables.
pub struct DataPaths<'a> {
    pub drugs: &'a Path,
    pub events: &'a Path,
    pub labels: &'a Path,
}

fn load_dataset(run: &mut Run, p: &DataPaths) -> Result<Dataset> {
    let drugs = run.read_text(p.drugs)?;
    let events = run.read_text(p.events)?;
    let labels = run.read_text(p.labels)?;
    let ds = Dataset::parse(&drugs, &events, &labels, [p.drugs, p.events, p.labels])?;
    if ds.duplicates_dropped > 0 {
        run.progress(format!("dropped {} repeated events", ds.duplicates_dropped));
    }
    Ok(ds)
}

fn load_splits(run: &mut Run, path: &Path) -> Result<SplitBundle> {
    let text = run.read_text(path)?;
    SplitBundle::from_json(&text)
}

fn load_vocab(run: &mut Run, path: &Path) -> Result<Vocabulary> {
    let text = run.read_text(path)?;
    Ok(Vocabulary::from_text(&text)?)
}

/// Index file next to a `.bin` table.
pub fn index_path(bin: &Path) -> PathBuf {
    bin.with_extension("index")
}

/// Loaded KG pair table plus the checksum that ties it to checkpoints.
struct KgInput {
    table: NamedEmbeddings,
    sha256: String,
}

fn load_kg(run: &mut Run, bin: Option<&Path>) -> Result<Option<KgInput>> {
    let Some(bin) = bin else {
        return Ok(None);
    };
    let index = index_path(bin);
    let sha256 = run.note_input(bin)?;
    run.note_input(&index)?;
    let table = NamedEmbeddings::load(bin, &index)?;
    Ok(Some(KgInput { table, sha256 }))
}

fn load_checkpoint(run: &mut Run, path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let bytes = run.read(path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    if ck.kind != kind {
        return Err(CoreError::Config(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            ck.kind
        )));
    }
    Ok(ck)
}

fn pair_set(run: &Run, ds: &Dataset, events: &[usize], kg: Option<&KgInput>, kg_dim: usize) -> Result<(PairSet, MissCounter)> {
    let mut misses = MissCounter::default();
    let set = PairSet::from_events(ds, events, kg.map(|k| &k.table), &run.config.kg, kg_dim, &mut misses)?;
    Ok((set, misses))
}

fn write_json(run: &mut Run, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    text.push('\n');
    run.write(name, text.as_bytes())?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CoreError::Data(format!("CSV output: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CoreError::Data(format!("CSV output: {e}")))
}

pub fn synth(mut run: Run) -> Result<serde_json::Value> {
    let fx = generate(&run.config.fixture, run.config.seed)?;
    run.write("drugs.tsv", fx.drugs_tsv().as_bytes())?;
    run.write("events.tsv", fx.events_tsv().as_bytes())?;
    run.write("labels.txt", fx.labels_txt().as_bytes())?;
    run.write("kg.tsv", fx.kg_tsv().as_bytes())?;
    run.write("corpus.txt", fx.corpus_txt().as_bytes())?;
    let summary = json!({
        "drugs": fx.drugs.len(),
        "events": fx.events.len(),
        "classes": fx.labels.len(),
        "triples": fx.triples.len(),
        "corpus": fx.corpus.len(),
    });
    run.finish(summary.clone())?;
    Ok(summary)
}

/// Non-blank lines of a SMILES corpus, each checked to parse.
fn corpus_lines(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        kite_smiles::parse_smiles(line).map_err(|e| CoreError::at(path, i + 1, e.to_string()))?;
        out.push(line.to_string());
    }
    Ok(out)
}

pub fn vocab(mut run: Run, corpus: &Path, drugs: Option<&Path>) -> Result<serde_json::Value> {
    let mut smiles = corpus_lines(&run.read_text(corpus)?, corpus)?;
    if let Some(d) = drugs {
        let text = run.read_text(d)?;
        smiles.extend(kite_core::datasets::parse_drugs(&text, d)?.into_iter().map(|r| r.smiles));
    }
    let v = Vocabulary::build(smiles.iter().map(String::as_str), run.config.vocab.min_count)?;
    run.write("vocab.txt", v.to_text().as_bytes())?;
    let summary = json!({ "tokens": v.len(), "molecules": smiles.len() });
    run.finish(summary.clone())?;
    Ok(summary)
}

pub fn kg_train(mut run: Run, triples: &Path) -> Result<serde_json::Value> {
    let text = run.read_text(triples)?;
    let parsed = parse_triples(&text, triples)?;
    let index = EntityIndex::from_triples(&parsed);
    let encoded: Vec<[usize; 3]> = parsed.iter().map(|t| index.encode(t).expect("index built from these triples")).collect();
    let (table, history) = train_transe(
        &encoded,
        index.entities.len(),
        index.relations.len(),
        &run.config.transe,
        run.config.seed,
    )?;
    if history.iter().any(|l| !l.is_finite()) {
        return Err(CoreError::NonFinite {
            what: "TransE loss".into(),
            epoch: history.iter().position(|l| !l.is_finite()).unwrap_or(0) + 1,
            step: 0,
        });
    }
    let entities = NamedEmbeddings::entities_of(&table, &index)?;
    let relations = NamedEmbeddings::new(table.dim, index.relations.clone(), table.relations.clone())?;
    for (stem, t) in [("entities", &entities), ("relations", &relations)] {
        let (bin, idx) = (run.output_path(&format!("{stem}.bin"))?, run.output_path(&format!("{stem}.index"))?);
        t.save(&bin, &idx)?;
        run.record(&format!("{stem}.bin"))?;
        run.record(&format!("{stem}.index"))?;
    }
    let rows = history
        .iter()
        .enumerate()
        .map(|(e, l)| vec![(e + 1).to_string(), l.to_string()])
        .collect();
    run.write("kg_history.csv", &csv_bytes(&["epoch", "loss"], rows)?)?;
    let summary = json!({
        "entities": index.entities.len(),
        "relations": index.relations.len(),
        "triples": encoded.len(),
        "final_loss": history.last(),
        "max_entity_norm": table.max_entity_norm(),
    });
    run.finish(summary.clone())?;
    Ok(summary)
}

pub fn kg_export(mut run: Run, entities: &Path, drugs: &Path) -> Result<serde_json::Value> {
    run.note_input(entities)?;
    run.note_input(&index_path(entities))?;
    let table = NamedEmbeddings::load(entities, &index_path(entities))?;
    let text = run.read_text(drugs)?;
    let records = kite_core::datasets::parse_drugs(&text, drugs)?;
    let names: Vec<String> = records.iter().map(|d| run.config.kg.entity_name(&d.id)).collect();
    let subset = table.subset(names.iter().map(String::as_str))?;
    let (bin, idx) = (run.output_path("drug_kg.bin")?, run.output_path("drug_kg.index")?);
    subset.save(&bin, &idx)?;
    run.record("drug_kg.bin")?;
    run.record("drug_kg.index")?;
    let summary = json!({
        "drugs": records.len(),
        "covered": subset.names.len(),
        "missing": records.len() - subset.names.len(),
        "dim": subset.dim,
    });
    run.finish(summary.clone())?;
    Ok(summary)
}

pub fn split(mut run: Run, data: &DataPaths) -> Result<serde_json::Value> {
    let ds = load_dataset(&mut run, data)?;
    let mut rng = rng_for(run.config.seed, "split");
    let s = &run.config.split;
    let bundle = make_inductive_splits(&ds.events, ds.drugs.len(), s.test_drug_fraction, s.folds, &mut rng)?;
    verify_splits(&bundle, &ds.events).map_err(CoreError::Data)?;
    run.write("splits.json", bundle.to_json().as_bytes())?;
    let summary = json!({
        "test_drugs": bundle.test_drugs.len(),
        "train": bundle.train.len(),
        "u1": bundle.u1.len(),
        "u2": bundle.u2.len(),
        "folds": bundle.folds.iter().map(Vec::len).collect::<Vec<_>>(),
    });
    run.finish(summary.clone())?;
    Ok(summary)
}

fn check_finite_history(values: impl Iterator<Item = (usize, f64)>, what: &str) -> Result<()> {
    for (epoch, v) in values {
        if !v.is_finite() {
            return Err(CoreError::NonFinite {
                what: what.into(),
                epoch,
                step: 0,
            });
        }
    }
    Ok(())
}

pub fn pretrain(mut run: Run, corpus: &Path, vocab_path: &Path) -> Result<serde_json::Value> {
    let corpus = corpus_lines(&run.read_text(corpus)?, corpus)?;
    let vocab = load_vocab(&mut run, vocab_path)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..run.config.model.clone()
    };
    let config = run.config.pretrain.clone();
    let mut store = init_store::<f32>(&model, StoreKind::Pretrain, run.config.seed)?;
    let total = config.epochs;
    let (report, adam, rng) = mlm_pretrain(&mut store, &model, &corpus, &vocab, &config, |e, _| {
        run.progress(format!(
            "epoch {}/{total} train {:.4} probe {:.4}",
            e.epoch, e.train_loss, e.probe_loss
        ));
        true
    })?;
    check_finite_history(report.epochs.iter().map(|e| (e.epoch, e.probe_loss)), "probe loss")?;
    let ck = Checkpoint {
        kind: CheckpointKind::Pretrain,
        model: model.clone(),
        vocab: vocab.tokens().to_vec(),
        epoch: report.epochs.len() as u64,
        rng: RngState::capture(&rng),
        fingerprint: run.fingerprint(),
        store,
        optimizer: Some(adam),
        meta: json!({ "initial_probe_loss": report.initial_probe_loss }),
    };
    run.write("pretrain.ckpt", &ck.to_bytes()?)?;
    run.write("pretrain_history.csv", pretrain_history_csv(&report).as_bytes())?;
    let last = report.epochs.last().map_or(report.initial_probe_loss, |e| e.probe_loss);
    let summary = json!({
        "initial_probe_loss": report.initial_probe_loss,
        "final_probe_loss": last,
        "ratio": last / report.initial_probe_loss,
        "epochs": report.epochs.len(),
    });
    run.finish(summary.clone())?;
    Ok(summary)
}

/// Inputs shared by the commands that fine-tune.
pub struct TrainInputs<'a> {
    pub data: DataPaths<'a>,
    pub splits: &'a Path,
    pub vocab: Option<&'a Path>,
    pub pretrained: Option<&'a Path>,
    pub kg: Option<&'a Path>,
}

struct Prepared {
    ds: Dataset,
    bundle: SplitBundle,
    vocab: Vocabulary,
    model: ModelConfig,
    pretrained: Option<Checkpoint>,
    kg: Option<KgInput>,
}

const SHARED_FIELDS: [&str; 6] = ["vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"];

fn shared(m: &ModelConfig) -> [usize; 6] {
    [m.vocab_size, m.d_model, m.n_layers, m.n_heads, m.d_ff, m.max_len]
}

fn prepare(run: &mut Run, inputs: &TrainInputs) -> Result<Prepared> {
    let ds = load_dataset(run, &inputs.data)?;
    let bundle = load_splits(run, inputs.splits)?;
    verify_splits(&bundle, &ds.events).map_err(|e| CoreError::Data(format!("{}: {e}", inputs.splits.display())))?;
    let pretrained = inputs
        .pretrained
        .map(|p| load_checkpoint(run, p, CheckpointKind::Pretrain))
        .transpose()?;
    let vocab = match (inputs.vocab, &pretrained) {
        (Some(p), ck) => {
            let v = load_vocab(run, p)?;
            if ck.as_ref().is_some_and(|c| c.vocab != v.tokens()) {
                return Err(CoreError::Config("--vocab differs from the pretrained checkpoint's vocabulary".into()));
            }
            v
        }
        (None, Some(ck)) => ck.vocabulary()?,
        (None, None) => return Err(CoreError::Config("either --vocab or --pretrained is required".into())),
    };
    let kg = load_kg(run, inputs.kg)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        n_classes: ds.labels.len(),
        kg_dim: kg.as_ref().map_or(run.config.model.kg_dim, |k| 2 * k.table.dim),
        ..run.config.model.clone()
    };
    model.validate()?;
    if let Some(ck) = &pretrained {
        let (a, b) = (shared(&ck.model), shared(&model));
        if let Some(i) = (0..a.len()).find(|&i| a[i] != b[i]) {
            return Err(CoreError::Config(format!(
                "model.{} is {} but the pretrained checkpoint has {}",
                SHARED_FIELDS[i], b[i], a[i]
            )));
        }
    }
    Ok(Prepared {
        ds,
        bundle,
        vocab,
        model,
        pretrained,
        kg,
    })
}

fn initial_store(run: &Run, p: &Prepared) -> Result<ParamStore<f32>> {
    let mut store = init_store(&p.model, StoreKind::Finetune, run.config.seed)?;
    if let Some(ck) = &p.pretrained {
        store.copy_from(&ck.store, &TRANSFER_PREFIXES)?;
    }
    Ok(store)
}

fn tag_checkpoint(ck: &mut Checkpoint, kg: Option<&KgInput>) {
    if let Some(m) = ck.meta.as_object_mut() {
        m.insert("kg_sha256".into(), kg.map_or(serde_json::Value::Null, |k| json!(k.sha256)));
    }
}

fn run_finetune(run: &Run, p: &Prepared, train: &PairSet, eval: &PairSet) -> Result<FinetuneOutcome> {
    let store = initial_store(run, p)?;
    let total = run.config.finetune.epochs;
    let mut out = finetune(
        store,
        &p.model,
        &p.vocab,
        train,
        eval,
        &run.config.finetune,
        &run.fingerprint(),
        |e| {
            run.progress(format!(
                "epoch {}/{total} loss {:.4} train acc {:.4} eval acc {:.4}",
                e.epoch, e.train_loss, e.train_accuracy, e.eval_accuracy
            ))
        },
    )?;
    tag_checkpoint(&mut out.best, p.kg.as_ref());
    tag_checkpoint(&mut out.last, p.kg.as_ref());
    Ok(out)
}

/// Which events to train on and which to select the best epoch on.
pub enum TrainSplit<'a> {
    /// Whole training pool, no selection.
    Pool,
    /// Pool minus fold `k`; select on fold `k`.
    Fold(usize),
    /// Whole pool; select on a named split.
    Named(&'a str),
}

pub fn train(mut run: Run, inputs: &TrainInputs, which: TrainSplit) -> Result<serde_json::Value> {
    let p = prepare(&mut run, inputs)?;
    let (train_ids, eval_ids) = match which {
        TrainSplit::Pool => (p.bundle.train.clone(), Vec::new()),
        TrainSplit::Fold(k) => p.bundle.fold_split(k)?,
        TrainSplit::Named(name) => (p.bundle.train.clone(), p.bundle.named(name)?),
    };
    let (train_set, mut misses) = pair_set(&run, &p.ds, &train_ids, p.kg.as_ref(), p.model.kg_dim)?;
    let (eval_set, m2) = pair_set(&run, &p.ds, &eval_ids, p.kg.as_ref(), p.model.kg_dim)?;
    misses.lookups += m2.lookups;
    misses.misses += m2.misses;
    if p.kg.is_some() {
        run.progress(format!("KG miss rate {:.3}", misses.rate()));
    }
    let out = run_finetune(&run, &p, &train_set, &eval_set)?;
    run.write("last.ckpt", &out.last.to_bytes()?)?;
    if !eval_set.is_empty() {
        run.write("best.ckpt", &out.best.to_bytes()?)?;
    }
    run.write("train_history.csv", finetune_history_csv(&out.history).as_bytes())?;
    let last = out.history.last();
    let summary = json!({
        "train_events": train_set.len(),
        "eval_events": eval_set.len(),
        "best_epoch": (!eval_set.is_empty()).then_some(out.best_epoch),
        "final_train_loss": last.map(|h| h.train_loss),
        "final_train_accuracy": last.map(|h| h.train_accuracy),
        "final_eval_accuracy": last.map(|h| h.eval_accuracy),
        "kg_miss_rate": p.kg.as_ref().map(|_| misses.rate()),
        "pretrained": p.pretrained.is_some(),
    });
    run.finish(summary.clone())?;
    Ok(summary)
}

/// Checkpoint plus the data needed to score it on one split.
struct Scored {
    ds: Dataset,
    events: Vec<usize>,
    labels: Vec<usize>,
    probs: Vec<f64>,
    m: usize,
}

pub struct EvalInputs<'a> {
    pub checkpoint: &'a Path,
    pub data: DataPaths<'a>,
    pub splits: &'a Path,
    pub split: &'a str,
    pub kg: Option<&'a Path>,
}

fn score(run: &mut Run, inputs: &EvalInputs) -> Result<Scored> {
    let ck = load_checkpoint(run, inputs.checkpoint, CheckpointKind::Finetune)?;
    let ds = load_dataset(run, &inputs.data)?;
    if ds.labels.len() != ck.model.n_classes {
        return Err(CoreError::Config(format!(
            "checkpoint has {} classes, label file has {}",
            ck.model.n_classes,
            ds.labels.len()
        )));
    }
    let bundle = load_splits(run, inputs.splits)?;
    let events = bundle.named(inputs.split)?;
    if events.is_empty() {
        return Err(CoreError::Data(format!("split {} is empty", inputs.split)));
    }
    let kg = load_kg(run, inputs.kg)?;
    let expected = ck.meta.get("kg_sha256").and_then(|v| v.as_str());
    let given = kg.as_ref().map(|k| k.sha256.as_str());
    if expected != given {
        return Err(CoreError::Config(format!(
            "checkpoint was trained with KG table {} but --kg gives {}",
            expected.unwrap_or("none"),
            given.unwrap_or("none")
        )));
    }
    let vocab = ck.vocabulary()?;
    let (set, _) = pair_set(run, &ds, &events, kg.as_ref(), ck.model.kg_dim)?;
    let probs = predict(&ck.store, &ck.model, &vocab, &set, run.config.eval.batch_size)?;
    Ok(Scored {
        ds,
        events,
        labels: set.labels,
        probs,
        m: ck.model.n_classes,
    })
}

pub fn eval(mut run: Run, inputs: &EvalInputs) -> Result<serde_json::Value> {
    let s = score(&mut run, inputs)?;
    let (report, roc, pr) = evaluate(&s.probs, &s.labels, s.m)?;
    write_json(&mut run, "metrics.json", &report)?;
    run.write("roc.csv", curves_csv(&roc, "fpr", "tpr").as_bytes())?;
    run.write("pr.csv", curves_csv(&pr, "recall", "precision").as_bytes())?;
    let summary = json!({ "split": inputs.split, "events": s.events.len(), "accuracy": report.accuracy });
    run.finish(summary.clone())?;
    Ok(summary)
}

pub fn seqlen(mut run: Run, inputs: &EvalInputs) -> Result<serde_json::Value> {
    let s = score(&mut run, inputs)?;
    let bins = seqlen_bins(&s.events, &s.ds, run.config.eval.bin_width)?;
    let position: std::collections::HashMap<usize, usize> = s.events.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let rows = bins
        .bins
        .iter()
        .map(|(&start, members)| {
            let correct = members
                .iter()
                .filter(|&&i| {
                    let k = position[&i];
                    argmax(&s.probs[k * s.m..(k + 1) * s.m]) == s.labels[k]
                })
                .count();
            vec![
                start.to_string(),
                (start + bins.width).to_string(),
                (correct as f64 / members.len() as f64).to_string(),
                members.len().to_string(),
            ]
        })
        .collect::<Vec<_>>();
    let n_bins = rows.len();
    run.write("seqlen.csv", &csv_bytes(&["bin_start", "bin_end", "mean_accuracy", "count"], rows)?)?;
    let summary = json!({ "split": inputs.split, "events": s.events.len(), "bins": n_bins });
    run.finish(summary.clone())?;
    Ok(summary)
}

pub fn sts(mut run: Run, inputs: &TrainInputs) -> Result<serde_json::Value> {
    let p = prepare(&mut run, inputs)?;
    let mut rng = rng_for(run.config.seed, "sts");
    let series = sts_series(&p.bundle.train, &p.ds.events, &run.config.sts, &mut rng)?;
    let initial = series.steps[0].len() as f64;
    let (u1, _) = pair_set(&run, &p.ds, &p.bundle.u1, p.kg.as_ref(), p.model.kg_dim)?;
    let (u2, _) = pair_set(&run, &p.ds, &p.bundle.u2, p.kg.as_ref(), p.model.kg_dim)?;
    let empty = PairSet {
        smiles: Vec::new(),
        labels: Vec::new(),
        kg: Vec::new(),
        kg_dim: p.model.kg_dim,
    };
    let accuracy = |store: &ParamStore<f32>, set: &PairSet| -> Result<String> {
        if set.is_empty() {
            return Ok(String::new());
        }
        let probs = predict(store, &p.model, &p.vocab, set, run.config.eval.batch_size)?;
        Ok(accuracy_and_loss(&probs, &set.labels, p.model.n_classes).0.to_string())
    };
    let mut rows = Vec::with_capacity(series.steps.len());
    for (k, step) in series.steps.iter().enumerate() {
        run.progress(format!("step {k}: {} training events", step.len()));
        let (train_set, _) = pair_set(&run, &p.ds, step, p.kg.as_ref(), p.model.kg_dim)?;
        let out = run_finetune(&run, &p, &train_set, &empty)?;
        rows.push(vec![
            k.to_string(),
            (step.len() as f64 / initial).to_string(),
            step.len().to_string(),
            accuracy(&out.last.store, &u1)?,
            accuracy(&out.last.store, &u2)?,
        ]);
    }
    let n = rows.len();
    run.write(
        "sts.csv",
        &csv_bytes(&["step", "train_fraction", "train_size", "u1_accuracy", "u2_accuracy"], rows)?,
    )?;
    let summary = json!({
        "steps": n,
        "removed_classes": series.removed_classes,
        "stalled": series.stalled,
        "sizes": series.steps.iter().map(Vec::len).collect::<Vec<_>>(),
    });
    run.finish(summary.clone())?;
    Ok(summary)
}
