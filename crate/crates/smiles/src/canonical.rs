//! Canonical text for graph isomorphism tests.
//!
//! Colour refinement on atom labels and bond orders, then
//! individualization of the first ambiguous cell, exploring every choice and
//! keeping the smallest encoding. Bond direction marks are left out since the
//! writer does not carry them through ring closures.

use crate::graph::{Atom, MolecularGraph};

fn atom_label(a: &Atom) -> String {
    format!(
        "{}|{}|{}|{:?}|{:?}|{}|{:?}|{}",
        a.element,
        u8::from(a.aromatic),
        a.charge,
        a.hydrogens,
        a.isotope,
        a.chirality.as_deref().unwrap_or(""),
        a.class,
        u8::from(a.bracket)
    )
}

/// Replaces each key by the number of distinct smaller keys.
fn rank_of<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter().map(|k| sorted.binary_search(k).expect("key present")).collect()
}

fn class_count(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn refine(g: &MolecularGraph, mut colors: Vec<usize>) -> Vec<usize> {
    let mut classes = class_count(&colors);
    loop {
        let signatures: Vec<(usize, Vec<(usize, u8)>)> = (0..g.atom_count())
            .map(|v| {
                let mut nb: Vec<(usize, u8)> = g
                    .neighbors(v)
                    .iter()
                    .map(|&(u, b)| (colors[u], g.bonds[b].order.code()))
                    .collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let next = rank_of(&signatures);
        let n = class_count(&next);
        colors = next;
        if n == classes {
            return colors;
        }
        classes = n;
    }
}

fn encode(g: &MolecularGraph, labels: &[String], colors: &[usize]) -> String {
    let mut order: Vec<usize> = (0..colors.len()).collect();
    order.sort_by_key(|&v| colors[v]);
    let mut out: Vec<String> = order.iter().map(|&v| labels[v].clone()).collect();
    let mut edges: Vec<(usize, usize, u8)> = g
        .bonds
        .iter()
        .map(|b| {
            let (x, y) = (colors[b.a], colors[b.b]);
            (x.min(y), x.max(y), b.order.code())
        })
        .collect();
    edges.sort_unstable();
    out.push(String::new());
    out.extend(edges.iter().map(|(x, y, o)| format!("{x}-{y}:{o}")));
    out.join(";")
}

fn search(g: &MolecularGraph, labels: &[String], colors: Vec<usize>, best: &mut Option<String>) {
    let n = colors.len();
    let mut counts = vec![0usize; n];
    for &c in &colors {
        counts[c] += 1;
    }
    let Some(cell) = (0..n).find(|&c| counts[c] > 1) else {
        let code = encode(g, labels, &colors);
        if best.as_ref().is_none_or(|b| code < *b) {
            *best = Some(code);
        }
        return;
    };
    for v in (0..n).filter(|&v| colors[v] == cell) {
        let split: Vec<usize> = (0..n)
            .map(|x| 2 * colors[x] + usize::from(colors[x] == cell && x != v))
            .collect();
        search(g, labels, refine(g, rank_of(&split)), best);
    }
}

/// Deterministic text that is equal for two graphs exactly when they are
/// isomorphic as labelled graphs (atom fields and bond orders).
pub fn canonical_form(g: &MolecularGraph) -> String {
    let labels: Vec<String> = g.atoms.iter().map(atom_label).collect();
    if labels.is_empty() {
        return String::new();
    }
    let colors = refine(g, rank_of(&labels));
    let mut best = None;
    search(g, &labels, colors, &mut best);
    best.expect("non-empty graph has a leaf")
}
