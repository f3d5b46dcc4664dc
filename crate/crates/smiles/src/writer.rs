use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::SmilesError;
use crate::graph::{Atom, BondOrder, MolecularGraph};
use crate::parser::parse_smiles;

/// Spanning-tree plan of one depth-first walk.
struct Plan {
    visited: Vec<bool>,
    children: Vec<Vec<(usize, usize)>>,
    ring_open: Vec<Vec<usize>>,
    ring_close: Vec<Vec<usize>>,
    is_ring_bond: Vec<bool>,
    tree_bond: Vec<bool>,
}

impl Plan {
    fn new(g: &MolecularGraph) -> Self {
        let n = g.atom_count();
        Plan {
            visited: vec![false; n],
            children: vec![Vec::new(); n],
            ring_open: vec![Vec::new(); n],
            ring_close: vec![Vec::new(); n],
            is_ring_bond: vec![false; g.bond_count()],
            tree_bond: vec![false; g.bond_count()],
        }
    }

    fn walk<R: Rng + ?Sized>(&mut self, g: &MolecularGraph, v: usize, parent_bond: Option<usize>, rng: &mut R) {
        self.visited[v] = true;
        let mut nbrs: Vec<(usize, usize)> = g.neighbors(v).to_vec();
        nbrs.shuffle(rng);
        for (u, b) in nbrs {
            if Some(b) == parent_bond || self.tree_bond[b] || self.is_ring_bond[b] {
                continue;
            }
            if self.visited[u] {
                // u is an ancestor still on the walk: it opens, v closes
                self.is_ring_bond[b] = true;
                self.ring_open[u].push(b);
                self.ring_close[v].push(b);
            } else {
                self.tree_bond[b] = true;
                self.children[v].push((u, b));
                self.walk(g, u, Some(b), rng);
            }
        }
    }
}

fn atom_text(atom: &Atom, out: &mut String) {
    let symbol = if atom.aromatic {
        atom.element.to_ascii_lowercase()
    } else {
        atom.element.clone()
    };
    if !atom.bracket {
        out.push_str(&symbol);
        return;
    }
    out.push('[');
    if let Some(iso) = atom.isotope {
        out.push_str(&iso.to_string());
    }
    out.push_str(&symbol);
    if let Some(ch) = &atom.chirality {
        out.push_str(ch);
    }
    match atom.hydrogens {
        Some(1) => out.push('H'),
        Some(h) if h > 1 => {
            out.push('H');
            out.push_str(&h.to_string());
        }
        _ => {}
    }
    match atom.charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        q if q > 0 => out.push_str(&format!("+{q}")),
        q => out.push_str(&format!("-{}", -q)),
    }
    if let Some(class) = atom.class {
        out.push(':');
        out.push_str(&class.to_string());
    }
    out.push(']');
}

fn bond_text(g: &MolecularGraph, bond: usize, from: usize, keep_stereo: bool, out: &mut String) {
    let b = &g.bonds[bond];
    let both_aromatic = g.atoms[b.a].aromatic && g.atoms[b.b].aromatic;
    match b.order {
        BondOrder::Single => match b.stereo.filter(|_| keep_stereo) {
            Some(s) => out.push(if from == b.a { s.symbol() } else { s.flipped().symbol() }),
            None if both_aromatic => out.push('-'),
            None => {}
        },
        BondOrder::Double => out.push('='),
        BondOrder::Triple => out.push('#'),
        BondOrder::Aromatic if !both_aromatic => out.push(':'),
        BondOrder::Aromatic => {}
    }
}

struct Emitter<'g> {
    graph: &'g MolecularGraph,
    plan: Plan,
    digit_of_bond: Vec<Option<u32>>,
    digit_used: [bool; 100],
    out: String,
}

impl<'g> Emitter<'g> {
    fn alloc_digit(&mut self) -> Result<u32, SmilesError> {
        let d = (1..100).find(|&d| !self.digit_used[d as usize]).ok_or(SmilesError::TooManyRings)?;
        self.digit_used[d as usize] = true;
        Ok(d)
    }

    fn push_digit(&mut self, d: u32) {
        if d < 10 {
            self.out.push(char::from(b'0' + d as u8));
        } else {
            self.out.push_str(&format!("%{d}"));
        }
    }

    fn emit(&mut self, v: usize) -> Result<(), SmilesError> {
        atom_text(&self.graph.atoms[v], &mut self.out);
        let mut released = Vec::new();
        for i in 0..self.plan.ring_close[v].len() {
            let b = self.plan.ring_close[v][i];
            let d = self.digit_of_bond[b].expect("ring opened before it closes");
            self.push_digit(d);
            released.push(d);
        }
        for i in 0..self.plan.ring_open[v].len() {
            let b = self.plan.ring_open[v][i];
            let d = self.alloc_digit()?;
            self.digit_of_bond[b] = Some(d);
            // ring-closure stereo is dropped; only order symbols are kept
            bond_text(self.graph, b, v, false, &mut self.out);
            self.push_digit(d);
        }
        for d in released {
            self.digit_used[d as usize] = false;
        }
        let children = std::mem::take(&mut self.plan.children[v]);
        let last = children.len().saturating_sub(1);
        for (i, &(u, b)) in children.iter().enumerate() {
            let branch = i < last;
            if branch {
                self.out.push('(');
            }
            bond_text(self.graph, b, v, true, &mut self.out);
            self.emit(u)?;
            if branch {
                self.out.push(')');
            }
        }
        Ok(())
    }
}

/// Writes `g` as SMILES by a depth-first walk from `start`, visiting
/// neighbours in an order shuffled by `rng`. Further components follow,
/// each from a random atom.
pub fn write_smiles<R: Rng + ?Sized>(g: &MolecularGraph, start: usize, rng: &mut R) -> Result<String, SmilesError> {
    if start >= g.atom_count() {
        return Err(SmilesError::AtomOutOfRange {
            index: start,
            atoms: g.atom_count(),
        });
    }
    let mut em = Emitter {
        graph: g,
        plan: Plan::new(g),
        digit_of_bond: vec![None; g.bond_count()],
        digit_used: [false; 100],
        out: String::new(),
    };
    let mut starts = vec![start];
    for comp in g.components() {
        if !comp.contains(&start) {
            starts.push(*comp.choose(rng).expect("components are non-empty"));
        }
    }
    for (i, &s) in starts.iter().enumerate() {
        if i > 0 {
            em.out.push('.');
        }
        em.plan.walk(g, s, None, rng);
        em.emit(s)?;
    }
    Ok(em.out)
}

/// Parses `s` and writes it back from a uniformly random start atom with
/// shuffled branch order.
pub fn randomize_smiles<R: Rng + ?Sized>(s: &str, rng: &mut R) -> Result<String, SmilesError> {
    let g = parse_smiles(s)?;
    let start = rng.gen_range(0..g.atom_count());
    write_smiles(&g, start, rng)
}
