//! Random molecules for fixtures and property tests.
//!
//! Graphs are built directly (no valence model) and written out with the
//! regular writer, so they exercise branches, ring closures, aromatic rings,
//! bracket atoms, bond orders, direction marks and multiple components.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::{Atom, BondOrder, BondStereo, MolecularGraph};
use crate::writer::write_smiles;

/// Hand-written drug-like SMILES covering common syntax.
pub const CURATED: &[&str] = &[
    "CC(=O)OC1=CC=CC=C1C(=O)O",
    "CN1C=NC2=C1C(=O)N(C(=O)N2C)C",
    "CC(C)CC1=CC=C(C=C1)C(C)C(=O)O",
    "CC(=O)NC1=CC=C(C=C1)O",
    "C1=CC=C(C=C1)C2=CC=CC=C2",
    "c1ccc2ccccc2c1",
    "c1ccncc1",
    "c1cc[nH]c1",
    "O=C(O)c1ccccc1O",
    "CCN(CC)CC",
    "C#N",
    "N#CC(=O)N",
    "ClC(Cl)(Cl)Cl",
    "BrCCBr",
    "F/C=C/F",
    "F/C=C\\F",
    "C/C=C/C=C/C",
    "N[C@@H](C)C(=O)O",
    "N[C@H](Cc1ccccc1)C(=O)O",
    "[NH4+].[Cl-]",
    "[Na+].[O-]C(=O)C",
    "[13CH4]",
    "[2H]OC",
    "O=S(=O)(O)O",
    "OP(=O)(O)O",
    "C1CC1",
    "C1CCC2CCCCC2C1",
    "C12CC1C2",
    "C%10CCCCC%10",
    "C1CC%11CC1CC%11",
    "c1ccc(cc1)-c1ccccc1",
    "CC(C)(C)c1ccc(O)cc1",
    "COc1ccc2[nH]cc(CCN(C)C)c2c1",
    "CN1CCC[C@H]1c1cccnc1",
    "OC[C@H]1OC(O)[C@H](O)[C@@H](O)[C@@H]1O",
    "CC(=O)Oc1ccccc1C(=O)O",
    "c1ccc2c(c1)oc1ccccc12",
    "C1=CC=CS1",
    "c1ccsc1",
    "[Fe+2].[O-2]",
    "[Cu]",
    "*C(*)C",
    "C=C=C",
    "CC#CC",
    "[CH3:1][OH:2]",
    "O=[N+]([O-])c1ccccc1",
    "Cc1c(C)c(C)c(C)c(C)c1C",
    "C1CC2CCC1CC2",
    "Fc1c(F)c(F)c(F)c(F)c1F",
    "CCCCCCCCCCCCCCCCCC(=O)O",
];

const ORGANIC: &[(&str, u32)] = &[("C", 60), ("N", 12), ("O", 12), ("S", 4), ("F", 4), ("Cl", 4), ("Br", 2), ("P", 2)];

fn pick_element<R: Rng + ?Sized>(rng: &mut R) -> &'static str {
    ORGANIC.choose_weighted(rng, |e| e.1).expect("non-empty table").0
}

fn random_atom<R: Rng + ?Sized>(rng: &mut R) -> Atom {
    let mut atom = Atom::organic(pick_element(rng), false);
    if rng.gen_bool(0.08) {
        atom.bracket = true;
        match rng.gen_range(0..5) {
            0 => atom.charge = *[-1i8, 1, 2, -2].choose(rng).expect("non-empty"),
            1 => atom.isotope = Some(*[2u16, 13, 15, 18].choose(rng).expect("non-empty")),
            2 => atom.chirality = Some(if rng.gen() { "@" } else { "@@" }.to_string()),
            3 => atom.class = Some(rng.gen_range(1..20)),
            _ => {}
        }
        atom.hydrogens = Some(rng.gen_range(0..4));
    }
    atom
}

fn add_aromatic_ring<R: Rng + ?Sized>(g: &mut MolecularGraph, rng: &mut R) -> Vec<usize> {
    let size = if rng.gen_bool(0.8) { 6 } else { 5 };
    let ring: Vec<usize> = (0..size)
        .map(|i| {
            let element = if i > 0 && rng.gen_bool(0.15) { "N" } else { "C" };
            g.add_atom(Atom::organic(element, true))
        })
        .collect();
    for i in 0..size {
        g.add_bond(ring[i], ring[(i + 1) % size], BondOrder::Aromatic, None);
    }
    ring
}

/// One connected component of roughly `atoms` heavy atoms.
fn add_component<R: Rng + ?Sized>(g: &mut MolecularGraph, atoms: usize, rng: &mut R) {
    let first = g.atom_count();
    if rng.gen_bool(0.35) {
        add_aromatic_ring(g, rng);
    } else {
        g.add_atom(random_atom(rng));
    }
    while g.atom_count() - first < atoms {
        let anchors: Vec<usize> = (first..g.atom_count()).filter(|&v| g.degree(v) < 4).collect();
        let Some(&anchor) = anchors.choose(rng) else { break };
        if rng.gen_bool(0.06) {
            let ring = add_aromatic_ring(g, rng);
            g.add_bond(anchor, ring[0], BondOrder::Single, None);
            continue;
        }
        let v = g.add_atom(random_atom(rng));
        let order = match rng.gen_range(0..20) {
            0..=1 => BondOrder::Double,
            2 => BondOrder::Triple,
            _ => BondOrder::Single,
        };
        let stereo = (order == BondOrder::Single && rng.gen_bool(0.05))
            .then(|| if rng.gen() { BondStereo::Up } else { BondStereo::Down });
        g.add_bond(anchor, v, order, stereo);
    }
    // extra ring closures between non-adjacent atoms
    let n = g.atom_count() - first;
    if n >= 3 {
        for _ in 0..rng.gen_range(0..=2) {
            let a = rng.gen_range(first..g.atom_count());
            let b = rng.gen_range(first..g.atom_count());
            if g.degree(a) < 4 && g.degree(b) < 4 {
                let order = if rng.gen_bool(0.1) { BondOrder::Double } else { BondOrder::Single };
                g.add_bond(a, b, order, None);
            }
        }
    }
}

/// A random molecular graph with up to `max_atoms` atoms in the main
/// component and an occasional small counter-ion.
pub fn random_graph<R: Rng + ?Sized>(max_atoms: usize, rng: &mut R) -> MolecularGraph {
    let mut g = MolecularGraph::new();
    add_component(&mut g, rng.gen_range(1..=max_atoms.max(1)), rng);
    if rng.gen_bool(0.05) {
        add_component(&mut g, rng.gen_range(1..=3), rng);
    }
    g
}

/// A random molecule written as SMILES.
pub fn random_smiles<R: Rng + ?Sized>(max_atoms: usize, rng: &mut R) -> String {
    let g = random_graph(max_atoms, rng);
    write_smiles(&g, 0, rng).expect("generated graphs have fewer than 100 open rings")
}

/// Ring scaffolds with numbered substituent slots `{0}`, `{1}`.
const SCAFFOLDS: &[&str] = &[
    "c1ccc({0})cc1{1}",
    "c1cc({0})ccc1{1}",
    "c1ccncc1{0}",
    "C1CCN(CC1){0}",
    "c1ccc2c(c1)cc({0})[nH]2",
    "O=C(N{0})c1ccccc1{1}",
    "C1CC({0})CCO1",
    "c1cc({0})sc1",
    "{0}CC(=O)N{1}",
    "c1ccc(cc1)C(=O){0}",
    "C(C{0})N{1}",
    "c1nc({0})ncc1{1}",
    "O=C1CCC({0})N1",
    "c1ccc(o1){0}",
];

/// Substituents; ring label 9 never clashes with a scaffold.
const SUBSTITUENTS: &[&str] = &[
    "", "C", "CC", "O", "OC", "N", "F", "Cl", "C(=O)O", "C(=O)N", "C#N", "CC(C)C", "S(=O)(=O)N", "c9ccccc9",
    "N(C)C", "CO", "C(F)(F)F", "Br",
];

/// A drug-like molecule: a scaffold with random substituents.
pub fn random_druglike<R: Rng + ?Sized>(rng: &mut R) -> String {
    let mut s = SCAFFOLDS.choose(rng).expect("non-empty").to_string();
    for slot in 0..2 {
        let sub = SUBSTITUENTS.choose(rng).expect("non-empty");
        let key = format!("{{{slot}}}");
        if sub.is_empty() {
            s = s.replace(&format!("({key})"), "").replace(&key, "");
        } else {
            s = s.replace(&key, sub);
        }
    }
    s
}
