#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

/// Directional marker of a `/` or `\` bond, relative to `a -> b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondStereo {
    Up,
    Down,
}

impl BondStereo {
    pub fn flipped(self) -> Self {
        match self {
            BondStereo::Up => BondStereo::Down,
            BondStereo::Down => BondStereo::Up,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            BondStereo::Up => '/',
            BondStereo::Down => '\\',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    /// Element symbol with standard capitalization, or `*`.
    pub element: String,
    pub aromatic: bool,
    pub charge: i8,
    /// Explicit hydrogen count; only bracket atoms carry one.
    pub hydrogens: Option<u8>,
    pub isotope: Option<u16>,
    /// Chirality tag as written (`@`, `@@`, `@TH1`, ...), without geometry.
    pub chirality: Option<String>,
    pub class: Option<u32>,
    pub bracket: bool,
}

impl Atom {
    pub fn organic(element: &str, aromatic: bool) -> Self {
        Atom {
            element: element.to_string(),
            aromatic,
            charge: 0,
            hydrogens: None,
            isotope: None,
            chirality: None,
            class: None,
            bracket: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub stereo: Option<BondStereo>,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// Atoms and bonds of one SMILES string; may hold several disconnected
/// components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolecularGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    /// Adds a bond; returns `None` for a self bond or a duplicate.
    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, stereo: Option<BondStereo>) -> Option<usize> {
        if a == b || self.bond_between(a, b).is_some() {
            return None;
        }
        let idx = self.bonds.len();
        self.bonds.push(Bond { a, b, order, stereo });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
        Some(idx)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// `(neighbour, bond index)` pairs of an atom.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency.get(a)?.iter().find(|(n, _)| *n == b).map(|&(_, i)| i)
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut i = 0;
            while i < comp.len() {
                for &(u, _) in &self.adjacency[comp[i]] {
                    if !seen[u] {
                        seen[u] = true;
                        comp.push(u);
                    }
                }
                i += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}
