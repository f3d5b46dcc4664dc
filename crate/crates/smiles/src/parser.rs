use std::collections::HashMap;

use crate::error::{ParseError, ParseErrorKind};
use crate::graph::{Atom, BondOrder, BondStereo, MolecularGraph};

const ELEMENTS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K",
    "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
    "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",
    "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr",
    "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf",
    "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

const AROMATIC_BRACKET: &[&str] = &["se", "as", "te", "b", "c", "n", "o", "p", "s"];

fn is_element(sym: &str) -> bool {
    ELEMENTS.contains(&sym)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Order(BondOrder),
    Stereo(BondStereo),
}

impl BondSymbol {
    fn from_byte(c: u8) -> Option<Self> {
        Some(match c {
            b'-' => BondSymbol::Order(BondOrder::Single),
            b'=' => BondSymbol::Order(BondOrder::Double),
            b'#' => BondSymbol::Order(BondOrder::Triple),
            b':' => BondSymbol::Order(BondOrder::Aromatic),
            b'/' => BondSymbol::Stereo(BondStereo::Up),
            b'\\' => BondSymbol::Stereo(BondStereo::Down),
            _ => return None,
        })
    }
}

struct OpenRing {
    atom: usize,
    bond: Option<BondSymbol>,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    graph: MolecularGraph,
    prev: Option<usize>,
    branches: Vec<usize>,
    pending: Option<(BondSymbol, usize)>,
    rings: HashMap<u32, OpenRing>,
    ring_offsets: HashMap<u32, usize>,
}

/// Parses a SMILES string into a molecular graph.
///
/// Supports the organic subset, bracket atoms with isotope, chirality,
/// hydrogen count, charge and atom class, all bond symbols, ring closures
/// (`1`-`9` and `%nn`), branches and dot-separated components. `/` and `\`
/// are kept as single bonds with a direction annotation.
pub fn parse_smiles(s: &str) -> Result<MolecularGraph, ParseError> {
    if s.is_empty() {
        return Err(ParseError {
            offset: 0,
            kind: ParseErrorKind::Empty,
        });
    }
    let mut p = Parser {
        src: s.as_bytes(),
        pos: 0,
        graph: MolecularGraph::new(),
        prev: None,
        branches: Vec::new(),
        pending: None,
        rings: HashMap::new(),
        ring_offsets: HashMap::new(),
    };
    p.run()?;
    Ok(p.graph)
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
        Err(ParseError { offset, kind })
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), ParseError> {
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    if self.prev.is_none() {
                        return self.err(at, ParseErrorKind::MissingAtom("branch"));
                    }
                    if self.pending.is_some() {
                        return self.err(at, ParseErrorKind::DanglingBond);
                    }
                    self.branches.push(self.prev.unwrap());
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return self.err(at, ParseErrorKind::DanglingBond);
                    }
                    match self.branches.pop() {
                        Some(a) => self.prev = Some(a),
                        None => return self.err(at, ParseErrorKind::UnbalancedParens),
                    }
                    self.pos += 1;
                }
                b'.' => {
                    if self.prev.is_none() {
                        return self.err(at, ParseErrorKind::MissingAtom("dot"));
                    }
                    if self.pending.is_some() {
                        return self.err(at, ParseErrorKind::DanglingBond);
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure((c - b'0') as u32, at)?;
                }
                b'%' => {
                    let digits = self.src.get(at + 1..at + 3);
                    match digits {
                        Some(d) if d.iter().all(u8::is_ascii_digit) => {
                            let n = ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32;
                            self.pos += 3;
                            self.ring_closure(n, at)?;
                        }
                        _ => return self.err(at, ParseErrorKind::UnexpectedChar('%')),
                    }
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.attach(atom)?;
                }
                _ => {
                    if let Some(sym) = BondSymbol::from_byte(c) {
                        if self.pending.is_some() {
                            return self.err(at, ParseErrorKind::UnexpectedChar(c as char));
                        }
                        self.pending = Some((sym, at));
                        self.pos += 1;
                    } else {
                        let atom = self.organic_atom()?;
                        self.attach(atom)?;
                    }
                }
            }
        }
        if let Some((_, at)) = self.pending {
            return self.err(at, ParseErrorKind::DanglingBond);
        }
        if !self.branches.is_empty() {
            return self.err(self.src.len(), ParseErrorKind::UnbalancedParens);
        }
        if let Some((&n, _)) = self.rings.iter().min_by_key(|(n, _)| **n) {
            let at = self.ring_offsets[&n];
            return self.err(at, ParseErrorKind::UnmatchedRing(n));
        }
        if self.prev.is_none() {
            // trailing dot
            return self.err(self.src.len(), ParseErrorKind::MissingAtom("dot"));
        }
        Ok(())
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.graph.atoms[a].aromatic && self.graph.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn resolve(&self, sym: Option<BondSymbol>, a: usize, b: usize) -> (BondOrder, Option<BondStereo>) {
        match sym {
            None => (self.implicit_order(a, b), None),
            Some(BondSymbol::Order(o)) => (o, None),
            Some(BondSymbol::Stereo(s)) => (BondOrder::Single, Some(s)),
        }
    }

    fn attach(&mut self, atom: Atom) -> Result<(), ParseError> {
        let idx = self.graph.add_atom(atom);
        let pending = self.pending.take();
        match self.prev {
            Some(prev) => {
                let (order, stereo) = self.resolve(pending.map(|p| p.0), prev, idx);
                self.graph.add_bond(prev, idx, order, stereo);
            }
            None => {
                if let Some((_, off)) = pending {
                    return self.err(off, ParseErrorKind::DanglingBond);
                }
            }
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self, n: u32, at: usize) -> Result<(), ParseError> {
        let Some(cur) = self.prev else {
            return self.err(at, ParseErrorKind::MissingAtom("ring closure"));
        };
        let sym = self.pending.take().map(|p| p.0);
        match self.rings.remove(&n) {
            Some(open) => {
                self.ring_offsets.remove(&n);
                let sym = match (open.bond, sym) {
                    (Some(x), Some(y)) if x != y => {
                        // `/` at one end and `\` at the other denote the same direction
                        let same_dir = matches!(
                            (x, y),
                            (BondSymbol::Stereo(s), BondSymbol::Stereo(t)) if s == t.flipped()
                        );
                        if !same_dir {
                            return self.err(at, ParseErrorKind::RingBondConflict(n));
                        }
                        Some(x)
                    }
                    (Some(x), _) => Some(x),
                    // written from the closing atom; store relative to opener
                    (None, Some(BondSymbol::Stereo(t))) => Some(BondSymbol::Stereo(t.flipped())),
                    (None, y) => y,
                };
                let (order, stereo) = self.resolve(sym, open.atom, cur);
                if open.atom == cur {
                    return self.err(at, ParseErrorKind::SelfBond);
                }
                if self.graph.add_bond(open.atom, cur, order, stereo).is_none() {
                    return self.err(at, ParseErrorKind::DuplicateBond(open.atom, cur));
                }
            }
            None => {
                self.rings.insert(n, OpenRing { atom: cur, bond: sym });
                self.ring_offsets.insert(n, at);
            }
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, ParseError> {
        let at = self.pos;
        let c = self.src[at];
        let next = self.src.get(at + 1).copied();
        let (sym, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", false, 2),
            (b'B', Some(b'r')) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'*', _) => ("*", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => return self.err(at, ParseErrorKind::UnexpectedChar(c as char)),
        };
        self.pos += len;
        Ok(Atom::organic(sym, aromatic))
    }

    fn digits(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.src[start..self.pos]).ok()?.parse().ok()
    }

    fn bracket_atom(&mut self) -> Result<Atom, ParseError> {
        let open = self.pos;
        let Some(close) = self.src[open..].iter().position(|&c| c == b']').map(|i| open + i) else {
            return self.err(open, ParseErrorKind::UnterminatedBracket);
        };
        if close == open + 1 {
            return self.err(open, ParseErrorKind::EmptyBracket);
        }
        self.pos = open + 1;
        let bad = |p: &Self, what| p.err(p.pos, ParseErrorKind::BadBracket(what));

        let isotope = match self.digits() {
            Some(v) if v <= u16::MAX as u32 => Some(v as u16),
            Some(_) => return bad(self, "isotope too large"),
            None => None,
        };

        // element symbol
        let rest = &self.src[self.pos..close];
        let text = std::str::from_utf8(rest).unwrap_or("");
        let (element, aromatic, len) = if text.starts_with('*') {
            ("*".to_string(), false, 1)
        } else if let Some(a) = AROMATIC_BRACKET.iter().find(|a| text.starts_with(**a)) {
            let mut e = a.to_string();
            e[..1].make_ascii_uppercase();
            (e, true, a.len())
        } else {
            let bytes = text.as_bytes();
            if bytes.first().is_none_or(|c| !c.is_ascii_uppercase()) {
                return self.err(self.pos, ParseErrorKind::BadBracket("missing element symbol"));
            }
            let two = text.get(..2).filter(|t| t.as_bytes()[1].is_ascii_lowercase());
            match two {
                Some(t) if is_element(t) => (t.to_string(), false, 2),
                _ => {
                    if let Some(t) = two {
                        return self.err(self.pos, ParseErrorKind::UnknownElement(t.to_string()));
                    }
                    let one = &text[..1];
                    if !is_element(one) {
                        return self.err(self.pos, ParseErrorKind::UnknownElement(one.to_string()));
                    }
                    (one.to_string(), false, 1)
                }
            }
        };
        self.pos += len;

        let chirality = if self.peek() == Some(b'@') {
            let start = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'@') {
                self.pos += 1;
            } else if let Some(cls) = self.src.get(self.pos..self.pos + 2) {
                if [&b"TH"[..], b"AL", b"SP", b"TB", b"OH"].contains(&cls) {
                    self.pos += 2;
                    if self.digits().is_none() {
                        return bad(self, "chirality class without number");
                    }
                }
            }
            Some(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
        } else {
            None
        };

        let hydrogens = if self.peek() == Some(b'H') {
            self.pos += 1;
            match self.digits() {
                Some(v) if v <= 9 => Some(v as u8),
                Some(_) => return bad(self, "hydrogen count too large"),
                None => Some(1),
            }
        } else {
            None
        };

        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(v) = self.digits() {
                charge = unit * v as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
            if !(-15..=15).contains(&charge) {
                return bad(self, "charge out of range");
            }
        }

        let class = if self.peek() == Some(b':') {
            self.pos += 1;
            match self.digits() {
                Some(v) => Some(v),
                None => return bad(self, "atom class without number"),
            }
        } else {
            None
        };

        if self.pos != close {
            let c = self.src[self.pos] as char;
            return self.err(self.pos, ParseErrorKind::UnexpectedChar(c));
        }
        self.pos = close + 1;
        Ok(Atom {
            element,
            aromatic,
            charge: charge as i8,
            hydrogens,
            isotope,
            chirality,
            class,
            bracket: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &str) -> ParseErrorKind {
        parse_smiles(s).unwrap_err().kind
    }

    #[test]
    fn linear_chain() {
        let g = parse_smiles("CCO").unwrap();
        let elems: Vec<_> = g.atoms.iter().map(|a| a.element.as_str()).collect();
        assert_eq!(elems, ["C", "C", "O"]);
        assert_eq!(g.bond_count(), 2);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn benzene_ring_closure() {
        let g = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert!(g.atoms.iter().all(|a| a.aromatic && a.element == "C"));
        assert_eq!(g.bond_count(), 6);
        assert!((0..6).all(|i| g.degree(i) == 2));
        assert!(g.bond_between(0, 5).is_some());
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
    }

    #[test]
    fn branches() {
        let g = parse_smiles("C(Cl)(Cl)Cl").unwrap();
        assert_eq!(g.atom_count(), 4);
        assert_eq!(g.degree(0), 3);
        assert!((1..4).all(|i| g.atoms[i].element == "Cl" && g.bond_between(0, i).is_some()));
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[13CH3:7][NH4+].[O-2]C[C@@H](F)[nH]").unwrap();
        let c = &g.atoms[0];
        assert_eq!((c.isotope, c.hydrogens, c.class), (Some(13), Some(3), Some(7)));
        let n = &g.atoms[1];
        assert_eq!((n.element.as_str(), n.charge, n.hydrogens), ("N", 1, Some(4)));
        assert_eq!(g.atoms[2].charge, -2);
        assert_eq!(g.atoms[4].chirality.as_deref(), Some("@@"));
        assert!(g.atoms[6].aromatic);
        assert_eq!(g.components().len(), 2);
        let g = parse_smiles("[Fe++].[Cl-].[Sc][se]").unwrap();
        assert_eq!(g.atoms[0].charge, 2);
        assert_eq!(g.atoms[2].element, "Sc");
        assert_eq!(g.atoms[3].element, "Se");
        assert!(g.atoms[3].aromatic);
    }

    #[test]
    fn bond_symbols_and_percent_rings() {
        let g = parse_smiles("C=C#N").unwrap();
        assert_eq!(g.bonds[0].order, BondOrder::Double);
        assert_eq!(g.bonds[1].order, BondOrder::Triple);
        let g = parse_smiles("C%12CC%12").unwrap();
        assert!(g.bond_between(0, 2).is_some());
        let g = parse_smiles("F/C=C\\F").unwrap();
        assert_eq!(g.bonds[0].stereo, Some(BondStereo::Up));
        assert_eq!(g.bonds[2].stereo, Some(BondStereo::Down));
        let g = parse_smiles("C=1CC1").unwrap();
        assert_eq!(g.bonds[g.bond_between(0, 2).unwrap()].order, BondOrder::Double);
        let g = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        assert_eq!(g.bonds[g.bond_between(5, 6).unwrap()].order, BondOrder::Single);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(parse_smiles("CC(C").unwrap_err().offset, 4);
        assert_eq!(kinds("CC(C"), ParseErrorKind::UnbalancedParens);
        assert_eq!(kinds("CC)C"), ParseErrorKind::UnbalancedParens);
        let e = parse_smiles("C1CC").unwrap_err();
        assert_eq!((e.offset, e.kind), (1, ParseErrorKind::UnmatchedRing(1)));
        let e = parse_smiles("CCX").unwrap_err();
        assert_eq!((e.offset, e.kind), (2, ParseErrorKind::UnexpectedChar('X')));
        assert_eq!(kinds("C[]C"), ParseErrorKind::EmptyBracket);
        assert_eq!(kinds("C[NH"), ParseErrorKind::UnterminatedBracket);
        assert_eq!(kinds("[Xx]"), ParseErrorKind::UnknownElement("Xx".into()));
        assert_eq!(kinds("C11"), ParseErrorKind::SelfBond);
        assert!(matches!(kinds("C12CC12"), ParseErrorKind::DuplicateBond(0, 2)));
        assert_eq!(kinds("C=1CC#1"), ParseErrorKind::RingBondConflict(1));
        assert_eq!(kinds("CC="), ParseErrorKind::DanglingBond);
        assert_eq!(kinds(""), ParseErrorKind::Empty);
        assert_eq!(kinds("C."), ParseErrorKind::MissingAtom("dot"));
        assert_eq!(kinds("(C)"), ParseErrorKind::MissingAtom("branch"));
    }
}
