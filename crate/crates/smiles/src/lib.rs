//! SMILES handling for the sequence branch of the model.
//!
//! [`parse_smiles`] reads a SMILES string into a [`MolecularGraph`];
//! [`write_smiles`] and [`randomize_smiles`] serialize a graph back out by a
//! depth-first walk with shuffled neighbour order, which is how one molecule
//! yields many equally valid strings. [`tokenize`] lexes strings into the
//! units the language model sees and [`Vocabulary`] maps them to ids.

mod canonical;
mod error;
mod graph;
mod parser;
pub mod synth;
mod tokenize;
mod vocab;
mod writer;

pub use canonical::canonical_form;
pub use error::{ParseError, ParseErrorKind, SmilesError};
pub use graph::{Atom, Bond, BondOrder, BondStereo, MolecularGraph};
pub use parser::parse_smiles;
pub use tokenize::tokenize;
pub use vocab::{encode_pair, TokenSequence, Vocabulary, MASK, PAD, RESERVED, SEP, UNK};
pub use writer::{randomize_smiles, write_smiles};
