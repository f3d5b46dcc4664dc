use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("empty input")]
    Empty,
    #[error("unexpected character {0:?}")]
    UnexpectedChar(char),
    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),
    #[error("empty bracket atom")]
    EmptyBracket,
    #[error("unterminated bracket atom")]
    UnterminatedBracket,
    #[error("unbalanced parentheses")]
    UnbalancedParens,
    #[error("unmatched ring closure {0}")]
    UnmatchedRing(u32),
    #[error("ring closure bonds an atom to itself")]
    SelfBond,
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("conflicting bond symbols on ring closure {0}")]
    RingBondConflict(u32),
    #[error("bond symbol without an atom on both sides")]
    DanglingBond,
    #[error("{0} with no preceding atom")]
    MissingAtom(&'static str),
    #[error("malformed bracket atom: {0}")]
    BadBracket(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error)]
pub enum SmilesError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("atom index {index} out of range for {atoms} atoms")]
    AtomOutOfRange { index: usize, atoms: usize },
    #[error("more than 99 ring closures open at once")]
    TooManyRings,
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
