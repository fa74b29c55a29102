use thiserror::Error;

/// What went wrong while reading a SMILES string.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("empty SMILES string")]
    Empty,
    #[error("non-ASCII character")]
    NonAscii,
    #[error("unexpected character '{0}'")]
    UnexpectedChar(char),
    #[error("unknown or unsupported element '{0}'")]
    UnknownElement(String),
    #[error("unmatched '['")]
    UnmatchedBracket,
    #[error("malformed bracket atom")]
    MalformedBracket,
    #[error("unmatched parenthesis")]
    UnmatchedParen,
    #[error("ring bond {0} is never closed")]
    UnclosedRing(u32),
    #[error("ring bond {0} closes onto its own atom or duplicates an existing bond")]
    InvalidRingClosure(u32),
    #[error("conflicting bond symbols on ring closure {0}")]
    ConflictingRingBond(u32),
    #[error("bond symbol without a following atom")]
    DanglingBond,
    #[error("unsupported bond symbol '{0}'")]
    UnsupportedBond(char),
    #[error("aromatic atom outside of a ring")]
    AromaticOutsideRing,
    #[error("cannot kekulize aromatic system")]
    Kekulization,
    #[error("valence {valence} is not allowed for {element}")]
    Valence { element: String, valence: u8 },
}

/// A SMILES parse failure with the byte offset it was detected at.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at position {position}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub position: usize,
}

impl ParseError {
    pub(crate) fn new(kind: ParseErrorKind, position: usize) -> Self {
        ParseError { kind, position }
    }
}
