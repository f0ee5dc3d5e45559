use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("newick syntax error at byte {position}: {message}")]
    NewickSyntax { position: usize, message: String },
    #[error("duplicate tip label `{0}`")]
    DuplicateTip(String),
    #[error("node with {0} children; only binary trees are supported")]
    NotBinary(usize),
    #[error("negative branch length {length} on `{node}`")]
    NegativeBranchLength { node: String, length: f64 },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("node times missing")]
    MissingNodeTimes,

    #[error("alignment parse error on line {line}: {message}")]
    AlignmentParse { line: usize, message: String },
    #[error("ragged alignment: `{taxon}` has {found} columns, expected {expected}")]
    RaggedAlignment { taxon: String, expected: usize, found: usize },
    #[error("unknown character `{character}` in `{taxon}` at column {column}")]
    UnknownCharacter { taxon: String, column: usize, character: char },
    #[error("duplicate taxon `{0}`")]
    DuplicateTaxon(String),
    #[error("taxon binding failed: {0}")]
    Binding(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("site likelihood underflowed to zero at pattern {pattern}")]
    ZeroLikelihood { pattern: usize },
    #[error("pre-order pass requested on a stale post-order cache")]
    StaleCache,
    #[error("line search failed: {0}")]
    LineSearch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
