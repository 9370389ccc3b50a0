use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("block partition needs at least one block of length at least one (got Q={num_blocks}, P={block_len})")]
    InvalidPartition { num_blocks: usize, block_len: usize },

    /// Block indices are reported 1-based.
    #[error("block {index} is out of range 1..={num_blocks}")]
    BlockOutOfRange { index: usize, num_blocks: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("threshold must be nonnegative, got {0}")]
    NegativeThreshold(f64),

    #[error("Lipschitz constant must be positive, got {0}")]
    NonPositiveLipschitz(f64),

    #[error("power iteration did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("column {column} has norm {norm}, expected unit-norm columns")]
    NotNormalized { column: usize, norm: f64 },

    #[error("mutual coherence requires a_i^H b_i = 1; column {column} gives {value}")]
    NormalizationViolated { column: usize, value: f64 },

    #[error("operation requires at least {required} blocks, dictionary has {found}")]
    TooFewBlocks { required: usize, found: usize },

    #[error("layer set is empty")]
    EmptyLayerSet,

    #[error("layer {layer} out of range for a {layers}-layer network")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("network parameters are inconsistent: {0}")]
    InvalidNetwork(String),

    #[error("ground truth is identically zero; NMSE is undefined")]
    ZeroGroundTruth,

    #[error("sparsity {s} exceeds the number of blocks {num_blocks}")]
    SparsityExceedsBlocks { s: usize, num_blocks: usize },

    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("contraction factor {0} is not below 1")]
    NotContractive(f64),

    #[error("recovery condition violated (margin {margin})")]
    ConditionViolated { margin: f64 },

    #[error("two scatterers assigned to velocity block {block}, range cell {cell}")]
    DuplicateScatterer { block: usize, cell: usize },

    #[error("invalid radar scene: {0}")]
    InvalidScene(String),

    #[error("invalid radar configuration: {0}")]
    InvalidRadarConfig(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
