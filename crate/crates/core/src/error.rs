use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),

    #[error("layer `{0}` has zero filters")]
    EmptyLayer(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },

    #[error("truncated {what}: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("dump does not match manifest: {0}")]
    DumpMismatch(String),

    #[error("missing dump for iteration {0}")]
    MissingDump(u64),

    #[error("dump iterations are not strictly increasing at {0}")]
    NonMonotonic(u64),

    #[error("at least {needed} weight dumps are required, found {found}")]
    TooFewDumps { needed: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown measure `{0}`")]
    UnknownMeasure(String),

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("unknown cluster {0}")]
    UnknownCluster(usize),

    #[error("unknown iteration {0}")]
    UnknownIteration(u64),

    #[error("iteration {0} is the first dump and has no predecessor")]
    NoPredecessor(u64),

    #[error("no correlation cell for layer `{layer}` and class {class}")]
    UnknownCell { layer: String, class: u32 },

    #[error("store is not sealed: {0}")]
    NotSealed(PathBuf),

    #[error("store checksum mismatch: expected {expected}, computed {computed}")]
    ChecksumMismatch { expected: String, computed: String },

    #[error("corrupt store segment `{segment}`: {reason}")]
    CorruptSegment { segment: String, reason: String },

    #[error("raw weight dumps were dropped at ingest")]
    RawDropped,

    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    /// True for lookups of ids that do not exist in the run.
    pub fn is_not_found(&self) -> bool {
        matches!(
            self,
            Error::UnknownNode(_)
                | Error::UnknownLayer(_)
                | Error::UnknownClass(_)
                | Error::UnknownCluster(_)
                | Error::UnknownIteration(_)
                | Error::UnknownCell { .. }
        )
    }
}
