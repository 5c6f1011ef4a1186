use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate point set: covariance rank {rank} < 2")]
    RankDeficient { rank: usize },

    #[error("no valid pairs: {0}")]
    NoValidPairs(String),

    #[error("empty target set")]
    EmptyTarget,

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("empty input")]
    EmptyInput,

    #[error("need at least {needed} views, got {got}")]
    TooFewViews { needed: usize, got: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid too small: {height}x{width} (need at least 2x2)")]
    ShapeTooSmall { height: usize, width: usize },

    #[error("evaluation point is non-smooth: {0}")]
    NonSmoothPoint(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("camera head produced a degenerate rotation: {0}")]
    HeadDegenerate(String),

    #[error("view {0} sees no surface")]
    NoIntersection(usize),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported container version {0}")]
    BadVersion(u32),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("bounds violation: {0}")]
    BoundsViolation(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 input error, 3 degenerate computation.
    ///
    /// Property-check failures (exit 4) are not errors; commands signal them directly.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateInput(_)
            | Error::RankDeficient { .. }
            | Error::NoValidPairs(_)
            | Error::NonSmoothPoint(_)
            | Error::HeadDegenerate(_)
            | Error::NoIntersection(_) => 3,
            _ => 2,
        }
    }
}
