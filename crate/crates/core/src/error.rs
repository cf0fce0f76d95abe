use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("degree must satisfy 3 <= d <= 64, got {0}")]
    DegreeOutOfRange(u32),
    #[error("child index {index} out of range for d = {d}")]
    ChildIndex { index: u8, d: u32 },
    #[error("malformed vertex address {0:?}")]
    Parse(String),
    #[error("non-canonical vertex address {0:?}: a ray vertex's child 0 is the next ray vertex")]
    NonCanonical(String),
    #[error("region is infinite and cannot be enumerated")]
    InfiniteRegion,
    #[error("{vertex} is not in the subtree rooted at {root}")]
    NotInSubtree { root: String, vertex: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("probability must lie in [0, 1], got {0}")]
    Probability(f64),
    #[error("initial vertex {0} is frozen by the boundary condition")]
    FrozenInitialVertex(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    /// No transition is possible from the current state.
    #[error("absorbing state: no transition possible")]
    Deadlock,
    #[error("infection rate must be >= 1, got {0}")]
    Lambda(f64),
    #[error("stop condition needs a finite t_max or max_events")]
    UnboundedStop,
    #[error("trajectory involves frozen vertex {0}; the size walk is only defined without boundary")]
    InvalidForBoundary(String),
    #[error("trajectory was recorded without its event log")]
    MissingEvents,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphicalError {
    #[error("lambda {lambda} exceeds the window's lambda_max {lambda_max}")]
    LambdaExceedsWindow { lambda: f64, lambda_max: f64 },
    #[error("time {t} outside the window horizon {horizon}")]
    TimeOutsideWindow { t: f64, horizon: f64 },
    #[error("vertex {0} is not in the window")]
    NotInWindow(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("degree must be at least 3, got {0}")]
    DegreeTooSmall(u32),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonteCarloError {
    #[error("every one of the {0} replicas hit the event cap; no estimate possible")]
    AllTruncated(usize),
    #[error("radius {radius} too small: statistic moved by {shift:.3e} when doubling (stderr {stderr:.3e})")]
    RadiusTooSmall { radius: u32, shift: f64, stderr: f64 },
    #[error("invalid experiment parameters: {0}")]
    InvalidParameters(String),
    #[error("worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Graphical(#[from] GraphicalError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}
