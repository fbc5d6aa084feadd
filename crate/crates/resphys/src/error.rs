use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("beam size {size} m on axis {axis} is not an integer multiple of voxel edge {voxel_edge} m")]
    NonDivisibleSize {
        axis: char,
        size: f64,
        voxel_edge: f64,
    },

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("Newton did not converge after {iters} iterations (relative residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("factorization hit a near-zero pivot at index {index}")]
    SingularSystem { index: usize },

    #[error("step {step} of rollout failed: {source}")]
    RolloutStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("static solve did not converge within {iters} iterations")]
    StaticSolveDiverged { iters: usize },

    #[error("surface face {face} is degenerate (zero area)")]
    DegenerateFace { face: usize },

    #[error("marker {marker} is {distance:.4e} m from the surface (limit {limit:.4e} m)")]
    MarkerTooFar {
        marker: usize,
        distance: f64,
        limit: f64,
    },

    #[error("point set is degenerate (fewer than 3 non-collinear points)")]
    DegeneratePointSet,

    #[error("residual fit diverged persistently at timestep {step}")]
    FitDiverged { step: usize },

    #[error("trajectory {id} failed: {source}")]
    TrajectoryFailed {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("all parameter evaluations were infinite")]
    NoFiniteEvaluation,

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
