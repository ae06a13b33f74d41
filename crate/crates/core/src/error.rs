use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("rotation angle is too close to pi for a unique logarithm")]
    AngleAtPi,
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("query touches unobserved voxels")]
    Unobserved,
    #[error("scene contains no primitives")]
    EmptyScene,
    #[error("invalid map parameters: {0}")]
    InvalidParameters(String),
    #[error("malformed map file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("problem is degenerate: {0}")]
    DegenerateProblem(String),
    #[error("solver did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("normal equations are singular even after damping escalation")]
    SingularSystem,
    #[error("no keyframe is fixed and no SDF factor anchors the map frame")]
    GaugeUnfixed,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("keyframe {keyframe} sees only {visible} features")]
    NoVisibleFeatures { keyframe: usize, visible: usize },
    #[error("triangulation is degenerate: {0}")]
    TriangulationDegenerate(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("malformed scene description at line {line}: {message}")]
    SceneFormat { line: usize, message: String },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fewer than two associated timestamps")]
    AssociationFailure,
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
