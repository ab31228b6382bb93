use std::fmt;

use thiserror::Error;

/// Stage of the synthesis pipeline an error was raised in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Validation,
    Graph,
    Observability,
    Factorization,
    Decomposition,
    Perron,
    Epsilon,
    Gamma,
    Injection,
    Lyapunov,
    Assembly,
    Certification,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::Validation => "validation",
            Step::Graph => "graph",
            Step::Observability => "observability",
            Step::Factorization => "factorization",
            Step::Decomposition => "decomposition",
            Step::Perron => "perron",
            Step::Epsilon => "epsilon",
            Step::Gamma => "gamma",
            Step::Injection => "injection",
            Step::Lyapunov => "lyapunov",
            Step::Assembly => "assembly",
            Step::Certification => "certification",
        }
    }

    /// Index in the eight-step constructive procedure, when the stage is one of them.
    pub fn procedure_index(self) -> Option<usize> {
        match self {
            Step::Factorization => Some(1),
            Step::Decomposition => Some(2),
            Step::Perron => Some(3),
            Step::Epsilon => Some(4),
            Step::Gamma => Some(5),
            Step::Injection => Some(6),
            Step::Lyapunov => Some(7),
            Step::Assembly => Some(8),
            _ => None,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.procedure_index() {
            Some(k) => write!(f, "{} (step {k})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is not strongly connected")]
    NotStronglyConnected,

    #[error("Laplacian left null space has dimension {0}, expected 1")]
    PerronNullity(usize),

    #[error("Perron vector has a non-positive entry ({0:e})")]
    PerronNotPositive(f64),

    #[error("node has no effective output")]
    ZeroOutput,

    #[error("output factor is rank deficient (rank {rank} < {rows} rows)")]
    RankDeficient { rank: usize, rows: usize },

    #[error("unstable coefficient matrix (spectral abscissa {0:e})")]
    Unstable(f64),

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("(C, A) is not observable: observable subspace has dimension {rank} < {n}")]
    PlantUnobservable { rank: usize, n: usize },

    #[error("joint observability violated or graph not strongly connected (lambda_min = {0:e})")]
    CouplingNotPositive(f64),

    #[error("pair is not observable: observable subspace has dimension {rank} < {n}")]
    PairUnobservable { rank: usize, n: usize },

    #[error("injection gain placement failed: best spectral abscissa {abscissa:e} not below {target:e}")]
    PlacementFailed { abscissa: f64, target: f64 },

    #[error("gamma too small for positive definite Lyapunov forcing (gamma·g = {gamma:e}, 2·alpha = {two_alpha:e})")]
    GammaTooSmall { gamma: f64, two_alpha: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("certificate failed: {name} ({detail})")]
    Certificate { name: &'static str, detail: String },

    #[error("non-finite state at t = {0}")]
    NonFinite(f64),

    #[error("{found} samples above the error floor in the fit window, need at least {needed}")]
    InsufficientSamples { found: usize, needed: usize },

    #[error("{step}: {source}")]
    Synthesis {
        step: Step,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(self, step: Step) -> Error {
        match self {
            e @ Error::Synthesis { .. } => e,
            e => Error::Synthesis {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Pipeline stage that produced this error, if any.
    pub fn step(&self) -> Option<Step> {
        match self {
            Error::Synthesis { step, .. } => Some(*step),
            _ => None,
        }
    }

    /// Innermost error, with the step wrapper removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Synthesis { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StepExt<T> {
    fn at(self, step: Step) -> Result<T>;
}

impl<T> StepExt<T> for Result<T> {
    fn at(self, step: Step) -> Result<T> {
        self.map_err(|e| e.at(step))
    }
}
