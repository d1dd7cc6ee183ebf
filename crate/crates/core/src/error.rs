use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}: line {line}: {message}")]
    Row {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("individual {0} is infected but has no possible infector and is not flagged as imported")]
    EmptyInfectiousSet(u64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("linear relative risk undefined: 1 + eta = {0} is not positive")]
    Domain(f64),

    #[error("empty risk set at infectiousness age {0}")]
    EmptyRiskSet(f64),

    #[error("no event rows to fit")]
    NoEvents,

    #[error("singular information matrix (condition estimate {0:.3e})")]
    Singular(f64),

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    #[error("partial likelihood failed to increase after {0} step halvings")]
    StepHalving(usize),

    #[error("{count} possible transmission trees exceed the enumeration limit {limit}")]
    TreeLimit { count: u128, limit: u128 },

    #[error("cannot smooth an empty cumulative hazard")]
    EmptyCumHaz,

    #[error("exposure diagnostic undefined: no pairs at risk")]
    NoPairsAtRisk,

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical optimizer rather than of the input.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::NoConvergence(_) | Error::StepHalving(_)
        )
    }

    pub(crate) fn row(source_name: &str, line: u64, message: impl Into<String>) -> Self {
        Error::Row {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }
}
