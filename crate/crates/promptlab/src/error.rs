use thiserror::Error;

/// Every failure the library can report. Assumption failures are kept apart
/// from configuration failures so the command line can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("sequence of {got} tokens does not fit width {width}")]
    LengthOverflow { got: usize, width: usize },
    #[error("document did not reach EOS within {0} tokens")]
    NonTermination(usize),
    #[error("enumeration of {count:.3e} items exceeds guard {guard:.0e}")]
    Explosion { count: f64, guard: f64 },
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("all task likelihoods vanish; posterior undefined")]
    ZeroEvidence,
    #[error("ambiguity equals 1 for {0}; coefficient undefined")]
    DegenerateAmbiguity(String),
    #[error("distributions disagree on support: {0}")]
    SupportMismatch(String),
    #[error("prompt parse error: {0}")]
    Parse(String),
    #[error("assumption '{name}' violated: {detail}")]
    Assumption { name: String, detail: String },
    #[error("bound diverges: c1*eps = {0} >= 1")]
    Divergence(f64),
    #[error("no separating vector found in {0} draws")]
    SearchBudget(usize),
    #[error("certification failed: {0}")]
    Certification(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    pub fn assumption(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Assumption { name: name.into(), detail: detail.into() }
    }

    /// 1 for violated theorem hypotheses, 2 for everything the user must fix in inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Assumption { .. } | Error::Divergence(_) | Error::DegenerateAmbiguity(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
