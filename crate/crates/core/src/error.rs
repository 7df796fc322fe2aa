use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent model, data, or experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A loss evaluation produced NaN or infinity.
    #[error("non-finite loss at the {sign} perturbation{}", location(.client, .step))]
    Numerical {
        sign: PerturbationSign,
        client: Option<usize>,
        step: Option<usize>,
    },

    /// Client and server disagree about protocol state.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationSign {
    Plus,
    Minus,
}

impl std::fmt::Display for PerturbationSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerturbationSign::Plus => f.write_str("+epsilon"),
            PerturbationSign::Minus => f.write_str("-epsilon"),
        }
    }
}

fn location(client: &Option<usize>, step: &Option<usize>) -> String {
    match (client, step) {
        (Some(c), Some(s)) => format!(" (client {c}, step {s})"),
        (None, Some(s)) => format!(" (step {s})"),
        (Some(c), None) => format!(" (client {c})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Attach client/step coordinates to a numerical failure.
    pub fn at(self, client_id: usize, step: usize) -> Self {
        match self {
            Error::Numerical { sign, .. } => Error::Numerical {
                sign,
                client: Some(client_id),
                step: Some(step),
            },
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}
