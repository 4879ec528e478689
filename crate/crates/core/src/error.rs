use thiserror::Error;

use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which quantity made a demixing update degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyKind {
    /// `w_k^H U_m w_k` was not positive.
    NonPositiveDenominator,
    /// `|1 - v_k|` collapsed, which would make the demixing matrix singular.
    SingularSteering,
    /// The normalizing quadratic form of an IP update was not positive.
    NonPositiveNorm,
    /// The `W U` product of an IP update was singular.
    SingularProduct,
    /// An update produced non-finite entries.
    NonFinite,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("singular demixing matrix at bin {bin}{}", frame_suffix(*frame))]
    Singular { frame: Option<usize>, bin: usize },

    #[error("degenerate update ({kind:?}) for source {source_index}, bin {bin}{}", frame_suffix(*frame))]
    Degenerate {
        kind: DegeneracyKind,
        frame: Option<usize>,
        bin: usize,
        source_index: usize,
        other: Option<usize>,
    },

    #[error("batch sweep {sweep}: {inner}")]
    BatchStep { sweep: usize, inner: Box<Error> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn frame_suffix(frame: Option<usize>) -> String {
    match frame {
        Some(t) => format!(", frame {t}"),
        None => String::new(),
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
