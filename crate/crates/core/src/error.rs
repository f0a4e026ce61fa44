use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A state became non-finite or left the model's domain.
    #[error("integration diverged{}", location_suffix(*.trajectory, *.step, *.t))]
    IntegrationDiverged {
        trajectory: Option<usize>,
        step: Option<usize>,
        t: f64,
    },

    #[error("{assumption} violated: {detail}")]
    AssumptionViolated {
        assumption: &'static str,
        detail: String,
        /// `(t, x)` of the sample point with the largest misfit.
        worst_point: Option<(f64, Vec<f64>)>,
        residual: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a trajectory/step location to a divergence reported by a single step.
    pub(crate) fn at(self, trajectory: usize, step: usize) -> Self {
        match self {
            Error::IntegrationDiverged { t, .. } => Error::IntegrationDiverged {
                trajectory: Some(trajectory),
                step: Some(step),
                t,
            },
            other => other,
        }
    }
}

fn location_suffix(trajectory: Option<usize>, step: Option<usize>, t: f64) -> String {
    match (trajectory, step) {
        (Some(i), Some(k)) => format!(" in trajectory {i} at step {k} (t = {t})"),
        (None, Some(k)) => format!(" at step {k} (t = {t})"),
        _ => format!(" at t = {t}"),
    }
}
