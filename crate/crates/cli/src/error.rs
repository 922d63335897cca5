use bayesmap::{
    ChainError, DiagError, Error, ExperimentError, FitError, InferenceError, MapError, ModelError,
};

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad config, unreadable data, invalid arguments.
    Input = 1,
    /// The numerics ran but did not converge or left the feasible region.
    Numerical = 2,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Input,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Numerical,
            message: message.into(),
        }
    }

    /// `error[input]: ...` or `error[numerical]: ...` on one line.
    pub fn line(&self) -> String {
        let tag = match self.kind {
            ExitKind::Input => "input",
            ExitKind::Numerical => "numerical",
        };
        let msg: String = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        format!("error[{tag}]: {msg}")
    }
}

fn map_is_numerical(e: &MapError) -> bool {
    matches!(e, MapError::InfeasibleRegion { .. })
}

fn fit_is_numerical(e: &FitError) -> bool {
    match e {
        FitError::MaxIters(_)
        | FitError::LineSearchStall(_)
        | FitError::InfeasibleStart
        | FitError::SingularJacobian { .. } => true,
        FitError::Map(m) => map_is_numerical(m),
        _ => false,
    }
}

fn model_is_numerical(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::DidNotConverge(_) | ModelError::NotStrictlyConcave
    )
}

fn diag_is_numerical(e: &DiagError) -> bool {
    match e {
        DiagError::InfeasiblePoint | DiagError::TooFewFeasible { .. } => true,
        DiagError::Map(m) => map_is_numerical(m),
        DiagError::RequiresNormalizedTarget => false,
    }
}

fn inference_is_numerical(e: &InferenceError) -> bool {
    matches!(e, InferenceError::Map(m) if map_is_numerical(m))
}

fn experiment_is_numerical(e: &ExperimentError) -> bool {
    match e {
        ExperimentError::InvalidConfig(_) | ExperimentError::UnknownScenario(_) => false,
        ExperimentError::Model(m) => model_is_numerical(m),
        ExperimentError::Fit(f) => fit_is_numerical(f),
        ExperimentError::Chain(ChainError { source, .. }) => fit_is_numerical(source),
        ExperimentError::Map(m) => map_is_numerical(m),
        ExperimentError::Diagnostics(d) => diag_is_numerical(d),
        ExperimentError::Inference(i) => inference_is_numerical(i),
    }
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e: Error = e.into();
        let numerical = match &e {
            Error::Basis(_) | Error::Io(_) => false,
            Error::Model(m) => model_is_numerical(m),
            Error::Map(m) => map_is_numerical(m),
            Error::Fit(f) => fit_is_numerical(f),
            Error::Chain(c) => fit_is_numerical(&c.source),
            Error::Diagnostics(d) => diag_is_numerical(d),
            Error::Inference(i) => inference_is_numerical(i),
            Error::Experiment(x) => experiment_is_numerical(x),
        };
        let kind = if numerical {
            ExitKind::Numerical
        } else {
            ExitKind::Input
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}
