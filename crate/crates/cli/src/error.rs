//! Error categories and their exit codes.

use std::fmt;

use datclone::cloning::CloningError;
use datclone::corpus::CorpusError;
use datclone::diffcore::DiffError;
use datclone::eval::EvalError;
use datclone::model::ModelError;
use datclone::signal::SignalError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: m.into(),
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self.code {
            EXIT_CONFIG => "config",
            EXIT_DATA => "data",
            EXIT_NUMERIC => "numeric",
            _ => "error",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category(), self.message)
    }
}

fn with(code: u8, e: &impl fmt::Display) -> CliError {
    CliError {
        code,
        message: e.to_string(),
    }
}

fn diff_code(e: &DiffError) -> u8 {
    match e {
        DiffError::NonFinite(_) => EXIT_NUMERIC,
        DiffError::Config(_) => EXIT_CONFIG,
        DiffError::Shape(_) | DiffError::Checkpoint(_) => EXIT_DATA,
    }
}

fn signal_code(e: &SignalError) -> u8 {
    match e {
        SignalError::Config(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::Budget(_) => EXIT_CONFIG,
        ModelError::Diff(d) => diff_code(d),
        ModelError::Signal(s) => signal_code(s),
        _ => EXIT_DATA,
    }
}

fn corpus_code(e: &CorpusError) -> u8 {
    match e {
        CorpusError::Invalid(_) => EXIT_CONFIG,
        CorpusError::Signal(s) => signal_code(s),
        _ => EXIT_DATA,
    }
}

fn cloning_code(e: &CloningError) -> u8 {
    match e {
        CloningError::Config(_) | CloningError::Recipe(_) => EXIT_CONFIG,
        CloningError::Divergence { .. } => EXIT_NUMERIC,
        CloningError::Model(m) => model_code(m),
        CloningError::Corpus(c) => corpus_code(c),
        CloningError::Signal(s) => signal_code(s),
        CloningError::Data(_) | CloningError::Io(_) => EXIT_DATA,
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        with(signal_code(&e), &e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        with(model_code(&e), &e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        with(corpus_code(&e), &e)
    }
}

impl From<CloningError> for CliError {
    fn from(e: CloningError) -> Self {
        with(cloning_code(&e), &e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::Config(_) => EXIT_CONFIG,
            EvalError::Model(m) => model_code(m),
            EvalError::Cloning(c) => cloning_code(c),
            EvalError::Corpus(c) => corpus_code(c),
            EvalError::Signal(s) => signal_code(s),
            _ => EXIT_DATA,
        };
        with(code, &e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        with(EXIT_DATA, &e)
    }
}
