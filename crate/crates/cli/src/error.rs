//! Stage-tagged failures and their process exit codes.

use std::fmt;

/// Pipeline stage a failure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Phantom,
    Train,
    Segment,
    Metrics,
    Eval,
    Report,
    Volume,
    Register,
    Mpdr,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Config,
        Stage::Phantom,
        Stage::Train,
        Stage::Segment,
        Stage::Metrics,
        Stage::Eval,
        Stage::Report,
        Stage::Volume,
        Stage::Register,
        Stage::Mpdr,
    ];

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Phantom => 10,
            Stage::Train => 11,
            Stage::Segment => 12,
            Stage::Metrics => 13,
            Stage::Eval => 14,
            Stage::Report => 15,
            Stage::Volume => 16,
            Stage::Register => 17,
            Stage::Mpdr => 18,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Phantom => "phantom",
            Stage::Train => "train",
            Stage::Segment => "segment",
            Stage::Metrics => "metrics",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::Volume => "vol",
            Stage::Register => "register",
            Stage::Mpdr => "mpdr",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(stage: Stage, source: impl Into<anyhow::Error>) -> CliError {
        CliError {
            stage,
            source: source.into(),
        }
    }

    pub fn msg(stage: Stage, msg: impl fmt::Display) -> CliError {
        CliError {
            stage,
            source: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:#}", self.stage.name(), self.source)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags any error with the stage it occurred in.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> CliResult<T> {
        self.map_err(|e| CliError::new(stage, e))
    }
}
