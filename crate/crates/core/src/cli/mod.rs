//! Command implementations behind the `prunekit` binary.
//!
//! Each command writes into the run's output directory:
//! `<command>.jsonl` holds the reproducible metrics records,
//! `<command>.timing.jsonl` holds wall-clock and throughput figures, and
//! tables go to `<command>.txt`. Checkpoints use the `.pkpt` format.

mod commands;
mod config;

use std::fmt;
use std::str::FromStr;

pub use commands::{execute, exit_code, Invocation};
pub use config::{Preset, RunConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    Compress,
    OneShot,
    SingleStage,
    Evaluate,
    AblateDistill,
    AblatePrune,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::TrainTeacher,
        Command::Compress,
        Command::OneShot,
        Command::SingleStage,
        Command::Evaluate,
        Command::AblateDistill,
        Command::AblatePrune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::Compress => "compress",
            Command::OneShot => "oneshot",
            Command::SingleStage => "single-stage",
            Command::Evaluate => "evaluate",
            Command::AblateDistill => "ablate-distill",
            Command::AblatePrune => "ablate-prune",
        }
    }

    fn file_stem(self) -> String {
        self.name().replace('-', "_")
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}
