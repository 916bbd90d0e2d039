//! Exit-code contract: config errors exit 2, data errors 3, training errors
//! 4, client errors 5.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Config = 2,
    Data = 3,
    Training = 4,
    Client = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub class: ExitClass,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

pub fn config_err(msg: impl fmt::Display) -> CliError {
    CliError { class: ExitClass::Config, message: msg.to_string() }
}

pub fn data_err(msg: impl fmt::Display) -> CliError {
    CliError { class: ExitClass::Data, message: msg.to_string() }
}

pub fn training_err(msg: impl fmt::Display) -> CliError {
    CliError { class: ExitClass::Training, message: msg.to_string() }
}

pub fn client_err(msg: impl fmt::Display) -> CliError {
    CliError { class: ExitClass::Client, message: msg.to_string() }
}
