use carbon_ledger::config::ConfigError;
use carbon_ledger::harness::HarnessError;
use carbon_ledger::intensity::IntensityError;
use carbon_ledger::operational::LogError;

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const INPUT: u8 = 2;
pub const NO_MATCH: u8 = 3;
pub const REMOTE: u8 = 4;

/// Bad flag combinations that clap cannot express.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A run that produced nothing to report.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct EmptyResult(pub String);

fn intensity_code(e: &IntensityError) -> u8 {
    match e {
        IntensityError::UnknownZone { .. } => NO_MATCH,
        IntensityError::Transport { .. } | IntensityError::Format(_) => REMOTE,
        IntensityError::Table { .. } | IntensityError::Io { .. } => INPUT,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<EmptyResult>() {
            return NO_MATCH;
        }
        if let Some(LogError::NoMatch { .. }) = cause.downcast_ref::<LogError>() {
            return NO_MATCH;
        }
        if let Some(e) = cause.downcast_ref::<IntensityError>() {
            return intensity_code(e);
        }
        if let Some(ConfigError::Intensity(e)) = cause.downcast_ref::<ConfigError>() {
            return intensity_code(e);
        }
        if let Some(HarnessError::PassedExceedsTotal { .. } | HarnessError::ZeroTotal) =
            cause.downcast_ref::<HarnessError>()
        {
            return USAGE;
        }
    }
    INPUT
}
