//! Command-line drivers: synthetic data generation, hiding, training,
//! evaluation, ablations and gradient checks.

pub mod commands;
pub mod config;
pub mod imageio;
pub mod manifest;
pub mod synth;

pub use commands::{execute, Command, GradcheckFailed};
pub use config::{ConfigError, RunConfig};

pub const THREADS_ENV: &str = "STEGA_LIFT_THREADS";

/// Process exit status for a failed command: 1 for contract and config
/// errors, 2 for numeric aborts and failed gradient checks, 3 for I/O.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<stegalift::Error>() {
            return match e {
                stegalift::Error::Numeric { .. } => 2,
                stegalift::Error::Io(_) | stegalift::Error::Checkpoint(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<GradcheckFailed>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() {
            return 3;
        }
    }
    1
}

/// Cap rayon's pool at `STEGA_LIFT_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}
