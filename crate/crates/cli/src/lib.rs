//! Command line and HTTP front end for `curate_core`.

pub mod cli;
pub mod server;
pub mod thumbs;

use curate_core::ErrorClass;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// Bad arguments or missing inputs detected by the front end itself.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<curate_core::Error>() {
            return match e.class() {
                ErrorClass::Input => EXIT_INPUT,
                ErrorClass::Numeric => EXIT_NUMERIC,
                ErrorClass::Io => EXIT_IO,
            };
        }
        if cause.is::<InputError>() {
            return EXIT_INPUT;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_INPUT
}
