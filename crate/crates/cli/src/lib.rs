//! Command-line orchestration: layered config, run directories with a
//! manifest, and one subcommand per pipeline stage.

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::run_cli;
