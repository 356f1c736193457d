//! Stderr logging gated by the `PINDA_LOG` environment variable
//! (`quiet`, `info`, or `debug`; default `info`).

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verbosity {
    Quiet,
    Info,
    Debug,
}

pub fn verbosity() -> Verbosity {
    static LEVEL: OnceLock<Verbosity> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("PINDA_LOG").as_deref() {
        Ok("quiet") | Ok("off") => Verbosity::Quiet,
        Ok("debug") => Verbosity::Debug,
        _ => Verbosity::Info,
    })
}

#[macro_export]
macro_rules! log_info {
    ($($arg:tt)*) => {
        if $crate::logging::verbosity() >= $crate::logging::Verbosity::Info {
            eprintln!($($arg)*);
        }
    };
}

#[macro_export]
macro_rules! log_debug {
    ($($arg:tt)*) => {
        if $crate::logging::verbosity() >= $crate::logging::Verbosity::Debug {
            eprintln!($($arg)*);
        }
    };
}
