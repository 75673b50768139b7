//! Command-line plumbing for `dhag`: run configuration files and the
//! train / eval / score / sweep / export-latents commands.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 for
//! numerical failures during training or scoring.

pub mod commands;
pub mod config;

use dhag_core::DhagError;

pub const EXIT_USER: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &DhagError) -> i32 {
    if e.is_user_error() {
        EXIT_USER
    } else {
        EXIT_NUMERICAL
    }
}
