//! File formats, run configuration and the commands behind the `ehat`
//! binary.

pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod format;
pub mod report;

/// Process exit status for a failed command: 2 for numerical divergence,
/// 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let diverged = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<ehat_core::Error>(),
            Some(ehat_core::Error::Divergence { .. })
        )
    });
    if diverged {
        2
    } else {
        1
    }
}
