//! Command implementations behind the `fpthd` binary.

pub mod commands;
pub mod manifest;
pub mod pipeline;
