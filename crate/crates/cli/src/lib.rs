//! Building blocks behind the `distaudit` command: configuration loading,
//! the demonstration subcommands and the experiment runner.

pub mod config;
pub mod demo;
pub mod experiment;
