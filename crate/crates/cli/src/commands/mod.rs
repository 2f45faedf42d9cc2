//! One module per subcommand. Each writes `<out>/<name>.csv` plus a JSON
//! summary and returns what to print.

mod latency;
mod memory;
mod quant_bench;
mod train;
mod volume;

use std::path::PathBuf;

pub use latency::run as latency;
pub use memory::run as memory;
pub use quant_bench::run as quant_bench;
pub use train::run as train;
pub use volume::run as volume;

/// Result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Whether every built-in check held.
    pub passed: bool,
    /// Human-readable table.
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}
