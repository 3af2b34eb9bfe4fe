//! The online loop: per-frame inference, state updates, chunk resets.

mod output;
mod stream;
mod update;

pub use output::{read_stream, ExportOptions, FrameOutput, FrameRecord, HumanPrediction, PersonRecord, StreamWriter};
pub use stream::{init_stream, StreamContext, StreamOptions, DEFAULT_RESET};
pub use update::{ttt_rates, ttt_update, ttt_update_rates, ChunkAligner, UpdateMode};

#[cfg(test)]
mod tests;
