//! Round engine over a simulated, byte-metered network and simulated clock.

mod clock;
mod engine;
mod network;
mod trace;
pub mod wire;

pub use clock::{DurationMode, SimDuration, DEFAULT_SECONDS_PER_FLOP};
pub use engine::{run_training, ClientState, ClientUpdate, Downloaded, FlStrategy, RunOptions, ServerState, StopConfig};
pub use network::{Link, NetworkModel};
pub use trace::{RoundTrace, StopReason, Substeps, TrainingRun, SUBSTEPS};
pub use wire::{deserialize_params, serialize_params, wire_size, Message, MessageKind, HEADER_BYTES};
