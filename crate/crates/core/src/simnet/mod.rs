//! Simulated network: wire codec, traffic accounting and the virtual-time
//! engines.

pub mod codec;
pub mod engine;
pub mod ledger;

pub use codec::{decode, encode, MsgType, WireBlock, WireMessage};
pub use engine::{run_simulation, ClientStream, Engine, Schedule, SimConfig, SimMode, SimulationResult, LISTENER_ID};
pub use ledger::{traffic_report, RoundTraffic, TrafficLedger, TrafficReport};
