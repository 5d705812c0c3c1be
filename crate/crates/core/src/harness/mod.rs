//! Deterministic desk-scale mesh: in-memory network, wire recorder,
//! scenario runner.

mod fabric;
mod mesh;
mod net;
mod scenario;
mod transcript;

pub use fabric::{Fabric, HttpFabric};
pub use mesh::{standard_levels, Mesh, Node, MESH_ADMIN, NMU_NODE};
pub use net::{mem_url, MemNetwork, Recorder, RecordingTransport, MEM_SCHEME};
pub use scenario::{run_scenario, run_scenario_on, Scenario, ScenarioError, ScenarioRun, TransportKind, TOUR};
pub use transcript::{Exchange, RecordedResponse, Transcript};
