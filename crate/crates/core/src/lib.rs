pub mod auth;
pub mod client;
pub mod clock;
pub mod harness;
pub mod http;
pub mod mime;
pub mod nmu;
pub mod server;
pub mod service;
pub mod sil;
pub mod store;
pub mod wire;
pub mod xml;
