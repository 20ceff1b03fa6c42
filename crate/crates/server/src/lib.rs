//! WebSocket server and command-line entry points around `huddle-core`.

pub mod load;
pub mod server;
