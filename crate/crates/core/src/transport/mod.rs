//! Wire protocol, client and server loops, and bandwidth-limited links.

pub mod client;
pub mod link;
pub mod server;
pub mod sim;
pub mod wire;

pub use client::{local_infer, prepare_frame, Client, InferOutcome, Split, TcpClient, Timing};
pub use link::{throttled_link, LinkMode, LinkModel, SimLink, ThrottledWriter, KB};
pub use server::{serve, serve_stream, ServerHandle, ServerSession};
pub use sim::{Compute, SimOutcome, SimSession};
pub use wire::{decode_message, encode_message, Message, WireError};
