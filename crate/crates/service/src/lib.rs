//! HTTP and server-sent-events facade over the research assistant pipeline.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/v1/sessions` | create a session, `201 {"session_id"}` |
//! | POST | `/v1/sessions/{id}/messages` | `{"text"}`, streams trace events |
//! | GET | `/v1/sessions/{id}` | stored turns and pending clarification |
//! | GET | `/v1/shards` | `[{"period","domain","chunk_count"}]` |
//! | GET | `/v1/health` | `{"status","shards","llm"}`, 503 until the catalog is open |

mod app;
pub mod config;
pub mod store;

pub use app::{bind, router, serve, serve_on, shutdown_signal, ApiError, AppState, CreatedSession, MessageBody, ServeError};
