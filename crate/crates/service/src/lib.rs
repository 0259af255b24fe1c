//! HTTP service running the accept/reject feedback loop.
//!
//! Datasets are uploaded once and referenced by id. A session owns one
//! dataset reference, a cluster count, a fit configuration, its feedback
//! history and every clustering produced so far. Fits run on a blocking
//! worker while clients poll `/progress`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/datasets` | CSV (`?label_column=`, `?id_column=`) or JSON `{points, gold_labels?, point_ids?, feature_names?}` |
//! | POST | `/sessions` | `{dataset_ref, k, config?}` |
//! | GET | `/sessions/{id}` | session overview |
//! | POST | `/sessions/{id}/fit` | 202, fit runs in the background |
//! | POST | `/sessions/{id}/cancel` | stop the running fit |
//! | GET | `/sessions/{id}/progress` | |
//! | GET | `/sessions/{id}/clusters?m=6` | |
//! | POST | `/sessions/{id}/feedback` | `{accepted, rejected}` |
//! | GET | `/sessions/{id}/history` | |
//! | GET | `/sessions/{id}/export` | |
//! | POST | `/sessions/import` | |
//!
//! Errors are `{code, message, detail}` with 404 for unknown ids, 409 for
//! operations not allowed in the current state and 422 for invalid input.

pub mod api;
pub mod error;
pub mod session;
pub mod store;

pub use api::{router, serve, AppState};
pub use error::ApiError;
pub use session::{Session, SessionDocument, SessionStatus};
pub use store::Store;
