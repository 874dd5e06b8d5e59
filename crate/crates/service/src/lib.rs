//! HTTP + event-stream service and CLI around the ladder engine.

pub mod api;
pub mod cli;
pub mod error;
pub mod state;

use std::sync::Arc;

pub use error::{ApiError, ErrorBody};
pub use state::{AppState, Engine};

/// Serves the API on `listener` until the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, api::router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
