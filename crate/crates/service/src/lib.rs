//! HTTP/JSON backend for the clicking workflow. See `API.md` for the routes.

mod api;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, ApiError, MAX_BEV_SIZE};
pub use session::Session;

/// Serves `session` on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr, session: Session) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(session))).await
}
