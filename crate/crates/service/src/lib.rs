//! HTTP front end for text-based voice editing: recording ingestion,
//! checkpoint management, and edit/synthesis jobs run by a worker pool.

pub mod api;
pub mod app;
pub mod error;
pub mod store;

use std::future::Future;
use std::net::SocketAddr;
pub use app::{AppState, ServiceConfig, Workers};
pub use error::ServiceError;

/// Binds `config.port` on all interfaces and serves until `shutdown`
/// resolves, then stops accepting requests and drains the job queue.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::internal(format!("cannot bind {addr}: {e}")))?;
    serve_on(listener, config, shutdown).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let workers = config.workers;
    let state = tokio::task::spawn_blocking(move || AppState::open(config))
        .await
        .map_err(|e| ServiceError::internal(e.to_string()))??;
    let pool = Workers::spawn(state.clone(), workers);
    tracing::info!(addr = ?listener.local_addr().ok(), workers, "serving");
    axum::serve(listener, api::router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    tracing::info!("draining jobs");
    pool.drain().await;
    Ok(())
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
