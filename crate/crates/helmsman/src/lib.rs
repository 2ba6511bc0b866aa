//! HTTP service and admin CLI around [`helmsman_core`].

use std::sync::Arc;

pub mod api;
pub mod chat;
pub mod cli;
pub mod config;
pub mod runtime;

use config::Config;
use helmsman_core::session::SessionStore;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Startup(#[from] runtime::StartupError),
    #[error("session store: {0}")]
    Store(#[from] helmsman_core::session::StoreError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Builds the router for `config`; used by `serve` and by tests.
pub fn app(config: &Config) -> Result<(axum::Router, Arc<api::AppState>), ServeError> {
    let backend = runtime::connect(config).map_err(runtime::StartupError::from)?;
    let engine = runtime::build_engine(config, backend)?;
    let sessions = SessionStore::open(&config.data.state_dir.join("sessions"))?;
    let state = api::AppState::new(Arc::new(engine), sessions, config.request_timeout());
    Ok((api::router(state.clone()), state))
}

/// Blocks serving HTTP until ctrl-c.
pub fn serve(config: Config) -> Result<(), ServeError> {
    let (router, _) = app(&config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&config.server.bind).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
