//! Command-line interface and HTTP label service.

pub mod app;
pub mod exit;
pub mod serve;

pub use app::dispatch;
