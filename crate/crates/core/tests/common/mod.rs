//! Independent references used by the integration tests.

pub mod md5_ref;
pub mod oracle;
