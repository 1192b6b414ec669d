//! Test servers: a throwaway PKI, an HTTPS server with an access log, and
//! an HTTP/3 server, all serving the same virtual sites.

pub mod h3server;
pub mod https;
pub mod pki;
pub mod site;

pub use h3server::H3Fixture;
pub use https::{HttpsFixture, HttpsOptions, LogEntry};
pub use pki::TestPki;
pub use site::{Resource, Sites};
