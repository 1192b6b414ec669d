//! What the fixture servers serve, per host and path.

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resource {
    Html(String),
    Text(String),
    /// `len` pattern bytes. Without `content_length` the body is sent
    /// chunked (or delimited by close when `chunked` is false too).
    File {
        len: u64,
        content_length: bool,
        chunked: bool,
    },
    Status {
        code: u16,
        content_type: String,
        body: String,
    },
    Redirect(String),
}

impl Resource {
    pub fn file(len: u64) -> Resource {
        Resource::File {
            len,
            content_length: true,
            chunked: false,
        }
    }
}

/// Host (lower case) → path → resource.
#[derive(Debug, Clone, Default)]
pub struct Sites {
    hosts: HashMap<String, HashMap<String, Resource>>,
}

impl Sites {
    pub fn new() -> Sites {
        Sites::default()
    }

    pub fn add(mut self, host: &str, path: &str, r: Resource) -> Sites {
        self.insert(host, path, r);
        self
    }

    pub fn insert(&mut self, host: &str, path: &str, r: Resource) {
        self.hosts
            .entry(host.to_ascii_lowercase())
            .or_default()
            .insert(path.to_string(), r);
    }

    pub fn get(&self, host: &str, path: &str) -> Option<&Resource> {
        let host = host.split(':').next().unwrap_or(host).to_ascii_lowercase();
        let path = path.split('?').next().unwrap_or(path);
        self.hosts.get(&host)?.get(path)
    }
}

/// Deterministic body bytes.
pub fn fill(buf: &mut [u8], offset: u64) {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = ((offset + i as u64) % 251) as u8;
    }
}
