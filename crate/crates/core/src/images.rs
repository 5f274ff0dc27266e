//! Resolving manifest image references to bytes.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};

pub trait ImageStore: Sync {
    fn load(&self, image_ref: &str) -> io::Result<Vec<u8>>;
}

/// Reads image references as paths relative to a root directory. Absolute
/// references are used as-is.
#[derive(Debug, Clone)]
pub struct FsImageStore {
    root: PathBuf,
}

impl FsImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageStore for FsImageStore {
    fn load(&self, image_ref: &str) -> io::Result<Vec<u8>> {
        std::fs::read(self.root.join(image_ref))
    }
}

/// In-memory store, mostly for tests and synthetic data.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageStore {
    images: HashMap<String, Vec<u8>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, bytes: Vec<u8>) {
        self.images.insert(image_ref.into(), bytes);
    }
}

impl ImageStore for MemoryImageStore {
    fn load(&self, image_ref: &str) -> io::Result<Vec<u8>> {
        self.images.get(image_ref).cloned().ok_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("no image {image_ref:?}"))
        })
    }
}
