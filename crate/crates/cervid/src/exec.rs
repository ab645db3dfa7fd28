//! Worker-pool plumbing shared by the scans and solvers.

use std::sync::Arc;

use crate::{Error, Result};

/// Execution context: either strictly sequential or backed by a rayon pool.
///
/// `workers == 1` forces the sequential code paths (useful as an oracle);
/// anything else fans work out over chunks of the sequence. The same chunking
/// is used regardless of how many threads actually run, so results depend on
/// the configured worker count only through the chunk layout.
#[derive(Clone)]
pub struct Exec {
    pool: Option<Arc<rayon::ThreadPool>>,
    workers: usize,
    chunk_size: Option<usize>,
}

/// Minimum chunk length; amortizes combine overhead for tiny state sizes.
const MIN_CHUNK: usize = 64;

impl Exec {
    /// Strictly sequential execution.
    pub fn sequential() -> Self {
        Exec {
            pool: None,
            workers: 1,
            chunk_size: None,
        }
    }

    /// Pool with `workers` threads; `0` means the host logical-core count.
    pub fn new(workers: usize) -> Result<Self> {
        let workers = if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        };
        if workers == 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("failed to build thread pool: {e}")))?;
        Ok(Exec {
            pool: Some(Arc::new(pool)),
            workers,
            chunk_size: None,
        })
    }

    /// Override the default chunk size.
    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk_size = Some(chunk.max(1));
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        self.pool.is_some()
    }

    /// Chunk length for a sequence of `len` elements:
    /// `max(len / (8 * workers), 64)` unless overridden.
    pub fn chunk_size(&self, len: usize) -> usize {
        self.chunk_size
            .unwrap_or_else(|| (len / (8 * self.workers)).max(MIN_CHUNK))
    }

    /// Run `f` inside the pool (or inline when sequential).
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }
}

impl std::fmt::Debug for Exec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Exec")
            .field("workers", &self.workers)
            .field("chunk_size", &self.chunk_size)
            .finish()
    }
}
