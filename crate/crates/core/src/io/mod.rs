//! Partition readers and cache-sized tiling.

mod backend;
mod tiles;

use std::path::PathBuf;

use thiserror::Error;

use crate::codec::CodecError;

pub use backend::{PartitionSource, ReadBackend, DIRECT_IO_ALIGN};
pub use tiles::{plan_tiles, Tile, TileMode, TileReader, TileSpan, TilingPlan, DEFAULT_TILE_BYTES};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot open partition {partition} ({}): {source}", path.display())]
    Open {
        partition: usize,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated partition {partition}: need {expected} bytes, found {actual}")]
    Truncated {
        partition: usize,
        expected: u64,
        actual: u64,
    },
    #[error("read error in partition {partition}: {source}")]
    Read {
        partition: usize,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "direct IO unsupported for {} ({reason}); use the buffered backend instead",
        path.display()
    )]
    DirectUnsupported { path: PathBuf, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
}
