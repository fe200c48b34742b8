use std::path::Path;

use super::{IoError, PartitionSource, ReadBackend};
use crate::codec::convert_to_f32;
use crate::dataset::{Dataset, DatasetDescriptor, Dtype, Partition};

/// Roughly what fits in a per-core share of L3.
pub const DEFAULT_TILE_BYTES: usize = 1 << 20;

/// Tile sizing policy. Whole frames are grouped while a frame fits the
/// target; larger frames are cut into slabs of detector rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilingPlan {
    /// Encoded bytes per tile; `0` means one tile per partition.
    pub tile_target_bytes: usize,
}

impl Default for TilingPlan {
    fn default() -> Self {
        TilingPlan {
            tile_target_bytes: DEFAULT_TILE_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileMode {
    WholeFrames { frames_per_tile: u64 },
    RowSlabs { rows_per_slab: usize },
}

impl TilingPlan {
    pub fn new(tile_target_bytes: usize) -> Self {
        TilingPlan { tile_target_bytes }
    }

    pub fn unbounded() -> Self {
        TilingPlan {
            tile_target_bytes: 0,
        }
    }

    pub fn mode(&self, desc: &DatasetDescriptor) -> TileMode {
        let bpf = desc.bytes_per_frame() as usize;
        let target = self.tile_target_bytes;
        if target == 0 {
            return TileMode::WholeFrames {
                frames_per_tile: u64::MAX,
            };
        }
        if bpf <= target {
            return TileMode::WholeFrames {
                frames_per_tile: (target / bpf) as u64,
            };
        }
        let rows = desc.sig_rows();
        let row_pixels = desc.row_pixels();
        // bytes per row, rounded up for packed half-bytes
        let row_bytes = (bpf / rows).max(1);
        let mut rows_per_slab = (target / row_bytes).clamp(1, rows);
        // packed rows with an odd pixel count must be cut on pixel pairs
        if desc.dtype == Dtype::Uint12PackedLe && row_pixels % 2 == 1 {
            rows_per_slab = (rows_per_slab & !1).max(2).min(rows);
        }
        TileMode::RowSlabs { rows_per_slab }
    }
}

/// Extent of one tile: a run of whole frames, or a row range of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpan {
    /// Absolute frame index.
    pub frame_start: u64,
    pub frame_count: u64,
    pub row_start: usize,
    pub row_count: usize,
}

/// Tile spans of a partition in ascending frame/row order.
pub fn plan_tiles(desc: &DatasetDescriptor, partition: &Partition, plan: &TilingPlan) -> Vec<TileSpan> {
    let rows = desc.sig_rows();
    let mut spans = Vec::new();
    match plan.mode(desc) {
        TileMode::WholeFrames { frames_per_tile } => {
            let mut f = partition.frame_start;
            while f < partition.frame_end() {
                let n = frames_per_tile.min(partition.frame_end() - f);
                spans.push(TileSpan {
                    frame_start: f,
                    frame_count: n,
                    row_start: 0,
                    row_count: rows,
                });
                f += n;
            }
        }
        TileMode::RowSlabs { rows_per_slab } => {
            for f in partition.frame_start..partition.frame_end() {
                let mut r = 0;
                while r < rows {
                    let n = rows_per_slab.min(rows - r);
                    spans.push(TileSpan {
                        frame_start: f,
                        frame_count: 1,
                        row_start: r,
                        row_count: n,
                    });
                    r += n;
                }
            }
        }
    }
    spans
}

/// Where a tile's encoded bytes came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRange<'a> {
    pub file: &'a Path,
    pub offset: u64,
    pub length: u64,
}

/// Decoded `f32` frame data for a span, C order.
#[derive(Debug)]
pub struct Tile<'a> {
    pub partition_index: usize,
    pub span: TileSpan,
    pub row_pixels: usize,
    pub data: &'a [f32],
    pub provenance: ByteRange<'a>,
    /// Data is a view of the mapped file, no payload copy was made.
    pub zero_copy: bool,
}

impl<'a> Tile<'a> {
    pub fn pixels_per_frame(&self) -> usize {
        self.span.row_count * self.row_pixels
    }

    /// Offset of the tile's first pixel within a flattened frame.
    pub fn pixel_offset(&self) -> usize {
        self.span.row_start * self.row_pixels
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'a, f32> {
        self.data.chunks_exact(self.pixels_per_frame())
    }
}

/// Reads a partition tile by tile. Not shared between workers; the scratch
/// buffer is reused across tiles and can be carried to the next partition.
pub struct TileReader<'d> {
    desc: &'d DatasetDescriptor,
    partition: &'d Partition,
    source: PartitionSource,
    path: std::path::PathBuf,
    spans: Vec<TileSpan>,
    next: usize,
    scratch: Vec<f32>,
}

impl<'d> TileReader<'d> {
    pub fn open(
        dataset: &'d Dataset,
        partition: &'d Partition,
        plan: &TilingPlan,
        backend: ReadBackend,
    ) -> Result<Self, IoError> {
        Self::with_scratch(dataset, partition, plan, backend, Vec::new())
    }

    pub fn with_scratch(
        dataset: &'d Dataset,
        partition: &'d Partition,
        plan: &TilingPlan,
        backend: ReadBackend,
        scratch: Vec<f32>,
    ) -> Result<Self, IoError> {
        let desc = &dataset.descriptor;
        let source = PartitionSource::open(dataset, partition, backend)?;
        Ok(TileReader {
            desc,
            partition,
            path: source.path().to_path_buf(),
            source,
            spans: plan_tiles(desc, partition, plan),
            next: 0,
            scratch,
        })
    }

    pub fn backend(&self) -> ReadBackend {
        self.source.backend()
    }

    pub fn spans(&self) -> &[TileSpan] {
        &self.spans
    }

    pub fn into_scratch(self) -> Vec<f32> {
        self.scratch
    }

    /// Next tile, or `None` once the partition is exhausted.
    #[allow(clippy::should_implement_trait)]
    pub fn next_tile(&mut self) -> Option<Result<Tile<'_>, IoError>> {
        let span = *self.spans.get(self.next)?;
        self.next += 1;
        Some(self.read_span(span))
    }

    fn read_span(&mut self, span: TileSpan) -> Result<Tile<'_>, IoError> {
        let desc = self.desc;
        let dtype = desc.dtype;
        let bpf = desc.bytes_per_frame();
        let row_pixels = desc.row_pixels();
        let enc = |pixels: usize| dtype.encoded_len(pixels as u64).expect("pixel-pair aligned");
        let offset = (span.frame_start - self.partition.frame_start) * bpf
            + enc(span.row_start * row_pixels);
        let pixels = span.frame_count as usize * span.row_count * row_pixels;
        let length = enc(pixels);

        let backend = self.source.backend();
        let file_offset = self.source.file_offset(offset);
        let bytes = self.source.read(offset, length as usize)?;
        let provenance = ByteRange {
            file: &self.path,
            offset: file_offset,
            length,
        };

        #[cfg(target_endian = "little")]
        if dtype == Dtype::Float32Le && backend == ReadBackend::MemoryMapped {
            if let Ok(view) = bytemuck::try_cast_slice::<u8, f32>(bytes) {
                return Ok(Tile {
                    partition_index: self.partition.index,
                    span,
                    row_pixels,
                    data: view,
                    provenance,
                    zero_copy: true,
                });
            }
        }

        self.scratch.resize(pixels, 0.0);
        convert_to_f32(bytes, dtype, &mut self.scratch)?;
        Ok(Tile {
            partition_index: self.partition.index,
            span,
            row_pixels,
            data: &self.scratch,
            provenance,
            zero_copy: false,
        })
    }
}
