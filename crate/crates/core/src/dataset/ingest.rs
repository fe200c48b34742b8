use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{
    plan_partitions, write_sidecar, Dataset, DatasetDescriptor, DatasetError, Dtype, Partition,
};

/// File name of the sidecar written into every dataset directory.
pub const SIDECAR_NAME: &str = "dataset.sidecar";

/// Caller-declared layout of a contiguous, headerless, C-order raw file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceLayout {
    pub dtype: Dtype,
    pub scan_shape: Vec<usize>,
    pub sig_shape: Vec<usize>,
}

/// Splits a contiguous raw file into one file per partition and writes the
/// sidecar next to them.
pub fn ingest(
    source_path: &Path,
    layout: &SourceLayout,
    output_dir: &Path,
    target_partition_bytes: u64,
) -> Result<Dataset, DatasetError> {
    if layout.dtype == Dtype::Float64Le {
        return Err(DatasetError::Invalid(
            "float64_le sources cannot be ingested".into(),
        ));
    }
    let mut desc = DatasetDescriptor::new(
        layout.dtype,
        layout.scan_shape.clone(),
        layout.sig_shape.clone(),
    );
    let bpf = desc.dtype.encoded_len(desc.sig_pixels() as u64).ok_or_else(|| {
        DatasetError::Invalid("uint12_packed_le requires an even pixel count per frame".into())
    })?;
    let expected = desc.total_frames() * bpf;
    let actual = fs::metadata(source_path)
        .map_err(|e| DatasetError::io(format!("reading {}", source_path.display()), e))?
        .len();
    if actual != expected {
        return Err(DatasetError::SizeMismatch { expected, actual });
    }
    desc.partitions = plan_partitions(&desc, target_partition_bytes)?;

    let mut src = File::open(source_path)
        .map_err(|e| DatasetError::io(format!("opening {}", source_path.display()), e))?;
    write_dataset(output_dir, desc, BTreeMap::new(), |part, out| {
        let copied = io::copy(&mut (&mut src).take(part.byte_length), out)?;
        if copied != part.byte_length {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "source shrank during ingest",
            ));
        }
        Ok(())
    })
}

/// Writes a dataset whose frames are produced by `fill(frame_index, frame_bytes)`.
/// Intended for fixtures and synthetic benchmark data.
pub fn write_dataset_with(
    output_dir: &Path,
    mut descriptor: DatasetDescriptor,
    target_partition_bytes: u64,
    metadata: BTreeMap<String, String>,
    mut fill: impl FnMut(u64, &mut [u8]),
) -> Result<Dataset, DatasetError> {
    descriptor.partitions = plan_partitions(&descriptor, target_partition_bytes)?;
    let bpf = descriptor.bytes_per_frame() as usize;
    let mut frame = vec![0u8; bpf];
    write_dataset(output_dir, descriptor, metadata, |part, out| {
        for f in part.frame_start..part.frame_end() {
            fill(f, &mut frame);
            out.write_all(&frame)?;
        }
        Ok(())
    })
}

/// Writes an in-memory C-order buffer as a partitioned dataset.
pub fn write_raw_dataset(
    output_dir: &Path,
    layout: &SourceLayout,
    data: &[u8],
    target_partition_bytes: u64,
) -> Result<Dataset, DatasetError> {
    let desc = DatasetDescriptor::new(
        layout.dtype,
        layout.scan_shape.clone(),
        layout.sig_shape.clone(),
    );
    let bpf = desc.dtype.encoded_len(desc.sig_pixels() as u64).ok_or_else(|| {
        DatasetError::Invalid("uint12_packed_le requires an even pixel count per frame".into())
    })?;
    let expected = desc.total_frames() * bpf;
    if data.len() as u64 != expected {
        return Err(DatasetError::SizeMismatch {
            expected,
            actual: data.len() as u64,
        });
    }
    let bpf = bpf as usize;
    write_dataset_with(output_dir, desc, target_partition_bytes, BTreeMap::new(), |f, buf| {
        let start = f as usize * bpf;
        buf.copy_from_slice(&data[start..start + bpf]);
    })
}

/// Builds a larger dataset by repeating the base dataset `tile_repeats`
/// times along the slow scan axis. Frame `i` of the output equals base
/// frame `i mod base_frames`.
pub fn generate_synthetic(
    base: &Dataset,
    tile_repeats: usize,
    output_dir: &Path,
    target_partition_bytes: u64,
) -> Result<Dataset, DatasetError> {
    if tile_repeats == 0 {
        return Err(DatasetError::Invalid("tile_repeats must be at least 1".into()));
    }
    let base_desc = &base.descriptor;
    let mut desc = DatasetDescriptor::new(
        base_desc.dtype,
        base_desc.scan_shape.clone(),
        base_desc.sig_shape.clone(),
    );
    desc.scan_shape[0] *= tile_repeats;
    desc.partitions = plan_partitions(&desc, target_partition_bytes)?;
    let base_frames = base_desc.total_frames();
    let bpf = base_desc.bytes_per_frame();
    let mut reader = FrameReader::new(base);
    let mut metadata = base.metadata.clone();
    metadata.insert("synthetic_tile_repeats".into(), tile_repeats.to_string());
    write_dataset(output_dir, desc, metadata, |part, out| {
        let mut frame = part.frame_start;
        while frame < part.frame_end() {
            let base_frame = frame % base_frames;
            // contiguous run inside the base before wrapping
            let run = (part.frame_end() - frame).min(base_frames - base_frame);
            reader.copy_frames(base_frame, run, bpf, out)?;
            frame += run;
        }
        Ok(())
    })
}

fn write_dataset(
    output_dir: &Path,
    descriptor: DatasetDescriptor,
    metadata: BTreeMap<String, String>,
    mut write_partition: impl FnMut(&Partition, &mut BufWriter<File>) -> io::Result<()>,
) -> Result<Dataset, DatasetError> {
    descriptor.validate()?;
    fs::create_dir_all(output_dir)
        .map_err(|e| DatasetError::io(format!("creating {}", output_dir.display()), e))?;
    for part in &descriptor.partitions {
        let path = output_dir.join(&part.file_path);
        let ctx = || format!("writing partition {} to {}", part.index, path.display());
        let file = File::create(&path).map_err(|e| DatasetError::io(ctx(), e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        write_partition(part, &mut out).map_err(|e| DatasetError::io(ctx(), e))?;
        out.flush().map_err(|e| DatasetError::io(ctx(), e))?;
    }
    let sidecar_path = output_dir.join(SIDECAR_NAME);
    write_sidecar(&descriptor, &metadata, &sidecar_path)?;
    Ok(Dataset {
        root: output_dir.to_path_buf(),
        sidecar_path,
        descriptor,
        metadata,
    })
}

/// Sequential raw-byte access to frames across partition files.
struct FrameReader<'a> {
    dataset: &'a Dataset,
    open: Option<(usize, File)>,
}

impl<'a> FrameReader<'a> {
    fn new(dataset: &'a Dataset) -> Self {
        FrameReader {
            dataset,
            open: None,
        }
    }

    fn copy_frames(
        &mut self,
        mut frame: u64,
        mut count: u64,
        bpf: u64,
        out: &mut impl Write,
    ) -> io::Result<()> {
        while count > 0 {
            let part = self
                .dataset
                .descriptor
                .partition_for_frame(frame)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame out of range"))?;
            if self.open.as_ref().map(|(i, _)| *i) != Some(part.index) {
                let file = File::open(self.dataset.partition_path(part))?;
                self.open = Some((part.index, file));
            }
            let file = &mut self.open.as_mut().unwrap().1;
            let n = count.min(part.frame_end() - frame);
            file.seek(SeekFrom::Start(
                part.byte_offset + (frame - part.frame_start) * bpf,
            ))?;
            let copied = io::copy(&mut file.take(n * bpf), out)?;
            if copied != n * bpf {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!("truncated partition {}", part.index),
                ));
            }
            frame += n;
            count -= n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concat_partitions(ds: &Dataset) -> Vec<u8> {
        ds.descriptor
            .partitions
            .iter()
            .flat_map(|p| fs::read(ds.partition_path(p)).unwrap())
            .collect()
    }

    fn layout(dtype: Dtype, frames: usize) -> SourceLayout {
        SourceLayout {
            dtype,
            scan_shape: vec![frames],
            sig_shape: vec![4, 4],
        }
    }

    #[test]
    fn split_and_concat_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let src: Vec<u8> = (0..4 * 64).map(|i| (i * 7 % 251) as u8).collect();
        let src_path = dir.path().join("src.raw");
        fs::write(&src_path, &src).unwrap();
        let ds = ingest(&src_path, &layout(Dtype::Float32Le, 4), &dir.path().join("out"), 128)
            .unwrap();
        assert_eq!(ds.descriptor.partitions.len(), 2);
        for p in &ds.descriptor.partitions {
            assert_eq!(fs::metadata(ds.partition_path(p)).unwrap().len(), 128);
        }
        assert_eq!(concat_partitions(&ds), src);
        let reopened = Dataset::open(&ds.sidecar_path).unwrap();
        assert_eq!(reopened.descriptor, ds.descriptor);
    }

    #[test]
    fn no_op_split() {
        let dir = tempfile::tempdir().unwrap();
        let src: Vec<u8> = (0..16 * 24).map(|i| i as u8).collect();
        let src_path = dir.path().join("src.raw");
        fs::write(&src_path, &src).unwrap();
        let ds = ingest(
            &src_path,
            &layout(Dtype::Uint12PackedLe, 16),
            &dir.path().join("out"),
            16 * 24,
        )
        .unwrap();
        assert_eq!(ds.descriptor.partitions.len(), 1);
        assert_eq!(fs::read(ds.partition_path(&ds.descriptor.partitions[0])).unwrap(), src);
    }

    #[test]
    fn size_mismatch_reports_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let src_path = dir.path().join("src.raw");
        fs::write(&src_path, vec![0u8; 24 * 3 + 1]).unwrap();
        let e = ingest(&src_path, &layout(Dtype::Uint12PackedLe, 3), dir.path(), 1 << 20)
            .unwrap_err();
        assert!(matches!(e, DatasetError::SizeMismatch { expected: 72, actual: 73 }));
        assert!(e.to_string().contains("73") && e.to_string().contains("72"));
    }

    #[test]
    fn synthetic_periodicity() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..2 * 32).map(|i| i as u8).collect();
        let base =
            write_raw_dataset(&dir.path().join("base"), &layout(Dtype::Uint16Le, 2), &data, 32)
                .unwrap();
        let same = generate_synthetic(&base, 1, &dir.path().join("r1"), 1 << 20).unwrap();
        assert_eq!(concat_partitions(&same), data);

        let tiled = generate_synthetic(&base, 3, &dir.path().join("r3"), 64).unwrap();
        assert_eq!(tiled.descriptor.scan_shape, vec![6]);
        let bytes = concat_partitions(&tiled);
        for i in 0..6 {
            assert_eq!(&bytes[i * 32..(i + 1) * 32], &data[(i % 2) * 32..(i % 2 + 1) * 32]);
        }
    }
}
