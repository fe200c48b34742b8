use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{DatasetDescriptor, DatasetError, Partition};

/// Default partition size, the lower end of the range that keeps one
/// partition's processing near 100 ms on a warm cache.
pub const DEFAULT_PARTITION_BYTES: u64 = 256 * 1024 * 1024;

/// Per-partition processing time the GUI aims for.
pub const DEFAULT_TIME_BUDGET: Duration = Duration::from_millis(100);

/// Partition size a reader sustaining `bytes_per_s` processes within
/// `budget`, in whole frames and never below one frame.
pub fn partition_bytes_for_budget(bytes_per_s: f64, budget: Duration, frame_bytes: u64) -> u64 {
    let frame_bytes = frame_bytes.max(1);
    let raw = (bytes_per_s.max(0.0) * budget.as_secs_f64()) as u64;
    (raw / frame_bytes).max(1) * frame_bytes
}

/// Splits the frame range into partitions of `floor(target / frame_bytes)`
/// frames each, the last one holding the remainder. Each partition lives in
/// its own file, `part-NNNNN.raw`.
pub fn plan_partitions(
    descriptor: &DatasetDescriptor,
    target_partition_bytes: u64,
) -> Result<Vec<Partition>, DatasetError> {
    plan_with(descriptor, target_partition_bytes, |index, _| {
        (partition_file_name(index), 0)
    })
}

/// Same split, but every partition is a byte range of one shared file.
pub fn plan_partitions_in_file(
    descriptor: &DatasetDescriptor,
    target_partition_bytes: u64,
    file: &Path,
) -> Result<Vec<Partition>, DatasetError> {
    let bpf = frame_bytes(descriptor)?;
    plan_with(descriptor, target_partition_bytes, |_, frame_start| {
        (file.to_path_buf(), frame_start * bpf)
    })
}

pub(crate) fn partition_file_name(index: usize) -> PathBuf {
    PathBuf::from(format!("part-{index:05}.raw"))
}

fn frame_bytes(descriptor: &DatasetDescriptor) -> Result<u64, DatasetError> {
    descriptor
        .dtype
        .encoded_len(descriptor.sig_pixels() as u64)
        .filter(|&b| b > 0)
        .ok_or_else(|| {
            DatasetError::Invalid("uint12_packed_le requires an even pixel count per frame".into())
        })
}

fn plan_with(
    descriptor: &DatasetDescriptor,
    target_partition_bytes: u64,
    mut place: impl FnMut(usize, u64) -> (PathBuf, u64),
) -> Result<Vec<Partition>, DatasetError> {
    let total = descriptor.total_frames();
    if total == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let bpf = frame_bytes(descriptor)?;
    if target_partition_bytes < bpf {
        return Err(DatasetError::TargetBelowFrameSize {
            target: target_partition_bytes,
            frame: bpf,
        });
    }
    let per_partition = (target_partition_bytes / bpf).max(1);
    let count = total.div_ceil(per_partition);
    let mut partitions = Vec::with_capacity(count as usize);
    let mut frame_start = 0;
    while frame_start < total {
        let frame_count = per_partition.min(total - frame_start);
        let index = partitions.len();
        let (file_path, byte_offset) = place(index, frame_start);
        partitions.push(Partition {
            index,
            frame_start,
            frame_count,
            file_path,
            byte_offset,
            byte_length: frame_count * bpf,
            preferred_nodes: Vec::new(),
        });
        frame_start += frame_count;
    }
    Ok(partitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dtype;
    use proptest::prelude::*;

    /// Marks every frame covered by the plan; each must be hit exactly once.
    fn coverage_scan(parts: &[Partition], total: u64) -> Vec<u32> {
        let mut hits = vec![0u32; total as usize];
        for p in parts {
            for f in p.frame_start..p.frame_end() {
                hits[f as usize] += 1;
            }
        }
        hits
    }

    #[test]
    fn thousand_frames_quarter_mib() {
        // 1024 B/frame: 256 f32 pixels.
        let d = DatasetDescriptor::new(Dtype::Float32Le, vec![1000], vec![16, 16]);
        let parts = plan_partitions(&d, 262_144).unwrap();
        let counts: Vec<u64> = parts.iter().map(|p| p.frame_count).collect();
        assert_eq!(counts, vec![256, 256, 256, 232]);
        assert!(coverage_scan(&parts, 1000).iter().all(|&h| h == 1));
    }

    #[test]
    fn single_frame() {
        let d = DatasetDescriptor::new(Dtype::Uint16Le, vec![1], vec![8, 8]);
        let parts = plan_partitions(&d, 1 << 20).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].frame_count, 1);
    }

    #[test]
    fn large_scan_512_mib() {
        let d = DatasetDescriptor::new(Dtype::Float32Le, vec![10240, 768], vec![128, 128]);
        assert_eq!(d.total_bytes(), 480 << 30);
        let parts = plan_partitions(&d, 512 << 20).unwrap();
        assert_eq!(parts.len(), 960);
        assert!(parts.iter().all(|p| p.frame_count == 8192));
    }

    #[test]
    fn budget_sizing() {
        let ms100 = Duration::from_millis(100);
        // 1 GiB/s for 100 ms, 64 KiB frames: 1638 whole frames
        assert_eq!(partition_bytes_for_budget((1u64 << 30) as f64, ms100, 65536), 1638 * 65536);
        assert_eq!(partition_bytes_for_budget(10.0, ms100, 4096), 4096);
        assert_eq!(partition_bytes_for_budget(f64::NAN, ms100, 4096), 4096);
    }

    #[test]
    fn errors() {
        let d = DatasetDescriptor::new(Dtype::Float32Le, vec![0], vec![4, 4]);
        assert!(matches!(plan_partitions(&d, 1024), Err(DatasetError::EmptyDataset)));
        let d = DatasetDescriptor::new(Dtype::Float32Le, vec![3], vec![4, 4]);
        let e = plan_partitions(&d, 63).unwrap_err();
        assert!(e.to_string().starts_with("target below frame size"));
    }

    #[test]
    fn single_file_offsets() {
        let d = DatasetDescriptor::new(Dtype::Uint12PackedLe, vec![5], vec![2, 3]);
        let parts = plan_partitions_in_file(&d, 18, Path::new("data.raw")).unwrap();
        let offsets: Vec<u64> = parts.iter().map(|p| p.byte_offset).collect();
        assert_eq!(offsets, vec![0, 18, 36]);
        assert!(parts.iter().all(|p| p.byte_offset % 3 == 0 && p.byte_length % 3 == 0));
    }

    proptest! {
        #[test]
        fn plans_cover_exactly_once(
            frames in 1u64..2000,
            pixels_half in 1usize..64,
            mult in 1u64..300,
            dtype in prop_oneof![Just(Dtype::Float32Le), Just(Dtype::Uint16Le), Just(Dtype::Uint12PackedLe)],
        ) {
            let mut d = DatasetDescriptor::new(dtype, vec![frames as usize], vec![2, pixels_half]);
            let bpf = d.bytes_per_frame();
            let target = bpf * mult + mult % 7;
            let parts = plan_partitions(&d, target).unwrap();
            prop_assert!(coverage_scan(&parts, frames).iter().all(|&h| h == 1));
            let per = target / bpf;
            for p in &parts[..parts.len() - 1] {
                prop_assert_eq!(p.frame_count, per);
            }
            for p in &parts {
                prop_assert_eq!(p.byte_length % bpf, 0);
                if dtype == Dtype::Uint12PackedLe {
                    prop_assert_eq!(p.byte_length % 3, 0);
                }
            }
            d.partitions = parts;
            prop_assert!(d.validate().is_ok());
        }
    }
}
