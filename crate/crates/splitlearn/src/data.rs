//! Dataset ingestion (IDX files, synthetic gratings) and the non-IID class
//! partition that hands disjoint class subsets to each client.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Rng, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad IDX magic {got:#010x} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("{path}: file truncated ({needed} bytes needed, {got} present)")]
    Truncated {
        path: PathBuf,
        needed: usize,
        got: usize,
    },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("client {client} receives no samples from its classes {classes:?}")]
    EmptyClientSlice { client: u32, classes: Vec<usize> },
    #[error("partition classes {0:?} are not pairwise disjoint")]
    OverlappingClasses(Vec<usize>),
    #[error("partition lists class {class} but the dataset only has classes 0..{num_classes}")]
    UnknownClass { class: usize, num_classes: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Images in `[N, C, H, W]` layout, pixels normalized to [0, 1], labels in
/// the global class space.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy out the samples at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let (c, h, w) = self.image_shape();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..][..sample]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("gather shape"),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&indices)
    }

    /// Batch tensor plus labels for the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.gather(indices);
        (d.images, d.labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            needed: offset + 4,
            got: bytes.len(),
        })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image/label file pair (the MNIST distribution format):
/// big-endian u32 magic and dims, u8 pixels normalized to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = read_be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let h = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let w = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let needed = 16 + n * h * w;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            needed,
            got: img_bytes.len(),
        });
    }

    let label_bytes = read_file(labels_path)?;
    let magic = read_be_u32(&label_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_be_u32(&label_bytes, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let needed = 8 + n;
    if label_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            needed,
            got: label_bytes.len(),
        });
    }
    if n == 0 {
        return Err(DataError::Empty);
    }

    let data: Vec<f32> = img_bytes[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data).expect("idx shape"),
        labels,
        num_classes,
    })
}

/// Class-conditional synthetic images: each class is a sine grating with its
/// own frequency and orientation, plus per-sample phase and seeded noise.
/// Deterministic per seed; classes are balanced round-robin.
pub fn synthetic(num_samples: usize, num_classes: usize, image_size: usize, seed: u64) -> Dataset {
    assert!(num_samples > 0 && num_classes > 0 && image_size > 0);
    let base = Rng::new(seed).derive("synthetic");
    let mut data = Vec::with_capacity(num_samples * image_size * image_size);
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let class = i % num_classes;
        let mut rng = base.derive_index(i as u64);
        let theta = std::f64::consts::PI * class as f64 / num_classes as f64;
        let freq = 2.0 + 0.7 * class as f64;
        let phase = rng.next_f64() * std::f64::consts::TAU;
        let (sin_t, cos_t) = theta.sin_cos();
        for y in 0..image_size {
            for x in 0..image_size {
                let u = x as f64 / image_size as f64;
                let v = y as f64 / image_size as f64;
                let wave = (std::f64::consts::TAU * freq * (u * cos_t + v * sin_t) + phase).sin();
                let noise = rng.next_symmetric(0.04);
                let value = (0.5 + 0.35 * wave + noise).clamp(0.0, 1.0);
                data.push(value as f32);
            }
        }
        labels.push(class);
    }
    Dataset {
        images: Tensor::new(vec![num_samples, 1, image_size, image_size], data)
            .expect("synthetic shape"),
        labels,
        num_classes,
    }
}

/// Ordered class list per client; the order defines the local label mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    pub classes: BTreeMap<u32, Vec<usize>>,
}

impl PartitionSpec {
    /// Contiguous class chunks over `0..num_classes`, earlier clients taking
    /// the remainder: 10 classes over 3 clients gives 0–3 / 4–6 / 7–9.
    pub fn contiguous(num_clients: u32, num_classes: usize) -> PartitionSpec {
        let mut classes = BTreeMap::new();
        let base = num_classes / num_clients as usize;
        let extra = num_classes % num_clients as usize;
        let mut next = 0;
        for client in 1..=num_clients {
            let count = base + usize::from((client as usize) <= extra);
            classes.insert(client, (next..next + count).collect());
            next += count;
        }
        classes.retain(|_, v: &mut Vec<usize>| !v.is_empty());
        PartitionSpec { classes }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        let mut seen = Vec::new();
        for classes in self.classes.values() {
            for &class in classes {
                if class >= num_classes {
                    return Err(DataError::UnknownClass { class, num_classes });
                }
                if seen.contains(&class) {
                    return Err(DataError::OverlappingClasses(seen));
                }
                seen.push(class);
            }
        }
        Ok(())
    }
}

/// Give each client exactly the samples of its classes, with labels remapped
/// to local indices by position in the client's class list.
pub fn partition(
    dataset: &Dataset,
    spec: &PartitionSpec,
) -> Result<BTreeMap<u32, Dataset>, DataError> {
    spec.validate(dataset.num_classes)?;
    let mut out = BTreeMap::new();
    for (&client, classes) in &spec.classes {
        let indices: Vec<usize> = dataset
            .labels
            .iter()
            .enumerate()
            .filter(|(_, label)| classes.contains(label))
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(DataError::EmptyClientSlice {
                client,
                classes: classes.clone(),
            });
        }
        let mut slice = dataset.gather(&indices);
        for label in slice.labels.iter_mut() {
            *label = classes.iter().position(|c| c == label).unwrap();
        }
        slice.num_classes = classes.len();
        out.insert(client, slice);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        // 10 samples, labels 0..9, each image filled with its label value.
        let n = 10;
        let mut data = Vec::new();
        for i in 0..n {
            data.extend(std::iter::repeat(i as f32 / 10.0).take(4));
        }
        Dataset {
            images: Tensor::new(vec![n, 1, 2, 2], data).unwrap(),
            labels: (0..n).collect(),
            num_classes: 10,
        }
    }

    #[test]
    fn contiguous_partition_matches_paper_split() {
        let spec = PartitionSpec::contiguous(3, 10);
        assert_eq!(spec.classes[&1], vec![0, 1, 2, 3]);
        assert_eq!(spec.classes[&2], vec![4, 5, 6]);
        assert_eq!(spec.classes[&3], vec![7, 8, 9]);
    }

    #[test]
    fn partition_remaps_labels_in_class_order() {
        let ds = toy_dataset();
        let spec = PartitionSpec::contiguous(3, 10);
        let parts = partition(&ds, &spec).unwrap();
        assert_eq!(parts[&1].labels, vec![0, 1, 2, 3]);
        assert_eq!(parts[&2].labels, vec![0, 1, 2]);
        assert_eq!(parts[&3].labels, vec![0, 1, 2]);
        assert_eq!(parts[&1].num_classes, 4);
        let total: usize = parts.values().map(|d| d.len()).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn singleton_partition_is_identity() {
        let ds = toy_dataset();
        let spec = PartitionSpec {
            classes: BTreeMap::from([(1u32, (0..10).collect::<Vec<_>>())]),
        };
        let parts = partition(&ds, &spec).unwrap();
        assert_eq!(parts[&1].labels, ds.labels);
        assert_eq!(parts[&1].images, ds.images);
    }

    #[test]
    fn partition_rejects_overlap_and_unknown_classes() {
        let ds = toy_dataset();
        let overlapping = PartitionSpec {
            classes: BTreeMap::from([(1u32, vec![0, 1]), (2, vec![1, 2])]),
        };
        assert!(matches!(
            partition(&ds, &overlapping),
            Err(DataError::OverlappingClasses(_))
        ));
        let unknown = PartitionSpec {
            classes: BTreeMap::from([(1u32, vec![0, 42])]),
        };
        assert!(matches!(
            partition(&ds, &unknown),
            Err(DataError::UnknownClass { class: 42, .. })
        ));
    }

    #[test]
    fn partition_rejects_empty_client_slice() {
        let mut ds = toy_dataset();
        ds.labels = vec![0; 10]; // only class 0 present
        let spec = PartitionSpec {
            classes: BTreeMap::from([(1u32, vec![0]), (2, vec![5])]),
        };
        assert!(matches!(
            partition(&ds, &spec),
            Err(DataError::EmptyClientSlice { client: 2, .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = synthetic(20, 4, 8, 7);
        let b = synthetic(20, 4, 8, 7);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synthetic(20, 4, 8, 8);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_classes_have_distinct_mean_images() {
        let ds = synthetic(200, 4, 8, 3);
        let (c, h, w) = ds.image_shape();
        let sample = c * h * w;
        let mut means = vec![vec![0.0f64; sample]; 4];
        let mut counts = [0usize; 4];
        for (i, &label) in ds.labels.iter().enumerate() {
            counts[label] += 1;
            for j in 0..sample {
                means[label][j] += ds.images.data()[i * sample + j] as f64;
            }
        }
        for (mean, &count) in means.iter_mut().zip(&counts) {
            for v in mean.iter_mut() {
                *v /= count as f64;
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(dist > 0.05, "classes {a} and {b} look alike: {dist}");
            }
        }
    }

    #[test]
    fn synthetic_pixels_are_normalized() {
        let ds = synthetic(50, 10, 28, 1);
        assert!(ds
            .images
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}
