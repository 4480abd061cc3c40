//! Dataset ingestion, synthetic generators, class filtering, and
//! partitioning of a global dataset into user-local datasets.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DpflError, Result};
use crate::seed;

/// One training or test example: a flat feature vector and a class index.
///
/// Feature length is constant across a dataset; image bytes are normalized
/// to `[0, 1]` at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A dataset with a fixed class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize) -> Result<Self> {
        let ds = Dataset {
            examples,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(DpflError::Config("num_classes must be positive".into()));
        }
        let dim = self.feature_dim();
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(DpflError::Shape(format!(
                    "example {i} has {} features, expected {dim}",
                    ex.features.len()
                )));
            }
            if ex.label >= self.num_classes {
                return Err(DpflError::Config(format!(
                    "example {i} has label {} but num_classes is {}",
                    ex.label, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }
}

/// How a global dataset was split across users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    Iid,
    ByLabelShard,
}

/// Disjoint per-user index lists covering the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub user_indices: Vec<Vec<usize>>,
    pub strategy: PartitionStrategy,
}

impl Partition {
    pub fn num_users(&self) -> usize {
        self.user_indices.len()
    }

    /// Checks disjointness and coverage against a dataset of `total` examples.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        let mut count = 0usize;
        for list in &self.user_indices {
            for &idx in list {
                if idx >= total {
                    return Err(DpflError::Config(format!(
                        "partition index {idx} out of range for {total} examples"
                    )));
                }
                if seen[idx] {
                    return Err(DpflError::Config(format!(
                        "partition index {idx} assigned to more than one user"
                    )));
                }
                seen[idx] = true;
                count += 1;
            }
        }
        if count != total {
            return Err(DpflError::Config(format!(
                "partition covers {count} of {total} examples"
            )));
        }
        Ok(())
    }
}

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DpflError::format(field, "file truncated before field"));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label file pair (standard MNIST layout: big-endian
/// 32-bit magic and dimension sizes, then raw unsigned bytes).
///
/// Pixel bytes are scaled to `[0, 1]` by division by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledExample>> {
    let mut image_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut image_bytes)?;
    let mut label_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut label_bytes)?;
    parse_idx(&image_bytes, &label_bytes)
}

/// Parses IDX image and label byte streams. See [`load_idx`].
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Vec<LabeledExample>> {
    let image_magic = read_be_u32(image_bytes, 0, "image magic")?;
    if image_magic != IMAGE_MAGIC {
        return Err(DpflError::format(
            "image magic",
            format!("expected {IMAGE_MAGIC}, got {image_magic}"),
        ));
    }
    let label_magic = read_be_u32(label_bytes, 0, "label magic")?;
    if label_magic != LABEL_MAGIC {
        return Err(DpflError::format(
            "label magic",
            format!("expected {LABEL_MAGIC}, got {label_magic}"),
        ));
    }
    let image_count = read_be_u32(image_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(image_bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(image_bytes, 12, "image cols")? as usize;
    let label_count = read_be_u32(label_bytes, 4, "label count")? as usize;
    if image_count != label_count {
        return Err(DpflError::format(
            "image count",
            format!("image header count {image_count} != label header count {label_count}"),
        ));
    }
    let pixels = rows * cols;
    let expected = 16 + image_count * pixels;
    if image_bytes.len() != expected {
        return Err(DpflError::format(
            "image payload",
            format!("expected {expected} bytes, got {}", image_bytes.len()),
        ));
    }
    let expected_labels = 8 + label_count;
    if label_bytes.len() != expected_labels {
        return Err(DpflError::format(
            "label payload",
            format!("expected {expected_labels} bytes, got {}", label_bytes.len()),
        ));
    }
    let mut examples = Vec::with_capacity(image_count);
    for i in 0..image_count {
        let start = 16 + i * pixels;
        let features = image_bytes[start..start + pixels]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        examples.push(LabeledExample {
            features,
            label: label_bytes[8 + i] as usize,
        });
    }
    Ok(examples)
}

/// Serializes examples back into the IDX byte layout parsed by [`parse_idx`].
///
/// Features must lie on the `k/255` grid so parse -> write reproduces the
/// original byte stream exactly.
pub fn write_idx(
    examples: &[LabeledExample],
    rows: usize,
    cols: usize,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let pixels = rows * cols;
    let mut image_bytes = Vec::with_capacity(16 + examples.len() * pixels);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut label_bytes = Vec::with_capacity(8 + examples.len());
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    for (i, ex) in examples.iter().enumerate() {
        if ex.features.len() != pixels {
            return Err(DpflError::Shape(format!(
                "example {i} has {} features, expected {rows}x{cols}",
                ex.features.len()
            )));
        }
        for &f in &ex.features {
            if !(0.0..=1.0).contains(&f) {
                return Err(DpflError::format(
                    "image payload",
                    format!("feature value {f} outside [0, 1]"),
                ));
            }
            image_bytes.push((f * 255.0).round() as u8);
        }
        if ex.label > u8::MAX as usize {
            return Err(DpflError::format("label payload", "label exceeds one byte"));
        }
        label_bytes.push(ex.label as u8);
    }
    Ok((image_bytes, label_bytes))
}

/// Draws `n` examples from `classes` isotropic unit-variance Gaussians whose
/// means sit on feature axis 0 at pairwise distance `separation`.
///
/// Classes are assigned round-robin, so every class is populated whenever
/// `n >= classes`. Deterministic given `seed`.
pub fn synthesize_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(DpflError::Config(format!(
            "need at least one example per class (n = {n}, classes = {classes})"
        )));
    }
    if dim == 0 {
        return Err(DpflError::Config("dimension must be at least 1".into()));
    }
    if !(separation > 0.0) {
        return Err(DpflError::Config(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::DATA]));
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let center = (label as f64 - (classes as f64 - 1.0) / 2.0) * separation;
        let mut features = Vec::with_capacity(dim);
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(if d == 0 { center + noise } else { noise });
        }
        examples.push(LabeledExample { features, label });
    }
    Dataset::new(examples, classes)
}

/// Keeps only examples of `class_a` and `class_b`, remapping labels to 0/1.
pub fn filter_binary(data: &Dataset, class_a: usize, class_b: usize) -> Result<Dataset> {
    if class_a == class_b {
        return Err(DpflError::Config(format!(
            "binary classes must differ, got {class_a} twice"
        )));
    }
    let mut examples = Vec::new();
    let mut seen = [false; 2];
    for ex in &data.examples {
        let label = if ex.label == class_a {
            0
        } else if ex.label == class_b {
            1
        } else {
            continue;
        };
        seen[label] = true;
        examples.push(LabeledExample {
            features: ex.features.clone(),
            label,
        });
    }
    for (bit, class) in [(0, class_a), (1, class_b)] {
        if !seen[bit] {
            return Err(DpflError::Config(format!(
                "class {class} has no members in the dataset"
            )));
        }
    }
    Dataset::new(examples, 2)
}

fn split_near_equal(indices: Vec<usize>, n_users: usize) -> Vec<Vec<usize>> {
    let total = indices.len();
    let base = total / n_users;
    let remainder = total % n_users;
    let mut out = Vec::with_capacity(n_users);
    let mut cursor = 0;
    for user in 0..n_users {
        // Remainder examples go to the lowest-indexed users.
        let size = base + usize::from(user < remainder);
        out.push(indices[cursor..cursor + size].to_vec());
        cursor += size;
    }
    out
}

/// Splits shuffled indices into `n_users` near-equal lists (sizes differ by
/// at most one, remainder to the lowest-indexed users). Deterministic given
/// `seed`.
pub fn partition_iid(data: &Dataset, n_users: usize, seed_value: u64) -> Result<Partition> {
    if n_users == 0 {
        return Err(DpflError::Config("need at least one user".into()));
    }
    if n_users > data.len() {
        return Err(DpflError::Config(format!(
            "cannot split {} examples across {n_users} users",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[seed::DATA, 1]));
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    Ok(Partition {
        user_indices: split_near_equal(indices, n_users),
        strategy: PartitionStrategy::Iid,
    })
}

/// Non-iid split: indices sorted by label are cut into contiguous shards,
/// so each user sees only one or two classes. The shard-to-user assignment
/// is shuffled by `seed`.
pub fn partition_by_label_shard(
    data: &Dataset,
    n_users: usize,
    seed_value: u64,
) -> Result<Partition> {
    if n_users == 0 {
        return Err(DpflError::Config("need at least one user".into()));
    }
    if n_users > data.len() {
        return Err(DpflError::Config(format!(
            "cannot split {} examples across {n_users} users",
            data.len()
        )));
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.sort_by_key(|&i| (data.examples[i].label, i));
    let mut shards = split_near_equal(indices, n_users);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[seed::DATA, 2]));
    shards.shuffle(&mut rng);
    Ok(Partition {
        user_indices: shards,
        strategy: PartitionStrategy::ByLabelShard,
    })
}
