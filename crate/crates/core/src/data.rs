//! Datasets: MNIST IDX ingestion, index-based views, folds and synthetic blobs.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

#[derive(Debug)]
struct Storage {
    example_shape: Vec<usize>,
    example_len: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

/// Labelled examples. Cloning and subsetting share the underlying storage.
#[derive(Debug, Clone)]
pub struct Dataset {
    storage: Arc<Storage>,
    indices: Arc<[usize]>,
    tag: String,
}

impl Dataset {
    pub fn from_parts(
        example_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let example_len: usize = example_shape.iter().product();
        if example_len == 0 || features.len() != example_len * labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature values for {} examples of shape {example_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} outside {num_classes} classes")));
        }
        let indices: Arc<[usize]> = (0..labels.len()).collect();
        Ok(Dataset {
            storage: Arc::new(Storage {
                example_shape,
                example_len,
                features,
                labels,
                num_classes,
            }),
            indices,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.storage.example_shape
    }

    pub fn num_classes(&self) -> usize {
        self.storage.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        let s = &self.storage;
        let base = self.indices[i] * s.example_len;
        &s.features[base..base + s.example_len]
    }

    pub fn label(&self, i: usize) -> usize {
        self.storage.labels[self.indices[i]]
    }

    /// Index of view position `i` in the originally loaded collection.
    pub fn source_index(&self, i: usize) -> usize {
        self.indices[i]
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.indices
    }

    /// View restricted to `positions` (relative to this view).
    pub fn subset(&self, positions: &[usize], tag: impl Into<String>) -> Dataset {
        Dataset {
            storage: Arc::clone(&self.storage),
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
            tag: tag.into(),
        }
    }

    /// First `n` examples (or all, when fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let positions: Vec<usize> = (0..n).collect();
        self.subset(&positions, self.tag.clone())
    }

    /// Splits off the last `fraction` of the view.
    pub fn split_tail(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Contract(format!("split fraction {fraction} outside [0, 1)")));
        }
        let n_tail = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - n_tail;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head, "train"), self.subset(&tail, "val")))
    }

    /// Concatenated features and labels for view positions `positions`.
    pub fn gather(&self, positions: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(positions.len() * self.storage.example_len);
        let mut ys = Vec::with_capacity(positions.len());
        for &p in positions {
            xs.extend_from_slice(self.features(p));
            ys.push(self.label(p));
        }
        (xs, ys)
    }

    /// Per-class example counts.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for i in 0..self.len() {
            counts[self.label(i)] += 1;
        }
        counts
    }

    /// Writes `f0,..,fN,label` rows.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let width = self.storage.example_len;
        let header: Vec<String> = (0..width).map(|j| format!("f{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for i in 0..self.len() {
            for v in self.features(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.label(i)));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Maps a standardized pixel back to `raw / 255`.
pub fn denormalize_pixel(v: f64) -> f64 {
    v * MNIST_STD + MNIST_MEAN
}

fn normalize_pixel(raw: u8) -> f64 {
    (raw as f64 / 255.0 - MNIST_MEAN) / MNIST_STD
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("length error: header truncated at byte {offset}")))
}

/// Parses an IDX3 image file into `(count, rows, cols, standardized pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad image magic {magic}, expected {IMAGE_MAGIC}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!("length error: {} pixel bytes, expected {expected}", payload.len()),
        ));
    }
    let pixels = payload[..expected].iter().map(|&p| normalize_pixel(p)).collect();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic {magic}, expected {LABEL_MAGIC}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format(
            path,
            format!("length error: {} label bytes, expected {n}", payload.len()),
        ));
    }
    Ok(payload[..n].iter().map(|&l| l as usize).collect())
}

fn load_pair(dir: &Path, prefix: &str, tag: &str) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let img = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let lbl = fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img, &img_path)?;
    let labels = parse_idx_labels(&lbl, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::format(
            &lbl_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    Dataset::from_parts(vec![1, rows, cols], pixels, labels, 10, tag)
}

/// Loads the four standard MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_pair(dir, "train", "train")?, load_pair(dir, "t10k", "test")?))
}

/// One cross-validation fold, as positions into the folded dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffles `0..n` and partitions it into `k` folds; the first `n % k` folds
/// get one extra element.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Contract(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Contract(format!("k-fold with k={k} exceeds {n} examples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "folds", 0));
    let (base, extra) = (n / k, n % k);
    let mut chunks = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        chunks.push(&order[start..start + len]);
        start += len;
    }
    let folds = (0..k)
        .map(|i| Fold {
            validation: chunks[i].to_vec(),
            train: chunks
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, c)| c.iter().copied())
                .collect(),
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

/// Isotropic unit-variance Gaussian blobs. Class `c` is centred at
/// `separation * (1 + c / dims)` along axis `c % dims`. Examples are
/// interleaved by class.
pub fn synthetic_blobs(
    n_per_class: usize,
    classes: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation <= 0.0 || !separation.is_finite() {
        return Err(Error::Contract(format!("blob separation must be positive, got {separation}")));
    }
    if classes < 2 || dims == 0 {
        return Err(Error::Contract(format!("need >= 2 classes and >= 1 dims, got {classes}, {dims}")));
    }
    let mut r = rng::stream(seed, "blobs", 0);
    let mut features = Vec::with_capacity(n_per_class * classes * dims);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for c in 0..classes {
            for j in 0..dims {
                let center = if j == c % dims {
                    separation * (1.0 + (c / dims) as f64)
                } else {
                    0.0
                };
                let noise: f64 = StandardNormal.sample(&mut r);
                features.push(center + noise);
            }
            labels.push(c);
        }
    }
    Dataset::from_parts(vec![dims], features, labels, classes, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn parses_hand_made_fixture() {
        let pixels = [0u8, 255, 128, 64, 1, 2, 3, 4];
        let bytes = idx_images(2, 2, 2, &pixels);
        let (n, r, c, data) = parse_idx_images(&bytes, Path::new("fixture")).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        for (v, &p) in data.iter().zip(&pixels) {
            assert!((denormalize_pixel(*v) - p as f64 / 255.0).abs() < 1e-12);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&lbl, Path::new("fixture")).unwrap(), vec![7, 3]);
    }

    #[test]
    fn wrong_magic_reports_observed_value() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x01; // 2049: a label file handed to the image parser
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("2049"), "{err}");
        let err = parse_idx_labels(&idx_images(1, 1, 1, &[0]), Path::new("x"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("2051"), "{err}");
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = idx_images(2, 2, 2, &[0, 1, 2]);
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("length"), "{err}");
        let err = parse_idx_images(&bytes[..10], Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("length"), "{err}");
    }

    #[test]
    fn kfold_examples() {
        let plan = kfold(9, 3, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.validation.len() == 3 && f.train.len() == 6));
        let mut all: Vec<usize> = plan.folds.iter().flat_map(|f| f.validation.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(plan, kfold(9, 3, 1).unwrap());
        let sizes: Vec<usize> = kfold(10, 3, 5).unwrap().folds.iter().map(|f| f.validation.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert!(kfold(2, 3, 0).is_err());
        assert!(kfold(5, 1, 0).is_err());
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let d = synthetic_blobs(25, 3, 2, 10.0, 4).unwrap();
        assert_eq!(d.label_counts(), vec![25, 25, 25]);
        let e = synthetic_blobs(25, 3, 2, 10.0, 4).unwrap();
        assert_eq!(d.gather(&[0, 1, 2]), e.gather(&[0, 1, 2]));
        assert!(synthetic_blobs(1, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn views_share_storage_and_track_sources() {
        let d = synthetic_blobs(10, 2, 2, 5.0, 0).unwrap();
        let (train, val) = d.split_tail(0.1).unwrap();
        assert_eq!((train.len(), val.len()), (18, 2));
        assert_eq!(val.source_indices(), &[18, 19]);
        let sub = train.subset(&[3, 1], "x");
        assert_eq!(sub.source_indices(), &[3, 1]);
        assert_eq!(sub.features(0), d.features(3));
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let d = synthetic_blobs(2, 2, 3, 5.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.csv");
        d.export_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("f0,f1,f2,label"));
    }

    proptest::proptest! {
        #[test]
        fn folds_partition_the_index_set(n in 2usize..200, k in 2usize..10, seed in 0u64..1000) {
            proptest::prop_assume!(k <= n);
            let plan = kfold(n, k, seed).unwrap();
            let mut seen = vec![0usize; n];
            for f in &plan.folds {
                for &i in &f.validation { seen[i] += 1; }
                let mut both: Vec<usize> = f.train.iter().chain(&f.validation).copied().collect();
                both.sort_unstable();
                proptest::prop_assert_eq!(both, (0..n).collect::<Vec<_>>());
            }
            proptest::prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
