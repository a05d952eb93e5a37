//! Dataset loading (MNIST IDX, CIFAR-10 binary), fixture writers, permuted
//! tasks, warm-up splits, and seeded minibatch order.
//!
//! Pixels are scaled `b / 255.0` into `[0, 1]`. Files ending in `.gz` (or
//! starting with the gzip magic) are decompressed transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{Purpose, RngStream};

pub const NUM_CLASSES: usize = 10;
pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub source: String,
}

impl LabeledDataset {
    pub fn new(images: Matrix, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: NUM_CLASSES,
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source: self.source.clone(),
        }
    }

    /// Seeded random subset of `n` samples, kept in original order.
    pub fn subset(&self, n: usize, seed: u64) -> LabeledDataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = RngStream::new(seed, Purpose::Subset, 0).permutation(self.len());
        idx.truncate(n);
        idx.sort_unstable();
        let mut out = self.select(&idx);
        out.source = format!("{}[subset {n}]", self.source);
        out
    }

    /// Seeded disjoint `(train, holdout)` split with `holdout_n` held out.
    pub fn holdout_split(&self, holdout_n: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let holdout_n = holdout_n.min(self.len());
        let perm = RngStream::new(seed, Purpose::Subset, 1).permutation(self.len());
        let mut test: Vec<usize> = perm[..holdout_n].to_vec();
        let mut train: Vec<usize> = perm[holdout_n..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (self.select(&train), self.select(&test))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("header needs {} bytes", offset + 4),
        })
}

/// Parses an IDX image file and its label file.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            expected: MNIST_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let dim = rows * cols;
    let need = 16 + n * dim;
    if img.len() < need {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            offset: img.len() as u64,
            detail: format!("{n} images of {rows}x{cols} need {need} bytes"),
        });
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            expected: MNIST_LABEL_MAGIC,
            found: magic,
        });
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    if lab.len() < 8 + n {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            offset: lab.len() as u64,
            detail: format!("{n} labels need {} bytes", 8 + n),
        });
    }

    let data = img[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = lab[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    LabeledDataset::new(
        Matrix::new(n, dim, data)?,
        labels,
        format!("mnist:{}", images_path.display()),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CifarOptions {
    /// Subtract each channel's mean (over the loaded set) after scaling.
    pub normalize_channel_means: bool,
}

/// Reads CIFAR-10 binary batches: 3073-byte records, label byte then
/// 1024 R, 1024 G, 1024 B pixels.
pub fn load_cifar10_binary(paths: &[PathBuf], opts: CifarOptions) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(Error::Truncated {
                path: path.clone(),
                offset: whole as u64,
                detail: format!(
                    "file size {} is not a multiple of {CIFAR_RECORD}; partial record starts here",
                    bytes.len()
                ),
            });
        }
        for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let y = usize::from(rec[0]);
            if y >= NUM_CLASSES {
                return Err(Error::Truncated {
                    path: path.clone(),
                    offset: (k * CIFAR_RECORD) as u64,
                    detail: format!("label byte {y} out of range"),
                });
            }
            labels.push(y);
            data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    let mut images = Matrix::new(n, CIFAR_PIXELS, data)?;
    if opts.normalize_channel_means && n > 0 {
        let means = channel_means(&images);
        subtract_channel_means(&mut images, &means);
    }
    let source = paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    LabeledDataset::new(images, labels, format!("cifar10:{source}"))
}

/// Mean of each of the three planar colour channels.
pub fn channel_means(images: &Matrix) -> [f64; 3] {
    let plane = CIFAR_PIXELS / 3;
    let mut sums = [0.0; 3];
    for r in 0..images.rows() {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += images.row(r)[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    let denom = (images.rows() * plane) as f64;
    sums.map(|s| s / denom)
}

pub fn subtract_channel_means(images: &mut Matrix, means: &[f64; 3]) {
    let plane = CIFAR_PIXELS / 3;
    for r in 0..images.rows() {
        for (ch, m) in means.iter().enumerate() {
            images.row_mut(r)[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v -= m);
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let result = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)
            .and_then(|_| enc.finish())
            .and_then(|buf| fs::write(path, buf))
    } else {
        fs::write(path, bytes)
    };
    result.map_err(|e| Error::io(path, e))
}

/// Writes an IDX image/label pair. `pixels` holds `labels.len() * rows * cols`
/// bytes, image after image.
pub fn write_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} pixel bytes for {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [MNIST_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    write_bytes(images_path, &img)?;
    write_bytes(labels_path, &lab)
}

/// Writes one CIFAR-10 binary batch. `pixels` holds 3072 planar bytes per label.
pub fn write_cifar10_binary(path: &Path, pixels: &[u8], labels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "{} pixel bytes for {} CIFAR records",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (y, px) in labels.iter().zip(pixels.chunks_exact(CIFAR_PIXELS)) {
        out.push(*y);
        out.extend_from_slice(px);
    }
    write_bytes(path, &out)
}

/// Re-encodes 28x28 grayscale digits as CIFAR records: centred on a 32x32
/// canvas and copied into all three colour planes. Returns `(pixels, labels)`.
pub fn grayscale_to_cifar_records(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.dim() != 784 {
        return Err(Error::InvalidArgument(format!(
            "expected 28x28 images, got dimension {}",
            ds.dim()
        )));
    }
    let mut pixels = Vec::with_capacity(ds.len() * CIFAR_PIXELS);
    for r in 0..ds.len() {
        let src = ds.images.row(r);
        let mut plane = [0u8; 1024];
        for y in 0..28 {
            for x in 0..28 {
                plane[(y + 2) * 32 + x + 2] = (src[y * 28 + x] * 255.0).round() as u8;
            }
        }
        for _ in 0..3 {
            pixels.extend_from_slice(&plane);
        }
    }
    let labels = ds.labels.iter().map(|&y| y as u8).collect();
    Ok((pixels, labels))
}

/// A fixed pixel permutation: `out[j] = in[permutation[j]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutedTask {
    pub task_index: usize,
    pub permutation: Vec<usize>,
    pub seed: u64,
}

impl PermutedTask {
    /// Draws the permutation for `(seed, task_index)`. Task 0 is the identity
    /// when `identity_first` is set.
    pub fn new(dim: usize, task_index: usize, seed: u64, identity_first: bool) -> Self {
        let permutation = if task_index == 0 && identity_first {
            (0..dim).collect()
        } else {
            RngStream::new(seed, Purpose::Permutation, task_index as u64).permutation(dim)
        };
        PermutedTask {
            task_index,
            permutation,
            seed,
        }
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (j, &src) in self.permutation.iter().enumerate() {
            inv[src] = j;
        }
        inv
    }

    pub fn apply(&self, images: &Matrix) -> Result<Matrix> {
        permute_columns(images, &self.permutation)
    }
}

pub fn permute_columns(images: &Matrix, permutation: &[usize]) -> Result<Matrix> {
    if permutation.len() != images.cols() {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} for images of dimension {}",
            permutation.len(),
            images.cols()
        )));
    }
    let mut out = Matrix::zeros(images.rows(), images.cols());
    for r in 0..images.rows() {
        let src = images.row(r);
        for (o, &p) in out.row_mut(r).iter_mut().zip(permutation) {
            *o = src[p];
        }
    }
    Ok(out)
}

/// The permuted copy of `base` for `(seed, task_index)`; labels are unchanged.
pub fn make_permuted_task(
    base: &LabeledDataset,
    task_index: usize,
    seed: u64,
    identity_first: bool,
) -> Result<(LabeledDataset, PermutedTask)> {
    let task = PermutedTask::new(base.dim(), task_index, seed, identity_first);
    let ds = LabeledDataset {
        images: task.apply(&base.images)?,
        labels: base.labels.clone(),
        source: format!("{}[task {task_index}]", base.source),
    };
    Ok((ds, task))
}

#[derive(Clone, Debug)]
pub struct WarmStartSplit {
    pub warmup: LabeledDataset,
    pub full: LabeledDataset,
    /// Ascending indices into `full` that make up `warmup`.
    pub warmup_indices: Vec<usize>,
    pub seed: u64,
}

/// Uniformly random half of `full` (without replacement, not stratified).
pub fn split_warmup(full: &LabeledDataset, seed: u64) -> Result<WarmStartSplit> {
    if full.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "warm-up split needs at least 2 samples, got {}",
            full.len()
        )));
    }
    let mut idx = RngStream::new(seed, Purpose::Split, 0).permutation(full.len());
    idx.truncate(full.len() / 2);
    idx.sort_unstable();
    let mut warmup = full.select(&idx);
    warmup.source = format!("{}[warm-up half]", full.source);
    Ok(WarmStartSplit {
        warmup,
        full: full.clone(),
        warmup_indices: idx,
        seed,
    })
}

/// Seeded shuffle of `0..n` for `(seed, epoch)`, cut into batches; the final
/// short batch is kept.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let order = RngStream::new(seed, Purpose::Shuffle, epoch as u64).permutation(n);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Deterministic class-structured grayscale images for fixtures and smoke
/// tests: each class lights a distinct band of pixels on top of seeded noise.
/// Returns `(pixels, labels)` suitable for [`write_mnist_idx`].
pub fn synthetic_digits(n: usize, side: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let dim = side * side;
    let mut rng = RngStream::new(seed, Purpose::Test, 0);
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % NUM_CLASSES;
        labels.push(y as u8);
        for p in 0..dim {
            let band = (p * NUM_CLASSES) / dim;
            let base = if band == y { 180.0 } else { 20.0 };
            let v = base + 60.0 * (rng.uniform() - 0.5);
            pixels.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    (pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_mnist_idx(&ip, &lp, 2, 2, &[0, 255, 0, 255, 255, 0, 255, 0], &[3, 9]).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), (2, 4));
        assert_eq!(ds.images.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.labels, vec![3, 9]);
    }

    #[test]
    fn idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_mnist_idx(&ip, &lp, 1, 1, &[0], &[0]).unwrap();
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x02;
        fs::write(&ip, bytes).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert!(matches!(err, Error::BadMagic { found: 0x0802, .. }));
    }

    #[test]
    fn idx_truncated_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_mnist_idx(&ip, &lp, 2, 2, &[1; 8], &[0, 1]).unwrap();
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Truncated { .. })));

        let lp2 = dir.path().join("l2.idx");
        let ip2 = dir.path().join("i2.idx");
        write_mnist_idx(&ip2, &lp2, 2, 2, &[1; 4], &[0]).unwrap();
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp2),
            Err(Error::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn gz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l.gz"));
        let (px, lb) = synthetic_digits(20, 4, 1);
        write_mnist_idx(&ip, &lp, 4, 4, &px, &lb).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.images.get(5, 3), f64::from(px[5 * 16 + 3]) / 255.0);
    }

    #[test]
    fn cifar_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        write_cifar10_binary(&p, &[255; CIFAR_PIXELS], &[7]).unwrap();
        let ds = load_cifar10_binary(&[p], CifarOptions::default()).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_truncated_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut bytes = vec![1u8; CIFAR_RECORD * 2];
        bytes.truncate(CIFAR_RECORD + 100);
        fs::write(&p, bytes).unwrap();
        match load_cifar10_binary(&[p], CifarOptions::default()) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_channel_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut px = vec![0u8; CIFAR_PIXELS * 2];
        px[..1024].fill(255);
        write_cifar10_binary(&p, &px, &[1, 2]).unwrap();
        let ds = load_cifar10_binary(
            &[p],
            CifarOptions {
                normalize_channel_means: true,
            },
        )
        .unwrap();
        let m = channel_means(&ds.images);
        assert!(m.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(ds.images.get(0, 0), 0.5);
    }

    #[test]
    fn task_zero_is_identity() {
        let ds = LabeledDataset::new(
            Matrix::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            vec![0, 1],
            "t",
        )
        .unwrap();
        let (t0, _) = make_permuted_task(&ds, 0, 9, true).unwrap();
        assert_eq!(t0.images, ds.images);
        let (a, pa) = make_permuted_task(&ds, 3, 9, true).unwrap();
        let (b, pb) = make_permuted_task(&ds, 3, 9, true).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        assert_eq!(a.labels, ds.labels);
    }

    #[test]
    fn split_halves() {
        let ds = LabeledDataset::new(Matrix::zeros(10, 2), (0..10).collect(), "t").unwrap();
        let s = split_warmup(&ds, 4).unwrap();
        assert_eq!(s.warmup.len(), 5);
        let mut dedup = s.warmup_indices.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
        assert!(s.warmup_indices.iter().all(|&i| i < 10));
        assert_eq!(s.full.len(), 10);
        assert_eq!(split_warmup(&ds, 4).unwrap().warmup_indices, s.warmup_indices);
        assert!(split_warmup(&ds.select(&[0]), 4).is_err());
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let b = minibatches(10, 3, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(minibatches(10, 3, 1, 0).unwrap(), b);
        assert_ne!(minibatches(10, 3, 1, 1).unwrap(), b);
        assert!(minibatches(10, 0, 1, 0).is_err());
    }
}
