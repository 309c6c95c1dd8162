//! Readers for the on-disk dataset formats.
//!
//! Expected layout under a data root:
//!
//! ```text
//! <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
//! <root>/cifar10/{data_batch_1..5,test_batch}.bin     (or cifar10/cifar-10-batches-bin/)
//! <root>/notmnist/<A..J>/<image>.png                   (28x28, 8-bit grayscale)
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageBatch, LabeledDataset};
use crate::error::{Error, Result};

/// Seed of the fixed notMNIST subsample shared by every experiment.
pub const NOTMNIST_SUBSAMPLE_SEED: u64 = 20_171_130;
pub const NOTMNIST_DEFAULT_COUNT: usize = 60_000;
pub const NOTMNIST_LETTERS: [&str; 10] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"];

const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
const CIFAR_RECORD: usize = 1 + 3 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    #[serde(rename = "notmnist")]
    NotMnist,
    Cifar10,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::Mnist, DatasetId::NotMnist, DatasetId::Cifar10];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::NotMnist => "notmnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }

    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist | DatasetId::NotMnist => (28, 28, 1),
            DatasetId::Cifar10 => (32, 32, 3),
        }
    }

    pub fn splits(self) -> &'static [Split] {
        match self {
            DatasetId::NotMnist => &[Split::Train],
            _ => &[Split::Train, Split::Test],
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "notmnist" => Ok(DatasetId::NotMnist),
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoadOptions {
    pub notmnist_count: usize,
    pub notmnist_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            notmnist_count: NOTMNIST_DEFAULT_COUNT,
            notmnist_seed: NOTMNIST_SUBSAMPLE_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// What ingest saw: files read, record counts, and skipped files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub dataset: DatasetId,
    pub split: Split,
    /// Count declared by the source (IDX header, record count, or files found).
    pub declared_count: usize,
    pub loaded_count: usize,
    pub skipped_files: usize,
    pub skipped_examples: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: LabeledDataset,
    pub report: LoadReport,
}

pub fn load_dataset(
    id: DatasetId,
    split: Split,
    root: &Path,
    options: &LoadOptions,
) -> Result<LoadedDataset> {
    match id {
        DatasetId::Mnist => load_mnist(root, split),
        DatasetId::Cifar10 => load_cifar10(root, split),
        DatasetId::NotMnist => match split {
            Split::Train => load_notmnist(root, options),
            Split::Test => Err(Error::InvalidArgument(
                "notmnist has no test split; experiments hold out validation from train".into(),
            )),
        },
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::dataset(
            path,
            format!("cannot read ({e}); run `shapebias datasets verify` to check the data root"),
        )
    })
}

struct Idx {
    dims: Vec<usize>,
    data: Vec<u8>,
}

/// Parses an unsigned-byte IDX file: `0x00 0x00 0x08 ndims`, big-endian u32 dims, data.
fn parse_idx(path: &Path, bytes: Vec<u8>) -> Result<Idx> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::dataset(path, "not an IDX file (bad magic)"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::dataset(
            path,
            format!("unsupported IDX element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::dataset(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload != expected {
        return Err(Error::dataset(
            path,
            format!("IDX header declares {expected} bytes of data, file has {payload}"),
        ));
    }
    let mut data = bytes;
    data.drain(..header);
    Ok(Idx { dims, data })
}

fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let dir = root.join("mnist");
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

fn load_mnist(root: &Path, split: Split) -> Result<LoadedDataset> {
    let (img_path, lbl_path) = mnist_paths(root, split);
    let images = parse_idx(&img_path, read_file(&img_path)?)?;
    let labels = parse_idx(&lbl_path, read_file(&lbl_path)?)?;
    if images.dims.len() != 3 {
        return Err(Error::dataset(&img_path, "expected a 3-dimensional image array"));
    }
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(Error::dataset(
            &lbl_path,
            format!(
                "label count {:?} does not match image count {}",
                labels.dims, images.dims[0]
            ),
        ));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let labels: Vec<u32> = labels.data.into_iter().map(u32::from).collect();
    let dataset = LabeledDataset::new(
        ImageBatch::new(n, h, w, 1, images.data)?,
        labels,
        10,
        (0..10).map(|d| d.to_string()).collect(),
        format!("mnist-{}", split.name()),
    )
    .map_err(|e| Error::dataset(&lbl_path, e.to_string()))?;
    Ok(LoadedDataset {
        report: LoadReport {
            dataset: DatasetId::Mnist,
            split,
            declared_count: n,
            loaded_count: n,
            skipped_files: 0,
            skipped_examples: Vec::new(),
        },
        dataset,
    })
}

fn cifar_paths(root: &Path, split: Split) -> Vec<PathBuf> {
    let base = root.join("cifar10");
    let dir = if base.join("cifar-10-batches-bin").is_dir() {
        base.join("cifar-10-batches-bin")
    } else {
        base
    };
    match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

fn load_cifar10(root: &Path, split: Split) -> Result<LoadedDataset> {
    let mut levels = Vec::new();
    let mut labels = Vec::new();
    for path in cifar_paths(root, split) {
        let bytes = read_file(&path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::dataset(
                &path,
                format!(
                    "size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::dataset(&path, format!("label byte {} >= 10", rec[0])));
            }
            labels.push(u32::from(rec[0]));
            let planes = &rec[1..];
            // channel-planar on disk, interleaved in memory
            for p in 0..1024 {
                levels.extend_from_slice(&[planes[p], planes[1024 + p], planes[2048 + p]]);
            }
        }
    }
    let n = labels.len();
    let dataset = LabeledDataset::new(
        ImageBatch::new(n, 32, 32, 3, levels)?,
        labels,
        10,
        CIFAR_CLASSES.iter().map(|s| s.to_string()).collect(),
        format!("cifar10-{}", split.name()),
    )?;
    Ok(LoadedDataset {
        report: LoadReport {
            dataset: DatasetId::Cifar10,
            split,
            declared_count: n,
            loaded_count: n,
            skipped_files: 0,
            skipped_examples: Vec::new(),
        },
        dataset,
    })
}

fn notmnist_files(root: &Path) -> Result<Vec<(PathBuf, u32)>> {
    let dir = root.join("notmnist");
    let mut files = Vec::new();
    for (label, letter) in NOTMNIST_LETTERS.iter().enumerate() {
        let class_dir = dir.join(letter);
        let entries = fs::read_dir(&class_dir).map_err(|e| {
            Error::dataset(&class_dir, format!("cannot list class directory ({e})"))
        })?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(class_dir.display().to_string(), e))?;
            if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                names.push(entry.path());
            }
        }
        names.sort();
        files.extend(names.into_iter().map(|p| (p, label as u32)));
    }
    Ok(files)
}

fn decode_gray28(path: &Path) -> std::result::Result<Vec<u8>, String> {
    let file = fs::File::open(path).map_err(|e| e.to_string())?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("{:?}/{:?} is not 8-bit grayscale", info.color_type, info.bit_depth));
    }
    if info.width != 28 || info.height != 28 {
        return Err(format!("{}x{} is not 28x28", info.width, info.height));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

fn load_notmnist(root: &Path, options: &LoadOptions) -> Result<LoadedDataset> {
    let mut files = notmnist_files(root)?;
    let declared = files.len();
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(options.notmnist_seed));
    let mut picked: Vec<(usize, Vec<u8>, u32)> = Vec::with_capacity(options.notmnist_count);
    let mut skipped = Vec::new();
    for (path, label) in &files {
        if picked.len() == options.notmnist_count {
            break;
        }
        match decode_gray28(path) {
            Ok(pixels) => picked.push((picked.len(), pixels, *label)),
            Err(_) => skipped.push(path.clone()),
        }
    }
    if picked.len() < options.notmnist_count {
        return Err(Error::dataset(
            root.join("notmnist"),
            format!(
                "only {} readable images ({} files, {} unreadable); {} requested",
                picked.len(),
                declared,
                skipped.len(),
                options.notmnist_count
            ),
        ));
    }
    let n = picked.len();
    let mut levels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for (_, pixels, label) in picked {
        levels.extend_from_slice(&pixels);
        labels.push(label);
    }
    let dataset = LabeledDataset::new(
        ImageBatch::new(n, 28, 28, 1, levels)?,
        labels,
        10,
        NOTMNIST_LETTERS.iter().map(|s| s.to_string()).collect(),
        "notmnist-train",
    )?;
    Ok(LoadedDataset {
        report: LoadReport {
            dataset: DatasetId::NotMnist,
            split: Split::Train,
            declared_count: declared,
            loaded_count: n,
            skipped_files: skipped.len(),
            skipped_examples: skipped.into_iter().take(10).collect(),
        },
        dataset,
    })
}

fn digest(path: &Path) -> Result<FileDigest> {
    let mut file = fs::File::open(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut bytes = 0u64;
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: format!("{:x}", hasher.finalize()),
        bytes,
    })
}

/// Per-dataset outcome of `verify_data_root`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub dataset: DatasetId,
    pub split: Split,
    pub ok: bool,
    pub report: Option<LoadReport>,
    pub class_counts: Vec<usize>,
    pub files: Vec<FileDigest>,
    pub error: Option<String>,
}

/// Loads every dataset split under `root`, recording counts and file checksums.
/// notMNIST is summarized by a digest over its sorted file list rather than per-file sums.
pub fn verify_data_root(root: &Path, options: &LoadOptions) -> Vec<VerifyReport> {
    let mut out = Vec::new();
    for id in DatasetId::ALL {
        for &split in id.splits() {
            let files: Result<Vec<FileDigest>> = match id {
                DatasetId::Mnist => {
                    let (a, b) = mnist_paths(root, split);
                    [a, b].iter().map(|p| digest(p)).collect()
                }
                DatasetId::Cifar10 => cifar_paths(root, split).iter().map(|p| digest(p)).collect(),
                DatasetId::NotMnist => notmnist_files(root).map(|fs| {
                    let mut hasher = Sha256::new();
                    let mut bytes = 0;
                    for (p, _) in &fs {
                        hasher.update(p.to_string_lossy().as_bytes());
                        bytes += fs::metadata(p).map(|m| m.len()).unwrap_or(0);
                    }
                    vec![FileDigest {
                        path: root.join("notmnist"),
                        sha256: format!("{:x}", hasher.finalize()),
                        bytes,
                    }]
                }),
            };
            let loaded = files.and_then(|f| load_dataset(id, split, root, options).map(|l| (f, l)));
            out.push(match loaded {
                Ok((files, l)) => VerifyReport {
                    dataset: id,
                    split,
                    ok: true,
                    class_counts: l.dataset.class_counts(),
                    report: Some(l.report),
                    files,
                    error: None,
                },
                Err(e) => VerifyReport {
                    dataset: id,
                    split,
                    ok: false,
                    report: None,
                    class_counts: Vec::new(),
                    files: Vec::new(),
                    error: Some(e.to_string()),
                },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(path: &Path, dims: &[u32], data: &[u8]) {
        let mut bytes = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(data);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn idx_header_count_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("mnist")).unwrap();
        let (img, lbl) = mnist_paths(dir.path(), Split::Test);
        let pixels: Vec<u8> = (0..3 * 4).map(|i| (i * 20) as u8).collect();
        write_idx(&img, &[3, 2, 2], &pixels);
        write_idx(&lbl, &[3], &[7, 0, 9]);
        let loaded = load_dataset(DatasetId::Mnist, Split::Test, dir.path(), &LoadOptions::default())
            .unwrap();
        assert_eq!(loaded.dataset.len(), 3);
        assert_eq!(loaded.report.declared_count, 3);
        assert_eq!(loaded.dataset.labels(), &[7, 0, 9]);
        assert_eq!(loaded.dataset.images().value(11), 220.0 / 255.0);
    }

    #[test]
    fn idx_truncation_is_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("mnist")).unwrap();
        let (img, lbl) = mnist_paths(dir.path(), Split::Train);
        write_idx(&img, &[3, 2, 2], &[0; 10]);
        write_idx(&lbl, &[3], &[0, 1, 2]);
        let err = load_dataset(DatasetId::Mnist, Split::Train, dir.path(), &LoadOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("declares 12 bytes"), "{err}");
    }

    #[test]
    fn missing_files_point_to_verify() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(DatasetId::Mnist, Split::Train, dir.path(), &LoadOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("datasets verify"));
        assert!(err.is_user_error());
    }

    #[test]
    fn cifar_planes_are_interleaved() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cifar10")).unwrap();
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(10, 1024));
        rec.extend(std::iter::repeat_n(20, 1024));
        rec.extend(std::iter::repeat_n(30, 1024));
        fs::write(dir.path().join("cifar10/test_batch.bin"), &rec).unwrap();
        let loaded =
            load_dataset(DatasetId::Cifar10, Split::Test, dir.path(), &LoadOptions::default())
                .unwrap();
        assert_eq!(loaded.dataset.labels(), &[3]);
        assert_eq!(&loaded.dataset.images().levels()[..6], &[10, 20, 30, 10, 20, 30]);
    }

    #[test]
    fn notmnist_skips_and_counts_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for (i, letter) in NOTMNIST_LETTERS.iter().enumerate() {
            let d = dir.path().join("notmnist").join(letter);
            fs::create_dir_all(&d).unwrap();
            for k in 0..3 {
                let f = fs::File::create(d.join(format!("{k}.png"))).unwrap();
                let mut enc = png::Encoder::new(f, 28, 28);
                enc.set_color(png::ColorType::Grayscale);
                enc.set_depth(png::BitDepth::Eight);
                enc.write_header()
                    .unwrap()
                    .write_image_data(&[(i * 20 + k) as u8; 784])
                    .unwrap();
            }
        }
        fs::write(dir.path().join("notmnist/B/broken.png"), b"\x89PNG garbage").unwrap();
        let options = LoadOptions {
            notmnist_count: 30,
            notmnist_seed: 1,
        };
        let loaded = load_dataset(DatasetId::NotMnist, Split::Train, dir.path(), &options).unwrap();
        assert_eq!(loaded.dataset.len(), 30);
        assert_eq!(loaded.report.skipped_files, 1);
        assert_eq!(loaded.report.declared_count, 31);
        assert_eq!(loaded.dataset.class_counts(), vec![3; 10]);

        let too_many = LoadOptions {
            notmnist_count: 31,
            notmnist_seed: 1,
        };
        assert!(load_dataset(DatasetId::NotMnist, Split::Train, dir.path(), &too_many).is_err());
        assert!(load_dataset(DatasetId::NotMnist, Split::Test, dir.path(), &options).is_err());
    }
}
