#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pscaps::dataio::Dataset;

pub fn workspace_root() -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    root.canonicalize().unwrap_or(root)
}

/// Dataset root: `PSCAPS_DATA`, else `<workspace>/data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("PSCAPS_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data"))
}

/// Recorded training runs: `PSCAPS_RUNS`, else `<workspace>/runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("PSCAPS_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("runs"))
}

pub fn has_dataset(dataset: Dataset) -> bool {
    use pscaps::dataio::Split;
    [Split::Train, Split::Test]
        .into_iter()
        .all(|s| dataset.files(&data_root(), s).iter().all(|f| f.is_file()))
}

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_pscaps")
}

/// Deterministic class-dependent bytes: a label-specific bright square on noise.
fn synthetic_image(label: usize, index: usize, c: usize, side: usize) -> Vec<u8> {
    let mut state = (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ label as u64;
    let (y0, x0) = (2 + (label / 4) * 6, 2 + (label % 4) * 6);
    let mut out = Vec::with_capacity(c * side * side);
    for _ in 0..c {
        for y in 0..side {
            for x in 0..side {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let noise = (state % 64) as u8;
                let on = (y0..y0 + 6).contains(&y) && (x0..x0 + 6).contains(&x);
                out.push(if on { 200 + noise / 2 } else { noise });
            }
        }
    }
    out
}

fn write_idx(dir: &Path, images: &str, labels: &str, n: usize, offset: usize) {
    let mut img = vec![0, 0, 8, 3];
    for v in [n as u32, 28, 28] {
        img.extend(v.to_be_bytes());
    }
    let mut lab = vec![0, 0, 8, 1];
    lab.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let y = (i * 7 + i / 10) % 10;
        img.extend(synthetic_image(y, offset + i, 1, 28));
        lab.push(y as u8);
    }
    std::fs::write(dir.join(images), img).unwrap();
    std::fs::write(dir.join(labels), lab).unwrap();
}

fn write_cifar(dir: &Path) {
    let batch = |offset: usize, n: usize| {
        let mut out = Vec::with_capacity(n * 3073);
        for i in 0..n {
            let y = (i * 3 + i / 10) % 10;
            out.push(y as u8);
            out.extend(synthetic_image(y, offset + i, 3, 32));
        }
        out
    };
    for b in 1..=5 {
        std::fs::write(dir.join(format!("data_batch_{b}.bin")), batch(b * 10_000, 10_000)).unwrap();
    }
    std::fs::write(dir.join("test_batch.bin"), batch(0, 10_000)).unwrap();
}

/// A data root holding full-size synthetic MNIST and CIFAR-10 files, built once per test binary.
pub fn synthetic_root() -> &'static Path {
    static ROOT: std::sync::OnceLock<tempfile::TempDir> = std::sync::OnceLock::new();
    ROOT.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let mnist = root.path().join("mnist");
        std::fs::create_dir_all(&mnist).unwrap();
        write_idx(&mnist, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60_000, 10_000);
        write_idx(&mnist, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10_000, 0);
        let cifar = root.path().join("cifar10");
        std::fs::create_dir_all(&cifar).unwrap();
        write_cifar(&cifar);
        root
    })
    .path()
}

/// Real MNIST when available, else the synthetic stand-in.
pub fn mnist_root() -> PathBuf {
    if has_dataset(Dataset::Mnist) {
        data_root()
    } else {
        synthetic_root().to_path_buf()
    }
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the binary against `root` with the given arguments.
pub fn run(root: &Path, args: &[&str]) -> Run {
    let out = std::process::Command::new(binary())
        .env("PSCAPS_DATA", root)
        .args(args)
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
