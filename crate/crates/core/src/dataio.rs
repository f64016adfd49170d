//! Dataset ingestion (IDX and CIFAR-10 binary), train-time augmentation,
//! and synthesis of width-concatenated two-label test pairs.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, ReadBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dataset {
    Mnist,
    FashionMnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Mnist, Dataset::FashionMnist, Dataset::Cifar10];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::FashionMnist => "fashionmnist",
            Dataset::Cifar10 => "cifar10",
        }
    }

    /// `(c, h, w)` of one sample.
    pub fn shape(self) -> [usize; 3] {
        match self {
            Dataset::Mnist | Dataset::FashionMnist => [1, 28, 28],
            Dataset::Cifar10 => [3, CIFAR_SIDE, CIFAR_SIDE],
        }
    }

    pub fn classes(self) -> usize {
        CLASSES
    }

    pub fn split_size(self, split: Split) -> usize {
        match (self, split) {
            (Dataset::Cifar10, Split::Train) => 50_000,
            (_, Split::Train) => 60_000,
            (_, Split::Test) => 10_000,
        }
    }

    /// Default augmentation: horizontal flips only for natural images.
    pub fn default_policy(self) -> AugmentPolicy {
        AugmentPolicy {
            crop_padding: 4,
            flip: matches!(self, Dataset::Cifar10),
        }
    }

    /// Directory of this dataset under the data root.
    pub fn dir(self, root: &Path) -> PathBuf {
        root.join(self.as_str())
    }

    /// Files the loader reads for `split`, relative to the data root.
    pub fn files(self, root: &Path, split: Split) -> Vec<PathBuf> {
        let dir = self.dir(root);
        match (self, split) {
            (Dataset::Cifar10, Split::Train) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
            (Dataset::Cifar10, Split::Test) => vec![dir.join("test_batch.bin")],
            (_, Split::Train) => vec![dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")],
            (_, Split::Test) => vec![dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")],
        }
    }

    /// Loads a full split and checks its size and sample shape.
    pub fn load(self, root: &Path, split: Split) -> Result<ImageSet> {
        let files = self.files(root, split);
        let set = match self {
            Dataset::Cifar10 => load_cifar10(&files)?,
            _ => load_idx(&files[0], &files[1])?,
        };
        if set.shape != self.shape() {
            return Err(Error::Data(format!(
                "{self} samples have shape {:?}, expected {:?}",
                set.shape,
                self.shape()
            )));
        }
        let want = self.split_size(split);
        if set.len() != want {
            return Err(Error::Data(format!("{self} {split:?} split has {} samples, expected {want}", set.len())));
        }
        Ok(set)
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mnist" => Ok(Dataset::Mnist),
            "fashionmnist" => Ok(Dataset::FashionMnist),
            "cifar10" => Ok(Dataset::Cifar10),
            _ => Err(Error::Config(format!(
                "unknown dataset '{s}' (expected mnist, fashionmnist or cifar10)"
            ))),
        }
    }
}

/// One image in `[0, 1]`, channel-planar `(c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
    pub label: usize,
}

/// A split held as one contiguous pixel buffer.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels do not form {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= CLASSES) {
            return Err(Error::Data(format!("label {bad} out of range")));
        }
        Ok(ImageSet { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            shape: self.shape,
            pixels: self.pixels(i).to_vec(),
            label: self.labels[i],
        }
    }

    /// Keeps the first `limit` samples.
    pub fn truncate(&mut self, limit: usize) {
        if limit < self.len() {
            self.labels.truncate(limit);
            self.pixels.truncate(limit * self.sample_len());
        }
    }

    /// The pair sample for manifest row `(k, l)`.
    pub fn pair(&self, k: usize, l: usize) -> Result<PairSample> {
        if k >= self.len() || l >= self.len() {
            return Err(Error::Contract(format!("pair ({k}, {l}) outside a set of {}", self.len())));
        }
        let mut p = concat_pair(&self.get(k), &self.get(l))?;
        p.source = (k, l);
        Ok(p)
    }
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX header, returning the item count, the trailing dims and the payload offset.
fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<(usize, Vec<usize>, usize)> {
    let mut cur = Cursor::new(bytes);
    let truncated = |cur: &Cursor<&[u8]>| parse_err(path, cur.position(), "truncated header");
    let found = cur.read_u32::<BigEndian>().map_err(|_| truncated(&cur))?;
    if found != magic {
        return Err(parse_err(path, 0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let mut sizes = Vec::with_capacity(dims);
    for _ in 0..dims {
        sizes.push(cur.read_u32::<BigEndian>().map_err(|_| truncated(&cur))? as usize);
    }
    let header = cur.position() as usize;
    let payload = sizes.iter().product::<usize>();
    if bytes.len() < header + payload {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated payload: {} of {payload} bytes", bytes.len() - header),
        ));
    }
    if bytes.len() > header + payload {
        return Err(parse_err(path, (header + payload) as u64, "trailing bytes after payload"));
    }
    Ok((sizes[0], sizes[1..].to_vec(), header))
}

/// Reads an IDX image file (`u8`, `[n, h, w]`) and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let (n, dims, off) = idx_header(images, &img, IDX_IMAGES_MAGIC, 3)?;
    let (nl, _, loff) = idx_header(labels, &lab, IDX_LABELS_MAGIC, 1)?;
    if n != nl {
        return Err(Error::Data(format!(
            "{} holds {n} images but {} holds {nl} labels",
            images.display(),
            labels.display()
        )));
    }
    let mut ys = Vec::with_capacity(n);
    for (i, &y) in lab[loff..].iter().enumerate() {
        if y as usize >= CLASSES {
            return Err(parse_err(labels, (loff + i) as u64, format!("label {y} out of range")));
        }
        ys.push(y as usize);
    }
    let pixels = img[off..].iter().map(|&b| f32::from(b) / 255.0).collect();
    ImageSet::new([1, dims[0], dims[1]], pixels, ys)
}

/// Reads CIFAR-10 binary batches: records of one label byte and 3072 planar RGB bytes.
pub fn load_cifar10(files: &[PathBuf]) -> Result<ImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(parse_err(
                path,
                (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                format!("size {} is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CLASSES {
                return Err(parse_err(path, (r * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    ImageSet::new([3, CIFAR_SIDE, CIFAR_SIDE], pixels, labels)
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Number of samples the statistics were computed from.
    pub count: usize,
}

impl ChannelStats {
    pub fn compute(set: &ImageSet) -> Self {
        let [c, h, w] = set.shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..set.len() {
            for (ch, px) in set.pixels(i).chunks_exact(plane).enumerate() {
                for &v in px {
                    sum[ch] += f64::from(v);
                    sq[ch] += f64::from(v) * f64::from(v);
                }
            }
        }
        let n = (set.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt() as f32).collect();
        ChannelStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
            count: set.len(),
        }
    }

    pub fn to_text(&self, dataset: Dataset) -> String {
        let mut out = format!("# per-channel statistics of the {dataset} training split\ncount={}\nchannel,mean,std\n", self.count);
        for (c, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{c},{m:e},{s:e}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("stats cache: {msg}"));
        let mut count = None;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        let mut in_table = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some(v) = line.strip_prefix("count=") {
                count = Some(v.parse().map_err(|_| bad("bad count"))?);
            } else if line == "channel,mean,std" {
                in_table = true;
            } else if in_table {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 || f[0].parse::<usize>().ok() != Some(mean.len()) {
                    return Err(bad(&format!("bad row '{line}'")));
                }
                mean.push(f[1].parse().map_err(|_| bad("bad mean"))?);
                std.push(f[2].parse().map_err(|_| bad("bad std"))?);
            } else {
                return Err(bad(&format!("unexpected line '{line}'")));
            }
        }
        if mean.is_empty() {
            return Err(bad("no channels"));
        }
        Ok(ChannelStats {
            mean,
            std,
            count: count.ok_or_else(|| bad("missing count"))?,
        })
    }

    /// Reads `path` if it holds statistics of `set`, else computes and writes them.
    pub fn cached(path: &Path, dataset: Dataset, set: &ImageSet) -> Result<Self> {
        if let Ok(text) = fs::read_to_string(path) {
            let stats = Self::parse(&text)?;
            if stats.count == set.len() && stats.mean.len() == set.shape[0] {
                return Ok(stats);
            }
        }
        let stats = Self::compute(set);
        fs::write(path, stats.to_text(dataset)).map_err(|e| Error::io(path, e))?;
        Ok(stats)
    }
}

/// In-place `(x - mean_c) / std_c` over a planar `(c, h, w)` buffer.
pub fn standardize(pixels: &mut [f32], shape: [usize; 3], stats: &ChannelStats) {
    let plane = pixels.len() / shape[0];
    for (c, px) in pixels.chunks_exact_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c].max(1e-12));
        px.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Crop of the image zero-padded by `pad` on every side, taken at offset `(dy, dx)`
/// of the padded image; `(pad, pad)` returns the image unchanged.
pub fn crop_padded(pixels: &[f32], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; pixels.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = pixels[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Mirrors each row in place.
pub fn hflip(pixels: &mut [f32], shape: [usize; 3]) {
    pixels.chunks_exact_mut(shape[2]).for_each(<[f32]>::reverse);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPolicy {
    /// Zero padding before the random crop; 0 disables cropping.
    pub crop_padding: usize,
    pub flip: bool,
}

impl AugmentPolicy {
    pub const NONE: AugmentPolicy = AugmentPolicy {
        crop_padding: 0,
        flip: false,
    };
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "crop{}", self.crop_padding)?;
        if self.flip {
            f.write_str("+flip")?;
        }
        Ok(())
    }
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    /// `none`, `crop4`, `crop4+flip`, `flip`.
    fn from_str(s: &str) -> Result<Self> {
        let mut policy = AugmentPolicy::NONE;
        for part in s.split('+').map(str::trim) {
            match part {
                "none" => {}
                "flip" => policy.flip = true,
                p if p.starts_with("crop") => {
                    policy.crop_padding = p[4..]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad crop padding in '{s}'")))?
                }
                _ => return Err(Error::Config(format!("unknown augmentation '{part}'"))),
            }
        }
        Ok(policy)
    }
}

/// Which transforms a pipeline applies: training adds the random
/// augmentations, evaluation only standardizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineMode {
    Train,
    Eval,
}

/// The RNG stream of sample `index` in `epoch`. Streams are independent of
/// visiting order, so batching or parallel workers cannot change results.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub stats: ChannelStats,
    pub policy: AugmentPolicy,
    pub mode: PipelineMode,
}

impl Pipeline {
    /// Transforms one raw image. `rng` is only drawn from in training mode.
    pub fn apply(&self, pixels: &[f32], shape: [usize; 3], rng: &mut impl Rng) -> Vec<f32> {
        let mut out = match self.mode {
            PipelineMode::Train => augment(pixels, shape, self.policy, rng),
            PipelineMode::Eval => pixels.to_vec(),
        };
        standardize(&mut out, shape, &self.stats);
        out
    }
}

/// Random crop and optional flip of a raw image.
pub fn augment(pixels: &[f32], shape: [usize; 3], policy: AugmentPolicy, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = if policy.crop_padding > 0 {
        let p = policy.crop_padding;
        let (dy, dx) = (rng.gen_range(0..=2 * p), rng.gen_range(0..=2 * p));
        crop_padded(pixels, shape, p, dy, dx)
    } else {
        pixels.to_vec()
    };
    if policy.flip && rng.gen_bool(0.5) {
        hflip(&mut out, shape);
    }
    out
}

/// A two-label test sample: `left | right` along the width axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
    pub labels: (usize, usize),
    /// Indices of the left and right source images in their set.
    pub source: (usize, usize),
}

pub fn concat_pair(left: &LabeledImage, right: &LabeledImage) -> Result<PairSample> {
    if left.shape != right.shape {
        return Err(Error::Contract(format!("cannot pair shapes {:?} and {:?}", left.shape, right.shape)));
    }
    if left.label == right.label {
        return Err(Error::Contract(format!("pair halves share label {}", left.label)));
    }
    let [c, h, w] = left.shape;
    let mut pixels = Vec::with_capacity(2 * left.pixels.len());
    for (a, b) in left.pixels.chunks_exact(w).zip(right.pixels.chunks_exact(w)) {
        pixels.extend_from_slice(a);
        pixels.extend_from_slice(b);
    }
    Ok(PairSample {
        shape: [c, h, 2 * w],
        pixels,
        labels: (left.label, right.label),
        source: (0, 0),
    })
}

/// Seeded list of two-label test pairs over a set of `n` samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairManifest {
    pub seed: u64,
    /// Size of the set the pairs index into.
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
    pub rejected: usize,
}

/// For each `i`, draws one partner `j` uniformly from `[0, n)` and keeps `(i, j)`
/// when `j != i` and the labels differ. Rejected draws are not retried.
pub fn make_pairs(labels: &[usize], seed: u64) -> Result<PairManifest> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 samples to make pairs, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for i in 0..n {
        let j = rng.gen_range(0..n);
        if j != i && labels[i] != labels[j] {
            pairs.push((i, j));
        }
    }
    Ok(PairManifest {
        seed,
        n,
        rejected: n - pairs.len(),
        pairs,
    })
}

impl PairManifest {
    pub fn kept(&self) -> usize {
        self.pairs.len()
    }

    /// An empty manifest over a set of `n` samples.
    pub fn empty(n: usize) -> Self {
        PairManifest {
            seed: 0,
            n,
            pairs: Vec::new(),
            rejected: 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# two-label pair manifest\nseed={}\nn={}\nkept={}\nrejected={}\nk,l\n",
            self.seed,
            self.n,
            self.kept(),
            self.rejected
        );
        for (k, l) in &self.pairs {
            out.push_str(&format!("{k},{l}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Data(format!("pair manifest line {}: {msg}", line + 1));
        let (mut seed, mut n, mut kept, mut rejected) = (None, None, None, None);
        let mut pairs = Vec::new();
        let mut in_rows = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if in_rows {
                let (k, l) = line.split_once(',').ok_or_else(|| bad(ln, format!("expected 'k,l', got '{line}'")))?;
                let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(ln, format!("bad index '{s}'")));
                pairs.push((parse(k)?, parse(l)?));
            } else if line == "k,l" {
                in_rows = true;
            } else {
                let (key, value) = line.split_once('=').ok_or_else(|| bad(ln, format!("unexpected '{line}'")))?;
                let v: u64 = value.trim().parse().map_err(|_| bad(ln, format!("bad value for {key}")))?;
                match key.trim() {
                    "seed" => seed = Some(v),
                    "n" => n = Some(v as usize),
                    "kept" => kept = Some(v as usize),
                    "rejected" => rejected = Some(v as usize),
                    other => return Err(bad(ln, format!("unknown header key '{other}'"))),
                }
            }
        }
        let missing = |k: &str| Error::Data(format!("pair manifest: missing '{k}' header"));
        let m = PairManifest {
            seed: seed.ok_or_else(|| missing("seed"))?,
            n: n.ok_or_else(|| missing("n"))?,
            rejected: rejected.ok_or_else(|| missing("rejected"))?,
            pairs,
        };
        if kept.ok_or_else(|| missing("kept"))? != m.kept() {
            return Err(Error::Data(format!("pair manifest: header says {} pairs, found {}", kept.unwrap(), m.kept())));
        }
        if let Some(&(k, l)) = m.pairs.iter().find(|&&(k, l)| k >= m.n || l >= m.n) {
            return Err(Error::Data(format!("pair manifest: pair ({k}, {l}) outside a set of {}", m.n)));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Checks that the manifest fits `labels` and never pairs equal labels.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        if self.n != labels.len() {
            return Err(Error::Data(format!(
                "pair manifest was made for {} samples, the set has {}",
                self.n,
                labels.len()
            )));
        }
        match self.pairs.iter().find(|&&(k, l)| labels[k] == labels[l]) {
            Some(&(k, l)) => Err(Error::Data(format!("pair ({k}, {l}) has equal labels"))),
            None => Ok(()),
        }
    }
}
