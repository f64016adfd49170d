//! Run configuration, the training loop and batched evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::archnet::{HeadKind, Model, ModelConfig};
use crate::backend::{Adam, BnMode, Graph, Tensor};
use crate::checkpoint;
use crate::dataio::{sample_rng, AugmentPolicy, ChannelStats, Dataset, ImageSet, PairManifest, Pipeline, PipelineMode, Split};
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsRecord};
use crate::objective::{margin_loss, one_hot};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 200;
/// RNG stream reserved for the per-epoch shuffle.
const SHUFFLE_STREAM: u64 = u32::MAX as u64;

pub const CONFIG_FILE: &str = "run.cfg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PAIRS_FILE: &str = "pairs.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub head: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub routing_iters: usize,
    pub seed: u64,
    /// Seed of the two-label test manifest.
    pub pair_seed: u64,
    pub policy: AugmentPolicy,
    pub lr: f64,
    /// Evaluate every this many epochs (and after the last).
    pub eval_every: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(dataset: Dataset, head: HeadKind) -> Self {
        RunConfig {
            dataset,
            head,
            epochs: 100,
            batch_size: 64,
            routing_iters: 3,
            seed: 0,
            pair_seed: 0,
            policy: dataset.default_policy(),
            lr: 1e-3,
            eval_every: 1,
            train_limit: None,
            test_limit: None,
            out_dir: PathBuf::from("runs").join(format!("{dataset}-{head}")),
        }
    }

    /// Whether the run used every training and test sample.
    pub fn full_data(&self) -> bool {
        self.train_limit.is_none() && self.test_limit.is_none()
    }

    pub fn to_text(&self) -> String {
        let limit = |l: Option<usize>| l.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut s = String::from("# pscaps run configuration\n");
        let _ = writeln!(s, "# two-label confident hit: both top-2 probabilities >= {}", evalkit::CONFIDENCE);
        let _ = writeln!(s, "dataset={}", self.dataset);
        let _ = writeln!(s, "head={}", self.head);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "routing_iters={}", self.routing_iters);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "pair_seed={}", self.pair_seed);
        let _ = writeln!(s, "augment={}", self.policy);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "train_limit={}", limit(self.train_limit));
        let _ = writeln!(s, "test_limit={}", limit(self.test_limit));
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        let _ = writeln!(s, "full_data={}", self.full_data());
        s
    }

    /// Parses `key=value` lines. `dataset` and `head` are required; other keys default.
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Config(format!("missing '{k}'")));
        let mut cfg = RunConfig::new(get("dataset")?.parse()?, get("head")?.parse()?);
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        let limit = |v: &str| -> Result<Option<usize>> {
            if v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        };
        match key {
            "dataset" => self.dataset = value.parse()?,
            "head" => self.head = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "routing_iters" => self.routing_iters = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "pair_seed" => self.pair_seed = num(key, value)?,
            "augment" => self.policy = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "train_limit" => self.train_limit = limit(value)?,
            "test_limit" => self.test_limit = limit(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "full_data" => {}
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.head, self.dataset.shape()[0], self.dataset.classes()).expect("in-scope datasets")
    }
}

/// Flat `key=value` text; `#` starts a comment line.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Stacks transformed images into one `[B, c, h, w]` tensor.
fn stack(images: impl ExactSizeIterator<Item = Vec<f32>>, shape: [usize; 3]) -> Result<Tensor<f32>> {
    let b = images.len();
    let mut data = Vec::with_capacity(b * shape.iter().product::<usize>());
    images.for_each(|v| data.extend(v));
    Tensor::from_vec(&[b, shape[0], shape[1], shape[2]], data)
}

/// Eval-mode class probabilities for a batch of `[B, c, h, w]` inputs, one row per sample.
pub fn predict(model: &mut Model<f32>, x: Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = model.forward(&mut g, v, BnMode::Eval)?;
    let probs = g.value(out.probs);
    Ok(probs.data().chunks(probs.shape()[1]).map(<[f32]>::to_vec).collect())
}

/// SA over `test` and TA/TCA over the manifest's pairs of `test`.
pub fn evaluate(model: &mut Model<f32>, test: &ImageSet, pipeline: &Pipeline, pairs: &PairManifest) -> Result<MetricsRecord> {
    let mut eval = pipeline.clone();
    eval.mode = PipelineMode::Eval;
    let mut rng = sample_rng(0, 0, 0);
    let mut rec = MetricsRecord::default();
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = stack(chunk.iter().map(|&i| eval.apply(test.pixels(i), test.shape, &mut rng)), test.shape)?;
        for (probs, &i) in predict(model, x)?.iter().zip(chunk) {
            rec.push_single(evalkit::score_single(probs, test.label(i))?);
        }
    }
    pairs.validate(test.labels())?;
    for chunk in pairs.pairs.chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|&(k, l)| test.pair(k, l)).collect::<Result<Vec<_>>>()?;
        let shape = samples[0].shape;
        let x = stack(samples.iter().map(|p| eval.apply(&p.pixels, shape, &mut rng)), shape)?;
        for (probs, p) in predict(model, x)?.iter().zip(&samples) {
            rec.push_pair(evalkit::score_pair(probs, p.labels)?);
        }
    }
    Ok(rec)
}

/// Loads the training statistics, caching them beside the data when possible.
pub fn channel_stats(data_root: &Path, dataset: Dataset, train: &ImageSet) -> Result<ChannelStats> {
    let path = dataset.dir(data_root).join("train-stats.txt");
    match ChannelStats::cached(&path, dataset, train) {
        Err(Error::Io { .. }) => Ok(ChannelStats::compute(train)),
        other => other,
    }
}

/// A loaded train/test split pair with its normalization statistics.
pub struct Data {
    pub train: ImageSet,
    pub test: ImageSet,
    pub stats: ChannelStats,
}

impl Data {
    /// Loads both splits; statistics always come from the full training split.
    pub fn load(root: &Path, dataset: Dataset, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Data> {
        let mut train = dataset.load(root, Split::Train)?;
        let stats = channel_stats(root, dataset, &train)?;
        let mut test = dataset.load(root, Split::Test)?;
        if let Some(l) = train_limit {
            train.truncate(l);
        }
        if let Some(l) = test_limit {
            test.truncate(l);
        }
        Ok(Data { train, test, stats })
    }
}

/// One evaluation during training.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub step: u64,
    pub epoch: usize,
    pub mean_loss: f64,
    pub metrics: MetricsRecord,
    pub seconds: f64,
}

/// Trains per `cfg`, writing the config, pair manifest, metrics CSV and
/// checkpoints into `cfg.out_dir`. `log` receives one line per evaluation.
pub fn train(cfg: &RunConfig, data: &Data, mut log: impl FnMut(&str)) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(Error::Data("need at least 2 training samples".into()));
    }
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| fs::write(out.join(name), text).map_err(|e| Error::io(out.join(name), e));
    write(CONFIG_FILE, &cfg.to_text())?;
    let pairs = crate::dataio::make_pairs(data.test.labels(), cfg.pair_seed)?;
    pairs.write(&out.join(PAIRS_FILE))?;

    let csv_path = out.join(METRICS_FILE);
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{}", evalkit::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;

    let mut model = Model::<f32>::new(cfg.model_config(), cfg.seed);
    model.routing_iters = cfg.routing_iters;
    let adam = Adam {
        lr: cfg.lr,
        ..Adam::default()
    };
    let pipeline = Pipeline {
        stats: data.stats.clone(),
        policy: cfg.policy,
        mode: PipelineMode::Train,
    };
    let classes = cfg.dataset.classes();
    let shape = data.train.shape;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0u64;
    let mut best_sa = -1.0;
    let mut reports = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64, SHUFFLE_STREAM));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // A trailing batch of one sample has no batch variance; it is skipped.
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let x = stack(
                batch.iter().map(|&i| {
                    let mut rng = sample_rng(cfg.seed, epoch as u64, i as u64);
                    pipeline.apply(data.train.pixels(i), shape, &mut rng)
                }),
                shape,
            )?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.train.label(i)).collect();
            let targets = one_hot::<f32>(&labels, classes)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let fwd = model.forward(&mut g, xv, BnMode::Train)?;
            let loss = margin_loss(&mut g, fwd.probs, &targets)?;
            let value = f64::from(g.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "margin_loss" });
            }
            let grads = g.backward(loss)?;
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
            if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(Error::NonFinite { op: "adam" });
            }
            loss_sum += value;
            batches += 1;
            step += 1;
        }

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let metrics = evaluate(&mut model, &data.test, &pipeline, &pairs)?;
            let row = evalkit::csv_row(step, epoch, &metrics);
            writeln!(csv, "{row}").and_then(|_| csv.flush()).map_err(|e| Error::io(&csv_path, e))?;
            let sa = metrics.sa().unwrap_or(0.0);
            if sa > best_sa {
                best_sa = sa;
                checkpoint::save(&model, &out.join(BEST_CHECKPOINT))?;
            }
            let report = EpochReport {
                step,
                epoch,
                mean_loss: loss_sum / batches.max(1) as f64,
                metrics,
                seconds: started.elapsed().as_secs_f64(),
            };
            log(&format!(
                "epoch {epoch}/{} step {step} loss {:.5} {} [{:.0}s]",
                cfg.epochs, report.mean_loss, report.metrics, report.seconds
            ));
            reports.push(report);
        }
    }
    checkpoint::save(&model, &out.join(FINAL_CHECKPOINT))?;
    Ok(reports)
}
