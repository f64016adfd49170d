use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use pscaps::archnet::{HeadKind, Model, ModelConfig};
use pscaps::dataio::{make_pairs, Dataset, PairManifest, Pipeline, PipelineMode, Split};
use pscaps::evalkit::{self, MetricsRecord};
use pscaps::probam::write_image;
use pscaps::render::render;
use pscaps::train::{self, Data, RunConfig};
use pscaps::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "pscaps", version, about = "PS capsule networks and the two-label Top-2 benchmark")]
struct Cli {
    /// Directory holding one subdirectory per dataset.
    #[arg(long, env = "PSCAPS_DATA", default_value = "data", global = true)]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that dataset files are present and well formed.
    FetchCheck {
        #[arg(long)]
        dataset: Option<Dataset>,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint (SA, and TA/TCA on a pair manifest).
    Eval(EvalArgs),
    /// Write a two-label pair manifest for a test split.
    Pairs {
        #[arg(long)]
        dataset: Dataset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render activation-map overlays for test samples.
    Visualize(VisualizeArgs),
    /// Print the per-layer parameter census.
    Params {
        #[arg(long)]
        dataset: Dataset,
        /// All three heads when omitted.
        #[arg(long)]
        head: Option<HeadKind>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<Dataset>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    routing_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pair_seed: Option<u64>,
    /// none, crop4, flip or crop4+flip.
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Dataset,
    /// Head the checkpoint is expected to hold.
    #[arg(long)]
    head: Option<HeadKind>,
    /// Pair manifest; generated with --pair-seed when omitted.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pair_seed: u64,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = 3)]
    routing_iters: usize,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Dataset,
    /// Single-label test indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    indices: Vec<usize>,
    /// Pair manifest whose rows to render (see --rows).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Manifest row numbers, comma separated.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<usize>,
    /// Draw only first-layer maps.
    #[arg(long)]
    conv1_only: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    routing_iters: usize,
}

/// Maps a failure to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        Some(Error::Config(_) | Error::Contract(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.data_root;
    match cli.command {
        Command::FetchCheck { dataset } => fetch_check(&root, dataset),
        Command::Train(args) => cmd_train(&root, args),
        Command::Eval(args) => cmd_eval(&root, args),
        Command::Pairs {
            dataset,
            seed,
            test_limit,
            out,
        } => {
            let mut test = dataset.load(&root, Split::Test)?;
            if let Some(l) = test_limit {
                test.truncate(l);
            }
            let m = make_pairs(test.labels(), seed)?;
            m.write(&out)?;
            println!("{}: kept {} pairs, rejected {} (n={}, seed={seed})", out.display(), m.kept(), m.rejected, m.n);
            Ok(())
        }
        Command::Visualize(args) => cmd_visualize(&root, args),
        Command::Params { dataset, head } => {
            let heads = head.map_or(HeadKind::ALL.to_vec(), |h| vec![h]);
            for head in heads {
                let model = Model::<f32>::new(ModelConfig::new(head, dataset.shape()[0], dataset.classes())?, 0);
                println!("{dataset} / {head}");
                for (layer, count) in model.census() {
                    println!("  {layer:<24} {count:>9}");
                }
                println!("  {:<24} {:>9}", "total", model.count_parameters());
            }
            Ok(())
        }
    }
}

fn sha256(path: &Path) -> anyhow::Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// `SHA256SUMS` lines: `<hex digest>  <file name>`.
fn expected_digests(dir: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let path = dir.join("SHA256SUMS");
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(Vec::new());
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (digest, name) = l
                .split_once(char::is_whitespace)
                .with_context(|| format!("{}: bad line '{l}'", path.display()))?;
            Ok((name.trim().trim_start_matches('*').to_string(), digest.to_ascii_lowercase()))
        })
        .collect()
}

fn fetch_check(root: &Path, dataset: Option<Dataset>) -> anyhow::Result<()> {
    let datasets = dataset.map_or(Dataset::ALL.to_vec(), |d| vec![d]);
    let mut failed = false;
    for d in datasets {
        let expected = expected_digests(&d.dir(root))?;
        for split in [Split::Train, Split::Test] {
            let files = d.files(root, split);
            if let Some(missing) = files.iter().find(|f| !f.exists()) {
                println!("{d} {split:?}: missing {}", missing.display());
                failed = true;
                continue;
            }
            for f in &files {
                let digest = sha256(f)?;
                let name = f.file_name().unwrap().to_string_lossy().to_string();
                let verdict = match expected.iter().find(|(n, _)| *n == name) {
                    Some((_, want)) if *want == digest => "checksum ok",
                    Some(_) => {
                        failed = true;
                        "CHECKSUM MISMATCH"
                    }
                    None => "no reference checksum",
                };
                println!("  {name}  sha256 {digest}  {verdict}");
            }
            match d.load(root, split) {
                Ok(set) => println!("{d} {split:?}: {} samples of shape {:?}", set.len(), set.shape),
                Err(e) => {
                    println!("{d} {split:?}: {e}");
                    failed = true;
                }
            }
        }
    }
    if failed {
        bail!(Error::Data("some dataset files are missing or invalid".into()));
    }
    Ok(())
}

fn cmd_train(root: &Path, a: TrainArgs) -> anyhow::Result<()> {
    let mut map = match &a.config {
        Some(path) => train::parse_kv(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
        None => Default::default(),
    };
    let mut flag = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    flag("dataset", a.dataset.map(|d| d.to_string()));
    flag("head", a.head.map(|h| h.to_string()));
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("routing_iters", a.routing_iters.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("pair_seed", a.pair_seed.map(|v| v.to_string()));
    flag("augment", a.augment);
    flag("lr", a.lr.map(|v| v.to_string()));
    flag("eval_every", a.eval_every.map(|v| v.to_string()));
    flag("train_limit", a.train_limit.map(|v| v.to_string()));
    flag("test_limit", a.test_limit.map(|v| v.to_string()));
    flag("out_dir", a.out.map(|p| p.display().to_string()));
    if !map.contains_key("dataset") || !map.contains_key("head") {
        bail!(Error::Config("--dataset and --head are required (on the command line or in --config)".into()));
    }
    let text: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;

    eprintln!("{}", cfg.to_text().trim_end());
    let data = Data::load(root, cfg.dataset, cfg.train_limit, cfg.test_limit)?;
    eprintln!("train {} / test {} samples", data.train.len(), data.test.len());
    let reports = train::train(&cfg, &data, |line| eprintln!("{line}"))?;
    if let Some(last) = reports.last() {
        println!("final: {}", last.metrics);
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn load_checkpoint(path: &Path, dataset: Dataset, head: Option<HeadKind>) -> anyhow::Result<Model<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = checkpoint::peek_config(&bytes)?;
    let want_channels = dataset.shape()[0];
    if cfg.in_channels != want_channels || head.is_some_and(|h| h != cfg.head) {
        bail!(Error::Checkpoint(format!(
            "census mismatch: {} holds a {} model for {} input channels, expected {} for {dataset}",
            path.display(),
            cfg.head,
            cfg.in_channels,
            head.map_or("any head".to_string(), |h| format!("a {h} model"))
        )));
    }
    Ok(checkpoint::from_bytes(&bytes)?)
}

fn cmd_eval(root: &Path, a: EvalArgs) -> anyhow::Result<()> {
    let mut model = load_checkpoint(&a.checkpoint, a.dataset, a.head)?;
    model.routing_iters = a.routing_iters;
    let data = Data::load(root, a.dataset, Some(0), a.test_limit)?;
    let pairs = match &a.pairs {
        Some(p) => PairManifest::read(p)?,
        None => make_pairs(data.test.labels(), a.pair_seed)?,
    };
    let pipeline = Pipeline {
        stats: data.stats,
        policy: a.dataset.default_policy(),
        mode: PipelineMode::Eval,
    };
    let m: MetricsRecord = train::evaluate(&mut model, &data.test, &pipeline, &pairs)?;
    println!("{} {} on {}: {m}", a.checkpoint.display(), model.config.head, a.dataset);
    println!("TCA rule: both top-2 probabilities >= {}", evalkit::CONFIDENCE);
    Ok(())
}

fn cmd_visualize(root: &Path, a: VisualizeArgs) -> anyhow::Result<()> {
    let mut model = load_checkpoint(&a.checkpoint, a.dataset, None)?;
    model.routing_iters = a.routing_iters;
    let head = model.config.head;
    if !head.is_capsule() && !a.conv1_only {
        eprintln!(
            "note: ProbAM needs routing coefficients, which the {head} head does not have; \
             rendering first-layer maps only as a substitute"
        );
    }
    let data = Data::load(root, a.dataset, Some(0), None)?;
    let pipeline = Pipeline {
        stats: data.stats,
        policy: a.dataset.default_policy(),
        mode: PipelineMode::Eval,
    };

    // (file stem, pixels, shape, truth labels, left index, right index)
    let mut jobs = Vec::new();
    for &i in &a.indices {
        if i >= data.test.len() {
            bail!(Error::Contract(format!("test index {i} out of range (n={})", data.test.len())));
        }
        let s = data.test.get(i);
        jobs.push((format!("single{i}"), s.pixels, s.shape, vec![s.label], i.to_string(), String::new()));
    }
    if !a.rows.is_empty() {
        let path = a.pairs.as_ref().context("--rows needs --pairs")?;
        let manifest = PairManifest::read(path)?;
        manifest.validate(data.test.labels())?;
        for &r in &a.rows {
            let &(k, l) = manifest
                .pairs
                .get(r)
                .ok_or_else(|| Error::Contract(format!("manifest row {r} out of range ({} rows)", manifest.kept())))?;
            let p = data.test.pair(k, l)?;
            jobs.push((format!("pair{r}"), p.pixels, p.shape, vec![p.labels.0, p.labels.1], k.to_string(), l.to_string()));
        }
    }
    if jobs.is_empty() {
        bail!(Error::Config("nothing to render: pass --indices or --pairs with --rows".into()));
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = String::from("file,map,left,right,truth,prediction\n");
    let prefix = format!("{}-{head}", a.dataset);
    for (stem, pixels, shape, truth, left, right) in jobs {
        let r = render(&mut model, &pipeline, &pixels, shape)?;
        let prediction = if truth.len() == 2 {
            let (x, y) = evalkit::top2(&r.probs)?;
            format!("{x}|{y}")
        } else {
            evalkit::argmax(&r.probs).to_string()
        };
        let truth = truth.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("|");
        let mut emit = |kind: &str, img| -> anyhow::Result<()> {
            let name = format!("{prefix}-{stem}-{kind}.png");
            write_image(img, &a.out.join(&name))?;
            manifest.push_str(&format!("{name},{kind},{left},{right},{truth},{prediction}\n"));
            Ok(())
        };
        if let (Some(img), false) = (&r.probam, a.conv1_only) {
            emit("probam", img)?;
        }
        emit("conv1", &r.conv1)?;
    }
    let path = a.out.join("manifest.csv");
    fs::write(&path, &manifest).with_context(|| format!("writing {}", path.display()))?;
    println!("{} images listed in {}", manifest.lines().count() - 1, path.display());
    Ok(())
}
