//! Acceptance gate. Each test prints one `P<n> PASS|FAIL` line; run with
//! `cargo test --test acceptance -- --nocapture --test-threads=1` to see them.

mod common;

use std::path::Path;
use std::process::Command;

use pscaps::archnet::{HeadKind, Model, ModelConfig, LOW_CAPSULE_DIM};
use pscaps::backend::{BnMode, Graph, Tensor, Var};
use pscaps::capsule::{
    capsule_lengths, kmeans_route, squash, transform_fc, transform_ps, FcCapsuleLayer, PsCapsuleLayer, RoutingTrace,
};
use pscaps::dataio::{
    make_pairs, AugmentPolicy, Dataset, PairManifest, Pipeline, PipelineMode, Split,
};
use pscaps::evalkit::parse_csv;
use pscaps::objective::{margin_loss, margin_loss_single, one_hot};
use pscaps::probam::{probam_map, read_image, write_image, MapGeometry};
use pscaps::train::{self, Data, RunConfig};
use pscaps::{checkpoint, gradcheck, render};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn gate(id: &str, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("{id} PASS {name}: {detail}"),
        Err(detail) => {
            println!("{id} FAIL {name}: {detail}");
            panic!("{id} failed: {detail}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `sum(x * r)` for a fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> pscaps::Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = g.constant(random(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
    let prod = g.mul(x, r)?;
    g.sum(prod)
}

// P1

fn census() -> Outcome {
    let expected = [
        (Dataset::Mnist, HeadKind::Cnn, 536_506),
        (Dataset::Mnist, HeadKind::Fc, 353_456),
        (Dataset::Mnist, HeadKind::Ps, 274_096),
        (Dataset::FashionMnist, HeadKind::Cnn, 536_506),
        (Dataset::FashionMnist, HeadKind::Fc, 353_456),
        (Dataset::FashionMnist, HeadKind::Ps, 274_096),
        (Dataset::Cifar10, HeadKind::Cnn, 536_794),
        (Dataset::Cifar10, HeadKind::Fc, 353_744),
        (Dataset::Cifar10, HeadKind::Ps, 274_384),
    ];
    let mut seen = Vec::new();
    for (dataset, head, want) in expected {
        let out = Command::new(common::binary())
            .args(["params", "--dataset", dataset.as_str(), "--head", head.as_str()])
            .output()
            .map_err(err)?;
        ensure(out.status.success(), || format!("params {dataset} {head} exited with {}", out.status))?;
        let text = String::from_utf8_lossy(&out.stdout);
        let total: usize = text
            .lines()
            .rev()
            .find_map(|l| l.trim().strip_prefix("total"))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| format!("no total line for {dataset} {head}"))?;
        ensure(total == want, || format!("{dataset} {head}: {total} != {want}"))?;
        let [c, _, _] = dataset.shape();
        let model = Model::<f32>::new(ModelConfig::new(head, c, dataset.classes()).map_err(err)?, 0);
        ensure(model.count_parameters() == want, || {
            format!("{dataset} {head}: model holds {} scalars", model.count_parameters())
        })?;
        seen.push(format!("{dataset}/{head}={total}"));
    }
    Ok(seen.join(" "))
}

#[test]
fn p1_parameter_census() {
    gate("P1", "parameter census", census());
}

// P2

const GRAD_TOL: f64 = 1e-4;

fn grad_squash() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for shape in [[4usize, 3], [2, 8], [5, 1]] {
        let x = random(&shape, &mut rng).scale(2.0);
        let rep = gradcheck::check(&[x], gradcheck::STEP, |g, v| {
            let y = squash(g, v[0])?;
            weighted_sum(g, y, 1)
        })
        .map_err(err)?;
        worst = worst.max(rep.max_relative_error());
    }
    Ok(worst)
}

fn grad_ps_layer() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for (b, n, m, d_in, d_out) in [(2, 5, 3, 4, 3), (1, 7, 4, 3, 2)] {
        let u = random(&[b, n, d_in], &mut rng);
        let w = random(&[m, d_in, d_out], &mut rng);
        let rep = gradcheck::check(&[u, w], gradcheck::STEP, |g, v| {
            let uhat = transform_ps(g, v[0], v[1])?;
            let routed = kmeans_route(g, uhat, 3)?;
            let len = capsule_lengths(g, routed.capsules)?;
            let a = weighted_sum(g, routed.capsules, 2)?;
            let b = weighted_sum(g, len, 3)?;
            g.add(a, b)
        })
        .map_err(err)?;
        worst = worst.max(rep.max_relative_error());
    }
    Ok(worst)
}

fn grad_margin() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (b, q) = (4, 10);
    // Keep probabilities away from the hinge points 0.1 and 0.9.
    let probs: Vec<f64> = (0..b * q)
        .map(|_| loop {
            let p: f64 = rng.gen_range(0.0..1.0);
            if (p - 0.1).abs() > 1e-3 && (p - 0.9).abs() > 1e-3 {
                break p;
            }
        })
        .collect();
    let mut targets = one_hot::<f64>(&[3, 0, 9, 5], q).map_err(err)?;
    targets.data_mut()[q + 7] = 1.0;
    let rep = gradcheck::check(&[Tensor::from_vec(&[b, q], probs).map_err(err)?], gradcheck::STEP, |g, v| {
        margin_loss(g, v[0], &targets)
    })
    .map_err(err)?;
    Ok(rep.max_relative_error())
}

/// Finite differences over one identity-shortcut residual block's
/// parameters inside a full model, in training-mode batch norm.
fn grad_basic_block() -> Result<f64, String> {
    let cfg = ModelConfig::new(HeadKind::Ps, 1, 10).map_err(err)?;
    let mut model = Model::<f64>::new(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = random(&[2, 1, 16, 16], &mut rng);
    let r = random(&[2, 10], &mut rng);
    let loss = |model: &mut Model<f64>| -> pscaps::Result<(f64, Option<pscaps::backend::Grads<f64>>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv, BnMode::Train)?;
        let rv = g.constant(r.clone());
        let prod = g.mul(out.probs, rv)?;
        let l = g.sum(prod)?;
        let value = g.value(l).data()[0];
        Ok((value, Some(g.backward(l)?)))
    };
    let (_, grads) = loss(&mut model).map_err(err)?;
    model.store.zero_grad();
    model.store.accumulate(&grads.unwrap());

    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("layer1.1."))
        .map(|(id, _)| id)
        .collect();
    ensure(ids.len() == 6, || format!("expected 6 parameters in layer1.1, found {}", ids.len()))?;
    let mut coords = Vec::new();
    for &id in &ids {
        let n = model.store.get(id).numel();
        for _ in 0..40 {
            coords.push((id, rng.gen_range(0..n)));
        }
    }
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = gradcheck::STEP;
    for (id, i) in coords {
        analytic.push(model.store.get(id).grad[i]);
        let orig = model.store.get(id).value.data()[i];
        model.store.get_mut(id).value.data_mut()[i] = orig + h;
        let plus = loss(&mut model).map_err(err)?.0;
        model.store.get_mut(id).value.data_mut()[i] = orig - h;
        let minus = loss(&mut model).map_err(err)?.0;
        model.store.get_mut(id).value.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let rep = gradcheck::GradReport {
        analytic: vec![analytic],
        numeric: vec![numeric],
    };
    Ok(rep.max_relative_error())
}

fn gradients() -> Outcome {
    let checks = [
        ("squash", grad_squash()?),
        ("ps-layer-r3", grad_ps_layer()?),
        ("margin", grad_margin()?),
        ("basic-block", grad_basic_block()?),
    ];
    let detail = checks.iter().map(|(n, e)| format!("{n}={e:.2e}")).collect::<Vec<_>>().join(" ");
    for (name, e) in checks {
        ensure(e <= GRAD_TOL, || format!("{name} relative error {e:.3e} > {GRAD_TOL:e} ({detail})"))?;
    }
    Ok(detail)
}

#[test]
fn p2_gradient_correctness() {
    gate("P2", "gradient correctness", gradients());
}

// P3

/// Scalar transcription of the routing procedure on one `û: [N][M][d]`.
fn oracle_route(uhat: &[Vec<Vec<f64>>], iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, m, d) = (uhat.len(), uhat[0].len(), uhat[0][0].len());
    let mut v = vec![vec![0.0; d]; m];
    for j in 0..m {
        for e in 0..d {
            v[j][e] = (0..n).map(|i| uhat[i][j][e]).sum::<f64>() / m as f64;
        }
    }
    let mut c = vec![vec![1.0 / m as f64; m]; n];
    for _ in 0..iters {
        for i in 0..n {
            let b: Vec<f64> = (0..m)
                .map(|j| {
                    let norm = v[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        (0..d).map(|e| uhat[i][j][e] * v[j][e]).sum::<f64>() / norm
                    } else {
                        0.0
                    }
                })
                .collect();
            let top = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b.iter().map(|x| (x - top).exp()).sum();
            for j in 0..m {
                c[i][j] = (b[j] - top).exp() / z;
            }
        }
        for j in 0..m {
            for e in 0..d {
                v[j][e] = (0..n).map(|i| c[i][j] * uhat[i][j][e]).sum();
            }
        }
    }
    for vj in &mut v {
        let sq: f64 = vj.iter().map(|x| x * x).sum();
        let scale = sq.sqrt() / (1.0 + sq);
        vj.iter_mut().for_each(|x| *x *= scale);
    }
    (v, c)
}

fn route_trace(uhat: Tensor<f64>, iters: usize) -> pscaps::Result<RoutingTrace<f64>> {
    let mut g = Graph::new();
    let u = g.constant(uhat);
    let routed = kmeans_route(&mut g, u, iters)?;
    Ok(routed.trace(&g))
}

fn oracle_agreement() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for case in 0..600 {
        let (n, m, d) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let iters = case % 5;
        let scale = [0.1, 1.0, 5.0][case % 3];
        let uhat: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..m).map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect()).collect())
            .collect();
        let flat: Vec<f64> = uhat.iter().flatten().flatten().copied().collect();
        let trace = route_trace(Tensor::from_vec(&[1, n, m, d], flat).map_err(err)?, iters).map_err(err)?;
        let (v, c) = oracle_route(&uhat, iters);
        let v: Vec<f64> = v.into_iter().flatten().collect();
        let c: Vec<f64> = c.into_iter().flatten().collect();
        worst = worst
            .max(max_abs_diff(trace.capsules.data(), &v))
            .max(max_abs_diff(trace.coupling.data(), &c));
    }
    Ok(worst)
}

fn coupling_normalization() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst: f64 = 0.0;
    for case in 0..60 {
        let (b, n, m, d) = (rng.gen_range(1..=3), rng.gen_range(1..=60), rng.gen_range(1..=12), rng.gen_range(1..=8));
        let uhat = random(&[b, n, m, d], &mut rng).scale([0.01, 1.0, 30.0][case % 3]);
        let iters = case % 6;
        let mut g32 = Graph::<f32>::new();
        let u32v = g32.constant(uhat.cast::<f32>());
        let c32 = kmeans_route(&mut g32, u32v, iters).map_err(err)?.coupling;
        let c64 = route_trace(uhat, iters).map_err(err)?.coupling;
        for row in c32.data().chunks(m) {
            worst = worst.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
            ensure(row.iter().all(|&x| x >= 0.0), || "negative coupling".into())?;
        }
        for row in c64.data().chunks(m) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn permutation_equivariance() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, m, d_in, d_out) = (rng.gen_range(2..=40), rng.gen_range(2..=10), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let u = random(&[1, n, d_in], &mut rng);
        let w = random(&[m, d_in, d_out], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| u.data()[p * d_in..(p + 1) * d_in].to_vec()).collect();
        let run = |u: Tensor<f64>| -> pscaps::Result<RoutingTrace<f64>> {
            let mut g = Graph::new();
            let (uv, wv) = (g.constant(u), g.constant(w.clone()));
            let uhat = transform_ps(&mut g, uv, wv)?;
            Ok(kmeans_route(&mut g, uhat, 3)?.trace(&g))
        };
        let a = run(u.clone()).map_err(err)?;
        let b = run(Tensor::from_vec(&[1, n, d_in], permuted).map_err(err)?).map_err(err)?;
        worst = worst.max(max_abs_diff(a.capsules.data(), b.capsules.data()));
        for (row, &p) in perm.iter().enumerate() {
            worst = worst.max(max_abs_diff(
                &b.coupling.data()[row * m..(row + 1) * m],
                &a.coupling.data()[p * m..(p + 1) * m],
            ));
        }
    }
    Ok(worst)
}

/// FC transforms that repeat one matrix per output capsule against the PS layer,
/// directly and through full models whose feature maps are already 4x4.
fn degenerate_sharing() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (b, n, m, d_in, d_out) = (2, rng.gen_range(1..=20), rng.gen_range(2..=10), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let u = random(&[b, n, d_in], &mut rng);
        let w = random(&[m, d_in, d_out], &mut rng);
        let tiled = tile_fc(&w, n);
        let mut g = Graph::new();
        let (uv, wv, tv) = (g.constant(u), g.constant(w), g.constant(tiled));
        let ps = transform_ps(&mut g, uv, wv).map_err(err)?;
        let fc = transform_fc(&mut g, uv, tv).map_err(err)?;
        let rps = kmeans_route(&mut g, ps, 3).map_err(err)?.trace(&g);
        let rfc = kmeans_route(&mut g, fc, 3).map_err(err)?.trace(&g);
        worst = worst
            .max(max_abs_diff(rps.capsules.data(), rfc.capsules.data()))
            .max(max_abs_diff(rps.coupling.data(), rfc.coupling.data()));
    }

    let mut ps = Model::<f64>::new(ModelConfig::new(HeadKind::Ps, 3, 10).map_err(err)?, 9);
    let mut fc = Model::<f64>::new(ModelConfig::new(HeadKind::Fc, 3, 10).map_err(err)?, 9);
    let ps_w = ps.store.get(ps.store.find("head.caps.weight").unwrap()).value.clone();
    let fc_id = fc.store.find("head.caps.weight").unwrap();
    let low = fc.store.get(fc_id).value.shape()[1];
    fc.store.get_mut(fc_id).value = tile_fc(&ps_w, low);
    let x = random(&[2, 3, 32, 32], &mut rng);
    let probs = |model: &mut Model<f64>| -> pscaps::Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv, BnMode::Eval)?;
        Ok(g.value(out.probs).data().to_vec())
    };
    let (pp, pf) = (probs(&mut ps).map_err(err)?, probs(&mut fc).map_err(err)?);
    Ok(worst.max(max_abs_diff(&pp, &pf)))
}

/// `[M, d_in, d_out]` repeated over `n` low-level capsules as `[M, n, d_in, d_out]`.
fn tile_fc(w: &Tensor<f64>, n: usize) -> Tensor<f64> {
    let &[m, d_in, d_out] = w.shape() else { panic!("rank-3 weights expected") };
    let block = d_in * d_out;
    let data = (0..m)
        .flat_map(|j| (0..n).flat_map(move |_| w.data()[j * block..(j + 1) * block].to_vec()))
        .collect();
    Tensor::from_vec(&[m, n, d_in, d_out], data).unwrap()
}

fn routing_invariants() -> Outcome {
    let norm = coupling_normalization()?;
    let perm = permutation_equivariance()?;
    let oracle = oracle_agreement()?;
    let fcps = degenerate_sharing()?;
    let detail = format!("coupling-sum={norm:.1e} permutation={perm:.1e} oracle={oracle:.1e} fc-vs-ps={fcps:.1e}");
    ensure(norm <= 1e-5, || format!("coupling sums off by {norm:e} ({detail})"))?;
    ensure(perm <= 1e-6, || format!("permutation mismatch {perm:e} ({detail})"))?;
    ensure(oracle <= 1e-9, || format!("oracle mismatch {oracle:e} ({detail})"))?;
    ensure(fcps <= 1e-6, || format!("FC/PS mismatch {fcps:e} ({detail})"))?;
    Ok(detail)
}

#[test]
fn p3_routing_invariants() {
    gate("P3", "routing invariants", routing_invariants());
}

// P4

struct Recorded {
    sa: f64,
    ta: f64,
    tca: f64,
    source: &'static str,
}

fn recorded_run(head: HeadKind, data: Option<&Data>) -> Result<Recorded, String> {
    let dir = common::runs_root().join(format!("mnist-{head}"));
    let cfg = RunConfig::read(&dir.join(train::CONFIG_FILE)).map_err(|e| format!("{}: {e}", dir.display()))?;
    ensure(
        cfg.dataset == Dataset::Mnist
            && cfg.head == head
            && cfg.full_data()
            && cfg.epochs == 10
            && cfg.batch_size == 64
            && cfg.seed == 0,
        || format!("{} does not follow the 10-epoch full-MNIST batch-64 seed-0 protocol", dir.display()),
    )?;
    let csv = std::fs::read_to_string(dir.join(train::METRICS_FILE)).map_err(err)?;
    let rows = parse_csv(&csv).map_err(err)?;
    let last = *rows.last().ok_or("empty metrics")?;
    ensure(last.epoch == 10, || format!("{head}: last recorded epoch is {}", last.epoch))?;
    let rate = |r: Option<f64>, what: &str| r.ok_or_else(|| format!("{head}: {what} missing from the final row"));
    let (sa, ta, tca) = (rate(last.sa, "sa")?, rate(last.ta, "ta")?, rate(last.tca, "tca")?);
    let Some(data) = data else {
        return Ok(Recorded { sa, ta, tca, source: "csv" });
    };
    let mut model = checkpoint::load(&dir.join(train::FINAL_CHECKPOINT)).map_err(err)?;
    model.routing_iters = cfg.routing_iters;
    let pairs = PairManifest::read(&dir.join(train::PAIRS_FILE)).map_err(err)?;
    let pipeline = Pipeline {
        stats: data.stats.clone(),
        policy: AugmentPolicy::NONE,
        mode: PipelineMode::Eval,
    };
    let m = train::evaluate(&mut model, &data.test, &pipeline, &pairs).map_err(err)?;
    let (esa, eta, etca) = (m.sa().unwrap(), m.ta().unwrap(), m.tca().unwrap());
    let drift = (esa - sa).abs().max((eta - ta).abs()).max((etca - tca).abs());
    ensure(drift <= 1e-6, || {
        format!("{head}: re-evaluated final.ckpt ({esa:.6},{eta:.6},{etca:.6}) differs from the CSV ({sa:.6},{ta:.6},{tca:.6})")
    })?;
    Ok(Recorded {
        sa: esa,
        ta: eta,
        tca: etca,
        source: "re-evaluated",
    })
}

fn retrained_run(head: HeadKind, data: &Data, out: &Path) -> Result<Recorded, String> {
    let mut cfg = RunConfig::new(Dataset::Mnist, head);
    cfg.epochs = 10;
    cfg.out_dir = out.join(head.as_str());
    let reports = train::train(&cfg, data, |line| println!("  {head} {line}")).map_err(err)?;
    let m = &reports.last().ok_or("no evaluation")?.metrics;
    Ok(Recorded {
        sa: m.sa().unwrap(),
        ta: m.ta().unwrap(),
        tca: m.tca().unwrap(),
        source: "retrained",
    })
}

fn table_reproduction() -> Outcome {
    let data = if common::has_dataset(Dataset::Mnist) {
        Some(Data::load(&common::data_root(), Dataset::Mnist, None, None).map_err(err)?)
    } else {
        None
    };
    let retrain = std::env::var_os("PSCAPS_RETRAIN").is_some();
    let scratch = tempfile::tempdir().map_err(err)?;
    let mut runs = Vec::new();
    for head in [HeadKind::Ps, HeadKind::Fc, HeadKind::Cnn] {
        let run = match (&data, retrain) {
            (Some(d), true) => retrained_run(head, d, scratch.path())?,
            (None, true) => return Err("PSCAPS_RETRAIN set but MNIST is not available".into()),
            (d, false) => recorded_run(head, d.as_ref())?,
        };
        runs.push(run);
    }
    let [ps, fc, cnn] = &runs[..] else { unreachable!() };
    let pct = |x: f64| 100.0 * x;
    let detail = format!(
        "PS {:.2}/{:.2}/{:.2} FC {:.2}/{:.2}/{:.2} CNN {:.2}/{:.2}/{:.2} (SA/TA/TCA %, {})",
        pct(ps.sa), pct(ps.ta), pct(ps.tca),
        pct(fc.sa), pct(fc.ta), pct(fc.tca),
        pct(cnn.sa), pct(cnn.ta), pct(cnn.tca),
        ps.source
    );
    let fail = |why: &str| format!("{why}; {detail}");
    ensure(ps.sa >= 0.99, || fail("PS SA below 99.0%"))?;
    ensure(ps.ta >= 0.96, || fail("PS TA below 96%"))?;
    ensure(ps.ta - ps.tca <= 0.01 + 1e-12, || fail("PS TA - TCA above 1.0 point"))?;
    ensure(cnn.ta <= 0.80, || fail("CNN TA above 80%"))?;
    ensure(ps.ta > fc.ta && fc.ta > cnn.ta, || fail("TA ordering PS > FC > CNN violated"))?;
    Ok(detail)
}

#[test]
fn p4_reduced_table_reproduction() {
    gate("P4", "reduced MNIST reproduction", table_reproduction());
}

// P5

fn variable_width() -> Outcome {
    let path = common::runs_root().join("mnist-ps").join(train::FINAL_CHECKPOINT);
    let mut ps = checkpoint::load(&path).map_err(|e| format!("trained PS model {}: {e}", path.display()))?;
    ensure(ps.config.head == HeadKind::Ps, || "checkpoint is not a PS model".into())?;
    ensure(!ps.head_pools(), || "PS head pools its input".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut trained_n = Vec::new();
    for (w, want_n) in [(28, 32), (56, 56)] {
        let x = Tensor::<f32>::uniform(&[2, 1, 28, w], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = ps.forward(&mut g, xv, BnMode::Eval).map_err(err)?;
        let caps = g.shape(out.head_input).to_vec();
        ensure(caps == [2, want_n, LOW_CAPSULE_DIM], || format!("PS capsules {caps:?} on width {w}"))?;
        let probs = g.value(out.probs);
        ensure(probs.shape() == [2, 10], || format!("PS output shape {:?}", probs.shape()))?;
        ensure(probs.data().iter().all(|p| p.is_finite() && (0.0..1.0).contains(p)), || {
            format!("PS probabilities outside [0,1) on width {w}")
        })?;
        trained_n.push(caps[1]);
    }

    for (head, want) in [(HeadKind::Fc, vec![2, 32, LOW_CAPSULE_DIM]), (HeadKind::Cnn, vec![2, 1024])] {
        let mut model = Model::<f32>::new(ModelConfig::new(head, 1, 10).map_err(err)?, 0);
        ensure(model.head_pools(), || format!("{head} head does not pool"))?;
        for w in [28, 56] {
            let x = Tensor::<f32>::uniform(&[2, 1, 28, w], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = model.forward(&mut g, xv, BnMode::Eval).map_err(err)?;
            let feat = g.shape(out.features).to_vec();
            ensure(feat[3] == w.div_ceil(8), || format!("{head} features {feat:?} on width {w}"))?;
            let input = g.shape(out.head_input).to_vec();
            ensure(input == want, || format!("{head} head input {input:?} on width {w}"))?;
            ensure(g.value(out.probs).data().iter().all(|p| (0.0..=1.0).contains(p)), || {
                format!("{head} probabilities outside [0,1]")
            })?;
        }
    }

    // Without pooling, a 56-capsule input is rejected by the FC transform
    // and accepted by the PS one.
    let mut store = pscaps::backend::ParamStore::<f32>::new();
    let fc = FcCapsuleLayer::new(&mut store, "fc", 32, 10, LOW_CAPSULE_DIM, 8, &mut rng);
    let ps_layer = PsCapsuleLayer::new(&mut store, "ps", 10, LOW_CAPSULE_DIM, 8, &mut rng);
    let mut g = Graph::new();
    let u = g.constant(Tensor::<f32>::uniform(&[1, 56, LOW_CAPSULE_DIM], 1.0, &mut rng));
    ensure(fc.forward(&mut g, &store, u, 3).is_err(), || "FC layer accepted 56 capsules".into())?;
    ensure(ps_layer.forward(&mut g, &store, u, 3).is_ok(), || "PS layer rejected 56 capsules".into())?;
    Ok(format!(
        "trained PS N={}/{} on 28x28/28x56, FC head N=32 and CNN head 1024 features at both widths",
        trained_n[0], trained_n[1]
    ))
}

#[test]
fn p5_variable_width_mechanics() {
    gate("P5", "variable-width mechanics", variable_width());
}

// P6

fn pair_statistics() -> Outcome {
    let root = common::data_root();
    let test = Dataset::Mnist
        .load(&root, Split::Test)
        .map_err(|e| format!("MNIST test split under {}: {e}", root.display()))?;
    let manifest = make_pairs(test.labels(), 0).map_err(err)?;
    let kept = manifest.kept();
    ensure((8910..=9090).contains(&kept), || format!("kept {kept} outside 9000 +/- 90"))?;
    ensure(manifest.rejected + kept == test.len(), || "kept + rejected != n".into())?;
    manifest.validate(test.labels()).map_err(err)?;

    let dir = tempfile::tempdir().map_err(err)?;
    let mut files = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("pairs{run}.txt"));
        let status = Command::new(common::binary())
            .arg("--data-root")
            .arg(&root)
            .args(["pairs", "--dataset", "mnist", "--seed", "0", "--out"])
            .arg(&out)
            .output()
            .map_err(err)?
            .status;
        ensure(status.success(), || format!("pairs command exited with {status}"))?;
        files.push(std::fs::read(&out).map_err(err)?);
    }
    ensure(files[0] == files[1], || "pair manifests differ between runs".into())?;
    let parsed = PairManifest::parse(std::str::from_utf8(&files[0]).map_err(err)?).map_err(err)?;
    ensure(parsed == manifest, || "CLI manifest differs from the library one".into())?;
    Ok(format!(
        "kept {kept} of {} (rejected {}), two CLI runs byte-identical ({} bytes)",
        test.len(),
        manifest.rejected,
        files[0].len()
    ))
}

#[test]
fn p6_pair_generator_statistics() {
    gate("P6", "pair generator statistics", pair_statistics());
}

// P7

fn trace_from(coupling: Vec<f64>, lengths: &[f64]) -> RoutingTrace<f64> {
    let m = lengths.len();
    let n = coupling.len() / m;
    let caps: Vec<f64> = lengths.iter().flat_map(|&p| [p, 0.0]).collect();
    RoutingTrace {
        capsules: Tensor::from_vec(&[1, m, 2], caps).unwrap(),
        coupling: Tensor::from_vec(&[1, n, m], coupling).unwrap(),
    }
}

fn probam_pipeline() -> Outcome {
    let two_site = MapGeometry {
        channels: 1,
        height: 1,
        width: 2,
        capsule_dim: 1,
    };
    let map = probam_map(&trace_from(vec![0.8, 0.2, 0.3, 0.7], &[1.0, 0.5]), 0, two_site).map_err(err)?;
    ensure((map.values[0] - 1.0).abs() <= 1e-4 && (map.values[1] - 0.7222).abs() <= 1e-4, || {
        format!("two-site weights {:?}", map.values)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut maps = 0;
    for case in 0..200 {
        let geo = MapGeometry {
            channels: 64,
            height: rng.gen_range(1..=6),
            width: rng.gen_range(1..=8),
            capsule_dim: 32,
        };
        let (n, m) = (geo.capsules(), rng.gen_range(1..=10));
        let mut g = Graph::new();
        let uhat = g.constant(random(&[1, n, m, 8], &mut rng));
        let trace = kmeans_route(&mut g, uhat, case % 4).map_err(err)?.trace(&g);
        let map = probam_map(&trace, 0, geo).map_err(err)?;
        ensure(map.values.iter().all(|&v| v >= 0.0 && v.is_finite()), || "negative ProbAM value".into())?;
        let zero = RoutingTrace {
            capsules: Tensor::zeros(trace.capsules.shape()),
            coupling: trace.coupling.clone(),
        };
        let zmap = probam_map(&zero, 0, geo).map_err(err)?;
        ensure(zmap.values.iter().all(|&v| v == 0.0), || "zero-probability trace gave a non-zero map".into())?;
        maps += 2;
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let pipeline = Pipeline {
        stats: pscaps::dataio::ChannelStats {
            mean: vec![0.13],
            std: vec![0.31],
            count: 1,
        },
        policy: AugmentPolicy::NONE,
        mode: PipelineMode::Eval,
    };
    let mut images = 0;
    for (head, shape) in [(HeadKind::Ps, [1, 28, 56]), (HeadKind::Fc, [1, 28, 28]), (HeadKind::Cnn, [1, 28, 28])] {
        let mut model = Model::<f32>::new(ModelConfig::new(head, 1, 10).map_err(err)?, 3);
        let raw: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = render::render(&mut model, &pipeline, &raw, shape).map_err(err)?;
        ensure(out.probam.is_some() == head.is_capsule(), || format!("{head}: ProbAM presence mismatch"))?;
        for img in out.probam.iter().chain([&out.conv1]) {
            ensure(img.width == shape[2] && img.height == shape[1], || "overlay size mismatch".into())?;
            let path = dir.path().join(format!("{images}.png"));
            write_image(img, &path).map_err(err)?;
            let back = read_image(&path).map_err(err)?;
            ensure(&back == img, || format!("{} did not round-trip", path.display()))?;
            images += 1;
        }
    }
    Ok(format!(
        "two-site ({:.4}, {:.4}), {maps} maps non-negative with zero-probability maps all zero, {images} overlays round-trip",
        map.values[0], map.values[1]
    ))
}

#[test]
fn p7_probam_pipeline() {
    gate("P7", "ProbAM pipeline", probam_pipeline());
}

// P8

fn margin_anchors() -> Outcome {
    let target = one_hot::<f64>(&[4], 10).map_err(err)?;
    let zero = margin_loss_single(&[0.0; 10], target.data());
    let ideal = margin_loss_single(target.data(), target.data());
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros(&[1, 10]));
    let l = margin_loss(&mut g, p, &target).map_err(err)?;
    let on_graph = g.value(l).data()[0];
    let p = g.constant(target.clone());
    let l = margin_loss(&mut g, p, &target).map_err(err)?;
    let ideal_graph = g.value(l).data()[0];
    let detail = format!("zero={zero:.12} ({on_graph:.12} on the tape) ideal={ideal:e} ({ideal_graph:e})");
    ensure((zero - 0.081).abs() <= 1e-9 && (on_graph - 0.081).abs() <= 1e-9, || detail.clone())?;
    ensure(ideal.abs() <= 1e-9 && ideal_graph.abs() <= 1e-9, || detail.clone())?;
    Ok(detail)
}

#[test]
fn p8_margin_loss_anchors() {
    gate("P8", "margin-loss anchors", margin_anchors());
}
