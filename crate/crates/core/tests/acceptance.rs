//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::f64::consts::FRAC_PI_2;
use std::time::{Duration, Instant};

use common::{balanced_labels, brute_eer, expected_params, fiona_total_loss_error, grad_check, hkh_cka, rng, uniform};
use fiona_core::autodiff::{Graph, NodeId, Tensor};
use fiona_core::cka::{cka, cka_loss, FeatureMatrix};
use fiona_core::dataio::{
    decode_femb, encode_femb, read_femb, stratified_split, synth_generate_split, write_femb, EmbeddingDataset,
    PairedDataset, SynthConfig,
};
use fiona_core::metrics::{eer, ScoreSet};
use fiona_core::models::{
    build_cnn, build_concat_fusion, build_fcn, build_fiona, read_checkpoint, write_checkpoint, ModelConfig, ModelGraph,
    DEFAULT_DROPOUT, DEFAULT_PROJECTION_DIM,
};
use fiona_core::objective::{cross_entropy, cross_entropy_node, total_loss, Batch, LossConfig};
use fiona_core::train::{evaluate, train, TrainConfig, TrainReport};
use fiona_core::Label;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
    }
}

fn features(t: Tensor) -> FeatureMatrix {
    FeatureMatrix::new(t).unwrap()
}

fn orthogonal(r: &mut impl Rng, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::new(vec![d, d], (0..d * d).map(|k| cols[k % d][k / d]).collect()).unwrap()
}

fn cka_suite() -> Outcome {
    let mut r = rng(100);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let (dx, dy) = (r.random_range(1..=12), r.random_range(1..=12));
        let (x, y) = (uniform(&mut r, &[n, dx]), uniform(&mut r, &[n, dy]));
        let base = cka(&features(x.clone()), &features(y.clone())).unwrap();
        worst[0] = worst[0].max((cka(&features(x.clone()), &features(x.clone())).unwrap() - 1.0).abs());
        worst[1] = worst[1].max((cka(&features(y.clone()), &features(x.clone())).unwrap() - base).abs());
        let rotated = x.matmul(&orthogonal(&mut r, dx)).unwrap();
        let s = r.random_range(0.01..100.0);
        let scaled = Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| v * s).collect()).unwrap();
        worst[2] = worst[2].max((cka(&features(rotated), &features(scaled)).unwrap() - base).abs());
        worst[3] = worst[3].max((hkh_cka(&x, &y) - base).abs());
    }
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..32);
        let (dx, dy) = (r.random_range(1..16), r.random_range(1..16));
        let v = cka(&features(uniform(&mut r, &[n, dx])), &features(uniform(&mut r, &[n, dy]))).unwrap();
        if !(0.0..=1.0 + 1e-9).contains(&v) {
            out_of_range += 1;
        }
    }
    let ok = worst[0] <= 1e-9 && worst[1] <= 1e-12 && worst[2] <= 1e-9 && worst[3] <= 1e-10 && out_of_range == 0;
    let detail = format!(
        "self {:.1e}, symmetry {:.1e}, invariance {:.1e}, HKH {:.1e}, out of range {out_of_range}/1000",
        worst[0], worst[1], worst[2], worst[3]
    );
    check(ok, detail.clone(), || detail)
}

fn gradient_suite() -> Outcome {
    type Case = (&'static str, Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>>, Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>);
    let n = 4;
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(move |r| vec![uniform(r, &[n, 3]), uniform(r, &[3, 2])]), Box::new(|g, i| g.matmul(i[0], i[1]).unwrap())),
        ("dense", Box::new(move |r| vec![uniform(r, &[n, 3]), uniform(r, &[3, 2]), uniform(r, &[2])]), Box::new(|g, i| g.dense(i[0], i[1], i[2]).unwrap())),
        ("conv1d", Box::new(move |r| vec![uniform(r, &[n, 6, 2]), uniform(r, &[3, 2, 3]), uniform(r, &[3])]), Box::new(|g, i| g.conv1d(i[0], i[1], i[2]).unwrap())),
        ("maxpool1d", Box::new(move |r| vec![uniform(r, &[n, 5, 2])]), Box::new(|g, i| g.maxpool1d(i[0]).unwrap())),
        ("relu", Box::new(move |r| vec![uniform(r, &[n, 3])]), Box::new(|g, i| g.relu(i[0]))),
        ("sigmoid", Box::new(move |r| vec![uniform(r, &[n, 3])]), Box::new(|g, i| g.sigmoid(i[0]))),
        ("softmax", Box::new(move |r| vec![uniform(r, &[n, 3])]), Box::new(|g, i| g.softmax(i[0]))),
        ("reshape", Box::new(move |r| vec![uniform(r, &[n, 3])]), Box::new(move |g, i| g.reshape(i[0], &[3, n]).unwrap())),
        ("flatten", Box::new(move |r| vec![uniform(r, &[n, 3, 2])]), Box::new(|g, i| g.flatten(i[0]).unwrap())),
        ("concat", Box::new(move |r| vec![uniform(r, &[n, 2]), uniform(r, &[n, 3])]), Box::new(|g, i| g.concat(i[0], i[1]).unwrap())),
        ("dropout", Box::new(move |r| vec![uniform(r, &[n, 5])]), Box::new(|g, i| g.dropout(i[0], 0.3, Some(&mut rng(9))).unwrap())),
        ("add", Box::new(move |r| vec![uniform(r, &[n, 3]), uniform(r, &[n, 3])]), Box::new(|g, i| g.add(i[0], i[1]).unwrap())),
        ("mul", Box::new(move |r| vec![uniform(r, &[n, 3]), uniform(r, &[n, 3])]), Box::new(|g, i| g.mul(i[0], i[1]).unwrap())),
        ("scale", Box::new(move |r| vec![uniform(r, &[n, 3])]), Box::new(|g, i| g.scale(i[0], 2.5))),
        ("sum", Box::new(move |r| vec![uniform(r, &[n, 3])]), Box::new(|g, i| g.sum(i[0]))),
        ("cka_loss", Box::new(move |r| vec![uniform(r, &[n, 5]), uniform(r, &[n, 3])]), Box::new(|g, i| cka_loss(g, i[0], i[1], 1e-12).unwrap().0)),
        (
            "cross_entropy",
            Box::new(move |r| vec![uniform(r, &[n, 2])]),
            Box::new(move |g, i| {
                let p = g.softmax(i[0]);
                cross_entropy_node(g, p, &balanced_labels(n), 0.0).unwrap()
            }),
        ),
    ];
    let mut failures = Vec::new();
    let mut overall: f64 = 0.0;
    for (name, inputs, build) in &cases {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let x = inputs(&mut rng(seed));
            worst = worst.max(grad_check(&x, seed, build));
        }
        overall = overall.max(worst);
        if worst >= 1e-4 {
            failures.push(format!("{name} {worst:.1e}"));
        }
    }
    let fiona = (0..2).map(fiona_total_loss_error).fold(0.0, f64::max);
    if fiona >= 1e-4 {
        failures.push(format!("fiona total loss {fiona:.1e}"));
    }
    check(
        failures.is_empty(),
        format!("{} ops + fiona total loss, worst rel-err {:.1e}", cases.len(), overall.max(fiona)),
        || failures.join(", "),
    )
}

fn eer_oracle() -> Outcome {
    let mut r = rng(200);
    let (mut worst, mut transform_worst) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(2..=200);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| if r.random_bool(0.5) { Label::Bonafide } else { Label::Deepfake })
            .collect();
        labels[0] = Label::Bonafide;
        labels[1] = Label::Deepfake;
        let levels = r.random_range(2..=60) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0) * levels).floor() / levels).collect();
        let set = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
        let got = eer(&set).unwrap();
        worst = worst.max((got - brute_eer(&scores, &labels)).abs());
        let moved = ScoreSet::new(scores.iter().map(|s| (4.0 * s).exp() - 2.0).collect(), labels).unwrap();
        transform_worst = transform_worst.max((eer(&moved).unwrap() - got).abs());
    }
    let detail = format!("max |engine - oracle| {worst:.1e}, monotone transform drift {transform_worst:.1e}");
    check(worst <= 1e-9 && transform_worst <= 1e-12, detail.clone(), || detail)
}

fn select(p: &PairedDataset, branch: Option<usize>) -> Batch {
    let b = p.to_batch().unwrap();
    match branch {
        Some(i) => Batch::new(vec![b.inputs[i].clone()], b.labels).unwrap(),
        None => b,
    }
}

/// Trains on a seeded 10% stratified validation carve-out of `train_set` and
/// returns the held-out eval EER.
fn fit(
    model: &mut ModelGraph,
    train_set: &PairedDataset,
    eval_set: &PairedDataset,
    branch: Option<usize>,
    seed: u64,
) -> (f64, TrainReport) {
    let (tr, val) = stratified_split(train_set, 0.1, seed).unwrap();
    let cfg = TrainConfig { seed, ..Default::default() };
    let report = train(model, &select(&tr, branch), &select(&val, branch), &cfg).unwrap();
    let scores = evaluate(model, &select(eval_set, branch)).unwrap();
    (eer(&scores).unwrap(), report)
}

fn end_to_end() -> Outcome {
    let dim = 32;
    let cfg = SynthConfig {
        n_per_class: 2000,
        dims: (dim, dim),
        theta: 0.0,
        sigma: 0.5,
        seed: 7,
        ..Default::default()
    };
    let (train_set, eval_set) = synth_generate_split(&cfg).unwrap();
    let run = || {
        let started = Instant::now();
        let mut model = build_cnn(dim, DEFAULT_DROPOUT, 7).unwrap();
        let (e, report) = fit(&mut model, &train_set, &eval_set, Some(0), 7);
        (e, report, model, started.elapsed())
    };
    let (e1, r1, m1, t1) = run();
    let (e2, r2, m2, t2) = run();
    within(t1.max(t2), Duration::from_secs(120))?;
    let deterministic = r1.same_outcome(&r2) && m1 == m2 && e1 == e2;
    let detail = format!(
        "EER {:.2}% after {} epochs (best {}), {:.1}s per run, deterministic: {deterministic}",
        100.0 * e1,
        r1.epochs.len(),
        r1.best_epoch,
        t1.as_secs_f64()
    );
    check(e1 <= 0.05 && r1.epochs.len() <= 50 && deterministic, detail.clone(), || detail)
}

fn fusion_trend() -> Outcome {
    let started = Instant::now();
    let (dim, separation, nuisance) = (16, 2.0, 1.8);
    let sigma = SynthConfig::sigma_for_single_branch_error(FRAC_PI_2, separation, nuisance, 0.15).unwrap();
    let seeds = 0..5u64;
    let (mut single_a, mut single_b, mut concat, mut fiona) = (0.0, 0.0, 0.0, 0.0);
    let mut cka_rose = Vec::new();
    let mut bayes = 0.0;
    for seed in seeds.clone() {
        let cfg = SynthConfig {
            n_per_class: 2000,
            dims: (dim, dim),
            theta: FRAC_PI_2,
            sigma,
            separation,
            nuisance,
            seed,
        };
        bayes = cfg.single_branch_bayes_error();
        let (train_set, eval_set) = synth_generate_split(&cfg).unwrap();
        single_a += fit(&mut build_cnn(dim, DEFAULT_DROPOUT, seed).unwrap(), &train_set, &eval_set, Some(0), seed).0;
        single_b += fit(&mut build_cnn(dim, DEFAULT_DROPOUT, seed).unwrap(), &train_set, &eval_set, Some(1), seed).0;
        concat += fit(&mut build_concat_fusion((dim, dim), DEFAULT_DROPOUT, seed).unwrap(), &train_set, &eval_set, None, seed).0;
        let mut model = build_fiona((dim, dim), DEFAULT_PROJECTION_DIM, DEFAULT_DROPOUT, seed).unwrap();
        let (e, report) = fit(&mut model, &train_set, &eval_set, None, seed);
        fiona += e;
        let first = report.epochs[0].mean_batch_cka.unwrap();
        let best = report.best().mean_batch_cka.unwrap();
        cka_rose.push((best > first, first, best));
    }
    let k = seeds.count() as f64;
    let (single_a, single_b, concat, fiona) = (single_a / k, single_b / k, concat / k, fiona / k);
    let best_single = single_a.min(single_b);
    within(started.elapsed(), Duration::from_secs(600))?;
    let fusion_margin = best_single - concat.max(fiona);
    let ok = fusion_margin >= 0.03 && fiona <= concat + 0.005 && cka_rose.iter().all(|c| c.0);
    let detail = format!(
        "Bayes {:.1}%, single a {:.2}% b {:.2}%, concat {:.2}%, fiona {:.2}%, CKA epoch1->best {}, {:.0}s",
        100.0 * bayes,
        100.0 * single_a,
        100.0 * single_b,
        100.0 * concat,
        100.0 * fiona,
        cka_rose
            .iter()
            .map(|(_, a, b)| format!("{a:.3}->{b:.3}"))
            .collect::<Vec<_>>()
            .join(" "),
        started.elapsed().as_secs_f64()
    );
    check(ok, detail.clone(), || detail)
}

fn total_loss_contract() -> Outcome {
    let mut r = rng(300);
    let (mut exact, mut monotone) = (0, 0);
    for _ in 0..100 {
        let n = r.random_range(2..32);
        let labels = balanced_labels(n);
        let mut g = Graph::new();
        let logits = g.input(uniform(&mut r, &[n, 2]));
        let p = g.softmax(logits);
        let probs = g.value(p).clone();
        let x = features(uniform(&mut r, &[n, 6]));
        let y = features(uniform(&mut r, &[n, 4]));
        let zero = LossConfig { lambda: 0.0, ..Default::default() };
        let ce = cross_entropy(&probs, &labels, 0.0).unwrap();
        if total_loss(&probs, &labels, &x, &y, &zero).unwrap().to_bits() == ce.to_bits() {
            exact += 1;
        }
        let values: Vec<f64> = [0.0, 0.05, 0.1, 1.0, 5.0]
            .iter()
            .map(|&lambda| total_loss(&probs, &labels, &x, &y, &LossConfig { lambda, ..Default::default() }).unwrap())
            .collect();
        if values.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
    }
    let detail = format!("bitwise CE at lambda=0: {exact}/100, monotone in lambda: {monotone}/100");
    check(exact == 100 && monotone == 100, detail.clone(), || detail)
}

fn formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(400);
    let (count, dim) = (40, 24);
    let vectors: Vec<f32> = (0..count * dim).map(|_| r.random_range(-3.0f32..3.0)).collect();
    let ids = (0..count).map(|i| format!("clip-{i}")).collect();
    let ds = EmbeddingDataset::new(dim, vectors, ids, balanced_labels(count), "acc").unwrap();
    let path = dir.path().join("acc.femb");
    write_femb(&ds, &path).unwrap();
    let back = read_femb(&path).unwrap();
    let femb_ok = back.vectors().iter().zip(ds.vectors()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.ids() == ds.ids()
        && back.labels() == ds.labels();

    let bytes = encode_femb(&ds);
    let mut caught = 0;
    for _ in 0..1000 {
        let mut flipped = bytes.clone();
        let at = r.random_range(16..bytes.len() - 4);
        flipped[at] ^= 1 << r.random_range(0..8);
        if decode_femb(&flipped, &path).is_err() {
            caught += 1;
        }
    }

    let model = build_fiona((20, 16), 12, 0.3, 3).unwrap();
    let ckpt = dir.path().join("m.fmdl");
    write_checkpoint(&model, &ckpt).unwrap();
    let restored = read_checkpoint(&ckpt).unwrap();
    let ckpt_ok = restored.to_bytes() == model.to_bytes()
        && restored
            .parameters()
            .iter()
            .zip(model.parameters())
            .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let detail = format!("FEMB bitwise {femb_ok}, checkpoint bitwise {ckpt_ok}, CRC caught {caught}/1000 flips");
    check(femb_ok && ckpt_ok && caught == 1000, detail.clone(), || detail)
}

fn parameter_counts() -> Outcome {
    let mut r = rng(500);
    let mut mismatches = Vec::new();
    for i in 0..50u64 {
        let (d1, d2) = (r.random_range(10..800), r.random_range(10..800));
        let cfg = match i % 4 {
            0 => ModelConfig::fcn(d1),
            1 => ModelConfig::cnn(d1),
            2 => ModelConfig::concat_fusion((d1, d2)),
            _ => ModelConfig::fiona((d1.min(200), d2.min(200)), r.random_range(1..=DEFAULT_PROJECTION_DIM)),
        };
        let built = ModelGraph::new(cfg.clone(), &mut rng(i)).unwrap().parameter_count();
        if built != expected_params(&cfg) {
            mismatches.push(format!("{:?}: {built} vs {}", cfg.input_dims, expected_params(&cfg)));
        }
    }
    let fcn = build_fcn(768, DEFAULT_DROPOUT, 0).unwrap().parameter_count();
    let cnn = build_cnn(768, DEFAULT_DROPOUT, 0).unwrap().parameter_count();
    let reference_ok = fcn == expected_params(&ModelConfig::fcn(768)) && cnn == expected_params(&ModelConfig::cnn(768));
    check(
        mismatches.is_empty() && reference_ok,
        format!("50 random builds match; FCN(768) = {fcn}, CNN(768) = {cnn}"),
        || mismatches.join("; "),
    )
}

/// Name, check and time limit in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn main() {
    let criteria: [Criterion; 8] = [
        ("CKA correctness suite", cka_suite, 10),
        ("gradient suite", gradient_suite, 60),
        ("EER oracle", eer_oracle, 10),
        ("end-to-end synthetic training", end_to_end, 240),
        ("fusion trend check", fusion_trend, 600),
        ("total-loss contract", total_loss_contract, 60),
        ("formats", formats, 60),
        ("parameter-count oracle", parameter_counts, 60),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let started = Instant::now();
        let outcome = run().and_then(|detail| within(started.elapsed(), Duration::from_secs(limit)).map(|()| detail));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
