//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=5,6` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rssgen::adapt::{aggregate, average, similarity_weights, w2_distance, AggregationWeights, FeatureStats, DEFAULT_EPS};
use rssgen::channel::los_test;
use rssgen::dataset::{read_jsonl, Split};
use rssgen::experiment::{self, improvements, ExperimentConfig};
use rssgen::loss::{frame_loss, Method};
use rssgen::net::Model;
use rssgen::pac::{self, FiniteClass, PacConfig};
use rssgen::scene::{generate_scene, Scene, SceneConfig};
use rssgen::seed;
use rssgen::trainer::{evaluate, median_val1_mae, sample_efficiency_sweep, Prepared, SweepRow};

struct Outcome {
    pass: bool,
    detail: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: Vec<String>) -> Self {
        Outcome { pass, detail }
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Outcome::new(false, vec![format!("panicked: {}", panic_text(&e))]));
        println!("criterion {n} ({name}): {}  [{:.1}s]", verdict(outcome.pass), t.elapsed().as_secs_f64());
        for line in &outcome.detail {
            println!("    {line}");
        }
        results.push((n, name, outcome));
    };

    run(5, "W2 metric suite", &w2_suite);
    run(6, "gradient correctness", &|| gradient_check(root));
    run(7, "oracle equivalence", &|| oracle_equivalence(root));
    run(8, "aggregation degeneracy", &aggregation_degeneracy);
    run(4, "PAC Monte Carlo", &pac_monte_carlo);
    run(9, "determinism", &|| determinism(root));
    run(3, "collaborative adaptation", &|| collaborative_adaptation(root));
    let sweep = std::cell::OnceCell::new();
    let sweep_rows = || sweep.get_or_init(|| training_sweep(root)).clone();
    run(1, "sample efficiency", &|| sample_efficiency(&sweep_rows()));
    run(2, "shift robustness", &|| shift_robustness(&sweep_rows()));

    results.sort_by_key(|r| r.0);
    println!();
    println!("acceptance summary");
    for (n, name, o) in &results {
        println!("criterion {n} ({name}): {}", verdict(o.pass));
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

// Generated default dataset, shared by several criteria.
fn default_data(root: &Path) -> &'static (ExperimentConfig, std::path::PathBuf) {
    static DATA: std::sync::OnceLock<(ExperimentConfig, std::path::PathBuf)> = std::sync::OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let out = root.join("default");
        experiment::cmd_gen(&cfg, &out).expect("gen");
        (cfg, out)
    })
}

fn w2_suite() -> Outcome {
    let stats = |mu: Vec<f64>, var: Vec<f64>| FeatureStats::from_moments(mu, var, 100).unwrap();
    let mut detail = Vec::new();

    let a = stats(vec![0.3, -1.2, 4.0], vec![0.5, 2.0, 0.01]);
    let zero = w2_distance(&a, &a).unwrap();
    detail.push(format!("identical stats: {zero:e}"));

    let n01 = stats(vec![0.0], vec![1.0]);
    let n14 = stats(vec![1.0], vec![4.0]);
    let known = w2_distance(&n01, &n14).unwrap();
    let known_err = (known - 2f64.sqrt()).abs();
    detail.push(format!("N(0,1) vs N(1,4): {known} (error {known_err:e})"));

    let mut rng = seed::rng(2024, &[5]);
    let random = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mu = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let var = (0..8).map(|_| rng.random_range(0.0..4.0)).collect();
        stats(mu, var)
    };
    let (mut sym, mut tri) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (x, y, z) = (random(&mut rng), random(&mut rng), random(&mut rng));
        let xy = w2_distance(&x, &y).unwrap();
        sym = sym.max((xy - w2_distance(&y, &x).unwrap()).abs());
        let excess = xy - w2_distance(&x, &z).unwrap() - w2_distance(&z, &y).unwrap();
        tri = tri.max(excess);
    }
    detail.push(format!("1000 triples: max asymmetry {sym:e}, max triangle excess {tri:e}"));
    Outcome::new(zero == 0.0 && known_err < 1e-12 && sym < 1e-9 && tri < 1e-9, detail)
}

// Mean frame objective and its analytic gradient over every frame of `data`.
fn objective(model: &Model, lambda: f64, data: &Prepared) -> f64 {
    evaluate(model, Method::Physics, lambda, data).unwrap().loss.l_total
}

fn analytic_gradient(model: &Model, lambda: f64, data: &Prepared) -> Vec<f64> {
    let n = data.n_receivers();
    let tape = model.forward_batch(data.x.view()).unwrap();
    let mut d_heads = ndarray::Array2::zeros(tape.heads.dim());
    for i in 0..data.len() {
        let rows = ndarray::s![i * n..(i + 1) * n, ..];
        let anchor = data.prior.row(i).to_vec();
        let rss = data.rss.row(i).to_vec();
        let (_, g) = frame_loss(Method::Physics, lambda, tape.heads.slice(rows), &anchor, &rss, &data.los[i]);
        d_heads.slice_mut(rows).assign(&(g / data.len() as f64));
    }
    model.backward(&tape, d_heads.view()).unwrap()
}

fn gradient_check(root: &Path) -> Outcome {
    let (cfg, out) = default_data(root);
    let spec = cfg.model_spec();
    let scale = spec.input_scale();
    let records = experiment::load_split(out, 1, Split::Train).unwrap();
    let data = Prepared::new(&records[..6], &scale).unwrap();
    let base = spec.init_model(&cfg.train, Method::Physics, 0.0, 3).unwrap();
    let layout = base.layout.clone();

    let span = |lo: usize, hi: usize| layout.dense[lo].offset..layout.dense[hi].offset + layout.dense[hi].rows * layout.dense[hi].cols + layout.dense[hi].cols;
    let last = layout.dense.len() - 1;
    let groups = [
        ("encoder", span(0, last - 4)),
        ("fusion", span(last - 3, last - 3)),
        ("head", span(last - 2, last)),
        ("embedding", layout.embedding_offset..layout.n_params),
    ];

    let mut detail = Vec::new();
    let mut pass = true;
    let mut rng = seed::rng(6, &[6]);
    for lambda in [0.0, 0.5] {
        let g = analytic_gradient(&base, lambda, &data);
        for (name, range) in &groups {
            let mut worst = 0.0f64;
            let k = 200.min(range.len());
            for _ in 0..k {
                let i = rng.random_range(range.clone());
                let h = 1e-5 * base.params[i].abs().max(1.0);
                let mut m = base.clone();
                m.params[i] += h;
                let up = objective(&m, lambda, &data);
                m.params[i] -= 2.0 * h;
                let down = objective(&m, lambda, &data);
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            pass &= worst < 1e-4;
            detail.push(format!("lambda {lambda}: {name:9} {k} params, max relative error {worst:.2e}"));
        }
    }
    Outcome::new(pass, detail)
}

fn sampled_los(scene: &Scene, rx: usize, n: usize) -> bool {
    let (p0, p1) = (scene.bs_pos, scene.receivers[rx]);
    !(0..n).any(|k| {
        let t = (k as f64 + 0.5) / n as f64;
        let p: [f64; 3] = std::array::from_fn(|a| p0[a] + t * (p1[a] - p0[a]));
        scene.blockers.iter().any(|b| b.contains(p))
    })
}

fn oracle_equivalence(root: &Path) -> Outcome {
    let mut agree = 0usize;
    let mut total = 0usize;
    let mut nlos = 0usize;
    for s in 0..100 {
        let cfg = SceneConfig { seed: 1000 + s, site_seed: s, n_vehicles: 14, ..SceneConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        for rx in 0..scene.receivers.len() {
            let exact = los_test(&scene, rx).los;
            nlos += usize::from(!exact);
            agree += usize::from(exact == sampled_los(&scene, rx, 10_000));
            total += 1;
        }
    }
    let rate = agree as f64 / total as f64;

    let (cfg, out) = default_data(root);
    let (mut records, mut worst) = (0usize, 0.0f64);
    for bs in cfg.bs_ids() {
        for split in Split::ALL {
            for r in read_jsonl(&out.join("data").join(rssgen::dataset::dataset_file_name(bs, split))).unwrap() {
                for i in 0..r.n_receivers() {
                    worst = worst.max((r.rss_dbm[i] - (r.r_los_dbm[i] + r.r_reflection_db[i] - r.r_blockage_db[i])).abs());
                }
                records += 1;
            }
        }
    }
    let detail = vec![
        format!("LoS agreement {agree}/{total} receivers ({:.4}%), {nlos} NLoS", 100.0 * rate),
        format!("decomposition over {records} records: max residual {worst:e} dB"),
    ];
    Outcome::new(rate >= 0.999 && worst <= 1e-9, detail)
}

fn aggregation_degeneracy() -> Outcome {
    let cfg = ExperimentConfig::default();
    let spec = cfg.model_spec();
    let models: Vec<Model> =
        (0..4).map(|s| spec.init_model(&cfg.train, Method::Physics, 0.0, 10 + s).unwrap()).collect();
    let refs: Vec<&Model> = models.iter().collect();
    let equal = similarity_weights(&[0.7; 4], DEFAULT_EPS).unwrap();
    let sim = aggregate(&refs, &equal).unwrap();
    let mean: Vec<f64> = (0..sim.params.len()).map(|i| models.iter().map(|m| m.params[i]).sum::<f64>() / 4.0).collect();
    let to_mean = sim.params.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let to_avg = sim.params.iter().zip(&average(&refs).unwrap().params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let one_hot = (0..4).all(|i| aggregate(&refs, &AggregationWeights::one_hot(4, i)).unwrap().params == models[i].params);
    let detail = vec![
        format!("equal distances vs parameter mean: max |diff| {to_mean:e}; vs averaged baseline {to_avg:e}"),
        format!("one-hot weights reproduce each donor exactly: {one_hot}"),
    ];
    Outcome::new(to_mean <= 1e-12 && to_avg <= 1e-12 && one_hot, detail)
}

fn pac_monte_carlo() -> Outcome {
    let cfg = PacConfig { configs: 20, trials: 200, ..PacConfig::default() };
    let report = pac::run_pac(&cfg).unwrap();
    let floor = report.success_floor_rate;
    let classes: Vec<_> = std::iter::once(&report.default_class).chain(&report.random_classes).collect();
    let worst = classes.iter().map(|c| c.success_worst_case.min(c.success_lexicographic)).fold(1.0, f64::min);
    let sizes = &report.restricted_sizes;
    let monotone = sizes.windows(2).all(|w| w[0].1 <= w[1].1);

    // independent recount on the default class
    let class = FiniteClass::planted(cfg.rays, cfg.bins, &mut seed::rng(cfg.seed, &[seed::tag::PAC])).unwrap();
    let losses: Vec<f64> = class.hypotheses().iter().map(|&h| class.physics_loss(h)).collect();
    let recount = sizes.iter().all(|&(e0, n)| losses.iter().filter(|&&l| l <= e0).count() as u64 == n);

    let detail = vec![
        format!(
            "{} planted configurations, m = {} on the default class (|restricted| = {}); floor {:.4}, worst success {:.4}",
            classes.len(),
            report.default_class.m,
            report.default_class.restricted_class_size,
            floor,
            worst
        ),
        format!("restricted class sizes over {} epsilon0 values: monotone {monotone}, recount matches {recount}", sizes.len()),
    ];
    Outcome::new(report.all_pass && classes.len() >= 20 && worst >= floor && monotone && recount, detail)
}

const TINY: &str = r#"{
  "schema": 1,
  "dataset": { "train_frames": 40, "val1_frames": 24, "val2_frames": 16 },
  "train": { "epochs": 3, "seeds": [1] },
  "adapt": { "epochs": 3, "pool_frames": 12 }
}"#;

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let cfg = ExperimentConfig::from_json(TINY).unwrap();
    let pipeline = |name: &str| {
        let out = root.join(name);
        experiment::cmd_gen(&cfg, &out).unwrap();
        experiment::cmd_train(&cfg, &out).unwrap();
        experiment::cmd_adapt(&cfg, &out, "val1-bs45", true).unwrap();
        out
    };
    let (a, b) = (pipeline("det_a"), pipeline("det_b"));
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let same_names = fa.iter().map(|p| p.strip_prefix(&a).unwrap()).eq(fb.iter().map(|p| p.strip_prefix(&b).unwrap()));
    let identical = fa.iter().zip(&fb).filter(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap()).count();
    let detail = vec![format!("{identical}/{} metrics CSVs byte-identical across two runs", fa.len())];
    Outcome::new(same_names && !fa.is_empty() && identical == fa.len(), detail)
}

fn collaborative_adaptation(root: &Path) -> Outcome {
    let (base, data_out) = default_data(root);
    let mut cfg = base.clone();
    cfg.train.seeds = vec![1];
    cfg.train.eval_every = cfg.train.epochs;
    let out = root.join("adapt_run");
    std::fs::create_dir_all(&out).unwrap();
    std::os::unix::fs::symlink(data_out.join("data"), out.join("data")).unwrap();
    experiment::cmd_train(&cfg, &out).unwrap();
    let (_, summary) = experiment::cmd_adapt(&cfg, &out, "val1-bs45", true).unwrap();

    let mut pass = summary.requesters.len() == 2;
    let mut detail = Vec::new();
    for r in &summary.requesters {
        let (ft_s, ft_f) = (r.fine_tune_samples.unwrap() as f64, r.fine_tune_flops.unwrap() as f64);
        let reach = r.proposed_samples_to_reach.zip(r.proposed_flops_to_reach);
        let (sample_pct, flop_pct) = reach.map_or((f64::INFINITY, f64::INFINITY), |(s, f)| (100.0 * s as f64 / ft_s, 100.0 * f as f64 / ft_f));
        let (prop, avg) = (r.proposed_final_rmse.unwrap(), r.averaged_final_rmse.unwrap());
        let ok = sample_pct <= 50.0 && flop_pct <= 50.0 && avg >= prop;
        pass &= ok;
        detail.push(format!(
            "bs{}: fine-tune final RMSE {:.3} dB; proposed reaches it with {sample_pct:.1}% samples, {flop_pct:.1}% FLOPs; final RMSE proposed {prop:.3}, averaged {avg:.3}; gamma {:?} over donors {:?}",
            r.bs_id,
            r.fine_tune_final_rmse.unwrap(),
            r.gamma.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            r.donor_ids
        ));
    }
    Outcome::new(pass, detail)
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn training_sweep(root: &Path) -> (Vec<SweepRow>, f64) {
    let t = Instant::now();
    let (cfg, out) = default_data(root);
    let spec = cfg.model_spec();
    let mut train = cfg.train.clone();
    train.eval_every = train.epochs;
    let mut rows = Vec::new();
    for bs in cfg.bs_ids() {
        let data = experiment::load_bs(cfg, out, bs).unwrap();
        let runs: [(&[f64], &[Method]); 2] =
            [(&[0.5], &[Method::Physics]), (&[1.0], &[Method::Physics, Method::Baseline1, Method::Baseline2, Method::Baseline3])];
        for (fractions, methods) in runs {
            rows.extend(sample_efficiency_sweep(&spec, &data, fractions, methods, &SEEDS, &train).unwrap().0);
        }
    }
    (rows, t.elapsed().as_secs_f64())
}

fn sample_efficiency((rows, secs): &(Vec<SweepRow>, f64)) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for bs in 1..=5 {
        let half = median_val1_mae(rows, bs, Method::Physics, 0.5).unwrap();
        let full = median_val1_mae(rows, bs, Method::Baseline1, 1.0).unwrap();
        wins += usize::from(half <= full);
        detail.push(format!("bs{bs}: physics@50% {half:.3} dB vs baseline1@100% {full:.3} dB"));
    }
    let minutes = secs / 60.0;
    detail.push(format!("{wins}/5 BSs; training sweep ({} runs) took {minutes:.1} min", rows.len()));
    Outcome::new(wins >= 4 && minutes < 30.0, detail)
}

fn shift_robustness((rows, _): &(Vec<SweepRow>, f64)) -> Outcome {
    let med = |bs: usize, m: Method, pick: fn(&SweepRow) -> f64| {
        let mut v: Vec<f64> = rows.iter().filter(|r| r.bs_id == bs && r.method == m && r.fraction == 1.0).map(pick).collect();
        rssgen::trainer::median(&mut v)
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for bs in 1..=5 {
        let p1 = med(bs, Method::Physics, |r| r.val1_mae);
        let p2 = med(bs, Method::Physics, |r| r.val2_mae);
        let mut line = format!("bs{bs}: physics MAE val1 {p1:.3} val2 {p2:.3}");
        for b in [Method::Baseline1, Method::Baseline2, Method::Baseline3] {
            let (b1, b2) = (med(bs, b, |r| r.val1_mae), med(bs, b, |r| r.val2_mae));
            let ok = if b == Method::Baseline3 { p1 < b1 } else { p1 < b1 && p2 < b2 };
            pass &= ok;
            let imp = improvements(rows, bs, b).unwrap();
            line += &format!(
                "; {} {b1:.3}/{b2:.3} (gain MAE {:.1}%/{:.1}%, RMSE {:.1}%/{:.1}%){}",
                b.name(),
                imp.val1_mae_pct,
                imp.val2_mae_pct,
                imp.val1_rmse_pct,
                imp.val2_rmse_pct,
                if ok { "" } else { " miss" }
            );
        }
        detail.push(line);
    }
    Outcome::new(pass, detail)
}
