//! Acceptance suite: one PASS/FAIL line per criterion, each measured
//! against a reference computed here.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specmtm::backbone::{make_mask, MaskPlan};
use specmtm::config::RunConfig;
use specmtm::data::{load_dataset, normalize};
use specmtm::diagnostics::{energy_histogram, export_bernstein, interaction_rank, DEFAULT_RANK_TOL};
use specmtm::engine::gradcheck::fd_resolution;
use specmtm::engine::graph::Graph;
use specmtm::engine::params::ParameterStore;
use specmtm::model::{Dims, Model};
use specmtm::objectives::LossWeights;
use specmtm::rng::SeedTree;
use specmtm::run::{run_pretrain, run_probe};
use specmtm::ser::{bernstein_basis, GatingParams};
use specmtm::spectral::{dft_forward, FeatureTensor};
use specmtm::verify::tiny_model;
use specmtm::Mat;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn random_mat(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0))
}

/// Complex DFT of one real channel by direct summation.
fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n)
        .map(|s| {
            let mut acc = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = std::f64::consts::TAU * ((s * t) % n) as f64 / n as f64;
                acc.0 += v * a.cos();
                acc.1 -= v * a.sin();
            }
            acc
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut parseval, mut conv) = (0.0f64, 0.0f64);
    for t in [4, 16, 64, 128, 217] {
        for _ in 0..100 {
            let z = random_mat(t, 2, &mut rng);
            let k = random_mat(t, 2, &mut rng);
            let fz = dft_forward(&FeatureTensor::new(z.clone()).unwrap());
            let fk = dft_forward(&FeatureTensor::new(k.clone()).unwrap());

            let e_t: f64 = z.as_slice().iter().map(|v| v * v).sum();
            let e_f: f64 = fz.re.as_slice().iter().chain(fz.im.as_slice()).map(|v| v * v).sum::<f64>() / t as f64;
            parseval = parseval.max((e_t - e_f).abs() / e_t);

            let mut y = Mat::zeros(t, 2);
            for c in 0..2 {
                for n in 0..t {
                    y[(n, c)] = (0..t).map(|m| k[(m, c)] * z[((n + t - m) % t, c)]).sum();
                }
            }
            let fy = dft_forward(&FeatureTensor::new(y).unwrap());
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..t * 2 {
                let (a, b) = (fk.re.as_slice()[i], fk.im.as_slice()[i]);
                let (c, d) = (fz.re.as_slice()[i], fz.im.as_slice()[i]);
                let (pr, pi) = (a * c - b * d, a * d + b * c);
                num += (fy.re.as_slice()[i] - pr).powi(2) + (fy.im.as_slice()[i] - pi).powi(2);
                den += pr * pr + pi * pi;
            }
            conv = conv.max((num / den).sqrt());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        parseval <= 1e-10 && conv <= 1e-10 && secs < 10.0,
        format!("parseval {parseval:.2e}, convolution {conv:.2e} (tol 1e-10), {secs:.2}s (< 10s)"),
    )
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (mut unity, mut linear, mut closed) = (0.0f64, 0.0f64, 0.0f64);
    for k in [1, 2, 4, 8, 12, 16] {
        for i in 0..1000 {
            let w = i as f64 / 999.0;
            let b = bernstein_basis(k, w).unwrap();
            let v = b.values();
            unity = unity.max((v.iter().sum::<f64>() - 1.0).abs());
            let lin: f64 = v.iter().enumerate().map(|(j, bj)| j as f64 / k as f64 * bj).sum();
            linear = linear.max((lin - w).abs());
            for (j, bj) in v.iter().enumerate() {
                let r = binomial(k, j) * w.powi(j as i32) * (1.0 - w).powi((k - j) as i32);
                closed = closed.max((bj - r).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        unity <= 1e-12 && linear <= 1e-12 && closed <= 1e-12 && secs < 5.0,
        format!(
            "partition {unity:.2e}, linear {linear:.2e}, vs closed form {closed:.2e} (tol 1e-12), {secs:.2}s (< 5s)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let cfg = RunConfig::default().model;
    let dims = Dims::new(128, 2, 3, cfg.window).unwrap();
    let mut model = Model::new(&cfg, dims, SeedTree::new(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let token = random_mat(1, cfg.d, &mut rng);
    model.store.set(model.mask_token, token.clone()).unwrap();
    let dec = model.cbd.as_ref().unwrap();
    let pos = model.store.by_name("cbd.pos").unwrap().value.clone();
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let mask = make_mask(dims.tokens, 0.75, trial).unwrap();
        let visible = mask.visible();
        let feats = random_mat(visible.len(), cfg.d, &mut rng);
        let mut g = Graph::new(&model.store);
        let fv = g.constant(feats.clone());
        let tv = g.param(model.mask_token);
        let out = dec.forward(&mut g, fv, &mask, tv).unwrap();
        let (re, im) = (g.value(out.spectrum.re), g.value(out.spectrum.im));

        let mut restored = Mat::zeros(dims.tokens, cfg.d);
        for r in 0..dims.tokens {
            let src = match visible.iter().position(|&v| v == r) {
                Some(i) => feats.row(i).to_vec(),
                None => token.row(0).to_vec(),
            };
            for c in 0..cfg.d {
                restored[(r, c)] = src[c] + pos[(r, c)];
            }
        }
        for c in 0..cfg.d {
            for (s, (er, ei)) in naive_dft(&restored.col_vec(c)).into_iter().enumerate() {
                worst = worst.max((re[(s, c)] - er).abs()).max((im[(s, c)] - ei).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |decoder − DFT(scattered)| = {worst:.2e} over 5 masks, d=128, U=2 (tol 1e-12)"),
    )
}

/// Central differences on up to `per_tensor` coordinates of every tensor
/// selected by `scope`.
fn fd_error(model: &Model, scope: &dyn Fn(&str) -> bool, w: &LossWeights, per_tensor: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Mat::from_fn(model.dims.length, model.dims.channels, |_, _| rng.random_range(-0.8..0.8));
    let mask = make_mask(model.dims.tokens, 0.5, 4).unwrap();
    let eval = |s: &ParameterStore| {
        let mut g = Graph::new(s);
        let f = model.pretrain_forward(&mut g, &x, &mask, w).unwrap();
        (g.value(f.loss.total)[(0, 0)], g.backward(f.loss.total).unwrap())
    };
    let (_, grads) = eval(&model.store);
    let mut work = model.store.clone();
    let h = 1e-5;
    let (mut worst, mut probes) = (0.0f64, 0usize);
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| scope(&p.name)).map(|(id, p)| (id, p.value.len())).collect();
    for (id, n) in ids {
        for _ in 0..per_tensor.min(n) {
            let i = rng.random_range(0..n);
            let orig = work.value(id).as_slice()[i];
            work.value_mut(id).as_mut_slice()[i] = orig + h;
            let fp = eval(&work).0;
            work.value_mut(id).as_mut_slice()[i] = orig - h;
            let fm = eval(&work).0;
            work.value_mut(id).as_mut_slice()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(id).as_slice()[i];
            let floor = fd_resolution(fp, fm, h);
            if analytic.abs() <= floor && numeric.abs() <= floor {
                continue;
            }
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
            probes += 1;
        }
    }
    (worst, probes)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let model = tiny_model(21).unwrap();
    assert_eq!((model.config.d, model.dims.tokens, model.config.decoder_layers), (8, 8, 1));
    let all = LossWeights::default();
    let term = |name: &str| LossWeights {
        gamma: 1.0,
        temporal_re: name == "temporal_re",
        freq_dual: name == "freq_dual",
        freq_re: name == "freq_re",
        temporal_dual: name == "temporal_dual",
    };
    let body = |n: &str| !Model::is_head_param(n);
    let cases: Vec<(&str, Box<dyn Fn(&str) -> bool>, LossWeights)> = vec![
        ("cim", Box::new(|n: &str| n.contains(".cim.")), all),
        ("ser", Box::new(|n: &str| n.contains(".ser.")), all),
        ("cbd block", Box::new(|n: &str| n.starts_with("cbd.block")), all),
        ("encoder", Box::new(|n: &str| n.starts_with("enc.")), all),
        ("temporal decoder", Box::new(|n: &str| n.starts_with("td.")), all),
        ("L_T^re", Box::new(body), term("temporal_re")),
        ("L_F^dual", Box::new(body), term("freq_dual")),
        ("L_F^re", Box::new(body), term("freq_re")),
        ("L_T^dual", Box::new(body), term("temporal_dual")),
    ];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (name, scope, w) in &cases {
        let (e, n) = fd_error(&model, scope.as_ref(), w, 5);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}/{n}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("worst rel {worst:.2e} (tol 1e-4), {secs:.1}s (< 60s): {}", parts.join(", ")),
    )
}

fn criterion_5() -> Outcome {
    let draws = 100_000;
    let mut counts_ok = true;
    let mut worst_exact = 0.0f64;
    let mut literal = Vec::new();
    for (t, expect) in [(16usize, 12usize), (50, 38), (128, 96)] {
        let mut hits = vec![0u32; t];
        for i in 0..draws {
            let m: MaskPlan = make_mask(t, 0.75, (t as u64) << 32 | i).unwrap();
            counts_ok &= m.masked.len() == expect;
            for &p in &m.masked {
                hits[p] += 1;
            }
        }
        let p = expect as f64 / t as f64;
        let freqs: Vec<f64> = hits.iter().map(|&h| h as f64 / draws as f64).collect();
        worst_exact = worst_exact.max(freqs.iter().map(|f| (f - p).abs()).fold(0.0, f64::max));
        literal.push(format!("T={t}: {:.4}", freqs.iter().map(|f| (f - 0.75).abs()).fold(0.0, f64::max)));
    }
    outcome(
        counts_ok && worst_exact <= 0.01,
        format!(
            "counts {{12, 38, 96}} exact: {counts_ok}; worst per-position frequency vs round(0.75T)/T {worst_exact:.4} (tol 0.01); \
             vs 0.75 literally [{}] (T=50 masks 38/50 = 0.76, on the band edge)",
            literal.join(", ")
        ),
    )
}

fn spectral_magnitudes(x: &Mat) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..x.cols() {
        let s = naive_dft(&x.col_vec(c));
        out.extend(s[..x.rows() / 2 + 1].iter().map(|(a, b)| a.hypot(*b)));
    }
    out
}

/// Nearest class centroid of one-sided DFT magnitudes.
fn centroid_accuracy(cfg: &RunConfig) -> f64 {
    let ds = load_dataset(&cfg.data, cfg.seed).unwrap();
    let k = ds.meta.classes;
    let ytr = ds.train.labels().unwrap();
    let feats: Vec<Vec<f64>> = ds.train.samples().iter().map(spectral_magnitudes).collect();
    let dim = feats[0].len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0.0; k];
    for (f, &y) in feats.iter().zip(ytr) {
        counts[y] += 1.0;
        for (c, v) in centroids[y].iter_mut().zip(f) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let yte = ds.test.labels().unwrap();
    let mut correct = 0;
    for (x, &y) in ds.test.samples().iter().zip(yte) {
        let f = spectral_magnitudes(x);
        let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        correct += usize::from(best == y);
    }
    correct as f64 / yte.len() as f64
}

fn criterion_6(work: &Path) -> Outcome {
    let mut cfg = RunConfig::load(&configs_dir().join("smoke.toml")).unwrap();
    let oracle = centroid_accuracy(&cfg);
    let start = Instant::now();
    cfg.out = work.join("smoke_pre");
    let pre = run_pretrain(&cfg).unwrap();
    let ratio = pre.metrics["final_over_initial"].as_f64().unwrap();
    let mut pcfg = cfg.clone();
    pcfg.out = work.join("smoke_probe");
    let probe = run_probe(&pcfg, Some(&cfg.out.join("model.ckpt"))).unwrap();
    let acc = probe.metrics["test_accuracy"].as_f64().unwrap();
    let elapsed = start.elapsed();
    // Check the normalized data matches what the oracle saw.
    let (ds, _) = normalize(&load_dataset(&cfg.data, cfg.seed).unwrap()).unwrap();
    assert_eq!(ds.test.len(), 120);
    outcome(
        oracle == 1.0 && acc >= 0.9 && ratio < 0.5 && elapsed < Duration::from_secs(600),
        format!(
            "centroid oracle {:.1}% (needs 100%), probe test accuracy {:.1}% (>= 90%), final/epoch-1 loss {ratio:.3} (< 0.5), \
             {:.0}s (< 600s) with {} workers",
            oracle * 100.0,
            acc * 100.0,
            elapsed.as_secs_f64(),
            std::env::var("SPECMTM_THREADS").unwrap_or_default()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut concentrated = 1.0f64;
    for (t, s) in [(64usize, 5usize), (128, 17), (100, 31), (32, 0)] {
        let x = Mat::from_fn(t, 1, |r, _| {
            if s == 0 {
                1.0
            } else {
                (std::f64::consts::TAU * (s * r) as f64 / t as f64 + 0.3).cos()
            }
        });
        let h = energy_histogram(&x, 10).unwrap();
        concentrated = concentrated.min(h.values.iter().cloned().fold(0.0, f64::max));
    }
    let id = interaction_rank(&Mat::identity(16), DEFAULT_RANK_TOL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (u, v) = (random_mat(16, 1, &mut rng), random_mat(16, 1, &mut rng));
    let one = interaction_rank(&u.matmul_t(&v), DEFAULT_RANK_TOL).unwrap();
    let curve = export_bernstein(&GatingParams::identity(12, 16), &[1.0 / 16.0; 16], 201).unwrap();
    let dev = curve.iter().map(|(_, p)| (p - 1.0).abs()).fold(0.0, f64::max);
    outcome(
        concentrated >= 0.999 && id == 16 && one == 1 && dev <= 1e-12,
        format!(
            "min peak band energy {concentrated:.6} (>= 0.999), rank(I16) = {id}, rank(uvᵀ) = {one}, identity curve dev {dev:.1e}"
        ),
    )
}

fn loss_columns(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn criterion_8(work: &Path) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (file, expect_zero, expect_cbd) in [
        ("ablation_gamma0.toml", [false, false, true, true], true),
        ("plain_mtm.toml", [false, true, true, true], false),
    ] {
        let mut cfg = RunConfig::load(&configs_dir().join(file)).unwrap();
        cfg.train.epochs = 2;
        cfg.out = work.join(file);
        run_pretrain(&cfg).unwrap();
        let rows = loss_columns(&cfg.out.join("loss.csv"));
        let (model, _) = Model::load(&cfg.out.join("model.ckpt")).unwrap();
        let mut this = model.cbd.is_some() == expect_cbd;
        for r in &rows {
            // Columns: total, temporal_re, freq_dual, freq_re, temporal_dual.
            for (j, &z) in expect_zero.iter().enumerate() {
                this &= (r[j + 1] == 0.0) == z;
            }
            this &= r[0].is_finite();
        }
        ok &= this;
        notes.push(format!("{file}: {}", if this { "terms as expected" } else { "unexpected terms" }));
    }
    outcome(ok, notes.join("; "))
}

fn criterion_9(work: &Path) -> Outcome {
    let mut cfg = RunConfig::load(&configs_dir().join("plain_mtm.toml")).unwrap();
    cfg.model.cbd_enabled = true;
    cfg.loss = LossWeights::default();
    cfg.train.epochs = 3;
    let mut runs = Vec::new();
    for name in ["det_a", "det_b"] {
        cfg.out = work.join(name);
        run_pretrain(&cfg).unwrap();
        runs.push(std::fs::read(cfg.out.join("loss.csv")).unwrap());
    }
    outcome(runs[0] == runs[1], format!("loss.csv byte-identical across two runs: {}", runs[0] == runs[1]))
}

fn main() {
    if std::env::var_os("SPECMTM_THREADS").is_none() {
        std::env::set_var("SPECMTM_THREADS", "4");
    }
    let work = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("transform theorems", Box::new(criterion_1)),
        ("bernstein identities", Box::new(criterion_2)),
        ("identity at init", Box::new(criterion_3)),
        ("gradient checks", Box::new(criterion_4)),
        ("mask contract", Box::new(criterion_5)),
        ("smoke pretrain -> probe", Box::new(|| criterion_6(work.path()))),
        ("diagnostics fidelity", Box::new(criterion_7)),
        ("ablation hooks", Box::new(|| criterion_8(work.path()))),
        ("determinism", Box::new(|| criterion_9(work.path()))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.passed);
        println!("criterion {} {:<24} {}  {}", i + 1, name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
