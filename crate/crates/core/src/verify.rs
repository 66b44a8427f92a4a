//! Self-check suite run by `specmtm verify`: transform theorems, Bernstein
//! identities, identity at initialization, gradient checks, the masking
//! contract and diagnostic sanity cases. Every check reports the error it
//! measured next to its tolerance.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{make_mask, MaskPlan};
use crate::cbd::{cbd_decode, BlockOptions, CbdBlockParams, CbdStack};
use crate::config::ModelConfig;
use crate::diagnostics::{energy_histogram, export_bernstein, interaction_rank, DEFAULT_RANK_TOL};
use crate::engine::gradcheck::{fd_check, FdOptions, FdReport};
use crate::engine::graph::Graph;
use crate::engine::params::{ParamId, ParameterStore};
use crate::error::Result;
use crate::model::{Dims, Model};
use crate::objectives::LossWeights;
use crate::rng::SeedTree;
use crate::ser::{bernstein_basis, GatingParams};
use crate::spectral::{circular_convolve, dft_forward, dft_inverse, energy, spectral_energy, FeatureTensor};
use crate::tensor::Mat;

pub const THEOREM_SIZES: [usize; 5] = [4, 16, 64, 128, 217];
pub const BERNSTEIN_ORDERS: [usize; 6] = [1, 2, 4, 8, 12, 16];

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    fn at_most(name: impl Into<String>, measured: f64, tolerance: f64, start: Instant) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Suite {
    pub checks: Vec<Check>,
}

impl Suite {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<44} measured {:<12.3e} tolerance {:<9.1e} {:.2}s",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.seconds
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.checks.len());
        s
    }
}

fn random_features(t: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureTensor {
    FeatureTensor::new(Mat::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0))).expect("finite")
}

/// Worst relative errors of Parseval's identity and of the convolution
/// theorem over `instances` random inputs per size.
pub fn theorem_errors(sizes: &[usize], instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut parseval, mut conv) = (0.0f64, 0.0f64);
    for &t in sizes {
        for _ in 0..instances {
            let z = random_features(t, 3, &mut rng);
            let e = energy(z.values());
            let ef = spectral_energy(&dft_forward(&z)) / t as f64;
            parseval = parseval.max((e - ef).abs() / e);

            let k = random_features(t, 3, &mut rng);
            let lhs = dft_forward(&circular_convolve(&k, &z)?);
            let (fk, fz) = (dft_forward(&k), dft_forward(&z));
            let re = fk.re.zip_map(&fz.re, |a, b| a * b).zip_map(&fk.im.zip_map(&fz.im, |a, b| a * b), |a, b| a - b);
            let im = fk.re.zip_map(&fz.im, |a, b| a * b).zip_map(&fk.im.zip_map(&fz.re, |a, b| a * b), |a, b| a + b);
            let dre = lhs.re.zip_map(&re, |a, b| a - b).frobenius_norm();
            let dim = lhs.im.zip_map(&im, |a, b| a - b).frobenius_norm();
            conv = conv.max(dre.hypot(dim) / re.frobenius_norm().hypot(im.frobenius_norm()));
        }
    }
    Ok((parseval, conv))
}

/// Worst partition-of-unity and linear-reproduction errors on a uniform
/// grid of `grid` points.
pub fn bernstein_errors(orders: &[usize], grid: usize) -> Result<(f64, f64)> {
    let (mut unity, mut linear) = (0.0f64, 0.0f64);
    for &k in orders {
        let ramp: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
        for i in 0..grid {
            let w = i as f64 / (grid - 1) as f64;
            let b = bernstein_basis(k, w)?;
            unity = unity.max((b.values().iter().sum::<f64>() - 1.0).abs());
            linear = linear.max((b.eval(&ramp) - w).abs());
        }
    }
    Ok((unity, linear))
}

/// Max deviation of a fresh decoder stack from the plain transform of the
/// restored sequence.
pub fn identity_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (16, 8);
    let stack = CbdStack {
        blocks: (0..2).map(|_| CbdBlockParams::init(d, t, 12, 2 * d, &mut rng)).collect(),
        positional: Mat::normal(t, d, 0.02, &mut rng),
    };
    let mask = make_mask(t, 0.75, seed)?;
    let visible = mask.visible().len();
    let features = Mat::normal(visible, d, 1.0, &mut rng);
    let token = Mat::normal(1, d, 1.0, &mut rng);
    let out = cbd_decode(&FeatureTensor::new(features.clone())?, &mask, &stack, &token, BlockOptions::default())?;
    let mut restored = Mat::zeros(t, d);
    let mut next = 0;
    for r in 0..t {
        let src = if mask.is_masked(r) {
            token.row(0).to_vec()
        } else {
            next += 1;
            features.row(next - 1).to_vec()
        };
        for (c, v) in src.into_iter().enumerate() {
            restored[(r, c)] = v + stack.positional[(r, c)];
        }
    }
    let expect = dft_forward(&FeatureTensor::new(restored)?);
    Ok(out.re.max_abs_diff(&expect.re).max(out.im.max_abs_diff(&expect.im)))
}

/// The tiny model used by the gradient checks: `d = 8`, eight tokens, one
/// decoder layer and one spectral block, moved off its initial point.
pub fn tiny_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        d: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        cbd_blocks: 1,
        heads: 2,
        window: 2,
        ff_mult: 2,
        order: 3,
        ..Default::default()
    };
    let mut m = Model::new(&cfg, Dims::new(16, 2, 3, 2)?, SeedTree::new(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (r, c) = m.store.value(id).shape();
        let noise = Mat::normal(r, c, 0.1, &mut rng);
        m.store.value_mut(id).add_assign(&noise);
    }
    Ok(m)
}

/// Worst finite-difference error over the parameters selected by `scope`
/// for the pre-training loss with weights `w`.
pub fn gradient_error(m: &Model, scope: &dyn Fn(&str) -> bool, w: &LossWeights, seed: u64) -> Result<FdReport> {
    let mut m = m.clone();
    m.set_trainable(scope);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::normal(m.dims.length, m.dims.channels, 0.5, &mut rng);
    let mask = make_mask(m.dims.tokens, 0.5, seed)?;
    let model = &m;
    let report = fd_check(
        |s: &ParameterStore| {
            let mut g = Graph::new(s);
            let f = model.pretrain_forward(&mut g, &x, &mask, w)?;
            Ok((g.value(f.loss.total)[(0, 0)], g.backward(f.loss.total)?))
        },
        &m.store,
        &FdOptions {
            probes: 6,
            per_tensor: true,
            seed,
            ..Default::default()
        },
    )?;
    Ok(report)
}

fn only(term: &str) -> LossWeights {
    LossWeights {
        gamma: 1.0,
        temporal_re: term == "temporal_re",
        freq_dual: term == "freq_dual",
        freq_re: term == "freq_re",
        temporal_dual: term == "temporal_dual",
    }
}

/// `(name, report, seconds)` for every trainable module and every loss
/// term.
pub fn gradient_errors(seed: u64) -> Result<Vec<(String, FdReport, f64)>> {
    let m = tiny_model(seed)?;
    let all = LossWeights::default();
    let scopes: [(&str, &dyn Fn(&str) -> bool); 5] = [
        ("cim", &|n| n.starts_with("cbd.block0.cim.")),
        ("ser", &|n| n.starts_with("cbd.block0.ser.")),
        ("cbd block", &|n| n.starts_with("cbd.block0.")),
        ("encoder", &|n| n.starts_with("enc.")),
        ("temporal decoder", &|n| n.starts_with("td.")),
    ];
    let mut out = Vec::new();
    for (name, scope) in scopes {
        let start = Instant::now();
        let r = gradient_error(&m, scope, &all, seed)?;
        out.push((name.to_string(), r, start.elapsed().as_secs_f64()));
    }
    let every = |n: &str| !Model::is_head_param(n);
    for term in ["temporal_re", "freq_dual", "freq_re", "temporal_dual"] {
        let start = Instant::now();
        let r = gradient_error(&m, &every, &only(term), seed)?;
        out.push((format!("loss {term}"), r, start.elapsed().as_secs_f64()));
    }
    Ok(out)
}

/// Worst masked-count error and worst deviation of per-position
/// inclusion frequency from its exact value `round(ratio·T)/T` over
/// `draws` masks per length.
pub fn mask_errors(lengths: &[usize], ratio: f64, draws: usize, seed: u64) -> Result<(usize, f64)> {
    let (mut count_err, mut freq_err) = (0usize, 0.0f64);
    let seeds = SeedTree::new(seed);
    for &t in lengths {
        let expect = (ratio * t as f64).round() as usize;
        let mut hits = vec![0usize; t];
        for i in 0..draws {
            let m: MaskPlan = make_mask(t, ratio, seeds.child("mask").index(t as u64).index(i as u64).seed())?;
            count_err = count_err.max(m.masked.len().abs_diff(expect));
            for &p in &m.masked {
                hits[p] += 1;
            }
        }
        let p = expect as f64 / t as f64;
        for h in hits {
            freq_err = freq_err.max((h as f64 / draws as f64 - p).abs());
        }
    }
    Ok((count_err, freq_err))
}

/// Runs every check.
pub fn run_suite(seed: u64) -> Result<Suite> {
    let mut checks = Vec::new();

    let start = Instant::now();
    let (parseval, conv) = theorem_errors(&THEOREM_SIZES, 100, seed)?;
    checks.push(Check::at_most("parseval identity", parseval, 1e-10, start));
    checks.push(Check::at_most("convolution theorem", conv, 1e-10, start));

    let start = Instant::now();
    let z = random_features(217, 3, &mut ChaCha8Rng::seed_from_u64(seed));
    let back = dft_inverse(&dft_forward(&z))?;
    checks.push(Check::at_most("inverse transform roundtrip", back.values().rel_error(z.values()), 1e-10, start));

    let start = Instant::now();
    let (unity, linear) = bernstein_errors(&BERNSTEIN_ORDERS, 1000)?;
    checks.push(Check::at_most("bernstein partition of unity", unity, 1e-12, start));
    checks.push(Check::at_most("bernstein linear reproduction", linear, 1e-12, start));

    let start = Instant::now();
    checks.push(Check::at_most("decoder identity at init", identity_error(seed)?, 1e-12, start));

    for (name, r, seconds) in gradient_errors(seed)? {
        let mut c = Check::at_most(format!("gradient {name}"), r.max_rel_error, 1e-4, Instant::now());
        c.seconds = seconds;
        checks.push(c);
    }

    let start = Instant::now();
    let (count, freq) = mask_errors(&[16, 50, 128], 0.75, 100_000, seed)?;
    checks.push(Check::at_most("mask count", count as f64, 0.0, start));
    checks.push(Check::at_most("mask inclusion frequency", freq, 0.01, start));

    let start = Instant::now();
    let t = 64;
    let sine = Mat::from_fn(t, 1, |r, _| (2.0 * std::f64::consts::PI * 5.0 * r as f64 / t as f64).sin());
    let h = energy_histogram(&sine, 10)?;
    let peak = h.values.iter().cloned().fold(0.0, f64::max);
    checks.push(Check::at_most("sinusoid energy outside one band", 1.0 - peak, 1e-3, start));
    let start = Instant::now();
    let id_rank = interaction_rank(&Mat::identity(16), DEFAULT_RANK_TOL)?;
    let u = Mat::column(&(1..=16).map(f64::from).collect::<Vec<_>>());
    let one = interaction_rank(&u.matmul_t(&u), DEFAULT_RANK_TOL)?;
    checks.push(Check::at_most(
        "rank of identity and rank-one",
        (id_rank.abs_diff(16) + one.abs_diff(1)) as f64,
        0.0,
        start,
    ));
    let start = Instant::now();
    let a = vec![1.0 / 16.0; 16];
    let curve = export_bernstein(&GatingParams::identity(12, 16), &a, 101)?;
    let dev = curve.iter().map(|(_, p)| (p - 1.0).abs()).fold(0.0, f64::max);
    checks.push(Check::at_most("identity gate curve", dev, 1e-12, start));

    Ok(Suite { checks })
}
