//! Analytic artifacts: numerical rank of attention matrices, band energy
//! of spectra, and samples of learned Bernstein polynomials.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ser::{bernstein_basis, gate_coefficients, GatingParams};
use crate::spectral::{amplitude, dft_forward, FeatureTensor};
use crate::tensor::Mat;

pub const DEFAULT_RANK_TOL: f64 = 1e-6;
pub const DEFAULT_BANDS: usize = 10;

/// Number of singular values above `rel_tol · σ_max`.
pub fn interaction_rank(attn: &Mat, rel_tol: f64) -> Result<usize> {
    if attn.rows() != attn.cols() {
        return Err(Error::shape("interaction_rank", "square matrix", format!("{:?}", attn.shape())));
    }
    attn.ensure_finite("attention")?;
    if attn.is_empty() {
        return Ok(0);
    }
    let sv = attn.to_nalgebra().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}

/// Normalized energy per frequency band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyHistogram {
    /// Inclusive bin ranges `[lo, hi]`.
    pub bands: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    /// Set when the input had no energy; `values` is then uniform.
    pub zero_energy: bool,
}

/// Band edges over one-sided bins `0..=⌊S/2⌋`; the last band takes the
/// remainder.
pub fn band_edges(bins: usize, num_bands: usize) -> Result<Vec<(usize, usize)>> {
    let one_sided = bins / 2 + 1;
    if num_bands == 0 || num_bands > one_sided {
        return Err(Error::InvalidArgument(format!(
            "band count {num_bands} must lie in 1..={one_sided} for {bins} bins"
        )));
    }
    let width = one_sided / num_bands;
    Ok((0..num_bands)
        .map(|b| {
            let lo = b * width;
            let hi = if b + 1 == num_bands { one_sided - 1 } else { lo + width - 1 };
            (lo, hi)
        })
        .collect())
}

/// Per-band sum of squared amplitudes (all channels), normalized to 1.
pub fn energy_histogram(x: &Mat, num_bands: usize) -> Result<EnergyHistogram> {
    let spec = dft_forward(&FeatureTensor::new(x.clone())?);
    let amp = amplitude(&spec);
    let bands = band_edges(x.rows(), num_bands)?;
    let mut values: Vec<f64> = bands
        .iter()
        .map(|&(lo, hi)| (lo..=hi).map(|s| amp.row(s).iter().map(|a| a * a).sum::<f64>()).sum())
        .collect();
    let total: f64 = values.iter().sum();
    let zero_energy = total == 0.0;
    if zero_energy {
        values.iter_mut().for_each(|v| *v = 1.0 / num_bands as f64);
    } else {
        values.iter_mut().for_each(|v| *v /= total);
    }
    Ok(EnergyHistogram {
        bands,
        values,
        zero_energy,
    })
}

/// `(w, p_K(w))` on a uniform grid of `[0, 1]`, with coefficients from
/// the gate applied to one channel's normalized amplitude.
pub fn export_bernstein(g: &GatingParams, a_norm_channel: &[f64], grid_size: usize) -> Result<Vec<(f64, f64)>> {
    let theta = gate_coefficients(a_norm_channel, g)?;
    bernstein_curve(&theta, grid_size)
}

/// Samples `Σ_k θ_k B_k^K(w)` on a uniform grid.
pub fn bernstein_curve(theta: &[f64], grid_size: usize) -> Result<Vec<(f64, f64)>> {
    if grid_size < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    if theta.len() < 2 {
        return Err(Error::InvalidArgument("need at least two coefficients".into()));
    }
    let order = theta.len() - 1;
    (0..grid_size)
        .map(|i| {
            let w = i as f64 / (grid_size - 1) as f64;
            Ok((w, bernstein_basis(order, w)?.eval(theta)))
        })
        .collect()
}

/// Rank of one layer's (head-averaged) attention matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRank {
    pub layer: usize,
    /// Rank on the first sample.
    pub rank: usize,
    /// Mean rank over all sampled inputs.
    pub mean_rank: f64,
    pub size: usize,
    pub rel_tol: f64,
    /// Ranks of the individual heads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_head: Option<Vec<usize>>,
}

/// Band energies of the raw input and of both reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub bands: Vec<(usize, usize)>,
    pub raw: Vec<f64>,
    pub reconstructed_t: Vec<f64>,
    /// Absent when the model has no spectral decoder.
    pub reconstructed_f: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub ranks: Vec<LayerRank>,
    pub energy: EnergyReport,
    /// `(w, p_K(w))` of the first block's gate on channel 0.
    pub bernstein: Vec<(f64, f64)>,
    /// Imaginary-residue norms of the frequency branch's inverse transform.
    pub residue_norms: Vec<f64>,
    /// Smallest sampled scale factor; negative values are reported, not clamped.
    pub min_scale: Option<f64>,
}

impl DiagnosticsReport {
    /// Writes `ranks.json`, `energy.csv`, `bernstein.csv` and
    /// `report.json` into `dir`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text)?;
            written.push(p);
            Ok(())
        };
        put("ranks.json", to_json(&self.ranks)?)?;

        let mut csv = String::from("band_lo,band_hi,raw,reconstructed_T,reconstructed_F\n");
        let e = &self.energy;
        for (i, &(lo, hi)) in e.bands.iter().enumerate() {
            let f = e.reconstructed_f.as_ref().map(|f| f[i].to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{lo},{hi},{},{},{f}", e.raw[i], e.reconstructed_t[i]);
        }
        put("energy.csv", csv)?;

        let mut csv = String::from("w,pK\n");
        for (w, p) in &self.bernstein {
            let _ = writeln!(csv, "{w},{p}");
        }
        put("bernstein.csv", csv)?;
        put("report.json", to_json(self)?)?;
        Ok(written)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Row reduction with partial pivoting.
    fn elimination_rank(m: &Mat, tol: f64) -> usize {
        let mut a: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        let (rows, cols) = m.shape();
        let scale = m.max_abs();
        let mut rank = 0;
        for c in 0..cols {
            let p = (rank..rows).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()));
            let Some(p) = p else { break };
            if a[p][c].abs() <= tol * scale {
                continue;
            }
            a.swap(rank, p);
            for r in rank + 1..rows {
                let f = a[r][c] / a[rank][c];
                for k in c..cols {
                    a[r][k] -= f * a[rank][k];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn rank_examples() {
        assert_eq!(interaction_rank(&Mat::identity(8), DEFAULT_RANK_TOL).unwrap(), 8);
        let u = Mat::column(&[1.0, 2.0, 3.0, 4.0]);
        let v = Mat::row_vector(&[0.5, -1.0, 2.0, 0.1]);
        let outer = u.matmul(&v);
        assert_eq!(interaction_rank(&outer, DEFAULT_RANK_TOL).unwrap(), 1);
        assert_eq!(interaction_rank(&outer.scale(-250.0), DEFAULT_RANK_TOL).unwrap(), 1);
        assert_eq!(interaction_rank(&Mat::zeros(3, 3), DEFAULT_RANK_TOL).unwrap(), 0);
        assert!(interaction_rank(&Mat::zeros(2, 3), DEFAULT_RANK_TOL).is_err());
        let mut bad = Mat::identity(2);
        bad.as_mut_slice()[1] = f64::NAN;
        assert!(interaction_rank(&bad, DEFAULT_RANK_TOL).is_err());
    }

    #[test]
    fn random_rank_agrees_with_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::normal(16, 16, 1.0, &mut rng);
        assert_eq!(interaction_rank(&a, DEFAULT_RANK_TOL).unwrap(), 16);
        assert_eq!(elimination_rank(&a, 1e-9), 16);
        // Rank-5 product.
        let low = Mat::normal(16, 5, 1.0, &mut rng).matmul(&Mat::normal(5, 16, 1.0, &mut rng));
        assert_eq!(interaction_rank(&low, DEFAULT_RANK_TOL).unwrap(), 5);
        assert_eq!(elimination_rank(&low, 1e-9), 5);
    }

    #[test]
    fn energy_examples() {
        let dc = Mat::filled(32, 2, 3.0);
        let h = energy_histogram(&dc, 4).unwrap();
        assert_eq!(h.values[0], 1.0);
        assert!(!h.zero_energy);

        let s = 11;
        let sine = Mat::from_fn(64, 1, |t, _| (std::f64::consts::TAU * s as f64 * t as f64 / 64.0).sin());
        let h = energy_histogram(&sine, 10).unwrap();
        let band = h.bands.iter().position(|&(lo, hi)| (lo..=hi).contains(&s)).unwrap();
        assert!(h.values[band] >= 0.999, "{h:?}");

        let z = energy_histogram(&Mat::zeros(16, 1), 3).unwrap();
        assert!(z.zero_energy);
        assert!(z.values.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(energy_histogram(&dc, 0).is_err());
        assert!(energy_histogram(&dc, 18).is_err());
    }

    #[test]
    fn energy_matches_per_bin_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::normal(50, 3, 1.0, &mut rng);
        let h = energy_histogram(&x, 7).unwrap();
        assert!((h.values.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(h.bands.last().unwrap().1, 25);
        let mut per_bin = vec![0.0; 26];
        for (s, e) in per_bin.iter_mut().enumerate() {
            for c in 0..3 {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..50 {
                    let ang = -std::f64::consts::TAU * (s * t) as f64 / 50.0;
                    re += x[(t, c)] * ang.cos();
                    im += x[(t, c)] * ang.sin();
                }
                *e += re * re + im * im;
            }
        }
        let total: f64 = per_bin.iter().sum();
        for (b, &(lo, hi)) in h.bands.iter().enumerate() {
            let want: f64 = per_bin[lo..=hi].iter().sum::<f64>() / total;
            assert!((h.values[b] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn bernstein_export_examples() {
        let curve = export_bernstein(&GatingParams::identity(12, 8), &[0.125; 8], 101).unwrap();
        assert_eq!(curve.len(), 101);
        assert!(curve.iter().all(|&(_, p)| (p - 1.0).abs() <= 1e-12));
        assert!(curve.windows(2).all(|w| w[0].0 < w[1].0));

        let k = 6;
        let diag: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
        for (w, p) in bernstein_curve(&diag, 50).unwrap() {
            assert!((p - w).abs() <= 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = GatingParams::random(5, 4, 1.0, &mut rng);
        let a = [0.1, 0.2, 0.3, 0.4];
        let theta = gate_coefficients(&a, &g).unwrap();
        let curve = export_bernstein(&g, &a, 11).unwrap();
        assert_eq!(curve[0].1, theta[0]);
        assert_eq!(curve[10].1, theta[5]);
    }

    #[test]
    fn report_files_are_written() {
        let report = DiagnosticsReport {
            ranks: vec![LayerRank {
                layer: 0,
                rank: 3,
                mean_rank: 3.0,
                size: 4,
                rel_tol: DEFAULT_RANK_TOL,
                per_head: None,
            }],
            energy: EnergyReport {
                bands: vec![(0, 1), (2, 4)],
                raw: vec![0.5, 0.5],
                reconstructed_t: vec![0.9, 0.1],
                reconstructed_f: Some(vec![0.6, 0.4]),
            },
            bernstein: vec![(0.0, 1.0), (1.0, 1.0)],
            residue_norms: vec![0.0],
            min_scale: Some(1.0),
        };
        let dir = tempfile::tempdir().unwrap();
        let files = report.write(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let energy = std::fs::read_to_string(dir.path().join("energy.csv")).unwrap();
        assert!(energy.starts_with("band_lo,band_hi,raw,reconstructed_T,reconstructed_F\n0,1,0.5,0.9,0.6"));
    }
}
