//! Baseline offloading policies: always-edge, always-local, uniform random,
//! and a per-action polynomial regression over data rate and vehicle count
//! that picks the action with the minimum predicted latency.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DECISION: usize = 4;
pub const N_ACTIONS: usize = MAX_DECISION + 1;
const N_FEATURES: usize = 6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("action {action} has {got} samples, the fit needs at least {want}")]
    InsufficientSamples { action: usize, got: usize, want: usize },
    #[error("design matrix is rank deficient for action {0}")]
    DegenerateFit(usize),
    #[error("model file is malformed: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ships the raw frame; everything runs on the edge server.
pub fn eo(_rate_bps: f64, _n_vehicles: f64) -> usize {
    0
}

/// Runs the whole pipeline onboard and ships matched objects.
pub fn lp(_rate_bps: f64, _n_vehicles: f64) -> usize {
    MAX_DECISION
}

/// Uniform random decision.
pub fn ro(rng: &mut impl Rng) -> usize {
    rng.gen_range(0..N_ACTIONS)
}

/// Degree-2 polynomial features of (rate, vehicle count), fixed order:
/// [1, r, n, r^2, r*n, n^2].
fn features(rate: f64, n_vehicles: f64) -> [f64; N_FEATURES] {
    [1.0, rate, n_vehicles, rate * rate, rate * n_vehicles, n_vehicles * n_vehicles]
}

/// One latency observation used to fit the regression baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencySample {
    pub rate_bps: f64,
    pub n_vehicles: f64,
    pub action: usize,
    pub latency_s: f64,
}

/// Per-action least-squares coefficients over the fixed feature expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub coefficients: Vec<[f64; N_FEATURES]>,
}

impl RegressionModel {
    pub fn predict(&self, action: usize, rate: f64, n_vehicles: f64) -> f64 {
        let f = features(rate, n_vehicles);
        self.coefficients[action].iter().zip(f).map(|(c, x)| c * x).sum()
    }

    /// Plain-text persistence: one line per action with the six
    /// coefficients.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), PolicyError> {
        for (a, row) in self.coefficients.iter().enumerate() {
            let nums: Vec<String> = row.iter().map(|c| format!("{c:e}")).collect();
            writeln!(w, "{a} {}", nums.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, PolicyError> {
        let mut coefficients = vec![[0.0; N_FEATURES]; N_ACTIONS];
        let mut seen = 0;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let action: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PolicyError::BadModelFile(line.clone()))?;
            if action >= N_ACTIONS {
                return Err(PolicyError::BadModelFile(format!("action {action} out of range")));
            }
            for c in coefficients[action].iter_mut() {
                *c = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| PolicyError::BadModelFile(line.clone()))?;
            }
            seen += 1;
        }
        if seen != N_ACTIONS {
            return Err(PolicyError::BadModelFile(format!("expected {N_ACTIONS} rows, got {seen}")));
        }
        Ok(Self { coefficients })
    }
}

/// Solves the 6x6 normal equations by Gaussian elimination with partial
/// pivoting. A vanishing pivot marks a rank-deficient design.
fn solve_normal_equations(
    xtx: &mut [[f64; N_FEATURES]; N_FEATURES],
    xty: &mut [f64; N_FEATURES],
) -> Option<[f64; N_FEATURES]> {
    let n = N_FEATURES;
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if xtx[row][col].abs() > xtx[pivot][col].abs() {
                pivot = row;
            }
        }
        if xtx[pivot][col].abs() < 1e-12 {
            return None;
        }
        xtx.swap(col, pivot);
        xty.swap(col, pivot);
        for row in (col + 1)..n {
            let k = xtx[row][col] / xtx[col][col];
            for c in col..n {
                xtx[row][c] -= k * xtx[col][c];
            }
            xty[row] -= k * xty[col];
        }
    }
    let mut beta = [0.0; N_FEATURES];
    for row in (0..n).rev() {
        let mut acc = xty[row];
        for c in (row + 1)..n {
            acc -= xtx[row][c] * beta[c];
        }
        beta[row] = acc / xtx[row][row];
    }
    Some(beta)
}

/// Fits one least-squares polynomial per action. Requires at least six
/// samples per action (one per coefficient).
pub fn rm_fit(dataset: &[LatencySample]) -> Result<RegressionModel, PolicyError> {
    let mut coefficients = Vec::with_capacity(N_ACTIONS);
    for action in 0..N_ACTIONS {
        let samples: Vec<&LatencySample> =
            dataset.iter().filter(|s| s.action == action).collect();
        if samples.len() < N_FEATURES {
            return Err(PolicyError::InsufficientSamples {
                action,
                got: samples.len(),
                want: N_FEATURES,
            });
        }
        // Features are scaled so the normal equations stay well conditioned
        // for rates in bits/s.
        let rate_scale = 1e-6;
        let mut xtx = [[0.0; N_FEATURES]; N_FEATURES];
        let mut xty = [0.0; N_FEATURES];
        for s in &samples {
            let f = features(s.rate_bps * rate_scale, s.n_vehicles);
            for i in 0..N_FEATURES {
                for j in 0..N_FEATURES {
                    xtx[i][j] += f[i] * f[j];
                }
                xty[i] += f[i] * s.latency_s;
            }
        }
        let scaled =
            solve_normal_equations(&mut xtx, &mut xty).ok_or(PolicyError::DegenerateFit(action))?;
        // Undo the rate scaling so predict takes raw bits/s.
        let beta = [
            scaled[0],
            scaled[1] * rate_scale,
            scaled[2],
            scaled[3] * rate_scale * rate_scale,
            scaled[4] * rate_scale,
            scaled[5],
        ];
        coefficients.push(beta);
    }
    Ok(RegressionModel { coefficients })
}

/// Minimum-predicted-latency action; ties resolve to the lowest action.
pub fn rm_decide(model: &RegressionModel, rate_bps: f64, n_vehicles: f64) -> usize {
    let mut best = 0;
    let mut best_pred = model.predict(0, rate_bps, n_vehicles);
    for a in 1..N_ACTIONS {
        let p = model.predict(a, rate_bps, n_vehicles);
        if p < best_pred {
            best = a;
            best_pred = p;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eo_and_lp_are_constant() {
        for (r, n) in [(0.0, 0.0), (1e9, 500.0), (-5.0, 2.0)] {
            assert_eq!(eo(r, n), 0);
            assert_eq!(lp(r, n), 4);
        }
        assert_eq!(eo(1.0, 1.0), eo(1.0, 1.0));
        assert_eq!(lp(1.0, 1.0), lp(1.0, 1.0));
    }

    #[test]
    fn ro_uniform_support_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0u32; N_ACTIONS];
        for _ in 0..n {
            counts[ro(&mut rng)] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "support must be all of 0..=4");
        let expected = n as f64 / 5.0;
        let sigma = (n as f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn ro_is_reproducible_per_seed() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| ro(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    fn planted_dataset(coeff: &[[f64; 6]; N_ACTIONS], rng: &mut ChaCha8Rng) -> Vec<LatencySample> {
        let mut data = Vec::new();
        for action in 0..N_ACTIONS {
            for _ in 0..40 {
                let rate = rng.gen_range(0.1..10.0); // in Mbps for the plant
                let n = rng.gen_range(1.0..50.0);
                let f = [1.0, rate, n, rate * rate, rate * n, n * n];
                let latency: f64 = coeff[action].iter().zip(f).map(|(c, x)| c * x).sum();
                data.push(LatencySample {
                    rate_bps: rate * 1e6,
                    n_vehicles: n,
                    action,
                    latency_s: latency,
                });
            }
        }
        data
    }

    #[test]
    fn rm_fit_recovers_planted_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut coeff = [[0.0; 6]; N_ACTIONS];
        for row in coeff.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.gen_range(-1.0..1.0);
            }
        }
        let data = planted_dataset(&coeff, &mut rng);
        let model = rm_fit(&data).unwrap();
        // Compare predictions on a grid (coefficients are in raw-rate units).
        for action in 0..N_ACTIONS {
            for rate in [0.5, 2.0, 8.0] {
                for n in [1.0, 10.0, 40.0] {
                    let f = [1.0, rate, n, rate * rate, rate * n, n * n];
                    let want: f64 = coeff[action].iter().zip(f).map(|(c, x)| c * x).sum();
                    let got = model.predict(action, rate * 1e6, n);
                    assert!(
                        (got - want).abs() < 1e-8,
                        "action {action} rate {rate} n {n}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn rm_fit_constant_latency_gives_intercept_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for action in 0..N_ACTIONS {
            for _ in 0..30 {
                data.push(LatencySample {
                    rate_bps: rng.gen_range(1e5..1e7),
                    n_vehicles: rng.gen_range(1.0..50.0),
                    action,
                    latency_s: 0.25,
                });
            }
        }
        let model = rm_fit(&data).unwrap();
        for action in 0..N_ACTIONS {
            assert_relative_eq!(model.coefficients[action][0], 0.25, epsilon = 1e-6);
            assert_relative_eq!(model.predict(action, 2e6, 20.0), 0.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn rm_fit_rejects_insufficient_samples() {
        let data = vec![
            LatencySample { rate_bps: 1e6, n_vehicles: 5.0, action: 0, latency_s: 0.2 };
            5
        ];
        assert!(matches!(
            rm_fit(&data),
            Err(PolicyError::InsufficientSamples { action: 0, got: 5, want: 6 })
        ));
    }

    #[test]
    fn rm_fit_rejects_rank_deficient_design() {
        // All samples at one point: the design cannot span six features.
        let mut data = Vec::new();
        for action in 0..N_ACTIONS {
            for _ in 0..10 {
                data.push(LatencySample {
                    rate_bps: 1e6,
                    n_vehicles: 5.0,
                    action,
                    latency_s: 0.2,
                });
            }
        }
        assert!(matches!(rm_fit(&data), Err(PolicyError::DegenerateFit(0))));
    }

    #[test]
    fn rm_fit_residual_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut data = Vec::new();
        for action in 0..N_ACTIONS {
            for _ in 0..60 {
                let rate = rng.gen_range(0.1..10.0);
                let n = rng.gen_range(1.0..50.0);
                data.push(LatencySample {
                    rate_bps: rate * 1e6,
                    n_vehicles: n,
                    action,
                    latency_s: 0.05 * rate + 0.01 * n + 0.1 * crate::neural::gauss(&mut rng),
                });
            }
        }
        let model = rm_fit(&data).unwrap();
        let residual = |m: &RegressionModel| -> f64 {
            data.iter()
                .map(|s| {
                    let e = m.predict(s.action, s.rate_bps, s.n_vehicles) - s.latency_s;
                    e * e
                })
                .sum()
        };
        let base = residual(&model);
        // Any +/- 1e-3 perturbation of a (scaled) coefficient cannot beat it.
        for action in 0..N_ACTIONS {
            for i in 0..6 {
                for delta in [-1e-3, 1e-3] {
                    let mut pert = model.clone();
                    pert.coefficients[action][i] += delta;
                    assert!(residual(&pert) >= base - 1e-12);
                }
            }
        }
    }

    #[test]
    fn rm_decide_picks_minimum_and_breaks_ties_low() {
        let mut model =
            RegressionModel { coefficients: vec![[0.0; N_FEATURES]; N_ACTIONS] };
        for (a, row) in model.coefficients.iter_mut().enumerate() {
            row[0] = [0.5, 0.4, 0.1, 0.2, 0.3][a];
        }
        assert_eq!(rm_decide(&model, 1e6, 10.0), 2);
        // All-equal predictions tie to action 0.
        let flat = RegressionModel { coefficients: vec![[0.1, 0.0, 0.0, 0.0, 0.0, 0.0]; 5] };
        assert_eq!(rm_decide(&flat, 1e6, 10.0), 0);
        // Monotone-in-action predictions pick 0.
        let mut rising = RegressionModel { coefficients: vec![[0.0; N_FEATURES]; N_ACTIONS] };
        for (a, row) in rising.coefficients.iter_mut().enumerate() {
            row[0] = a as f64;
        }
        assert_eq!(rm_decide(&rising, 1e6, 10.0), 0);
    }

    #[test]
    fn rm_model_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = RegressionModel { coefficients: vec![[0.0; N_FEATURES]; N_ACTIONS] };
        for row in model.coefficients.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.gen_range(-2.0..2.0);
            }
        }
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let loaded = RegressionModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded, model);
    }
}
