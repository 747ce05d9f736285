//! Cost-model fitting and comparison.
//!
//! Memory and time measurements are fitted with the two declared families —
//! `quadratic(N) = αN² + βN + γ` for the attention stack and
//! `linear(N) = α′N + γ′` for the state-space stack — by ordinary least
//! squares in the monomial basis (normal equations, double precision,
//! partial-pivot elimination). Crossover solving compares the two fitted
//! curves: the root of `αN² + (β−α′)N + (γ−γ′)` beyond which the quadratic
//! strictly dominates.

use serde::{Deserialize, Serialize};

use crate::bench::BenchRecord;
use crate::model::Architecture;

/// Model family of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitKind {
    Quadratic,
    Linear,
}

impl FitKind {
    /// Number of coefficients.
    #[must_use]
    pub fn arity(self) -> usize {
        match self {
            FitKind::Quadratic => 3,
            FitKind::Linear => 2,
        }
    }
}

/// A fitted cost curve. Coefficients are highest order first:
/// `[α, β, γ]` for quadratic fits, `[α′, γ′]` for linear fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: FitKind,
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    pub points_used: usize,
}

impl FitResult {
    /// Evaluates the fitted curve at `n`.
    #[must_use]
    pub fn evaluate(&self, n: f64) -> f64 {
        self.coefficients
            .iter()
            .fold(0.0, |acc, &c| acc * n + c)
    }
}

/// Errors from fitting.
#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("need at least {needed} finite points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("design matrix is singular (duplicate lengths?)")]
    DegenerateDesign,
}

/// Least-squares fit of the chosen family to `(N, value)` points.
/// Non-finite values (out-of-memory cells) are excluded first;
/// `points_used` records how many survived.
pub fn fit_cost_curve(points: &[(f64, f64)], kind: FitKind) -> Result<FitResult, FitError> {
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(n, v)| n.is_finite() && v.is_finite())
        .collect();
    let arity = kind.arity();
    if finite.len() < arity {
        return Err(FitError::InsufficientPoints {
            needed: arity,
            got: finite.len(),
        });
    }

    // Normal equations: (Xᵀ X) c = Xᵀ y with monomial columns
    // [N^(arity-1), …, N, 1]. The columns are equilibrated (divided by
    // their largest magnitude) before forming XᵀX — at N in the thousands
    // the raw quartic terms would otherwise swamp the constant column and
    // make a perfectly good design look singular.
    let column_scale: Vec<f64> = (0..arity)
        .map(|k| {
            finite
                .iter()
                .map(|&(n, _)| n.powi((arity - 1 - k) as i32).abs())
                .fold(0.0f64, f64::max)
                .max(f64::MIN_POSITIVE)
        })
        .collect();
    let mut xtx = vec![vec![0.0; arity]; arity];
    let mut xty = vec![0.0; arity];
    for &(n, y) in &finite {
        let mut basis = vec![0.0; arity];
        for (k, b) in basis.iter_mut().enumerate() {
            *b = n.powi((arity - 1 - k) as i32) / column_scale[k];
        }
        for i in 0..arity {
            for j in 0..arity {
                xtx[i][j] += basis[i] * basis[j];
            }
            xty[i] += basis[i] * y;
        }
    }
    let scaled = solve_linear_system(xtx, xty).ok_or(FitError::DegenerateDesign)?;
    let coefficients: Vec<f64> = scaled
        .iter()
        .zip(&column_scale)
        .map(|(c, s)| c / s)
        .collect();

    let fit = FitResult {
        kind,
        coefficients,
        r_squared: 0.0,
        points_used: finite.len(),
    };
    let r_squared = r_squared(&fit, &finite);
    Ok(FitResult { r_squared, ..fit })
}

/// Coefficient of determination on the fitted points. A zero-variance
/// target is a perfect fit (1.0) when the residuals vanish and −∞
/// otherwise, keeping the value inside `(−∞, 1]`.
fn r_squared(fit: &FitResult, points: &[(f64, f64)]) -> f64 {
    let mean = points.iter().map(|&(_, y)| y).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|&(_, y)| (y - mean).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|&(n, y)| (y - fit.evaluate(n)).powi(2))
        .sum();
    if ss_tot == 0.0 {
        let scale = points.iter().map(|&(_, y)| y.abs()).fold(1.0, f64::max);
        return if ss_res.sqrt() <= 1e-12 * scale {
            1.0
        } else {
            f64::NEG_INFINITY
        };
    }
    1.0 - ss_res / ss_tot
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear_system(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Slope of the least-squares line through `(ln n, ln v)`. Points with
/// non-positive coordinates cannot be log-transformed and are skipped.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64, FitError> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(n, v)| n > 0.0 && v > 0.0 && n.is_finite() && v.is_finite())
        .map(|&(n, v)| (n.ln(), v.ln()))
        .collect();
    let fit = fit_cost_curve(&logs, FitKind::Linear)?;
    Ok(fit.coefficients[0])
}

/// One row of the efficiency-ratio table at a shared length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RatioRow {
    pub n: usize,
    /// Attention-stack memory over state-space memory; ∞ when the
    /// attention stack ran out of budget.
    pub mem_ratio: f64,
    pub time_ratio: f64,
    /// Set when the state-space stack itself ran out of budget, making the
    /// ratio meaningless (reported as 0, or ∞ if both sides failed).
    pub denominator_oom: bool,
}

/// Ratio table over the lengths both architectures measured.
#[must_use]
pub fn efficiency_ratio(records: &[BenchRecord]) -> Vec<RatioRow> {
    let cell = |arch: Architecture, n: usize| {
        records
            .iter()
            .find(|r| r.architecture == arch && r.n == n)
    };
    let mut lengths: Vec<usize> = records
        .iter()
        .filter(|r| r.architecture == Architecture::Transformer)
        .map(|r| r.n)
        .filter(|&n| cell(Architecture::Mamba, n).is_some())
        .collect();
    lengths.sort_unstable();
    lengths.dedup();

    lengths
        .into_iter()
        .map(|n| {
            let t = cell(Architecture::Transformer, n).expect("filtered");
            let m = cell(Architecture::Mamba, n).expect("filtered");
            let ratio = |tv: f64, mv: f64, t_oom: bool, m_oom: bool| match (t_oom, m_oom) {
                (_, true) if t_oom => f64::INFINITY,
                (_, true) => 0.0,
                (true, false) => f64::INFINITY,
                (false, false) => tv / mv,
            };
            RatioRow {
                n,
                mem_ratio: ratio(t.peak_memory_gb, m.peak_memory_gb, t.oom, m.oom),
                time_ratio: ratio(t.mean_time_ms, m.mean_time_ms, t.oom, m.oom),
                denominator_oom: m.oom,
            }
        })
        .collect()
}

/// Outcome of comparing the fitted curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrossoverResult {
    /// The curves cross: beyond `n_star` the quadratic strictly dominates.
    At { n_star: f64 },
    /// The quadratic is already above the linear curve for every positive
    /// length.
    NoneQuadraticDominates,
    /// The linear curve stays above over all positive lengths considered —
    /// impossible for a genuinely quadratic (α > 0) cost, present for
    /// completeness of the classification.
    NoneLinearDominates,
}

/// Errors solving for a crossover.
#[derive(Debug, thiserror::Error)]
pub enum CrossoverError {
    #[error("quadratic side must have α > 0, got {alpha}")]
    NotApplicable { alpha: f64 },
    #[error("expected a quadratic and a linear fit, got {quad:?} and {lin:?}")]
    WrongKinds { quad: FitKind, lin: FitKind },
}

/// Finds where `quad` first exceeds `lin` and stays above, by the
/// quadratic formula on the difference polynomial (numerically stable
/// two-root form).
pub fn solve_crossover(
    quad: &FitResult,
    lin: &FitResult,
) -> Result<CrossoverResult, CrossoverError> {
    if quad.kind != FitKind::Quadratic || lin.kind != FitKind::Linear {
        return Err(CrossoverError::WrongKinds {
            quad: quad.kind,
            lin: lin.kind,
        });
    }
    let (alpha, beta, gamma) = (
        quad.coefficients[0],
        quad.coefficients[1],
        quad.coefficients[2],
    );
    let (alpha_lin, gamma_lin) = (lin.coefficients[0], lin.coefficients[1]);
    if alpha <= 0.0 {
        return Err(CrossoverError::NotApplicable { alpha });
    }
    // difference(N) = a·N² + b·N + c
    let a = alpha;
    let b = beta - alpha_lin;
    let c = gamma - gamma_lin;
    let discriminant = b * b - 4.0 * a * c;
    if discriminant < 0.0 {
        // No real roots and a > 0: the difference is positive everywhere.
        return Ok(CrossoverResult::NoneQuadraticDominates);
    }
    // Numerically stable root pair; only the larger root matters, since
    // a > 0 makes the difference positive exactly beyond it.
    let sqrt_d = discriminant.sqrt();
    let q = -0.5 * (b + b.signum() * sqrt_d);
    let larger_root = if q == 0.0 { 0.0 } else { (q / a).max(c / q) };
    if larger_root > 0.0 {
        Ok(CrossoverResult::At {
            n_star: larger_root,
        })
    } else {
        // Both roots at or below zero: positive lengths are all past the
        // parabola's recovery, so the quadratic dominates throughout.
        Ok(CrossoverResult::NoneQuadraticDominates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(alpha: f64, beta: f64, gamma: f64) -> FitResult {
        FitResult {
            kind: FitKind::Quadratic,
            coefficients: vec![alpha, beta, gamma],
            r_squared: 1.0,
            points_used: 5,
        }
    }

    fn lin(alpha: f64, gamma: f64) -> FitResult {
        FitResult {
            kind: FitKind::Linear,
            coefficients: vec![alpha, gamma],
            r_squared: 1.0,
            points_used: 5,
        }
    }

    #[test]
    fn exact_quadratic_interpolation() {
        let points: Vec<(f64, f64)> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&n| (n, 2.0 * n * n + 3.0 * n + 1.0))
            .collect();
        let fit = fit_cost_curve(&points, FitKind::Quadratic).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-9);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-9);
        assert!((fit.coefficients[2] - 1.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.points_used, 4);
    }

    #[test]
    fn linear_data_yields_zero_quadratic_term() {
        let points: Vec<(f64, f64)> = [1.0, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .map(|&n| (n, 5.0 * n + 7.0))
            .collect();
        let linear = fit_cost_curve(&points, FitKind::Linear).unwrap();
        assert!((linear.coefficients[0] - 5.0).abs() < 1e-9);
        assert!((linear.coefficients[1] - 7.0).abs() < 1e-9);
        assert!((linear.r_squared - 1.0).abs() < 1e-12);
        let quadratic = fit_cost_curve(&points, FitKind::Quadratic).unwrap();
        assert!(quadratic.coefficients[0].abs() < 1e-9);
    }

    #[test]
    fn oom_points_are_excluded_before_fitting() {
        let points = vec![
            (1.0, 3.0),
            (2.0, 5.0),
            (3.0, 7.0),
            (4.0, f64::INFINITY),
        ];
        let fit = fit_cost_curve(&points, FitKind::Linear).unwrap();
        assert_eq!(fit.points_used, 3);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_points_and_duplicate_lengths_error() {
        assert!(matches!(
            fit_cost_curve(&[(1.0, 1.0), (2.0, 2.0)], FitKind::Quadratic),
            Err(FitError::InsufficientPoints { needed: 3, got: 2 })
        ));
        assert!(matches!(
            fit_cost_curve(
                &[(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)],
                FitKind::Quadratic
            ),
            Err(FitError::DegenerateDesign)
        ));
    }

    #[test]
    fn constant_data_r_squared_uses_zero_variance_convention() {
        let flat = vec![(1.0, 4.0), (2.0, 4.0), (3.0, 4.0)];
        let fit = fit_cost_curve(&flat, FitKind::Linear).unwrap();
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn noisy_quadratic_recovers_alpha_within_five_percent() {
        use rand::Rng;
        let mut rng = crate::model::rng_for_seed(1234);
        let (alpha, beta, gamma) = (3.0e-6, 2.0e-3, 0.5);
        let points: Vec<(f64, f64)> = (1..=8)
            .map(|i| {
                let n = (256 * i) as f64;
                let truth = alpha * n * n + beta * n + gamma;
                let noise = 1.0 + 0.01 * (rng.gen::<f64>() * 2.0 - 1.0);
                (n, truth * noise)
            })
            .collect();
        let fit = fit_cost_curve(&points, FitKind::Quadratic).unwrap();
        let rel = (fit.coefficients[0] - alpha).abs() / alpha;
        assert!(rel < 0.05, "α off by {rel}");
    }

    #[test]
    fn crossover_simple_hand_case() {
        // N² vs 2N crosses at N = 2.
        match solve_crossover(&quad(1.0, 0.0, 0.0), &lin(2.0, 0.0)).unwrap() {
            CrossoverResult::At { n_star } => assert!((n_star - 2.0).abs() < 1e-12),
            other => panic!("expected a crossover, got {other:?}"),
        }
    }

    #[test]
    fn crossover_agreement_invariant() {
        let q = quad(5.9e-7, 0.0, 0.12);
        let l = lin(1.3e-4, 0.24);
        match solve_crossover(&q, &l).unwrap() {
            CrossoverResult::At { n_star } => {
                let rel = (q.evaluate(n_star) - l.evaluate(n_star)).abs()
                    / l.evaluate(n_star).abs();
                assert!(rel < 1e-9, "curves differ by {rel} at the crossover");
            }
            other => panic!("expected a crossover, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_alpha_is_not_applicable() {
        assert!(matches!(
            solve_crossover(&quad(0.0, 1.0, 0.0), &lin(1.0, 0.0)),
            Err(CrossoverError::NotApplicable { .. })
        ));
        assert!(matches!(
            solve_crossover(&quad(-1.0, 1.0, 0.0), &lin(1.0, 0.0)),
            Err(CrossoverError::NotApplicable { .. })
        ));
    }

    #[test]
    fn log_log_slope_of_pure_square_is_two() {
        let points: Vec<(f64, f64)> = [128.0, 256.0, 512.0, 1024.0]
            .iter()
            .map(|&n| (n, 7.5 * n * n))
            .collect();
        let slope = log_log_slope(&points).unwrap();
        assert!((slope - 2.0).abs() < 1e-9);
    }
}
