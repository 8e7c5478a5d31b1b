//! B-spline test functions on dyadic grids and finite matrix
//! approximations of the data operators.
//!
//! Degree-`L` B-splines on the grid `h = tau 2^-N` lie in `H^L_0[0, tau]`
//! once extended by zero, so they are admissible test functions. Applying
//! the per-trajectory data operators to every basis spline yields the
//! matrices `H~` and `Y~` whose surjectivity decides identifiability from
//! noise-free data.

use crate::signals::{simpson_weights, Dataset, SignalError};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("dyadic level {level} too small for degree {degree}: need 2^N >= degree + 1")]
    LevelTooSmall { level: u32, degree: usize },
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("basis index {index} out of range; count is {count}")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("derivative order {deriv} exceeds degree {degree}")]
    DerivTooHigh { deriv: usize, degree: usize },
    #[error("evaluation point {t} outside [0, {tau}]")]
    TimeOutOfRange { t: f64, tau: f64 },
    #[error(
        "trajectory {index}: sample step {step:.3e} too coarse for spline grid {h:.3e}; need step <= h/4"
    )]
    GridTooCoarse { index: usize, step: f64, h: f64 },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    /// Half-open pieces `[kh, (k+1)h)`: values at knots from the right.
    Right,
    /// Pieces `(kh, (k+1)h]`: values at knots from the left.
    Left,
}

/// Uniform B-splines `B^L_{N,n}` of one degree on the dyadic grid
/// `h = tau 2^-N`, with `count = 2^N - L` admissible indices.
#[derive(Debug, Clone)]
pub struct BSplineBasis {
    level: u32,
    degree: usize,
    tau: f64,
    h: f64,
    count: usize,
}

impl BSplineBasis {
    pub fn new(level: u32, degree: usize, tau: f64) -> Result<Self, SplineError> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(SplineError::NonPositiveHorizon(tau));
        }
        let cells = 1usize << level;
        if cells < degree + 1 {
            return Err(SplineError::LevelTooSmall { level, degree });
        }
        Ok(Self {
            level,
            degree,
            tau,
            h: tau / cells as f64,
            count: cells - degree,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Knot spacing `tau * 2^-N`.
    pub fn knot_step(&self) -> f64 {
        self.h
    }

    /// Number of basis functions.
    pub fn count(&self) -> usize {
        self.count
    }

    fn piece_indicator(&self, n: usize, t: f64, side: Side) -> f64 {
        let lo = n as f64 * self.h;
        let hi = lo + self.h;
        let inside = match side {
            Side::Right => t >= lo && t < hi,
            Side::Left => t > lo && t <= hi,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }

    fn eval_rec(&self, d: usize, n: usize, t: f64, side: Side) -> f64 {
        if d == 0 {
            return self.piece_indicator(n, t, side);
        }
        let dh = d as f64 * self.h;
        let left = (t - n as f64 * self.h) / dh;
        let right = ((n + d + 1) as f64 * self.h - t) / dh;
        left * self.eval_rec(d - 1, n, t, side) + right * self.eval_rec(d - 1, n + 1, t, side)
    }

    fn eval_side(&self, n: usize, t: f64, deriv: usize, side: Side) -> f64 {
        if deriv == 0 {
            return self.eval_rec(self.degree, n, t, side);
        }
        // r-th derivative: (1/h^r) sum_i (-1)^i C(r, i) B^(d-r)_{n+i}
        let mut binom = 1.0f64;
        let mut acc = 0.0;
        for i in 0..=deriv {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * binom * self.eval_rec(self.degree - deriv, n + i, t, side);
            binom = binom * (deriv - i) as f64 / (i + 1) as f64;
        }
        acc / self.h.powi(deriv as i32)
    }

    /// Value of the `deriv`-th derivative of `B^L_{N,n}` at `t`.
    ///
    /// Values at interior knots are taken from the right; at `t = tau`
    /// from the left. `deriv = degree` yields the piecewise-constant top
    /// derivative (defined almost everywhere).
    pub fn eval(&self, n: usize, t: f64, deriv: usize) -> Result<f64, SplineError> {
        if n >= self.count {
            return Err(SplineError::IndexOutOfRange {
                index: n,
                count: self.count,
            });
        }
        if deriv > self.degree {
            return Err(SplineError::DerivTooHigh {
                deriv,
                degree: self.degree,
            });
        }
        if !(0.0..=self.tau * (1.0 + 1e-12)).contains(&t) {
            return Err(SplineError::TimeOutOfRange { t, tau: self.tau });
        }
        let side = if t >= self.tau { Side::Left } else { Side::Right };
        Ok(self.eval_side(n, t, deriv, side))
    }

    #[cfg(test)]
    fn eval_left(&self, n: usize, t: f64, deriv: usize) -> f64 {
        self.eval_side(n, t, deriv, Side::Left)
    }
}

/// Finite approximations `H~` and `Y~` of the data operators, one column
/// per (trajectory, basis-spline) pair.
#[derive(Debug, Clone)]
pub struct SplineApprox {
    /// `qL x K(2^N - L)`.
    pub h_tilde: DMatrix<f64>,
    /// `p x K(2^N - L)`.
    pub y_tilde: DMatrix<f64>,
    /// Half-open column span per trajectory.
    pub spans: Vec<(usize, usize)>,
    pub level: u32,
    pub degree: usize,
}

/// Applies the per-trajectory data operators to every basis spline.
///
/// Column `(k, n)` of `H~` holds `[W_0 B; ...; W_{L-1} B]` and the same
/// column of `Y~` holds `Y_L B`, with
/// `W_l phi = (-1)^l \int phi^(l) w dt` evaluated from the exact spline
/// derivatives by Simpson quadrature on the trajectory grid.
pub fn build_spline_approx(ds: &Dataset, level: u32) -> Result<SplineApprox, SplineError> {
    let order = ds.order();
    let q = ds.signal_dim();
    let p = ds.output_dim();
    let count = {
        let cells = 1usize << level;
        if cells < order + 1 {
            return Err(SplineError::LevelTooSmall {
                level,
                degree: order,
            });
        }
        cells - order
    };
    let total = ds.len() * count;
    let mut h_tilde = DMatrix::zeros(q * order, total);
    let mut y_tilde = DMatrix::zeros(p, total);
    let mut spans = Vec::with_capacity(ds.len());

    for (k, traj) in ds.trajectories().iter().enumerate() {
        let basis = BSplineBasis::new(level, order, traj.tau())?;
        let step = traj.step();
        if step > basis.knot_step() / 4.0 * (1.0 + 1e-12) {
            return Err(SplineError::GridTooCoarse {
                index: k,
                step,
                h: basis.knot_step(),
            });
        }
        let n_samples = traj.len();
        let weights = simpson_weights(n_samples, step);
        let w = traj.stacked();
        let y = traj.output();
        let col0 = k * count;
        spans.push((col0, count));
        for n in 0..count {
            // restrict to the support [n h, (n + L + 1) h]
            let lo = ((n as f64 * basis.knot_step()) / step).floor() as usize;
            let hi = ((((n + order + 1) as f64) * basis.knot_step()) / step).ceil() as usize;
            let hi = hi.min(n_samples - 1);
            for deriv in 0..=order {
                let sign = if deriv % 2 == 0 { 1.0 } else { -1.0 };
                for i in lo..=hi {
                    let phi = basis.eval(n, (i as f64) * step, deriv)?;
                    if phi == 0.0 {
                        continue;
                    }
                    let wphi = sign * weights[i] * phi;
                    if deriv < order {
                        for c in 0..q {
                            h_tilde[(deriv * q + c, col0 + n)] += wphi * w[(i, c)];
                        }
                    } else {
                        for c in 0..p {
                            y_tilde[(c, col0 + n)] += wphi * y[(i, c)];
                        }
                    }
                }
            }
        }
    }
    Ok(SplineApprox {
        h_tilde,
        y_tilde,
        spans,
        level,
        degree: order,
    })
}

/// Surjectivity report for `H~`.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub surjective: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Rank tolerance: surjective iff `sigma_qL > 1e-8 * max(1, sigma_max)`.
pub const RANK_TOL: f64 = 1e-8;

/// Tests surjectivity of `H~` through its singular values.
pub fn rank_test(sa: &SplineApprox) -> RankReport {
    rank_of(&sa.h_tilde)
}

pub(crate) fn rank_of(m: &DMatrix<f64>) -> RankReport {
    let rows = m.nrows();
    let svd = m.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = if m.ncols() >= rows && svd.singular_values.len() >= rows {
        svd.singular_values[rows - 1]
    } else {
        0.0
    };
    RankReport {
        surjective: sigma_min > RANK_TOL * sigma_max.max(1.0),
        sigma_min,
        sigma_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::Trajectory;
    use approx::assert_relative_eq;

    #[test]
    fn degree_zero_indicator() {
        let basis = BSplineBasis::new(3, 0, 1.0).unwrap();
        let h = basis.knot_step();
        assert_eq!(basis.eval(0, 0.0, 0).unwrap(), 1.0);
        assert_eq!(basis.eval(0, 0.5 * h, 0).unwrap(), 1.0);
        assert_eq!(basis.eval(0, h, 0).unwrap(), 0.0);
        assert_eq!(basis.eval(1, h, 0).unwrap(), 1.0);
        // last piece takes its value at tau from the left
        assert_eq!(basis.eval(7, 1.0, 0).unwrap(), 1.0);
    }

    #[test]
    fn degree_one_hat() {
        let basis = BSplineBasis::new(3, 1, 1.0).unwrap();
        let h = basis.knot_step();
        assert_relative_eq!(basis.eval(0, h, 0).unwrap(), 1.0);
        assert_eq!(basis.eval(0, 0.0, 0).unwrap(), 0.0);
        assert_eq!(basis.eval(0, 2.0 * h, 0).unwrap(), 0.0);
    }

    #[test]
    fn spline_integral_equals_knot_step() {
        // Quadrature oracle on a grid aligned with the knots.
        for degree in 1..=3usize {
            let basis = BSplineBasis::new(4, degree, 1.0).unwrap();
            let per_cell = 8usize;
            let n = (1 << 4) * per_cell + 1;
            let step = 1.0 / (n - 1) as f64;
            for index in [0, basis.count() / 2, basis.count() - 1] {
                let vals: Vec<f64> = (0..n)
                    .map(|i| basis.eval(index, i as f64 * step, 0).unwrap())
                    .collect();
                let integral = crate::signals::quadrature(&vals, step).unwrap();
                assert_relative_eq!(integral, basis.knot_step(), max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let degree = 3;
        let basis = BSplineBasis::new(5, degree, 2.0).unwrap();
        let h = basis.knot_step();
        let lo = degree as f64 * h;
        let hi = 2.0 - degree as f64 * h;
        for s in 0..10_000 {
            let t = lo + (hi - lo) * s as f64 / 9_999.0;
            let mut sum = 0.0;
            for n in 0..basis.count() {
                let v = basis.eval(n, t, 0).unwrap();
                assert!(v >= 0.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum} at t {t}");
        }
    }

    #[test]
    fn derivatives_continuous_below_top_order() {
        for degree in 2..=4usize {
            let basis = BSplineBasis::new(4, degree, 1.0).unwrap();
            let h = basis.knot_step();
            for n in 0..basis.count() {
                for deriv in 0..degree {
                    for knot in 1..(1 << 4) {
                        let t = knot as f64 * h;
                        let right = basis.eval(n, t, deriv).unwrap();
                        let left = basis.eval_left(n, t, deriv);
                        assert!(
                            (right - left).abs() <= 1e-10 * (1.0 + right.abs()),
                            "degree {degree} deriv {deriv} index {n} knot {knot}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn two_scale_refinement() {
        // B^L_{N,n}(t) = 2^-L sum_k C(L+1, k) B^L_{N+1, 2n+k}(t).
        let degree = 2usize;
        let coarse = BSplineBasis::new(4, degree, 1.0).unwrap();
        let fine = BSplineBasis::new(5, degree, 1.0).unwrap();
        let binom = [1.0, 3.0, 3.0, 1.0]; // C(3, k)
        for n in [0usize, 3, coarse.count() - 1] {
            for s in 0..100 {
                let t = s as f64 / 99.0;
                let direct = coarse.eval(n, t, 0).unwrap();
                let mut combo = 0.0;
                for (k, b) in binom.iter().enumerate() {
                    combo += b * fine.eval(2 * n + k, t, 0).unwrap();
                }
                combo /= (1 << degree) as f64;
                assert!(
                    (direct - combo).abs() <= 1e-10,
                    "n {n}, t {t}: {direct} vs {combo}"
                );
            }
        }
    }

    fn make_traj(n: usize, tau: f64, f: impl Fn(f64, usize) -> (f64, Vec<f64>)) -> Trajectory {
        let h = tau / (n - 1) as f64;
        let probe = f(0.0, 0).1.len();
        let mut u = DMatrix::zeros(n, 1);
        let mut y = DMatrix::zeros(n, probe);
        for i in 0..n {
            let (ui, yi) = f(i as f64 * h, i);
            u[(i, 0)] = ui;
            for (c, v) in yi.iter().enumerate() {
                y[(i, c)] = *v;
            }
        }
        Trajectory::new(tau, u, y, None).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_matrices() {
        let tr = make_traj(257, 1.0, |_, _| (0.0, vec![0.0]));
        let ds = Dataset::new(vec![tr], 1).unwrap();
        let sa = build_spline_approx(&ds, 4).unwrap();
        assert_eq!(sa.h_tilde.amax(), 0.0);
        assert_eq!(sa.y_tilde.amax(), 0.0);
        assert!(!rank_test(&sa).surjective);
    }

    #[test]
    fn constant_signal_columns_equal_scaled_knot_step() {
        // K = 1, L = 1, w = c: column n of H~ is c * \int B^1 = c * h.
        let c_u = 0.7;
        let c_y = -1.3;
        let tr = make_traj(513, 1.0, |_, _| (c_u, vec![c_y]));
        let ds = Dataset::new(vec![tr], 1).unwrap();
        let sa = build_spline_approx(&ds, 4).unwrap();
        let h = 1.0 / 16.0;
        for col in 0..sa.h_tilde.ncols() {
            assert_relative_eq!(sa.h_tilde[(0, col)], c_u * h, max_relative = 1e-8);
            assert_relative_eq!(sa.h_tilde[(1, col)], c_y * h, max_relative = 1e-8);
        }
        // Columns are proportional: a single constant trajectory cannot be
        // surjective once qL > 1.
        assert!(!rank_test(&sa).surjective);
    }

    #[test]
    fn grid_too_coarse_is_rejected() {
        let tr = make_traj(17, 1.0, |t, _| (t, vec![t]));
        let ds = Dataset::new(vec![tr], 1).unwrap();
        // level 6: h = 1/64 < 4 * (1/16) sample step
        assert!(matches!(
            build_spline_approx(&ds, 6),
            Err(SplineError::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn rank_test_on_canonical_matrices() {
        let zero = SplineApprox {
            h_tilde: DMatrix::zeros(3, 6),
            y_tilde: DMatrix::zeros(1, 6),
            spans: vec![(0, 6)],
            level: 3,
            degree: 1,
        };
        assert!(!rank_test(&zero).surjective);
        let mut id = DMatrix::zeros(3, 6);
        for i in 0..3 {
            id[(i, i)] = 1.0;
        }
        let full = SplineApprox {
            h_tilde: id,
            y_tilde: DMatrix::zeros(1, 6),
            spans: vec![(0, 6)],
            level: 3,
            degree: 1,
        };
        let report = rank_test(&full);
        assert!(report.surjective);
        assert_relative_eq!(report.sigma_min, 1.0);
    }

    #[test]
    fn spline_columns_match_adjoint_pairing() {
        // H_k phi computed through spline quadrature agrees with the
        // H^L_0 pairing <phi, W_l^* e_b> evaluated from the closed-form
        // adjoint derivative.
        let order = 2usize;
        let n = 1025;
        let tau = 1.0;
        let tr = make_traj(n, tau, |t, _| {
            ((3.0 * t).sin(), vec![(2.0 * t).cos() - 1.0, t * t])
        });
        let ds = Dataset::new(vec![tr.clone()], order).unwrap();
        let level = 4;
        let sa = build_spline_approx(&ds, level).unwrap();
        let basis = BSplineBasis::new(level, order, tau).unwrap();
        let h = tr.step();
        let w = tr.stacked();
        let q = 3;
        for index in [0usize, 5, basis.count() - 1] {
            // phi^{(L)} samples
            let phi_top: Vec<f64> = (0..n)
                .map(|i| basis.eval(index, i as f64 * h, order).unwrap())
                .collect();
            for ell in 0..order {
                for b in 0..q {
                    let e = nalgebra::DVector::from_fn(q, |i, _| if i == b { 1.0 } else { 0.0 });
                    let adj_top =
                        crate::gram::adjoint_derivative(&w, h, order, ell, order, &e).unwrap();
                    let integrand: Vec<f64> =
                        (0..n).map(|i| phi_top[i] * adj_top[i]).collect();
                    let pairing = crate::signals::quadrature(&integrand, h).unwrap();
                    let direct = sa.h_tilde[(ell * q + b, index)];
                    assert!(
                        (pairing - direct).abs() <= 1e-6 * (1.0 + direct.abs()),
                        "ell {ell}, b {b}, index {index}: {direct} vs {pairing}"
                    );
                }
            }
        }
    }
}
