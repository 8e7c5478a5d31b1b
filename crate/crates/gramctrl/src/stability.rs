//! Autoregressive systems, dynamic output-feedback controllers, the
//! closed-loop polynomial matrix, and two stability deciders that
//! cross-check each other: companion-matrix eigenvalues and the behavioral
//! Lyapunov LMI `[-J; C; R]^T Psi + Psi [-J; C; R] > 0` with `Psi > 0`.

use crate::sdp::{self, sym_basis, sym_from_vars, sym_var_count, SdpBlock, SdpProblem, SdpStatus};
use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("coefficient matrix is {rows}x{cols}; expected {erows}x{ecols} for (L={l}, m={m}, p={p})")]
    CoefficientShape {
        rows: usize,
        cols: usize,
        erows: usize,
        ecols: usize,
        l: usize,
        m: usize,
        p: usize,
    },
    #[error("dimension mismatch: system is (L={l1}, m={m1}, p={p1}), controller is (L={l2}, m={m2}, p={p2})")]
    DimensionMismatch {
        l1: usize,
        m1: usize,
        p1: usize,
        l2: usize,
        m2: usize,
        p2: usize,
    },
    #[error("order, input and output dimensions must all be positive")]
    ZeroDimension,
    #[error("JSON block layout invalid: {0}")]
    BadBlocks(String),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
}

/// JSON form of a coefficient matrix: one `{u, y}` pair per derivative
/// order, rows stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffJson {
    #[serde(rename = "L")]
    pub order: usize,
    pub m: usize,
    pub p: usize,
    pub blocks: Vec<BlockPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockPair {
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

fn blocks_to_matrix(
    json: &CoeffJson,
    rows: usize,
) -> Result<DMatrix<f64>, StabilityError> {
    let q = json.m + json.p;
    if json.blocks.len() != json.order {
        return Err(StabilityError::BadBlocks(format!(
            "expected {} blocks, got {}",
            json.order,
            json.blocks.len()
        )));
    }
    let mut mat = DMatrix::zeros(rows, q * json.order);
    for (ell, pair) in json.blocks.iter().enumerate() {
        if pair.u.len() != rows || pair.y.len() != rows {
            return Err(StabilityError::BadBlocks(format!(
                "block {ell}: expected {rows} rows"
            )));
        }
        for r in 0..rows {
            if pair.u[r].len() != json.m || pair.y[r].len() != json.p {
                return Err(StabilityError::BadBlocks(format!(
                    "block {ell}, row {r}: expected widths ({}, {})",
                    json.m, json.p
                )));
            }
            for c in 0..json.m {
                mat[(r, ell * q + c)] = pair.u[r][c];
            }
            for c in 0..json.p {
                mat[(r, ell * q + json.m + c)] = pair.y[r][c];
            }
        }
    }
    Ok(mat)
}

fn matrix_to_blocks(mat: &DMatrix<f64>, order: usize, m: usize, p: usize) -> Vec<BlockPair> {
    let q = m + p;
    let rows = mat.nrows();
    (0..order)
        .map(|ell| BlockPair {
            u: (0..rows)
                .map(|r| (0..m).map(|c| mat[(r, ell * q + c)]).collect())
                .collect(),
            y: (0..rows)
                .map(|r| (0..p).map(|c| mat[(r, ell * q + m + c)]).collect())
                .collect(),
        })
        .collect()
}

/// A continuous-time AR system `y^(L) + sum_l (R_u,l u^(l) + R_y,l y^(l)) = v`,
/// identified with its coefficient matrix
/// `R = [R_u,0 R_y,0 ... R_u,L-1 R_y,L-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArSystem {
    order: usize,
    m: usize,
    p: usize,
    mat: DMatrix<f64>,
}

/// A dynamic controller `u^(L) + sum_l (C_u,l u^(l) + C_y,l y^(l)) = 0`,
/// identified with `C = [C_u,0 C_y,0 ... C_u,L-1 C_y,L-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    order: usize,
    m: usize,
    p: usize,
    mat: DMatrix<f64>,
}

macro_rules! coeff_impl {
    ($ty:ident, $rows:ident) => {
        impl $ty {
            pub fn new(
                order: usize,
                m: usize,
                p: usize,
                mat: DMatrix<f64>,
            ) -> Result<Self, StabilityError> {
                if order == 0 || m == 0 || p == 0 {
                    return Err(StabilityError::ZeroDimension);
                }
                let q = m + p;
                let erows = $rows(m, p);
                if mat.nrows() != erows || mat.ncols() != q * order {
                    return Err(StabilityError::CoefficientShape {
                        rows: mat.nrows(),
                        cols: mat.ncols(),
                        erows,
                        ecols: q * order,
                        l: order,
                        m,
                        p,
                    });
                }
                Ok(Self { order, m, p, mat })
            }

            pub fn order(&self) -> usize {
                self.order
            }

            pub fn input_dim(&self) -> usize {
                self.m
            }

            pub fn output_dim(&self) -> usize {
                self.p
            }

            pub fn signal_dim(&self) -> usize {
                self.m + self.p
            }

            pub fn matrix(&self) -> &DMatrix<f64> {
                &self.mat
            }

            /// The `u`-block of derivative order `ell`.
            pub fn block_u(&self, ell: usize) -> DMatrixView<'_, f64> {
                let q = self.signal_dim();
                self.mat.view((0, ell * q), (self.mat.nrows(), self.m))
            }

            /// The `y`-block of derivative order `ell`.
            pub fn block_y(&self, ell: usize) -> DMatrixView<'_, f64> {
                let q = self.signal_dim();
                self.mat
                    .view((0, ell * q + self.m), (self.mat.nrows(), self.p))
            }

            pub fn to_json(&self) -> CoeffJson {
                CoeffJson {
                    order: self.order,
                    m: self.m,
                    p: self.p,
                    blocks: matrix_to_blocks(&self.mat, self.order, self.m, self.p),
                }
            }

            pub fn from_json(json: &CoeffJson) -> Result<Self, StabilityError> {
                let rows = $rows(json.m, json.p);
                let mat = blocks_to_matrix(json, rows)?;
                Self::new(json.order, json.m, json.p, mat)
            }
        }
    };
}

fn sys_rows(_m: usize, p: usize) -> usize {
    p
}
fn ctrl_rows(m: usize, _p: usize) -> usize {
    m
}
coeff_impl!(ArSystem, sys_rows);
coeff_impl!(Controller, ctrl_rows);

/// The interconnection `G(xi) = I xi^L + sum_l G_l xi^l` with
/// `G_l = [[C_u,l, C_y,l], [R_u,l, R_y,l]]`, and its companion matrix.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub g_coeffs: Vec<DMatrix<f64>>,
    /// `[[J_{q(L-1)}], [-G~]]`, Hurwitz iff the loop is stable.
    pub companion: DMatrix<f64>,
    q: usize,
    order: usize,
}

impl ClosedLoop {
    pub fn signal_dim(&self) -> usize {
        self.q
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `[-J_{q(L-1)}; C; R]`, the negated companion.
    pub fn stack(&self) -> DMatrix<f64> {
        -&self.companion
    }
}

/// Interconnects a system and a controller of matching dimensions.
pub fn close_loop(sys: &ArSystem, ctrl: &Controller) -> Result<ClosedLoop, StabilityError> {
    if sys.order != ctrl.order || sys.m != ctrl.m || sys.p != ctrl.p {
        return Err(StabilityError::DimensionMismatch {
            l1: sys.order,
            m1: sys.m,
            p1: sys.p,
            l2: ctrl.order,
            m2: ctrl.m,
            p2: ctrl.p,
        });
    }
    let q = sys.signal_dim();
    let order = sys.order;
    let mut g_coeffs = Vec::with_capacity(order);
    for ell in 0..order {
        let mut g = DMatrix::zeros(q, q);
        g.view_mut((0, 0), (ctrl.m, ctrl.m)).copy_from(&ctrl.block_u(ell));
        g.view_mut((0, ctrl.m), (ctrl.m, ctrl.p))
            .copy_from(&ctrl.block_y(ell));
        g.view_mut((ctrl.m, 0), (sys.p, sys.m))
            .copy_from(&sys.block_u(ell));
        g.view_mut((ctrl.m, ctrl.m), (sys.p, sys.p))
            .copy_from(&sys.block_y(ell));
        g_coeffs.push(g);
    }
    let ql = q * order;
    let mut companion = DMatrix::zeros(ql, ql);
    for i in 0..q * (order - 1) {
        companion[(i, q + i)] = 1.0;
    }
    for (ell, g) in g_coeffs.iter().enumerate() {
        let mut view = companion.view_mut((q * (order - 1), ell * q), (q, q));
        view.copy_from(&(-g));
    }
    Ok(ClosedLoop {
        g_coeffs,
        companion,
        q,
        order,
    })
}

/// Largest real part over the companion spectrum.
pub fn max_real_part(cl: &ClosedLoop) -> f64 {
    cl.companion
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalue stability oracle: true iff `max Re(eig) < -margin`.
pub fn is_hurwitz(cl: &ClosedLoop, margin: f64) -> bool {
    max_real_part(cl) < -margin
}

/// Outcome of the Lyapunov LMI decision.
#[derive(Debug, Clone)]
pub struct LyapunovCheck {
    pub stable: bool,
    /// Unit-trace certificate when stable.
    pub psi: Option<DMatrix<f64>>,
    /// Margin variable of the interior-point solve.
    pub margin: f64,
    /// Re-verified `min eig(Psi)` and `min eig(M^T Psi + Psi M)`.
    pub psi_min_eig: f64,
    pub lyap_min_eig: f64,
}

/// Decision threshold on the normalized margin variable.
pub const LYAP_DECISION_TOL: f64 = 1e-7;

/// Lyapunov LMI check via the feasibility interface.
///
/// Solves: maximize `t` with `Psi >= t I`, `M^T Psi + Psi M >= t I` and
/// `I - Psi >= t I`, where `M = [-J; C; R]` normalized by its Frobenius
/// norm (the inequality is scale-free). Stable iff the margin clears
/// [`LYAP_DECISION_TOL`] and the eigenvalue re-check confirms both
/// inequalities.
pub fn lyapunov_lmi_check(
    sys: &ArSystem,
    ctrl: &Controller,
    solver: &dyn sdp::SdpSolver,
) -> Result<LyapunovCheck, StabilityError> {
    let cl = close_loop(sys, ctrl)?;
    let m = cl.stack();
    let scale = m.norm().max(1.0);
    let mn = &m / scale;
    let ql = m.nrows();
    let nvars = sym_var_count(ql);

    let mut psi_coeffs = Vec::with_capacity(nvars);
    let mut lyap_coeffs = Vec::with_capacity(nvars);
    let mut cap_coeffs = Vec::with_capacity(nvars);
    for k in 0..nvars {
        let e = sym_basis(ql, k);
        let sym = mn.transpose() * &e + &e * &mn;
        psi_coeffs.push((k, e.clone()));
        lyap_coeffs.push((k, sym));
        cap_coeffs.push((k, -e));
    }
    let prob = SdpProblem {
        nvars,
        blocks: vec![
            SdpBlock {
                size: ql,
                f0: DMatrix::zeros(ql, ql),
                coeffs: psi_coeffs,
            },
            SdpBlock {
                size: ql,
                f0: DMatrix::zeros(ql, ql),
                coeffs: lyap_coeffs,
            },
            SdpBlock {
                size: ql,
                f0: DMatrix::identity(ql, ql),
                coeffs: cap_coeffs,
            },
        ],
    };
    let res = sdp::solve(&prob, solver)?;
    let (psi, psi_min_eig, lyap_min_eig) = match &res.y {
        Some(y) => {
            let psi = sym_from_vars(ql, y.as_slice());
            let psi_min = psi.clone().symmetric_eigen().eigenvalues.min();
            let lyap = m.transpose() * &psi + &psi * &m;
            let lyap_min = lyap.symmetric_eigen().eigenvalues.min();
            (Some(psi), psi_min, lyap_min)
        }
        None => (None, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };
    let stable = res.status == SdpStatus::Feasible
        && res.margin >= LYAP_DECISION_TOL
        && psi_min_eig > 0.0
        && lyap_min_eig > 0.0;
    let psi = if stable {
        psi.map(|p| {
            let tr = p.trace();
            p / tr
        })
    } else {
        None
    };
    Ok(LyapunovCheck {
        stable,
        psi,
        margin: res.margin,
        psi_min_eig,
        lyap_min_eig,
    })
}

/// Builds a monic `q x q` polynomial-matrix system with prescribed scalar
/// spectra, conjugated by an orthogonal matrix; useful for constructing
/// test systems with known stability.
pub fn from_scalar_polys(
    roots_per_channel: &[Vec<(f64, f64)>],
    m: usize,
    p: usize,
    rotation: &DMatrix<f64>,
) -> (ArSystem, Controller) {
    let q = m + p;
    assert_eq!(roots_per_channel.len(), q);
    let order = roots_per_channel[0].len();
    // coefficients of prod (xi - (a + bi)) with complex roots closed under
    // conjugation, computed over complex pairs
    let mut g_coeffs = vec![DMatrix::zeros(q, q); order];
    let mut diag_coeffs: Vec<Vec<f64>> = Vec::with_capacity(q);
    for roots in roots_per_channel {
        assert_eq!(roots.len(), order);
        let mut poly = vec![(1.0, 0.0)]; // leading 1, complex (re, im)
        for (a, b) in roots {
            let mut next = vec![(0.0, 0.0); poly.len() + 1];
            for (k, (re, im)) in poly.iter().enumerate() {
                // multiply by (xi - r): xi-term
                next[k + 1].0 += re;
                next[k + 1].1 += im;
                // constant term: -r * coeff
                next[k].0 += -(a * re - b * im);
                next[k].1 += -(a * im + b * re);
            }
            poly = next;
        }
        // poly[k] is the xi^k coefficient; poly[order] = 1
        diag_coeffs.push(poly.iter().take(order).map(|(re, _)| *re).collect());
    }
    for (ell, g) in g_coeffs.iter_mut().enumerate() {
        for ch in 0..q {
            g[(ch, ch)] = diag_coeffs[ch][ell];
        }
        *g = rotation.transpose() * g.clone() * rotation;
    }
    // split G~ rows into controller (top m) and system (bottom p), with the
    // interleaved column layout
    let mut cmat = DMatrix::zeros(m, q * order);
    let mut rmat = DMatrix::zeros(p, q * order);
    for (ell, g) in g_coeffs.iter().enumerate() {
        for c in 0..q {
            for r in 0..m {
                cmat[(r, ell * q + c)] = g[(r, c)];
            }
            for r in 0..p {
                rmat[(r, ell * q + c)] = g[(m + r, c)];
            }
        }
    }
    (
        ArSystem::new(order, m, p, rmat).unwrap(),
        Controller::new(order, m, p, cmat).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::ClarabelSolver;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn scalar_pair(c: [f64; 2], r: [f64; 2]) -> (ArSystem, Controller) {
        let sys = ArSystem::new(1, 1, 1, DMatrix::from_row_slice(1, 2, &r)).unwrap();
        let ctrl = Controller::new(1, 1, 1, DMatrix::from_row_slice(1, 2, &c)).unwrap();
        (sys, ctrl)
    }

    #[test]
    fn close_loop_first_order_assembly() {
        let (sys, ctrl) = scalar_pair([1.0, 2.0], [3.0, 4.0]);
        let cl = close_loop(&sys, &ctrl).unwrap();
        let g0 = &cl.g_coeffs[0];
        assert_eq!(g0[(0, 0)], 1.0);
        assert_eq!(g0[(0, 1)], 2.0);
        assert_eq!(g0[(1, 0)], 3.0);
        assert_eq!(g0[(1, 1)], 4.0);
        assert_eq!(cl.companion, -g0.clone());
        assert_eq!(cl.stack(), g0.clone());
    }

    #[test]
    fn close_loop_zero_coefficients_is_shift() {
        let sys = ArSystem::new(2, 1, 1, DMatrix::zeros(1, 4)).unwrap();
        let ctrl = Controller::new(2, 1, 1, DMatrix::zeros(1, 4)).unwrap();
        let cl = close_loop(&sys, &ctrl).unwrap();
        // top block is the shift [0 I], bottom rows vanish
        for i in 0..2 {
            for j in 0..4 {
                let expected = if j == i + 2 { 1.0 } else { 0.0 };
                assert_eq!(cl.companion[(i, j)], expected);
            }
        }
        assert_eq!(cl.companion.view((2, 0), (2, 4)).amax(), 0.0);
    }

    #[test]
    fn close_loop_is_linear_in_controller_rows() {
        let (sys, c1) = scalar_pair([1.0, -0.5], [0.3, 0.7]);
        let c2 = Controller::new(1, 1, 1, DMatrix::from_row_slice(1, 2, &[0.2, 0.4])).unwrap();
        let sum =
            Controller::new(1, 1, 1, c1.matrix() + c2.matrix()).unwrap();
        let gl = close_loop(&sys, &sum).unwrap();
        let g1 = close_loop(&sys, &c1).unwrap();
        let g2 = close_loop(&sys, &c2).unwrap();
        // controller rows add entry-wise; system rows stay fixed
        let top = gl.g_coeffs[0].row(0) - (g1.g_coeffs[0].row(0) + g2.g_coeffs[0].row(0));
        assert_eq!(top.amax(), 0.0);
        assert_eq!(gl.g_coeffs[0].row(1), g1.g_coeffs[0].row(1));
    }

    #[test]
    fn hurwitz_scalar_cases() {
        // G(xi) = xi + 2 on the system row: A = [-2] on that channel.
        let (sys, ctrl) = scalar_pair([2.0, 0.0], [0.0, 2.0]);
        let cl = close_loop(&sys, &ctrl).unwrap();
        assert!(is_hurwitz(&cl, 0.0));
        let (sys, ctrl) = scalar_pair([-1.0, 0.0], [0.0, -1.0]);
        let cl = close_loop(&sys, &ctrl).unwrap();
        assert!(!is_hurwitz(&cl, 0.0));
        assert_relative_eq!(max_real_part(&cl), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn constructed_stable_systems_are_hurwitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let order = rng.random_range(1..=3);
            let q = rng.random_range(2..=4);
            let m = rng.random_range(1..q);
            let p = q - m;
            let roots = random_stable_roots(&mut rng, q, order);
            let rot = random_rotation(&mut rng, q);
            let (sys, ctrl) = from_scalar_polys(&roots, m, p, &rot);
            let cl = close_loop(&sys, &ctrl).unwrap();
            assert!(
                is_hurwitz(&cl, 0.0),
                "constructed spectrum should be stable, max Re {}",
                max_real_part(&cl)
            );
        }
    }

    pub(crate) fn random_stable_roots(
        rng: &mut ChaCha8Rng,
        q: usize,
        order: usize,
    ) -> Vec<Vec<(f64, f64)>> {
        (0..q)
            .map(|_| {
                let mut roots = Vec::new();
                while roots.len() < order {
                    let re = -(0.1 + rng.random::<f64>() * 2.9);
                    if order - roots.len() >= 2 && rng.random::<f64>() < 0.5 {
                        let im = rng.random::<f64>() * 3.0;
                        roots.push((re, im));
                        roots.push((re, -im));
                    } else {
                        roots.push((re, 0.0));
                    }
                }
                roots
            })
            .collect()
    }

    pub(crate) fn random_rotation(rng: &mut ChaCha8Rng, q: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(q, q, |_, _| rng.random::<f64>() - 0.5);
        let qr = a.qr();
        qr.q()
    }

    #[test]
    fn lyapunov_matches_eigenvalues_on_scalar_cases() {
        let solver = ClarabelSolver::default();
        let (sys, ctrl) = scalar_pair([2.0, 0.0], [0.0, 2.0]);
        let check = lyapunov_lmi_check(&sys, &ctrl, &solver).unwrap();
        assert!(check.stable);
        let psi = check.psi.unwrap();
        assert!(psi[(0, 0)] > 0.0 && psi[(1, 1)] > 0.0);
        assert_relative_eq!(psi.trace(), 1.0, epsilon = 1e-12);

        let (sys, ctrl) = scalar_pair([-1.0, 0.0], [0.0, -1.0]);
        let check = lyapunov_lmi_check(&sys, &ctrl, &solver).unwrap();
        assert!(!check.stable);
    }

    #[test]
    fn lyapunov_certificate_margins_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let solver = ClarabelSolver::default();
        for _ in 0..5 {
            let roots = random_stable_roots(&mut rng, 3, 2);
            let rot = random_rotation(&mut rng, 3);
            let (sys, ctrl) = from_scalar_polys(&roots, 1, 2, &rot);
            let check = lyapunov_lmi_check(&sys, &ctrl, &solver).unwrap();
            assert!(check.stable);
            assert!(check.psi_min_eig > 0.0);
            assert!(check.lyap_min_eig > 0.0);
        }
    }

    #[test]
    fn json_roundtrip() {
        let mat = DMatrix::from_row_slice(2, 6, &[
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0, //
            7.0, 8.0, 9.0, 10.0, 11.0, 12.0,
        ]);
        let sys = ArSystem::new(2, 1, 2, mat).unwrap();
        let json = serde_json::to_string(&sys.to_json()).unwrap();
        let back = ArSystem::from_json(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(&back, &sys);
        assert_eq!(back.block_y(1)[(1, 1)], 12.0);
        assert_eq!(back.block_u(1)[(0, 0)], 4.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sys = ArSystem::new(1, 1, 1, DMatrix::zeros(1, 2)).unwrap();
        let ctrl = Controller::new(2, 1, 1, DMatrix::zeros(1, 4)).unwrap();
        assert!(matches!(
            close_loop(&sys, &ctrl),
            Err(StabilityError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            ArSystem::new(1, 1, 1, DMatrix::zeros(2, 2)),
            Err(StabilityError::CoefficientShape { .. })
        ));
    }
}
