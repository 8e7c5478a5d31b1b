//! Data-consistency characterization, informativity for quadratic
//! stabilization, and noise-free identification.
//!
//! A system `R` is consistent with the data under the noise class of
//! intensity `Theta` iff `[I; R^T]^T Pi [I; R^T] >= 0`. The data are
//! informative for quadratic stabilization iff the strict LMI in
//! `(Phi, D)` built from the doubled matrix `N` is feasible, in which case
//! `C = D Phi^{-1}` stabilizes every consistent system.

use crate::gram::{self, BigN, GramError, GramSet, PiMatrix};
use crate::sdp::{self, sym_basis, sym_from_vars, sym_var_count, SdpBlock, SdpProblem, SdpStatus};
use crate::signals::Dataset;
use crate::splines::{self, SplineError};
use crate::stability::{self, ArSystem, Controller, StabilityError};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Gram(#[from] GramError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("preconditions failed: {0:?}")]
    PreconditionFailed(Box<PreconditionReport>),
    #[error("data not informative at this Theta: margin {margin:.3e}")]
    Infeasible { margin: f64 },
    #[error("solver could not certify feasibility or infeasibility (status {status})")]
    SolverInconclusive { status: String },
    #[error("certificate extraction failed: {0}")]
    Extraction(String),
}

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error(transparent)]
    Gram(#[from] GramError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("data not surjective: sigma_min {sigma_min:.3e} vs sigma_max {sigma_max:.3e}")]
    NotSurjective { sigma_min: f64, sigma_max: f64 },
}

/// Consistency of one candidate system with the data.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    /// `[I; R^T]^T Pi [I; R^T]`, symmetrized.
    pub quad_form: DMatrix<f64>,
    pub min_eig: f64,
    pub member: bool,
    pub tol: f64,
}

/// Membership tolerance: `1e-8 * (1 + ||Pi||_F)` unless overridden.
pub fn default_membership_tol(pi: &PiMatrix) -> f64 {
    1e-8 * (1.0 + pi.pi.norm())
}

/// Evaluates the data-consistency quadratic form for a candidate system.
pub fn consistency_test(
    pi: &PiMatrix,
    sys: &ArSystem,
    tol: Option<f64>,
) -> ConsistencyReport {
    let p = sys.output_dim();
    let ql = sys.matrix().ncols();
    let mut f = DMatrix::zeros(p + ql, p);
    f.view_mut((0, 0), (p, p)).copy_from(&DMatrix::identity(p, p));
    f.view_mut((p, 0), (ql, p)).copy_from(&sys.matrix().transpose());
    let quad = f.transpose() * &pi.pi * &f;
    let quad = (&quad + quad.transpose()) * 0.5;
    let min_eig = quad.clone().symmetric_eigen().eigenvalues.min();
    let tol = tol.unwrap_or_else(|| default_membership_tol(pi));
    ConsistencyReport {
        quad_form: quad,
        min_eig,
        member: min_eig >= -tol,
        tol,
    }
}

/// Numerical checks of the matrix conditions required by the strict
/// matrix S-lemma, plus surjectivity of the data operator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreconditionReport {
    pub hh_min_eig: f64,
    pub hh_max_eig: f64,
    /// `N22 = -H H^*` negative definite (surjectivity).
    pub surjective: bool,
    pub n22_neg: bool,
    /// Kernel inclusion is automatic once `N22 < 0`.
    pub kernel_ok: bool,
    /// Schur complement `N11 - N12 N22^-1 N12^T >= 0` within tolerance.
    pub schur_psd: bool,
    pub schur_min_eig: f64,
    pub slemma_ok: bool,
}

/// Checks surjectivity and the S-lemma preconditions on `N`.
pub fn check_preconditions(pi: &PiMatrix, bn: &BigN, gs: &GramSet) -> PreconditionReport {
    let eig = gs.hh.clone().symmetric_eigen();
    let hh_min = eig.eigenvalues.min();
    let hh_max = eig.eigenvalues.max();
    // sigma_min(H) = sqrt(min eig HH*); same tolerance as the spline rank test
    let sigma_min = hh_min.max(0.0).sqrt();
    let sigma_max = hh_max.max(0.0).sqrt();
    let surjective = sigma_min > splines::RANK_TOL * sigma_max.max(1.0);
    let n22_neg = surjective;
    let ql = bn.hh_dim();
    let n11 = bn.n.view((0, 0), (ql, ql)).into_owned();
    let n12 = bn.n.view((0, ql), (ql, ql)).into_owned();
    let (schur_min_eig, schur_psd) = if surjective {
        let hh_lu = gs.hh.clone().lu();
        let x = hh_lu
            .solve(&n12.transpose())
            .expect("HH* invertible when surjective");
        // N22^{-1} = -(HH*)^{-1}
        let schur = &n11 + n12 * x;
        let schur = (&schur + schur.transpose()) * 0.5;
        let min = schur.symmetric_eigen().eigenvalues.min();
        let tol = 1e-8 * (1.0 + pi.pi.norm());
        (min, min >= -tol)
    } else {
        (f64::NEG_INFINITY, false)
    };
    PreconditionReport {
        hh_min_eig: hh_min,
        hh_max_eig: hh_max,
        surjective,
        n22_neg,
        kernel_ok: n22_neg,
        schur_psd,
        schur_min_eig,
        slemma_ok: n22_neg && schur_psd,
    }
}

/// Variable layout of the stabilization LMI: the upper triangle of `Phi`
/// followed by the rows of `D`.
#[derive(Debug, Clone, Copy)]
pub struct LmiDims {
    pub order: usize,
    pub m: usize,
    pub p: usize,
}

impl LmiDims {
    pub fn q(&self) -> usize {
        self.m + self.p
    }

    pub fn ql(&self) -> usize {
        self.q() * self.order
    }

    pub fn phi_vars(&self) -> usize {
        sym_var_count(self.ql())
    }

    pub fn d_vars(&self) -> usize {
        self.m * self.ql()
    }

    pub fn nvars(&self) -> usize {
        self.phi_vars() + self.d_vars()
    }
}

/// Assembles the strict stabilization LMI as a two-block feasibility
/// problem in the unknowns `(Phi, D)`:
/// `Phi - eps I >= 0` and
/// `[[sym([-J Phi; D; 0]), Phi], [Phi, 0]] - N - eps I >= 0`.
pub fn assemble_stabilization_lmi(bn: &BigN, dims: LmiDims, epsilon: f64) -> SdpProblem {
    let ql = dims.ql();
    assert_eq!(bn.hh_dim(), ql, "N dimension does not match (L, m, p)");
    let q = dims.q();
    let shift = q * (dims.order - 1);
    let nvars = dims.nvars();

    let mut phi_block = SdpBlock {
        size: ql,
        f0: DMatrix::identity(ql, ql) * (-epsilon),
        coeffs: Vec::with_capacity(dims.phi_vars()),
    };
    let mut big_f0 = -bn.n.clone();
    for i in 0..2 * ql {
        big_f0[(i, i)] -= epsilon;
    }
    let mut big_block = SdpBlock {
        size: 2 * ql,
        f0: big_f0,
        coeffs: Vec::with_capacity(nvars),
    };

    // Phi variables: k-th upper-triangle basis E contributes E to the Phi
    // block, sym([-J E; 0; 0]) to the (1,1) corner and E to the (1,2)/(2,1)
    // corners of the big block.
    for k in 0..dims.phi_vars() {
        let e = sym_basis(ql, k);
        phi_block.coeffs.push((k, e.clone()));
        let mut big = DMatrix::zeros(2 * ql, 2 * ql);
        // S = [-J Phi; D; 0]: row r of J Phi is row q + r of Phi.
        for r in 0..shift {
            for c in 0..ql {
                big[(r, c)] -= e[(q + r, c)];
            }
        }
        let sym = &big + big.transpose();
        let mut big = sym;
        for i in 0..ql {
            for j in 0..ql {
                big[(i, ql + j)] += e[(i, j)];
                big[(ql + j, i)] += e[(i, j)];
            }
        }
        big_block.coeffs.push((k, big));
    }
    // D variables: entry (r, c) of D sits at row shift + r, col c of S.
    for r in 0..dims.m {
        for c in 0..ql {
            let k = dims.phi_vars() + r * ql + c;
            let mut big = DMatrix::zeros(2 * ql, 2 * ql);
            big[(shift + r, c)] += 1.0;
            big[(c, shift + r)] += 1.0;
            big_block.coeffs.push((k, big));
        }
    }
    SdpProblem {
        nvars,
        blocks: vec![phi_block, big_block],
    }
}

/// Options for the design pipeline.
#[derive(Debug, Clone)]
pub struct DesignOptions {
    /// Absolute strictness shift; default `1e-6 * (1 + ||N||_F)`.
    pub epsilon: Option<f64>,
    /// Proceed even when the S-lemma preconditions fail.
    pub skip_preconditions: bool,
    pub solver: sdp::ClarabelSolver,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            skip_preconditions: false,
            solver: sdp::ClarabelSolver::default(),
        }
    }
}

/// A feasible stabilization certificate.
#[derive(Debug, Clone)]
pub struct StabilizationCertificate {
    pub phi: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub controller: Controller,
    /// Re-verified `min eig(Phi) - eps` on the original scale.
    pub phi_margin: f64,
    /// Re-verified `min eig(Big - N) - eps` on the original scale.
    pub lmi_margin: f64,
    pub epsilon: f64,
    /// Margin variable reported by the solver (normalized problem).
    pub solver_margin: f64,
    pub preconditions: PreconditionReport,
    /// Least-squares center `-Y_L H^* (H H^*)^{-1}` closed-loop check.
    pub center_hurwitz: Option<bool>,
    pub solver: String,
    pub iterations: u32,
}

/// Evaluates both LMI blocks at `(Phi, D)` and returns their margins
/// relative to `eps` (independent of the solver's report).
fn verify_certificate(
    bn: &BigN,
    dims: LmiDims,
    phi: &DMatrix<f64>,
    d: &DMatrix<f64>,
    epsilon: f64,
) -> (f64, f64) {
    let ql = dims.ql();
    let q = dims.q();
    let shift = q * (dims.order - 1);
    let phi_min = phi.clone().symmetric_eigen().eigenvalues.min();
    let mut s = DMatrix::zeros(ql, ql);
    for r in 0..shift {
        for c in 0..ql {
            s[(r, c)] = -phi[(q + r, c)];
        }
    }
    for r in 0..dims.m {
        for c in 0..ql {
            s[(shift + r, c)] = d[(r, c)];
        }
    }
    let sym = &s + s.transpose();
    let mut big = DMatrix::zeros(2 * ql, 2 * ql);
    big.view_mut((0, 0), (ql, ql)).copy_from(&sym);
    big.view_mut((0, ql), (ql, ql)).copy_from(phi);
    big.view_mut((ql, 0), (ql, ql)).copy_from(phi);
    big -= &bn.n;
    let big = (&big + big.transpose()) * 0.5;
    let big_min = big.symmetric_eigen().eigenvalues.min();
    (phi_min - epsilon, big_min - epsilon)
}

/// Full design pipeline: Grams, `Pi`, `N`, preconditions, LMI, extraction.
pub fn design_controller(
    ds: &Dataset,
    theta: &DMatrix<f64>,
    opts: &DesignOptions,
) -> Result<StabilizationCertificate, DesignError> {
    let gs = gram::build_gram_set(ds)?;
    let pi = gram::build_pi(&gs, theta)?;
    let bn = gram::build_big_n(&pi);
    let pre = check_preconditions(&pi, &bn, &gs);
    if !pre.slemma_ok && !opts.skip_preconditions {
        return Err(DesignError::PreconditionFailed(Box::new(pre)));
    }
    design_from_big_n(&gs, &bn, pre, opts)
}

/// Design step after the Gram stage; usable when `N` is already in hand.
pub fn design_from_big_n(
    gs: &GramSet,
    bn: &BigN,
    preconditions: PreconditionReport,
    opts: &DesignOptions,
) -> Result<StabilizationCertificate, DesignError> {
    let dims = LmiDims {
        order: gs.order(),
        m: gs.input_dim(),
        p: gs.output_dim(),
    };
    let epsilon = opts
        .epsilon
        .unwrap_or_else(|| 1e-6 * (1.0 + bn.n.norm()));
    // Solve on the normalized problem; C = D Phi^{-1} is scale-invariant.
    let scale = bn.n.norm().max(1e-300);
    let bn_scaled = BigN::from_matrix(&bn.n / scale, bn.hh_dim());
    let prob = assemble_stabilization_lmi(&bn_scaled, dims, epsilon / scale);
    let res = sdp::solve(&prob, &opts.solver)?;
    match res.status {
        SdpStatus::Feasible => {}
        SdpStatus::Infeasible => {
            return Err(DesignError::Infeasible { margin: res.margin })
        }
        SdpStatus::Unknown => {
            return Err(DesignError::SolverInconclusive { status: res.solver })
        }
    }
    let y = res.y.expect("feasible result carries variables");
    let ql = dims.ql();
    let phi_scaled = sym_from_vars(ql, &y.as_slice()[..dims.phi_vars()]);
    let mut d_scaled = DMatrix::zeros(dims.m, ql);
    for r in 0..dims.m {
        for c in 0..ql {
            d_scaled[(r, c)] = y[dims.phi_vars() + r * ql + c];
        }
    }
    // Undo the normalization for reporting.
    let phi = &phi_scaled * scale;
    let d = &d_scaled * scale;
    let lu = phi.clone().lu();
    let c = lu
        .solve(&d.transpose())
        .ok_or_else(|| DesignError::Extraction("Phi not invertible".into()))?
        .transpose();
    if !c.iter().all(|v| v.is_finite()) {
        return Err(DesignError::Extraction("controller has non-finite entries".into()));
    }
    let controller = Controller::new(dims.order, dims.m, dims.p, c)?;
    let (phi_margin, lmi_margin) = verify_certificate(bn, dims, &phi, &d, epsilon);

    // Smoke check against the Gram least-squares center.
    let center_hurwitz = if preconditions.surjective {
        let hh_lu = gs.hh.clone().lu();
        let rhat = hh_lu
            .solve(&gs.ylh.transpose())
            .map(|x| -x.transpose());
        match rhat {
            Some(r) => {
                let sys = ArSystem::new(dims.order, dims.m, dims.p, r)?;
                let cl = stability::close_loop(&sys, &controller)?;
                Some(stability::is_hurwitz(&cl, 0.0))
            }
            None => None,
        }
    } else {
        None
    };
    Ok(StabilizationCertificate {
        phi,
        d,
        controller,
        phi_margin,
        lmi_margin,
        epsilon,
        solver_margin: res.margin,
        preconditions,
        center_hurwitz,
        solver: res.solver,
        iterations: res.iterations,
    })
}

/// Identification method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentifyMethod {
    /// `R = -Y_L H^* (H H^*)^{-1}` from the operator Gram matrices.
    Operator,
    /// `R = -Y~ H~^T (H~ H~^T)^{-1}` from B-spline approximations.
    Spline { level: u32 },
}

#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub system: ArSystem,
    /// `||R HH* + Y_L H^*|| / (1 + ||Y_L H^*||)` residual of the defining
    /// normal equations.
    pub residual: f64,
    pub warnings: Vec<String>,
}

/// Identifies the system from noise-free data.
pub fn identify(ds: &Dataset, method: IdentifyMethod) -> Result<IdentifyOutcome, IdentifyError> {
    let mut warnings = Vec::new();
    if ds.trajectories().iter().any(|t| {
        t.noise().map(|v| v.amax() > 0.0).unwrap_or(false)
    }) {
        warnings.push("noise samples present; identification assumes noise-free data".into());
    }
    let gs = gram::build_gram_set(ds)?;
    let dims = (ds.order(), ds.input_dim(), ds.output_dim());
    let r = match method {
        IdentifyMethod::Operator => {
            let eig = gs.hh.clone().symmetric_eigen();
            let hh_min = eig.eigenvalues.min().max(0.0);
            let hh_max = eig.eigenvalues.max().max(0.0);
            let (sigma_min, sigma_max) = (hh_min.sqrt(), hh_max.sqrt());
            if sigma_min <= splines::RANK_TOL * sigma_max.max(1.0) {
                return Err(IdentifyError::NotSurjective {
                    sigma_min,
                    sigma_max,
                });
            }
            let lu = gs.hh.clone().lu();
            -lu.solve(&gs.ylh.transpose())
                .expect("HH* invertible")
                .transpose()
        }
        IdentifyMethod::Spline { level } => {
            let sa = splines::build_spline_approx(ds, level)?;
            let report = splines::rank_test(&sa);
            if !report.surjective {
                return Err(IdentifyError::NotSurjective {
                    sigma_min: report.sigma_min,
                    sigma_max: report.sigma_max,
                });
            }
            // Moore-Penrose right inverse: H~^T (H~ H~^T)^{-1}.
            let hht = &sa.h_tilde * sa.h_tilde.transpose();
            let lu = hht.lu();
            let yht = &sa.y_tilde * sa.h_tilde.transpose();
            -lu.solve(&yht.transpose())
                .expect("H~ H~^T invertible when surjective")
                .transpose()
        }
    };
    let system = ArSystem::new(dims.0, dims.1, dims.2, r)?;
    let residual = (system.matrix() * &gs.hh + &gs.ylh).norm() / (1.0 + gs.ylh.norm());
    Ok(IdentifyOutcome {
        system,
        residual,
        warnings,
    })
}

/// The Gram least-squares center `-Y_L H^* (H H^*)^{-1}`.
pub fn gram_center(gs: &GramSet) -> Option<ArSystem> {
    let lu = gs.hh.clone().lu();
    let r = lu.solve(&gs.ylh.transpose())?;
    ArSystem::new(gs.order(), gs.input_dim(), gs.output_dim(), -r.transpose()).ok()
}

/// Samples systems from the boundary region of the consistent set: a random
/// direction from the center, bisection to the consistency boundary, then a
/// shrink by 0.99.
pub fn sample_consistent_systems(
    pi: &PiMatrix,
    center: &ArSystem,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<ArSystem> {
    let p = center.output_dim();
    let cols = center.matrix().ncols();
    let mut out = Vec::with_capacity(count);
    let consistent =
        |mat: &DMatrix<f64>| -> bool {
            let sys = ArSystem::new(center.order(), center.input_dim(), p, mat.clone())
                .expect("shape fixed");
            consistency_test(pi, &sys, None).member
        };
    if !consistent(center.matrix()) {
        return out;
    }
    while out.len() < count {
        let dir = DMatrix::<f64>::from_fn(p, cols, |_, _| rng.sample(StandardNormal));
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let dir = dir / norm;
        // expand to bracket the boundary
        let mut hi = 1e-6;
        let mut expansions = 0;
        while consistent(&(center.matrix() + &dir * hi)) && expansions < 80 {
            hi *= 2.0;
            expansions += 1;
        }
        if expansions == 80 {
            // unbounded direction; take the last finite point
            let mat = center.matrix() + &dir * hi * 0.99;
            out.push(ArSystem::new(center.order(), center.input_dim(), p, mat).unwrap());
            continue;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if consistent(&(center.matrix() + &dir * mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mat = center.matrix() + &dir * (lo * 0.99);
        if consistent(&mat) {
            out.push(ArSystem::new(center.order(), center.input_dim(), p, mat).unwrap());
        }
    }
    out
}
