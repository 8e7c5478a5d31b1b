//! Closed-form products of synthesis operators and their adjoints.
//!
//! The `ell`-th synthesis operator of a signal `f` maps a test function
//! `phi` in `H^L_0[0, tau]` to `(-1)^ell \int phi^(ell) f dt`. Products such
//! as `S_j T_ell^*` reduce to weighted integrals of the data against
//! repeated integrals of the data, so every aggregated Gram matrix is
//! computable from samples alone, without differentiating measurements.
//!
//! This module evaluates the polynomial vectors `gamma_i`, the moment
//! matrix `Gamma(tau)`, the shifted repeated integrals `f~_a`, the boundary
//! correction `Lambda_ell`, the adjoint functions `T_ell^* b`, and assembles
//! the per-trajectory and aggregated Gram matrices together with the data
//! matrix `Pi` and its doubled embedding `N`.

use crate::signals::{
    cumulative_simpson, simpson_weights, Dataset, SignalError, Trajectory,
};
use nalgebra::{DMatrix, DVector};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Condition number of `Gamma(tau)` above which a warning is attached.
pub const GAMMA_COND_WARN: f64 = 1e10;
/// Condition number above which `Gamma(tau)` is treated as singular.
pub const GAMMA_COND_ERR: f64 = 1e14;
/// Hard cap on the model order; factorial ratios degrade fast beyond this.
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Error)]
pub enum GramError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("model order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("order must be at least 1")]
    ZeroOrder,
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("Gamma(tau) numerically singular: condition number {cond:.3e}")]
    GammaSingular { cond: f64 },
    #[error("f-tilde index {index} outside -{order}..={order}")]
    IndexOutOfRange { index: i64, order: usize },
    #[error("synthesis index {index} outside 0..={order}")]
    SynthesisIndexOutOfRange { index: usize, order: usize },
    #[error("signals must share the sample grid: {0} vs {1} rows")]
    GridMismatch(usize, usize),
    #[error("Theta must be symmetric: max asymmetry {0:.3e}")]
    ThetaNotSymmetric(f64),
    #[error("Theta must be nonnegative definite: min eigenvalue {0:.3e}")]
    ThetaNotPsd(f64),
    #[error("Theta must be {expected} x {expected}, got {rows} x {cols}")]
    ThetaDimension {
        expected: usize,
        rows: usize,
        cols: usize,
    },
}

/// The polynomial vectors `gamma_i(t)` and the moment matrix `Gamma(tau)`.
///
/// Entry `l` (1-based) of `gamma_i(t)` is `((l-1)!/(i+l-1)!) t^(i+l-1)`.
/// `Gamma(tau)` stacks the rows `gamma_i(tau)^T` for `i = 1..=L` and is
/// invertible for every positive horizon.
#[derive(Debug, Clone)]
pub struct GammaBasis {
    order: usize,
    tau: f64,
    gamma: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cond: f64,
    ill_conditioned: bool,
}

impl GammaBasis {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// The matrix `Gamma(tau)`.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn condition_number(&self) -> f64 {
        self.cond
    }

    /// True when the condition number exceeds [`GAMMA_COND_WARN`].
    pub fn is_ill_conditioned(&self) -> bool {
        self.ill_conditioned
    }

    /// Evaluates `gamma_i(t)` for `i = 0..=L`.
    ///
    /// Computed through running products of the factorial ratio, so no
    /// factorial is ever formed explicitly.
    pub fn gamma_at(&self, i: usize, t: f64) -> DVector<f64> {
        gamma_vector(self.order, i, t)
    }

    /// Solves `Gamma(tau) X = rhs` through the stored factorization.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu
            .solve(rhs)
            .expect("Gamma factorization was validated at construction")
    }
}

pub(crate) fn gamma_vector(order: usize, i: usize, t: f64) -> DVector<f64> {
    let mut v = DVector::zeros(order);
    // ratio(l) = (l-1)!/(i+l-1)!, power = t^(i+l-1)
    let mut ratio = 1.0;
    for s in 1..=i {
        ratio /= s as f64;
    }
    let mut power = t.powi(i as i32);
    for l in 1..=order {
        v[l - 1] = ratio * power;
        // advance from l to l+1: ratio *= l / (i+l), power *= t
        ratio *= l as f64 / (i + l) as f64;
        power *= t;
    }
    v
}

/// Builds `Gamma(tau)` with its factorization and condition estimate.
pub fn gamma_matrix(order: usize, tau: f64) -> Result<GammaBasis, GramError> {
    if order == 0 {
        return Err(GramError::ZeroOrder);
    }
    if order > MAX_ORDER {
        return Err(GramError::OrderTooLarge(order));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(GramError::NonPositiveHorizon(tau));
    }
    let mut gamma = DMatrix::zeros(order, order);
    for i in 1..=order {
        gamma.row_mut(i - 1).copy_from(&gamma_vector(order, i, tau).transpose());
    }
    let svd = gamma.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < GAMMA_COND_ERR) {
        return Err(GramError::GammaSingular { cond });
    }
    let lu = gamma.clone().lu();
    Ok(GammaBasis {
        order,
        tau,
        gamma,
        lu,
        cond,
        ill_conditioned: cond > GAMMA_COND_WARN,
    })
}

/// Repeated integrals of one signal, cached for all f~ indices.
///
/// `f~_a = (-1)^L J^(L-a) f` for `a < L` and `(-1)^L f` for `a = L`,
/// where `J` is cumulative integration from zero.
pub(crate) struct SignalIntegrals {
    order: usize,
    sign: f64,
    samples: DMatrix<f64>,
    /// `integrals[r - 1]` holds `J^r f` for `r = 1..=2L`.
    integrals: Vec<DMatrix<f64>>,
}

impl SignalIntegrals {
    pub(crate) fn new(samples: &DMatrix<f64>, h: f64, order: usize) -> Result<Self, GramError> {
        if order == 0 {
            return Err(GramError::ZeroOrder);
        }
        let mut integrals = Vec::with_capacity(2 * order);
        let mut current = cumulative_simpson(samples, h)?;
        integrals.push(current.clone());
        for _ in 1..2 * order {
            current = cumulative_simpson(&current, h)?;
            integrals.push(current.clone());
        }
        Ok(Self {
            order,
            sign: if order % 2 == 0 { 1.0 } else { -1.0 },
            samples: samples.clone(),
            integrals,
        })
    }

    fn dim(&self) -> usize {
        self.samples.ncols()
    }

    fn len(&self) -> usize {
        self.samples.nrows()
    }

    /// Raw (unsigned) samples backing `f~_a`; multiply by `self.sign`.
    fn base(&self, index: i64) -> Result<&DMatrix<f64>, GramError> {
        let order = self.order as i64;
        if index == order {
            return Ok(&self.samples);
        }
        if index < -order || index > order {
            return Err(GramError::IndexOutOfRange {
                index,
                order: self.order,
            });
        }
        let r = (order - index) as usize;
        Ok(&self.integrals[r - 1])
    }

    pub(crate) fn f_tilde(&self, index: i64) -> Result<DMatrix<f64>, GramError> {
        Ok(self.base(index)? * self.sign)
    }

    /// `f~_index(tau)` as a row.
    fn f_tilde_end(&self, index: i64) -> Result<Vec<f64>, GramError> {
        let m = self.base(index)?;
        let last = m.nrows() - 1;
        Ok((0..m.ncols()).map(|c| self.sign * m[(last, c)]).collect())
    }

    /// `Lambda_ell = Gamma(tau)^{-1} [f~_{ell-1}(tau); ...; f~_{ell-L}(tau)]`.
    pub(crate) fn lambda(
        &self,
        ell: usize,
        basis: &GammaBasis,
    ) -> Result<DMatrix<f64>, GramError> {
        if ell > self.order {
            return Err(GramError::SynthesisIndexOutOfRange {
                index: ell,
                order: self.order,
            });
        }
        let d = self.dim();
        let mut stacked = DMatrix::zeros(self.order, d);
        for i in 1..=self.order {
            let row = self.f_tilde_end(ell as i64 - i as i64)?;
            for c in 0..d {
                stacked[(i - 1, c)] = row[c];
            }
        }
        Ok(basis.solve(&stacked))
    }

    /// Node samples of `(T_ell^* b)^(deriv)`, using
    /// `(f~_{deriv+ell-L}(t)^T - gamma_{L-deriv}(t)^T Lambda_ell) b`.
    fn adjoint_derivative(
        &self,
        basis: &GammaBasis,
        ell: usize,
        deriv: usize,
        b: &DVector<f64>,
    ) -> Result<DVector<f64>, GramError> {
        if ell > self.order || deriv > self.order {
            return Err(GramError::SynthesisIndexOutOfRange {
                index: ell.max(deriv),
                order: self.order,
            });
        }
        let lam = self.lambda(ell, basis)?;
        let lam_b = &lam * b; // L x 1
        let ft = self.base(deriv as i64 + ell as i64 - self.order as i64)?;
        let n = self.len();
        let h = basis.tau() / (n - 1) as f64;
        let gamma_idx = self.order - deriv;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let t = i as f64 * h;
            let gam = gamma_vector(self.order, gamma_idx, t);
            let mut val = 0.0;
            for c in 0..self.dim() {
                val += self.sign * ft[(i, c)] * b[c];
            }
            val -= gam.dot(&lam_b);
            out[i] = val;
        }
        Ok(out)
    }
}

/// Shifted repeated integral `f~_index` of a sampled signal.
///
/// `index = L` returns `(-1)^L f` point-wise; lower indices return
/// `(-1)^L` times the `(L - index)`-fold repeated integral at every node.
pub fn f_tilde(
    samples: &DMatrix<f64>,
    h: f64,
    order: usize,
    index: i64,
) -> Result<DMatrix<f64>, GramError> {
    SignalIntegrals::new(samples, h, order)?.f_tilde(index)
}

/// `Lambda_ell` from `Gamma(tau)` and the stacked end values
/// `[f~_{ell-1}(tau); ...; f~_{ell-L}(tau)]` (one row each).
pub fn lambda_matrix(
    basis: &GammaBasis,
    ftilde_at_tau: &DMatrix<f64>,
) -> Result<DMatrix<f64>, GramError> {
    if ftilde_at_tau.nrows() != basis.order() {
        return Err(GramError::GridMismatch(
            ftilde_at_tau.nrows(),
            basis.order(),
        ));
    }
    Ok(basis.solve(ftilde_at_tau))
}

/// The product `S_j T_ell^*` of synthesis operators associated with
/// sampled signals `g` (rows of dimension `a`) and `f` (dimension `b`),
/// evaluated as `(-1)^j \int g (f~_{j+ell-L}^T - gamma_{L-j}^T Lambda_ell) dt`.
pub fn op_product(
    g: &DMatrix<f64>,
    f: &DMatrix<f64>,
    order: usize,
    j: usize,
    ell: usize,
    h: f64,
) -> Result<DMatrix<f64>, GramError> {
    if g.nrows() != f.nrows() {
        return Err(GramError::GridMismatch(g.nrows(), f.nrows()));
    }
    let tau = h * (g.nrows() - 1) as f64;
    let basis = gamma_matrix(order, tau)?;
    let fdata = SignalIntegrals::new(f, h, order)?;
    op_product_cached(g, &fdata, &basis, j, ell, h)
}

pub(crate) fn op_product_cached(
    g: &DMatrix<f64>,
    fdata: &SignalIntegrals,
    basis: &GammaBasis,
    j: usize,
    ell: usize,
    h: f64,
) -> Result<DMatrix<f64>, GramError> {
    let order = basis.order();
    if j > order || ell > order {
        return Err(GramError::SynthesisIndexOutOfRange {
            index: j.max(ell),
            order,
        });
    }
    if g.nrows() != fdata.len() {
        return Err(GramError::GridMismatch(g.nrows(), fdata.len()));
    }
    let n = g.nrows();
    let a = g.ncols();
    let b = fdata.dim();
    let lam = fdata.lambda(ell, basis)?; // L x b
    let ft = fdata.base(j as i64 + ell as i64 - order as i64)?;
    let sign_f = fdata.sign;
    let weights = simpson_weights(n, h);
    let sign_j = if j % 2 == 0 { 1.0 } else { -1.0 };
    let mut out = DMatrix::zeros(a, b);
    let mut row = vec![0.0; b];
    for i in 0..n {
        let t = i as f64 * h;
        let gam = gamma_vector(order, order - j, t);
        for (c, rc) in row.iter_mut().enumerate() {
            let mut val = sign_f * ft[(i, c)];
            for k in 0..order {
                val -= gam[k] * lam[(k, c)];
            }
            *rc = val;
        }
        let w = weights[i] * sign_j;
        for ra in 0..a {
            let gi = g[(i, ra)] * w;
            for (c, rc) in row.iter().enumerate() {
                out[(ra, c)] += gi * rc;
            }
        }
    }
    Ok(out)
}

/// Node values of the adjoint function `T_ell^* b` in `H^L_0[0, tau]`.
pub fn adjoint_eval(
    f: &DMatrix<f64>,
    h: f64,
    order: usize,
    ell: usize,
    b: &DVector<f64>,
) -> Result<DVector<f64>, GramError> {
    adjoint_derivative(f, h, order, ell, 0, b)
}

/// Node values of the `deriv`-th derivative of `T_ell^* b`.
pub fn adjoint_derivative(
    f: &DMatrix<f64>,
    h: f64,
    order: usize,
    ell: usize,
    deriv: usize,
    b: &DVector<f64>,
) -> Result<DVector<f64>, GramError> {
    let tau = h * (f.nrows() - 1) as f64;
    let basis = gamma_matrix(order, tau)?;
    let fdata = SignalIntegrals::new(f, h, order)?;
    fdata.adjoint_derivative(&basis, ell, deriv, b)
}

/// Per-trajectory operator Gram blocks.
#[derive(Debug, Clone)]
pub struct TrajectoryGrams {
    /// `W_j W_ell^*` for `j, ell = 0..L-1`, index `j * L + ell`, each `q x q`.
    pub ww: Vec<DMatrix<f64>>,
    /// `Y_L W_ell^*` for `ell = 0..L-1`, each `p x q`.
    pub ylw: Vec<DMatrix<f64>>,
    /// `Y_L Y_L^*`, `p x p`.
    pub ylyl: DMatrix<f64>,
    /// `V_0 V_0^*`, present iff the trajectory carries noise samples.
    pub v0v0: Option<DMatrix<f64>>,
}

/// Aggregated operator Gram matrices over all trajectories.
#[derive(Debug, Clone)]
pub struct GramSet {
    order: usize,
    m: usize,
    p: usize,
    /// `H H^*`, `qL x qL`, symmetrized.
    pub hh: DMatrix<f64>,
    /// `Y_L H^*`, `p x qL`.
    pub ylh: DMatrix<f64>,
    /// `Y_L Y_L^*`, `p x p`, symmetrized.
    pub ylyl: DMatrix<f64>,
    /// `V_0 V_0^*`, present iff every trajectory carries noise samples.
    pub v0v0: Option<DMatrix<f64>>,
    pub per_trajectory: Vec<TrajectoryGrams>,
    /// Largest entry-wise asymmetry removed by symmetrization; a quadrature
    /// quality metric.
    pub max_asymmetry: f64,
    /// True when any trajectory's `Gamma(tau)` exceeded the warning
    /// condition threshold.
    pub gamma_warning: bool,
}

impl GramSet {
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

    /// Side length of `H H^*`.
    pub fn hh_dim(&self) -> usize {
        self.signal_dim() * self.order
    }
}

fn symmetrize(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let asym = (m - m.transpose()).amax();
    ((m + m.transpose()) * 0.5, asym)
}

fn gram_blocks_for(
    traj: &Trajectory,
    order: usize,
) -> Result<(TrajectoryGrams, bool), GramError> {
    let h = traj.step();
    let basis = gamma_matrix(order, traj.tau())?;
    let w = traj.stacked();
    let y = traj.output().clone();
    let wdata = SignalIntegrals::new(&w, h, order)?;
    let ydata = SignalIntegrals::new(&y, h, order)?;

    let mut ww = Vec::with_capacity(order * order);
    for j in 0..order {
        for ell in 0..order {
            ww.push(op_product_cached(&w, &wdata, &basis, j, ell, h)?);
        }
    }
    let mut ylw = Vec::with_capacity(order);
    for ell in 0..order {
        ylw.push(op_product_cached(&y, &wdata, &basis, order, ell, h)?);
    }
    let ylyl = op_product_cached(&y, &ydata, &basis, order, order, h)?;
    let v0v0 = match traj.noise() {
        Some(v) => {
            let vdata = SignalIntegrals::new(v, h, order)?;
            Some(op_product_cached(v, &vdata, &basis, 0, 0, h)?)
        }
        None => None,
    };
    Ok((
        TrajectoryGrams {
            ww,
            ylw,
            ylyl,
            v0v0,
        },
        basis.is_ill_conditioned(),
    ))
}

/// Assembles all aggregated Gram matrices from a dataset.
pub fn build_gram_set(ds: &Dataset) -> Result<GramSet, GramError> {
    let order = ds.order();
    if order > MAX_ORDER {
        return Err(GramError::OrderTooLarge(order));
    }
    let q = ds.signal_dim();
    let p = ds.output_dim();
    let ql = q * order;
    let mut hh = DMatrix::zeros(ql, ql);
    let mut ylh = DMatrix::zeros(p, ql);
    let mut ylyl = DMatrix::zeros(p, p);
    let with_noise = ds.has_noise();
    let mut v0v0 = with_noise.then(|| DMatrix::zeros(p, p));
    let mut per_trajectory = Vec::with_capacity(ds.len());
    let mut gamma_warning = false;

    for traj in ds.trajectories() {
        let (blocks, warn) = gram_blocks_for(traj, order)?;
        gamma_warning |= warn;
        for j in 0..order {
            for ell in 0..order {
                let mut view = hh.view_mut((j * q, ell * q), (q, q));
                view += &blocks.ww[j * order + ell];
            }
        }
        for ell in 0..order {
            let mut view = ylh.view_mut((0, ell * q), (p, q));
            view += &blocks.ylw[ell];
        }
        ylyl += &blocks.ylyl;
        if let (Some(acc), Some(b)) = (v0v0.as_mut(), blocks.v0v0.as_ref()) {
            *acc += b;
        }
        per_trajectory.push(blocks);
    }

    let (hh, asym_hh) = symmetrize(&hh);
    let (ylyl, asym_yy) = symmetrize(&ylyl);
    let (v0v0, asym_vv) = match v0v0 {
        Some(v) => {
            let (s, a) = symmetrize(&v);
            (Some(s), a)
        }
        None => (None, 0.0),
    };
    Ok(GramSet {
        order,
        m: ds.input_dim(),
        p,
        hh,
        ylh,
        ylyl,
        v0v0,
        per_trajectory,
        max_asymmetry: asym_hh.max(asym_yy).max(asym_vv),
        gamma_warning,
    })
}

/// The data matrix `Pi` with its noise-intensity parameter.
#[derive(Debug, Clone)]
pub struct PiMatrix {
    /// `(p + qL) x (p + qL)` symmetric.
    pub pi: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    p: usize,
    ql: usize,
}

impl PiMatrix {
    pub fn output_dim(&self) -> usize {
        self.p
    }

    pub fn hh_dim(&self) -> usize {
        self.ql
    }
}

/// Assembles `Pi = [[Theta - Y_L Y_L^*, -Y_L H^*], [-H Y_L^*, -H H^*]]`.
pub fn build_pi(gs: &GramSet, theta: &DMatrix<f64>) -> Result<PiMatrix, GramError> {
    let p = gs.output_dim();
    if theta.nrows() != p || theta.ncols() != p {
        return Err(GramError::ThetaDimension {
            expected: p,
            rows: theta.nrows(),
            cols: theta.ncols(),
        });
    }
    let asym = (theta - theta.transpose()).amax();
    if asym > 1e-12 * (1.0 + theta.amax()) {
        return Err(GramError::ThetaNotSymmetric(asym));
    }
    let eig = theta.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-12 * (1.0 + theta.amax()) {
        return Err(GramError::ThetaNotPsd(min_eig));
    }
    let ql = gs.hh_dim();
    let mut pi = DMatrix::zeros(p + ql, p + ql);
    pi.view_mut((0, 0), (p, p)).copy_from(&(theta - &gs.ylyl));
    pi.view_mut((0, p), (p, ql)).copy_from(&(-&gs.ylh));
    pi.view_mut((p, 0), (ql, p))
        .copy_from(&(-gs.ylh.transpose()));
    pi.view_mut((p, p), (ql, ql)).copy_from(&(-&gs.hh));
    let (pi, _) = symmetrize(&pi);
    Ok(PiMatrix {
        pi,
        theta: theta.clone(),
        p,
        ql,
    })
}

/// The doubled matrix `N` from the `J_p` embedding of `Pi`.
#[derive(Debug, Clone)]
pub struct BigN {
    /// `2qL x 2qL` symmetric.
    pub n: DMatrix<f64>,
    ql: usize,
}

impl BigN {
    /// Wraps an explicit `2qL x 2qL` matrix.
    pub fn from_matrix(n: DMatrix<f64>, ql: usize) -> Self {
        assert_eq!(n.nrows(), 2 * ql);
        assert_eq!(n.ncols(), 2 * ql);
        Self { n, ql }
    }

    pub fn dim(&self) -> usize {
        2 * self.ql
    }

    pub fn hh_dim(&self) -> usize {
        self.ql
    }

    /// The `(2,2)` block, equal to `-H H^*`.
    pub fn n22(&self) -> DMatrix<f64> {
        self.n.view((self.ql, self.ql), (self.ql, self.ql)).into()
    }
}

/// Assembles `N = E^T Pi E` where `E = [[J_p, 0], [0, I_qL]]` and
/// `J_p = [0 I_p]` selects the last `p` coordinates.
pub fn build_big_n(pi: &PiMatrix) -> BigN {
    let p = pi.p;
    let ql = pi.ql;
    let mut n = DMatrix::zeros(2 * ql, 2 * ql);
    // N11 = J_p^T Pi11 J_p: Pi11 placed in the last p rows/cols of block 1.
    let off = ql - p;
    for i in 0..p {
        for j in 0..p {
            n[(off + i, off + j)] = pi.pi[(i, j)];
        }
    }
    // N12 = J_p^T Pi12.
    for i in 0..p {
        for j in 0..ql {
            n[(off + i, ql + j)] = pi.pi[(i, p + j)];
            n[(ql + j, off + i)] = pi.pi[(i, p + j)];
        }
    }
    // N22 = Pi22 = -H H^*.
    for i in 0..ql {
        for j in 0..ql {
            n[(ql + i, ql + j)] = pi.pi[(p + i, p + j)];
        }
    }
    BigN { n, ql }
}

/// Writes a matrix as CSV, row-major, 17 significant digits.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn constant_signal(n: usize, val: f64) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, val)
    }

    #[test]
    fn gamma_scalar_case() {
        let basis = gamma_matrix(1, 2.0).unwrap();
        assert_relative_eq!(basis.gamma()[(0, 0)], 2.0);
        assert!(!basis.is_ill_conditioned());
    }

    #[test]
    fn gamma_order_two_matches_symbolic_values() {
        // gamma_1(1) = [1, 1/2], gamma_2(1) = [1/2, 1/6]; det = -1/12.
        let basis = gamma_matrix(2, 1.0).unwrap();
        let g = basis.gamma();
        assert_relative_eq!(g[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(g[(0, 1)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 1)], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(g.determinant(), -1.0 / 12.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_order_three_determinant() {
        // Symbolic oracle: det Gamma(0.5) for L = 3 equals -1/2211840.
        let basis = gamma_matrix(3, 0.5).unwrap();
        assert_relative_eq!(
            basis.gamma().determinant(),
            -1.0 / 2_211_840.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn gamma_invertibility_over_random_horizons() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let order = rng.random_range(1..=5);
            let tau = rng.random::<f64>() * 10.0 + 1e-3;
            let basis = gamma_matrix(order, tau).unwrap();
            let b = DMatrix::from_fn(order, 1, |_, _| rng.random::<f64>() - 0.5);
            let x = basis.solve(&b);
            let res = (basis.gamma() * &x - &b).norm() / b.norm().max(1e-300);
            assert!(res <= 1e-8, "solve residual {res} at L={order}, tau={tau}");
        }
    }

    #[test]
    fn beta_identity_reproduces_gamma_vectors() {
        // (1/(i-1)!) \int_0^t (t-s)^(i-1) gamma_0(s) ds = gamma_i(t).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for order in 1..=4usize {
            for _ in 0..5 {
                let t_star = rng.random::<f64>() * 2.0 + 0.05;
                let n = 1001;
                let h = t_star / (n - 1) as f64;
                for i in 1..=order {
                    let fact: f64 = (1..i).map(|k| k as f64).product();
                    let expected = gamma_vector(order, i, t_star);
                    for l in 0..order {
                        let vals: Vec<f64> = (0..n)
                            .map(|r| {
                                let s = r as f64 * h;
                                (t_star - s).powi(i as i32 - 1)
                                    * gamma_vector(order, 0, s)[l]
                            })
                            .collect();
                        let got = crate::signals::quadrature(&vals, h).unwrap() / fact;
                        assert_relative_eq!(got, expected[l], max_relative = 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn gamma_rejects_large_order_and_bad_horizon() {
        assert!(matches!(gamma_matrix(9, 1.0), Err(GramError::OrderTooLarge(9))));
        assert!(matches!(
            gamma_matrix(2, 0.0),
            Err(GramError::NonPositiveHorizon(_))
        ));
        // L = 8 at tau = 1 sits between the warning and error thresholds.
        let basis = gamma_matrix(8, 1.0).unwrap();
        assert!(basis.is_ill_conditioned());
    }

    #[test]
    fn f_tilde_of_unit_signal() {
        let n = 101;
        let h = 1.0 / (n - 1) as f64;
        let f = constant_signal(n, 1.0);
        // L = 1: index 0 -> -t, index -1 -> -t^2/2, index 1 -> -1.
        let t0 = f_tilde(&f, h, 1, 0).unwrap();
        let tm1 = f_tilde(&f, h, 1, -1).unwrap();
        let t1 = f_tilde(&f, h, 1, 1).unwrap();
        for i in 0..n {
            let t = i as f64 * h;
            assert_relative_eq!(t0[(i, 0)], -t, epsilon = 1e-12);
            assert_relative_eq!(tm1[(i, 0)], -t * t / 2.0, epsilon = 1e-10);
            assert_relative_eq!(t1[(i, 0)], -1.0);
        }
        assert!(matches!(
            f_tilde(&f, h, 1, 2),
            Err(GramError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn lambda_scalar_case_and_roundtrip() {
        // f = 1, L = 1, ell = 0, tau = 1: Lambda_0 = [-1/2].
        let n = 1001;
        let h = 1.0 / (n - 1) as f64;
        let f = constant_signal(n, 1.0);
        let basis = gamma_matrix(1, 1.0).unwrap();
        let data = SignalIntegrals::new(&f, h, 1).unwrap();
        let lam = data.lambda(0, &basis).unwrap();
        assert_relative_eq!(lam[(0, 0)], -0.5, epsilon = 1e-10);

        // Zero data gives zero Lambda for every ell.
        let z = constant_signal(n, 0.0);
        let zdata = SignalIntegrals::new(&z, h, 1).unwrap();
        for ell in 0..=1 {
            assert_eq!(zdata.lambda(ell, &basis).unwrap().amax(), 0.0);
        }

        // Definitional round-trip: Gamma * Lambda reproduces the stacked ends.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let order = 3;
        let tau = 0.8;
        let h = tau / (n - 1) as f64;
        let f = DMatrix::from_fn(n, 2, |i, c| {
            let t = i as f64 * h;
            (1.3 * t + c as f64).sin() + 0.1 * rng.random::<f64>().floor()
        });
        let basis = gamma_matrix(order, tau).unwrap();
        let data = SignalIntegrals::new(&f, h, order).unwrap();
        for ell in 0..=order {
            let lam = data.lambda(ell, &basis).unwrap();
            let back = basis.gamma() * &lam;
            let mut stacked = DMatrix::zeros(order, 2);
            for i in 1..=order {
                let row = data.f_tilde_end(ell as i64 - i as i64).unwrap();
                stacked[(i - 1, 0)] = row[0];
                stacked[(i - 1, 1)] = row[1];
            }
            assert!((back - stacked).amax() <= 1e-10);
        }
    }

    #[test]
    fn op_product_unit_signal_closed_form() {
        // S_0 T_0^* = tau^3 / 12 for f = g = 1, L = 1; oracle also via the
        // H^1_0 pairing of the hand-computed adjoint t(tau - t)/2.
        let n = 1001;
        let tau = 1.0;
        let h = tau / (n - 1) as f64;
        let f = constant_signal(n, 1.0);
        let m = op_product(&f, &f, 1, 0, 0, h).unwrap();
        assert_relative_eq!(m[(0, 0)], tau.powi(3) / 12.0, epsilon = 1e-8);

        let derivative_sq: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 * h;
                let d = (tau - 2.0 * t) / 2.0;
                d * d
            })
            .collect();
        let pairing = crate::signals::quadrature(&derivative_sq, h).unwrap();
        assert_relative_eq!(m[(0, 0)], pairing, epsilon = 1e-8);
    }

    #[test]
    fn op_product_zero_signal() {
        let n = 101;
        let h = 1.0 / (n - 1) as f64;
        let z = DMatrix::zeros(n, 2);
        let m = op_product(&z, &z, 2, 1, 2, h).unwrap();
        assert_eq!(m.amax(), 0.0);
    }

    #[test]
    fn op_product_symmetry_property() {
        // op(g, f, j, ell) = op(f, g, ell, j)^T over random smooth cases.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 201;
        for case in 0..200 {
            let order = rng.random_range(1..=3);
            let tau = 0.3 + rng.random::<f64>() * 1.5;
            let h = tau / (n - 1) as f64;
            let a = rng.random_range(1..=2);
            let b = rng.random_range(1..=2);
            let mk = |d: usize, rng: &mut ChaCha8Rng| {
                let c1: f64 = rng.random::<f64>() - 0.5;
                let c2: f64 = rng.random::<f64>() - 0.5;
                let w: f64 = rng.random::<f64>() * 6.0;
                DMatrix::from_fn(n, d, |i, c| {
                    let t = i as f64 * h;
                    c1 * (w * t + c as f64).sin() + c2 * t.powi(c as i32 + 1)
                })
            };
            let g = mk(a, &mut rng);
            let f = mk(b, &mut rng);
            let j = rng.random_range(0..=order);
            let ell = rng.random_range(0..=order);
            let lhs = op_product(&g, &f, order, j, ell, h).unwrap();
            let rhs = op_product(&f, &g, order, ell, j, h).unwrap().transpose();
            let dev = (&lhs - &rhs).amax();
            let scale = 1.0 + lhs.amax().max(rhs.amax());
            assert!(dev <= 1e-7 * scale, "case {case}: deviation {dev}");
        }
    }

    #[test]
    fn op_product_annihilates_unit_signal_top_index() {
        // For f = 1 the L-th synthesis operator integrates a derivative of a
        // test function, which vanishes; the closed form must agree.
        let n = 501;
        let h = 1.0 / (n - 1) as f64;
        let f = constant_signal(n, 1.0);
        let m = op_product(&f, &f, 1, 0, 1, h).unwrap();
        assert!(m.amax() <= 1e-12);
    }

    #[test]
    fn adjoint_eval_hand_case_and_zero() {
        let n = 1001;
        let h = 1.0 / (n - 1) as f64;
        let f = constant_signal(n, 1.0);
        let b = DVector::from_element(1, 1.0);
        let vals = adjoint_eval(&f, h, 1, 0, &b).unwrap();
        for i in 0..n {
            let t = i as f64 * h;
            assert_relative_eq!(vals[i], t * (1.0 - t) / 2.0, epsilon = 1e-10);
        }
        let zero = adjoint_eval(&f, h, 1, 0, &DVector::zeros(1)).unwrap();
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn adjoint_boundary_membership() {
        // The adjoint function and its first L-1 numerical derivatives vanish
        // at both endpoints.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for order in 1..=3usize {
            let n = 2001;
            let tau = 0.9;
            let h = tau / (n - 1) as f64;
            let f = DMatrix::from_fn(n, 2, |i, c| {
                let t = i as f64 * h;
                (2.0 * t + c as f64).cos() + rng.random::<f64>() * 0.0
            });
            let b = DVector::from_fn(2, |i, _| if i == 0 { 0.7 } else { -0.4 });
            for ell in 0..=order {
                let vals = adjoint_derivative(&f, h, order, ell, 0, &b).unwrap();
                let scale = vals.amax().max(1e-12);
                let mut current: Vec<f64> = vals.iter().copied().collect();
                for _ in 0..order {
                    assert!(current[0].abs() <= 1e-6 * scale.max(1.0));
                    assert!(current[n - 1].abs() <= 1e-6 * scale.max(1.0));
                    // forward/backward one-sided differences for the next level
                    let mut next = vec![0.0; current.len()];
                    for i in 1..current.len() - 1 {
                        next[i] = (current[i + 1] - current[i - 1]) / (2.0 * h);
                    }
                    next[0] = (current[1] - current[0]) / h;
                    let last = current.len() - 1;
                    next[last] = (current[last] - current[last - 1]) / h;
                    current = next;
                }
            }
        }
    }

    fn tiny_dataset(noise: bool) -> Dataset {
        let n = 201;
        let tau = 1.0;
        let h = tau / (n - 1) as f64;
        let mut trajs = Vec::new();
        for k in 0..2 {
            let u = DMatrix::from_fn(n, 1, |i, _| ((k + 1) as f64 * i as f64 * h).sin());
            let y = DMatrix::from_fn(n, 2, |i, c| {
                let t = i as f64 * h;
                (t * (c + k + 1) as f64).cos() - 1.0
            });
            let v = noise.then(|| DMatrix::from_fn(n, 2, |i, c| 1e-3 * ((i + c) as f64).sin()));
            trajs.push(Trajectory::new(tau, u, y, v).unwrap());
        }
        Dataset::new(trajs, 2).unwrap()
    }

    #[test]
    fn gram_set_zero_data_is_zero() {
        let n = 101;
        let u = DMatrix::zeros(n, 1);
        let y = DMatrix::zeros(n, 1);
        let tr = Trajectory::new(1.0, u, y, None).unwrap();
        let ds = Dataset::new(vec![tr], 1).unwrap();
        let gs = build_gram_set(&ds).unwrap();
        assert_eq!(gs.hh.amax(), 0.0);
        assert_eq!(gs.ylh.amax(), 0.0);
        assert_eq!(gs.ylyl.amax(), 0.0);
        assert!(gs.v0v0.is_none());
    }

    #[test]
    fn gram_set_blocks_sum_and_psd() {
        let ds = tiny_dataset(true);
        let gs = build_gram_set(&ds).unwrap();
        let q = ds.signal_dim();
        let order = ds.order();
        // HH equals the symmetrized block arrangement of per-trajectory sums.
        let mut manual = DMatrix::zeros(q * order, q * order);
        for blocks in &gs.per_trajectory {
            for j in 0..order {
                for ell in 0..order {
                    let mut view = manual.view_mut((j * q, ell * q), (q, q));
                    view += &blocks.ww[j * order + ell];
                }
            }
        }
        let manual = (&manual + manual.transpose()) * 0.5;
        assert!((&gs.hh - &manual).amax() <= 1e-12 * (1.0 + manual.amax()));

        for m in [&gs.hh, &gs.ylyl, gs.v0v0.as_ref().unwrap()] {
            let eig = m.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            assert!(
                min >= -1e-9 * m.norm().max(1e-12),
                "negative eigenvalue {min}"
            );
        }
    }

    #[test]
    fn pi_of_zero_data_is_block_diagonal() {
        let n = 101;
        let u = DMatrix::zeros(n, 1);
        let y = DMatrix::zeros(n, 2);
        let tr = Trajectory::new(1.0, u, y, None).unwrap();
        let ds = Dataset::new(vec![tr], 1).unwrap();
        let gs = build_gram_set(&ds).unwrap();
        let theta = DMatrix::identity(2, 2);
        let pi = build_pi(&gs, &theta).unwrap();
        // Pi = diag(I_p, 0).
        let p = 2;
        let ql = gs.hh_dim();
        for i in 0..p + ql {
            for j in 0..p + ql {
                let expected = if i == j && i < p { 1.0 } else { 0.0 };
                assert_eq!(pi.pi[(i, j)], expected);
            }
        }
    }

    #[test]
    fn pi_rejects_bad_theta() {
        let ds = tiny_dataset(false);
        let gs = build_gram_set(&ds).unwrap();
        let mut theta = DMatrix::identity(2, 2);
        theta[(0, 1)] = 0.5;
        assert!(matches!(
            build_pi(&gs, &theta),
            Err(GramError::ThetaNotSymmetric(_))
        ));
        let theta = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(build_pi(&gs, &theta), Err(GramError::ThetaNotPsd(_))));
        let theta = DMatrix::identity(3, 3);
        assert!(matches!(
            build_pi(&gs, &theta),
            Err(GramError::ThetaDimension { .. })
        ));
    }

    #[test]
    fn big_n_embedding_bookkeeping() {
        let ds = tiny_dataset(false);
        let gs = build_gram_set(&ds).unwrap();
        let theta = DMatrix::identity(2, 2) * 0.3;
        let pi = build_pi(&gs, &theta).unwrap();
        let bn = build_big_n(&pi);
        let ql = gs.hh_dim();
        let p = gs.output_dim();
        // N22 + HH = 0 exactly.
        assert_eq!((bn.n22() + &gs.hh).amax(), 0.0);
        // Index-by-index check of the embedding against E^T Pi E.
        let mut e = DMatrix::zeros(p + ql, 2 * ql);
        for i in 0..p {
            e[(i, ql - p + i)] = 1.0;
        }
        for i in 0..ql {
            e[(p + i, ql + i)] = 1.0;
        }
        let manual = e.transpose() * &pi.pi * &e;
        assert!((&bn.n - &manual).amax() <= 1e-15);
        // The N11 block is zero outside its trailing p x p corner.
        for i in 0..ql - p {
            for j in 0..ql {
                assert_eq!(bn.n[(i, j)], if j < ql { bn.n[(i, j)] } else { 0.0 });
                if j < ql - p || j >= ql {
                    continue;
                }
            }
        }
    }
}
