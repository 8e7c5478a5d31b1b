//! Dataset generation from known AR systems with process noise, and
//! open/closed-loop simulation for verification.
//!
//! Integration is fixed-step RK4 on the companion form. White noise of
//! intensity `sigma^2` (delta covariance) is emulated by piecewise-constant
//! values drawn i.i.d. `N(0, sigma^2 / dt)` per integration step; the
//! recorded noise channel is the local average over each output panel so
//! that its synthesis-operator Gram reproduces the injected intensity.

use crate::signals::{Dataset, SignalError, Trajectory};
use crate::stability::{close_loop, ArSystem, Controller, StabilityError};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("mass matrix singular or not positive definite (det {0:.3e})")]
    MassMatrixSingular(f64),
    #[error("state blew up (non-finite) at t = {time:.6}")]
    BlowUp { time: f64 },
    #[error("acceptance rate below 1% after {attempts} attempts ({accepted} valid)")]
    LowAcceptance { attempts: usize, accepted: usize },
    #[error("expected {expected} input channels, got {got}")]
    InputDimension { expected: usize, got: usize },
    #[error("initial stack must have length {expected}, got {got}")]
    StateDimension { expected: usize, got: usize },
    #[error("grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

/// Physical parameters of the cart-pendulum around the upright equilibrium.
#[derive(Debug, Clone, Copy)]
pub struct PendulumParams {
    pub cart_mass: f64,
    pub pendulum_mass: f64,
    pub cart_friction: f64,
    pub pendulum_friction: f64,
    /// Pivot to center of mass.
    pub com_distance: f64,
    /// Moment of inertia about the center of mass.
    pub inertia: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.6,
            pendulum_mass: 0.3,
            cart_friction: 0.1,
            pendulum_friction: 0.0003,
            com_distance: 0.5,
            inertia: 0.025,
            gravity: 9.81,
        }
    }
}

impl PendulumParams {
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let c = self.cart_mass + self.pendulum_mass;
        let x = self.pendulum_mass * self.com_distance;
        let j = self.inertia + self.pendulum_mass * self.com_distance.powi(2);
        DMatrix::from_row_slice(2, 2, &[c, x, x, j])
    }
}

/// Second-order AR form of the linearized cart-pendulum:
/// `y'' + R_y1 y' + R_y0 y + R_u0 u = v` with `y = [x, theta]`.
///
/// Obtained by left-multiplying the coupled equations of motion by the
/// inverse mass matrix. Around the upright equilibrium gravity is
/// destabilizing, so the open loop has an eigenvalue with positive real
/// part.
pub fn pendulum_ar(params: &PendulumParams) -> Result<ArSystem, SimError> {
    let e = params.mass_matrix();
    let det = e[(0, 0)] * e[(1, 1)] - e[(0, 1)] * e[(1, 0)];
    if det.abs() < 1e-12 || e[(0, 0)] <= 0.0 || det <= 0.0 {
        return Err(SimError::MassMatrixSingular(det));
    }
    let e_inv = DMatrix::from_row_slice(
        2,
        2,
        &[
            e[(1, 1)] / det,
            -e[(0, 1)] / det,
            -e[(1, 0)] / det,
            e[(0, 0)] / det,
        ],
    );
    let damping = DMatrix::from_row_slice(
        2,
        2,
        &[params.cart_friction, 0.0, 0.0, params.pendulum_friction],
    );
    let stiffness = DMatrix::from_row_slice(
        2,
        2,
        &[
            0.0,
            0.0,
            0.0,
            -params.pendulum_mass * params.gravity * params.com_distance,
        ],
    );
    let force = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let ry1 = &e_inv * damping;
    let ry0 = &e_inv * stiffness;
    let ru0 = -(&e_inv * force);
    // R = [R_u0 R_y0 R_u1 R_y1] with R_u1 = 0.
    let mut r = DMatrix::zeros(2, 6);
    r.view_mut((0, 0), (2, 1)).copy_from(&ru0);
    r.view_mut((0, 1), (2, 2)).copy_from(&ry0);
    r.view_mut((0, 4), (2, 2)).copy_from(&ry1);
    Ok(ArSystem::new(2, 1, 2, r)?)
}

/// Analytic scalar input channel.
#[derive(Debug, Clone)]
pub enum InputSignal {
    Zero,
    /// `sum_i amplitude_i * sin(2 pi freq_i t)`.
    SumOfSines(Vec<SineTerm>),
}

#[derive(Debug, Clone, Copy)]
pub struct SineTerm {
    pub amplitude: f64,
    pub frequency_hz: f64,
}

impl InputSignal {
    /// `order`-th derivative at `t`.
    pub fn eval_deriv(&self, t: f64, order: usize) -> f64 {
        match self {
            InputSignal::Zero => 0.0,
            InputSignal::SumOfSines(terms) => terms
                .iter()
                .map(|term| {
                    let w = 2.0 * std::f64::consts::PI * term.frequency_hz;
                    let phase = w * t + order as f64 * std::f64::consts::FRAC_PI_2;
                    term.amplitude * w.powi(order as i32) * phase.sin()
                })
                .sum(),
        }
    }
}

/// Simulation grid and noise intensity.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Integration step.
    pub dt: f64,
    /// Output sampling step; must be an integer multiple of `dt`, and the
    /// resulting sample count must be odd.
    pub output_step: f64,
    pub tau: f64,
    /// White-noise intensity `sigma^2`; zero for noise-free runs.
    pub noise_sigma2: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            output_step: 1e-3,
            tau: 0.5,
            noise_sigma2: 0.0,
            seed: 0,
        }
    }
}

struct GridPlan {
    nsteps: usize,
    ratio: usize,
    nout: usize,
}

fn plan_grid(cfg: &SimConfig) -> Result<GridPlan, SimError> {
    if cfg.dt <= 0.0 || cfg.output_step <= 0.0 || cfg.tau <= 0.0 {
        return Err(SimError::BadGrid("dt, output_step, tau must be positive".into()));
    }
    let ratio = (cfg.output_step / cfg.dt).round() as usize;
    if ratio == 0 || (cfg.output_step - ratio as f64 * cfg.dt).abs() > 1e-9 * cfg.output_step {
        return Err(SimError::BadGrid(format!(
            "output_step {} is not an integer multiple of dt {}",
            cfg.output_step, cfg.dt
        )));
    }
    let nsteps = (cfg.tau / cfg.dt).round() as usize;
    if (cfg.tau - nsteps as f64 * cfg.dt).abs() > 1e-9 * cfg.tau {
        return Err(SimError::BadGrid(format!(
            "tau {} is not an integer multiple of dt {}",
            cfg.tau, cfg.dt
        )));
    }
    if nsteps % ratio != 0 {
        return Err(SimError::BadGrid(
            "tau must be an integer multiple of output_step".into(),
        ));
    }
    let nout = nsteps / ratio + 1;
    if nout % 2 == 0 {
        return Err(SimError::BadGrid(format!(
            "output sample count {nout} is even; choose tau/output_step even"
        )));
    }
    Ok(GridPlan {
        nsteps,
        ratio,
        nout,
    })
}

/// Simulates the AR system under analytic inputs and injected noise.
///
/// `initial` stacks `[y(0); y'(0); ...; y^(L-1)(0)]`.
pub fn simulate_ar(
    sys: &ArSystem,
    inputs: &[InputSignal],
    initial: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    simulate_ar_with_rng(sys, inputs, initial, cfg, &mut rng)
}

pub(crate) fn simulate_ar_with_rng(
    sys: &ArSystem,
    inputs: &[InputSignal],
    initial: &DVector<f64>,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, SimError> {
    let order = sys.order();
    let m = sys.input_dim();
    let p = sys.output_dim();
    if inputs.len() != m {
        return Err(SimError::InputDimension {
            expected: m,
            got: inputs.len(),
        });
    }
    let state_dim = p * order;
    if initial.len() != state_dim {
        return Err(SimError::StateDimension {
            expected: state_dim,
            got: initial.len(),
        });
    }
    let plan = plan_grid(cfg)?;
    let dt = cfg.dt;
    let with_noise = cfg.noise_sigma2 > 0.0;
    let noise_std = if with_noise {
        (cfg.noise_sigma2 / dt).sqrt()
    } else {
        0.0
    };

    // derivative of the companion state under input derivatives and noise
    let deriv = |t: f64, z: &DVector<f64>, v: &DVector<f64>| -> DVector<f64> {
        let mut dz = DVector::zeros(state_dim);
        for i in 0..state_dim - p {
            dz[i] = z[i + p];
        }
        // y^(L) = -sum_l R_y,l y^(l) - sum_l R_u,l u^(l)(t) + v
        let mut top = v.clone();
        for ell in 0..order {
            let yl = z.rows(ell * p, p);
            top -= sys.block_y(ell) * yl;
            let ul = DVector::from_fn(m, |i, _| inputs[i].eval_deriv(t, ell));
            top -= sys.block_u(ell) * ul;
        }
        for i in 0..p {
            dz[state_dim - p + i] = top[i];
        }
        dz
    };

    let mut z = initial.clone();
    let mut u_out = DMatrix::zeros(plan.nout, m);
    let mut y_out = DMatrix::zeros(plan.nout, p);
    let mut v_fine = with_noise.then(|| DMatrix::zeros(plan.nsteps, p));
    for c in 0..m {
        u_out[(0, c)] = inputs[c].eval_deriv(0.0, 0);
    }
    for c in 0..p {
        y_out[(0, c)] = z[c];
    }

    for step in 0..plan.nsteps {
        let t = step as f64 * dt;
        let v = if with_noise {
            let v = DVector::from_fn(p, |_, _| noise_std * rng.sample::<f64, _>(StandardNormal));
            let vf = v_fine.as_mut().unwrap();
            for c in 0..p {
                vf[(step, c)] = v[c];
            }
            v
        } else {
            DVector::zeros(p)
        };
        let k1 = deriv(t, &z, &v);
        let k2 = deriv(t + dt / 2.0, &(&z + &k1 * (dt / 2.0)), &v);
        let k3 = deriv(t + dt / 2.0, &(&z + &k2 * (dt / 2.0)), &v);
        let k4 = deriv(t + dt, &(&z + &k3 * dt), &v);
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if !z.iter().all(|x| x.is_finite()) {
            return Err(SimError::BlowUp {
                time: (step + 1) as f64 * dt,
            });
        }
        if (step + 1) % plan.ratio == 0 {
            let j = (step + 1) / plan.ratio;
            let tj = (step + 1) as f64 * dt;
            for c in 0..m {
                u_out[(j, c)] = inputs[c].eval_deriv(tj, 0);
            }
            for c in 0..p {
                y_out[(j, c)] = z[c];
            }
        }
    }

    // noise resampled as the local average over a window of one output panel
    let v_out = v_fine.map(|vf| {
        DMatrix::from_fn(plan.nout, p, |j, c| {
            let half = (plan.ratio / 2).max(1);
            let center = j * plan.ratio;
            let lo = center.saturating_sub(half);
            let hi = (center + half).min(plan.nsteps);
            let (lo, hi) = if lo >= hi {
                (plan.nsteps - 1, plan.nsteps)
            } else {
                (lo, hi)
            };
            let mut acc = 0.0;
            for i in lo..hi {
                acc += vf[(i, c)];
            }
            acc / (hi - lo) as f64
        })
    });
    Ok(Trajectory::new(cfg.tau, u_out, y_out, v_out)?)
}

/// Generation protocol for the pendulum experiment.
#[derive(Debug, Clone)]
pub struct PendulumScenario {
    pub sim: SimConfig,
    pub k_target: usize,
    /// Trajectories with `|theta(t)|` beyond this bound are discarded.
    pub theta_bound: f64,
    pub sine_terms: usize,
    pub amplitude_range: f64,
    pub frequency_range_hz: f64,
    /// Uniform ranges for `(x, x')` and `(theta, theta')`.
    pub cart_ic_range: f64,
    pub angle_ic_range: f64,
}

impl Default for PendulumScenario {
    fn default() -> Self {
        Self {
            sim: SimConfig {
                noise_sigma2: 1e-4,
                ..SimConfig::default()
            },
            k_target: 25,
            theta_bound: 0.1,
            sine_terms: 5,
            amplitude_range: 0.2,
            frequency_range_hz: 10.0,
            cart_ic_range: 0.1,
            angle_ic_range: 0.01,
        }
    }
}

/// A generated dataset with its provenance.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub attempts: usize,
    /// Per-trajectory RNG streams (`set_stream` values on the base seed).
    pub streams: Vec<u64>,
}

/// Repeats simulate-and-filter until `k_target` valid trajectories are
/// collected. Attempt `a` uses the RNG stream `a` of the base seed, so the
/// dataset is reproducible from `(seed, k_target)` alone.
pub fn generate_pendulum_dataset(
    params: &PendulumParams,
    scenario: &PendulumScenario,
) -> Result<GeneratedDataset, SimError> {
    let sys = pendulum_ar(params)?;
    let mut trajectories = Vec::with_capacity(scenario.k_target);
    let mut streams = Vec::with_capacity(scenario.k_target);
    let mut attempts = 0usize;
    while trajectories.len() < scenario.k_target {
        let stream = attempts as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.sim.seed);
        rng.set_stream(stream);
        attempts += 1;

        let x0 = DVector::from_vec(vec![
            rng.random_range(-scenario.cart_ic_range..=scenario.cart_ic_range),
            rng.random_range(-scenario.angle_ic_range..=scenario.angle_ic_range),
            rng.random_range(-scenario.cart_ic_range..=scenario.cart_ic_range),
            rng.random_range(-scenario.angle_ic_range..=scenario.angle_ic_range),
        ]);
        let terms: Vec<SineTerm> = (0..scenario.sine_terms)
            .map(|_| SineTerm {
                amplitude: rng
                    .random_range(-scenario.amplitude_range..=scenario.amplitude_range),
                frequency_hz: rng.random_range(0.0..=scenario.frequency_range_hz),
            })
            .collect();
        let inputs = vec![InputSignal::SumOfSines(terms)];
        let traj = match simulate_ar_with_rng(&sys, &inputs, &x0, &scenario.sim, &mut rng) {
            Ok(t) => t,
            Err(SimError::BlowUp { .. }) => continue,
            Err(e) => return Err(e),
        };
        let valid = (0..traj.len()).all(|i| traj.output()[(i, 1)].abs() <= scenario.theta_bound);
        if valid {
            trajectories.push(traj);
            streams.push(stream);
        }
        if attempts >= 10_000 && (trajectories.len() as f64) < 0.01 * attempts as f64 {
            return Err(SimError::LowAcceptance {
                attempts,
                accepted: trajectories.len(),
            });
        }
    }
    Ok(GeneratedDataset {
        dataset: Dataset::new(trajectories, 2)?,
        attempts,
        streams,
    })
}

/// Norm decay of the autonomous closed loop from an initial stack.
#[derive(Debug, Clone)]
pub struct DecayReport {
    pub initial_norm: f64,
    pub final_norm: f64,
    /// `||w(T)|| / ||w(0)||`; zero for a zero start.
    pub ratio: f64,
    /// Least-squares slope of `ln ||w(t)||`.
    pub decay_rate: f64,
    /// Time of blow-up when the state left the finite range.
    pub blowup: Option<f64>,
}

/// Integrates `w' = A w` on the closed-loop companion matrix and reports
/// the decay of the state norm over the horizon.
pub fn simulate_closed_loop(
    sys: &ArSystem,
    ctrl: &Controller,
    w0: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<DecayReport, SimError> {
    let cl = close_loop(sys, ctrl)?;
    let a = &cl.companion;
    let n = a.nrows();
    if w0.len() != n {
        return Err(SimError::StateDimension {
            expected: n,
            got: w0.len(),
        });
    }
    let initial_norm = w0.norm();
    if initial_norm == 0.0 {
        return Ok(DecayReport {
            initial_norm: 0.0,
            final_norm: 0.0,
            ratio: 0.0,
            decay_rate: 0.0,
            blowup: None,
        });
    }
    let nsteps = (horizon / dt).ceil() as usize;
    let mut w = w0.clone();
    let mut log_samples: Vec<(f64, f64)> = vec![(0.0, initial_norm.ln())];
    let sample_every = (nsteps / 200).max(1);
    for step in 0..nsteps {
        let k1 = a * &w;
        let k2 = a * &(&w + &k1 * (dt / 2.0));
        let k3 = a * &(&w + &k2 * (dt / 2.0));
        let k4 = a * &(&w + &k3 * dt);
        w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let t = (step + 1) as f64 * dt;
        if !w.iter().all(|x| x.is_finite()) {
            return Ok(DecayReport {
                initial_norm,
                final_norm: f64::INFINITY,
                ratio: f64::INFINITY,
                decay_rate: f64::INFINITY,
                blowup: Some(t),
            });
        }
        if (step + 1) % sample_every == 0 {
            let norm = w.norm();
            if norm > 0.0 {
                log_samples.push((t, norm.ln()));
            }
        }
    }
    let final_norm = w.norm();
    // least-squares slope of ln ||w||
    let n_s = log_samples.len() as f64;
    let sx: f64 = log_samples.iter().map(|(t, _)| t).sum();
    let sy: f64 = log_samples.iter().map(|(_, l)| l).sum();
    let sxx: f64 = log_samples.iter().map(|(t, _)| t * t).sum();
    let sxy: f64 = log_samples.iter().map(|(t, l)| t * l).sum();
    let denom = n_s * sxx - sx * sx;
    let decay_rate = if denom.abs() > 0.0 {
        (n_s * sxy - sx * sy) / denom
    } else {
        0.0
    };
    Ok(DecayReport {
        initial_norm,
        final_norm,
        ratio: final_norm / initial_norm,
        decay_rate,
        blowup: None,
    })
}
