//! Strict-LMI feasibility: problem form, a conic-solver adapter, and a
//! bit-exact SDPA sparse exporter.
//!
//! A problem asks for `y` with `F0 + sum_i y_i F_i >= 0` on every block.
//! Feasibility is decided by margin maximization: maximize `t` subject to
//! `F0 + sum_i y_i F_i >= t I`, with `t` capped so the program is always
//! bounded. Any strictness shift belongs to the caller's `F0`. A claimed
//! feasible point is never trusted as-is; block margins are re-checked by
//! eigendecomposition and a violation downgrades the verdict to `Unknown`.

use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("block {block}: coefficient matrix not symmetric (asymmetry {asym:.3e})")]
    NotSymmetric { block: usize, asym: f64 },
    #[error("block {block}: coefficient {index} refers to variable {var}, nvars = {nvars}")]
    VariableOutOfRange {
        block: usize,
        index: usize,
        var: usize,
        nvars: usize,
    },
    #[error("block {block}: matrix is {rows}x{cols}, block size is {size}")]
    BlockShape {
        block: usize,
        rows: usize,
        cols: usize,
        size: usize,
    },
    #[error("problem has no blocks")]
    Empty,
    #[error("solver setup failed: {0}")]
    Setup(String),
    #[error("solver reported a numerical error (status {0})")]
    Numerical(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// One PSD block `F0 + sum_i y_i F_i >= 0`.
#[derive(Debug, Clone)]
pub struct SdpBlock {
    pub size: usize,
    pub f0: DMatrix<f64>,
    /// `(variable index, symmetric coefficient matrix)` pairs.
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

/// A strict-LMI feasibility instance in standard block form.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub nvars: usize,
    pub blocks: Vec<SdpBlock>,
}

impl SdpProblem {
    /// Validates symmetry, shapes and variable indices.
    pub fn validate(&self) -> Result<(), SdpError> {
        if self.blocks.is_empty() {
            return Err(SdpError::Empty);
        }
        for (bi, block) in self.blocks.iter().enumerate() {
            let check = |m: &DMatrix<f64>| -> Result<(), SdpError> {
                if m.nrows() != block.size || m.ncols() != block.size {
                    return Err(SdpError::BlockShape {
                        block: bi,
                        rows: m.nrows(),
                        cols: m.ncols(),
                        size: block.size,
                    });
                }
                let asym = (m - m.transpose()).amax();
                if asym > 1e-10 * (1.0 + m.amax()) {
                    return Err(SdpError::NotSymmetric { block: bi, asym });
                }
                Ok(())
            };
            check(&block.f0)?;
            for (idx, (var, m)) in block.coeffs.iter().enumerate() {
                if *var >= self.nvars {
                    return Err(SdpError::VariableOutOfRange {
                        block: bi,
                        index: idx,
                        var: *var,
                        nvars: self.nvars,
                    });
                }
                check(m)?;
            }
        }
        Ok(())
    }

    /// Evaluates `F0 + sum_i y_i F_i` for one block.
    pub fn block_value(&self, bi: usize, y: &DVector<f64>) -> DMatrix<f64> {
        let block = &self.blocks[bi];
        let mut m = block.f0.clone();
        for (var, f) in &block.coeffs {
            m += f * y[*var];
        }
        m
    }

    /// Minimum eigenvalue of each block at `y`.
    pub fn block_margins(&self, y: &DVector<f64>) -> Vec<f64> {
        (0..self.blocks.len())
            .map(|bi| {
                self.block_value(bi, y)
                    .symmetric_eigen()
                    .eigenvalues
                    .min()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Feasible,
    Infeasible,
    Unknown,
}

/// Outcome of a margin-maximization solve, re-verified independently.
#[derive(Debug, Clone)]
pub struct FeasibilityResult {
    pub status: SdpStatus,
    /// Variable vector; present whenever the solver produced an iterate.
    pub y: Option<DVector<f64>>,
    /// Best margin `t*`: blocks satisfy `F0 + sum y F >= t* I`.
    pub margin: f64,
    /// Re-checked minimum eigenvalue of each block at `y`.
    pub block_margins: Vec<f64>,
    pub iterations: u32,
    pub solver: String,
}

/// Raw adapter output before independent verification.
#[derive(Debug, Clone)]
pub struct RawSolution {
    pub y: DVector<f64>,
    pub margin: f64,
    pub solved: bool,
    pub status: String,
    pub iterations: u32,
}

/// Adapter contract: maximize `t` with `F0 + sum y F >= t I` per block,
/// `t <= cap`; one call, problem in, raw solution out.
pub trait SdpSolver {
    fn name(&self) -> &'static str;
    fn solve_margin(&self, prob: &SdpProblem, cap: f64) -> Result<RawSolution, SdpError>;
}

/// Native interior-point backend.
#[derive(Debug, Clone)]
pub struct ClarabelSolver {
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        Self {
            max_iter: 400,
            verbose: false,
        }
    }
}

/// Scaled upper-triangle vectorization matching the solver's PSD cone:
/// columns of the upper triangle, off-diagonals times sqrt(2).
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let s = m.nrows();
    let mut out = Vec::with_capacity(s * (s + 1) / 2);
    for c in 0..s {
        for r in 0..=c {
            if r == c {
                out.push(m[(r, c)]);
            } else {
                out.push(m[(r, c)] * std::f64::consts::SQRT_2);
            }
        }
    }
    out
}

impl SdpSolver for ClarabelSolver {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve_margin(&self, prob: &SdpProblem, cap: f64) -> Result<RawSolution, SdpError> {
        use clarabel::algebra::CscMatrix;
        use clarabel::solver::{
            DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, PSDTriangleConeT,
            SolverStatus, SupportedConeT,
        };

        let nvars = prob.nvars;
        let ncols = nvars + 1; // margin variable t appended last
        let tri: Vec<usize> = prob.blocks.iter().map(|b| b.size * (b.size + 1) / 2).collect();
        let nrows: usize = tri.iter().sum::<usize>() + 1; // + cap row

        // Column-major triplets for A in `Ax + s = b`, `s` in the cones:
        // s_block = svec(F0) + sum_i y_i svec(F_i) - t svec(I), so
        // A[:, i] = -svec(F_i), A[:, t] = svec(I), b = svec(F0).
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        let mut b = vec![0.0; nrows];
        let mut offset = 0;
        for (bi, block) in prob.blocks.iter().enumerate() {
            for (row, val) in svec(&block.f0).into_iter().enumerate() {
                b[offset + row] = val;
            }
            for (var, f) in &block.coeffs {
                for (row, val) in svec(f).into_iter().enumerate() {
                    if val != 0.0 {
                        cols[*var].push((offset + row, -val));
                    }
                }
            }
            let eye = DMatrix::<f64>::identity(block.size, block.size);
            for (row, val) in svec(&eye).into_iter().enumerate() {
                if val != 0.0 {
                    cols[nvars].push((offset + row, val));
                }
            }
            offset += tri[bi];
        }
        // cap row: cap - t >= 0.
        b[offset] = cap;
        cols[nvars].push((offset, 1.0));

        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut cols {
            col.sort_by_key(|(r, _)| *r);
            for (r, v) in col.iter() {
                rowval.push(*r);
                nzval.push(*v);
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(nrows, ncols, colptr, rowval, nzval);
        let p = CscMatrix::zeros((ncols, ncols));
        let mut q = vec![0.0; ncols];
        q[nvars] = -1.0; // maximize t

        let mut cones: Vec<SupportedConeT<f64>> = prob
            .blocks
            .iter()
            .map(|blk| PSDTriangleConeT(blk.size))
            .collect();
        cones.push(NonnegativeConeT(1));

        let settings = DefaultSettings {
            verbose: self.verbose,
            max_iter: self.max_iter,
            ..Default::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| SdpError::Setup(format!("{e:?}")))?;
        solver.solve();
        let status = solver.solution.status;
        let solved = matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved);
        if matches!(status, SolverStatus::NumericalError) {
            return Err(SdpError::Numerical(format!("{status:?}")));
        }
        let x = &solver.solution.x;
        Ok(RawSolution {
            y: DVector::from_iterator(nvars, x.iter().take(nvars).copied()),
            margin: x[nvars],
            solved,
            status: format!("{status:?}"),
            iterations: solver.solution.iterations,
        })
    }
}

/// Tolerance factor for the independent feasibility re-check.
pub const RECHECK_TOL: f64 = 1e-7;

/// Solves a feasibility problem by margin maximization and independently
/// re-verifies the solver's claim by eigendecomposition.
pub fn solve(prob: &SdpProblem, solver: &dyn SdpSolver) -> Result<FeasibilityResult, SdpError> {
    prob.validate()?;
    let scale: f64 = prob
        .blocks
        .iter()
        .map(|b| {
            b.f0.norm() + b.coeffs.iter().map(|(_, f)| f.norm()).sum::<f64>()
        })
        .fold(1.0, f64::max);
    let cap = 1e3 * scale;
    let raw = solver.solve_margin(prob, cap)?;
    let block_margins = prob.block_margins(&raw.y);
    let recheck = block_margins.iter().copied().fold(f64::INFINITY, f64::min);

    let status = if !raw.solved {
        SdpStatus::Unknown
    } else if raw.margin >= 0.0 {
        // Claimed feasible; downgrade if the re-check disagrees materially.
        if recheck >= -RECHECK_TOL * scale {
            SdpStatus::Feasible
        } else {
            SdpStatus::Unknown
        }
    } else {
        SdpStatus::Infeasible
    };
    Ok(FeasibilityResult {
        status,
        y: (status == SdpStatus::Feasible).then(|| raw.y.clone()),
        margin: raw.margin,
        block_margins,
        iterations: raw.iterations,
        solver: format!("{} ({})", solver.name(), raw.status),
    })
}

/// Writes the problem in SDPA sparse format (`.dat-s`).
///
/// Header: mDIM, nBLOCK, block sizes, objective row (zeros). Entries are
/// quintuples `matno block i j value` over the upper triangle, 1-based,
/// 17 significant digits. SDPA's convention is
/// `sum_i x_i F_i - F0 >= 0`, so the constant matrix is written negated;
/// parsing negates it back, and the round trip is exact.
pub fn export_sdpa(prob: &SdpProblem, path: &Path) -> Result<(), SdpError> {
    prob.validate()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", prob.nvars)?;
    writeln!(f, "{}", prob.blocks.len())?;
    let sizes: Vec<String> = prob.blocks.iter().map(|b| b.size.to_string()).collect();
    writeln!(f, "{}", sizes.join(" "))?;
    let zeros: Vec<String> = (0..prob.nvars).map(|_| format!("{:.16e}", 0.0)).collect();
    writeln!(f, "{}", zeros.join(" "))?;

    let mut write_mat =
        |f: &mut dyn Write, matno: usize, block: usize, m: &DMatrix<f64>, negate: bool| {
            for r in 0..m.nrows() {
                for c in r..m.ncols() {
                    let v = if negate { -m[(r, c)] } else { m[(r, c)] };
                    if v != 0.0 {
                        writeln!(f, "{matno} {} {} {} {v:.16e}", block + 1, r + 1, c + 1)?;
                    }
                }
            }
            Ok::<(), std::io::Error>(())
        };
    for (bi, block) in prob.blocks.iter().enumerate() {
        write_mat(&mut f, 0, bi, &block.f0, true)?;
    }
    for var in 0..prob.nvars {
        for (bi, block) in prob.blocks.iter().enumerate() {
            for (v, m) in &block.coeffs {
                if *v == var {
                    write_mat(&mut f, var + 1, bi, m, false)?;
                }
            }
        }
    }
    Ok(())
}

/// Parses an SDPA sparse file written by [`export_sdpa`].
pub fn parse_sdpa(path: &Path) -> Result<SdpProblem, SdpError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let pstr = path.display().to_string();
    let mut lines = reader.lines().enumerate();
    let mut next_content = || -> Result<(usize, String), SdpError> {
        for (i, line) in lines.by_ref() {
            let line = line?;
            let trimmed = line.trim().to_string();
            if !trimmed.is_empty() && !trimmed.starts_with('"') && !trimmed.starts_with('*') {
                return Ok((i + 1, trimmed));
            }
        }
        Err(SdpError::Parse {
            path: pstr.clone(),
            line: 0,
            msg: "unexpected end of file".into(),
        })
    };

    let (l1, mdim_s) = next_content()?;
    let nvars: usize = mdim_s.split_whitespace().next().unwrap_or("").parse().map_err(|_| {
        SdpError::Parse {
            path: pstr.clone(),
            line: l1,
            msg: "cannot parse mDIM".into(),
        }
    })?;
    let (l2, nblock_s) = next_content()?;
    let nblock: usize = nblock_s
        .split_whitespace()
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|_| SdpError::Parse {
            path: pstr.clone(),
            line: l2,
            msg: "cannot parse nBLOCK".into(),
        })?;
    let (l3, sizes_s) = next_content()?;
    let sizes: Vec<usize> = sizes_s
        .split_whitespace()
        .map(|tok| {
            tok.parse::<i64>()
                .map(|v| v.unsigned_abs() as usize)
                .map_err(|_| SdpError::Parse {
                    path: pstr.clone(),
                    line: l3,
                    msg: format!("bad block size `{tok}`"),
                })
        })
        .collect::<Result<_, _>>()?;
    if sizes.len() != nblock {
        return Err(SdpError::Parse {
            path: pstr.clone(),
            line: l3,
            msg: format!("expected {nblock} block sizes, got {}", sizes.len()),
        });
    }
    let (_, _objective) = next_content()?; // feasibility export writes zeros

    let mut f0: Vec<DMatrix<f64>> = sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
    let mut fi: Vec<Vec<DMatrix<f64>>> = (0..nvars)
        .map(|_| sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect())
        .collect();
    loop {
        let entry = match next_content() {
            Ok(pair) => pair,
            Err(SdpError::Parse { msg, .. }) if msg.contains("end of file") => break,
            Err(e) => return Err(e),
        };
        let (lno, line) = entry;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(SdpError::Parse {
                path: pstr.clone(),
                line: lno,
                msg: format!("expected 5 fields, got {}", toks.len()),
            });
        }
        let parse_usize = |tok: &str| -> Result<usize, SdpError> {
            tok.parse().map_err(|_| SdpError::Parse {
                path: pstr.clone(),
                line: lno,
                msg: format!("bad integer `{tok}`"),
            })
        };
        let matno = parse_usize(toks[0])?;
        let block = parse_usize(toks[1])?;
        let i = parse_usize(toks[2])?;
        let j = parse_usize(toks[3])?;
        let val: f64 = toks[4].parse().map_err(|_| SdpError::Parse {
            path: pstr.clone(),
            line: lno,
            msg: format!("bad value `{}`", toks[4]),
        })?;
        if matno > nvars || block == 0 || block > nblock {
            return Err(SdpError::Parse {
                path: pstr.clone(),
                line: lno,
                msg: "matno/block out of range".into(),
            });
        }
        let s = sizes[block - 1];
        if i == 0 || j == 0 || i > s || j > s {
            return Err(SdpError::Parse {
                path: pstr.clone(),
                line: lno,
                msg: "index out of range".into(),
            });
        }
        let target = if matno == 0 {
            &mut f0[block - 1]
        } else {
            &mut fi[matno - 1][block - 1]
        };
        let v = if matno == 0 { -val } else { val };
        target[(i - 1, j - 1)] = v;
        target[(j - 1, i - 1)] = v;
    }

    let blocks = sizes
        .iter()
        .enumerate()
        .map(|(bi, &size)| SdpBlock {
            size,
            f0: f0[bi].clone(),
            coeffs: (0..nvars)
                .filter(|&v| fi[v][bi].amax() != 0.0)
                .map(|v| (v, fi[v][bi].clone()))
                .collect(),
        })
        .collect();
    Ok(SdpProblem { nvars, blocks })
}

/// Upper-triangle index helpers for symmetric matrix variables:
/// variables enumerate `(r, c)` with `r <= c`, column-major, and the
/// off-diagonal basis matrix is `E_rc + E_cr` (coefficient 2 folded in).
pub fn sym_var_count(size: usize) -> usize {
    size * (size + 1) / 2
}

/// Basis matrix of the `k`-th upper-triangle variable of a `size x size`
/// symmetric matrix.
pub fn sym_basis(size: usize, k: usize) -> DMatrix<f64> {
    let mut idx = 0;
    for c in 0..size {
        for r in 0..=c {
            if idx == k {
                let mut m = DMatrix::zeros(size, size);
                m[(r, c)] = 1.0;
                m[(c, r)] = 1.0;
                return m;
            }
            idx += 1;
        }
    }
    panic!("sym_basis index {k} out of range for size {size}");
}

/// Reassembles a symmetric matrix from its upper-triangle variables.
pub fn sym_from_vars(size: usize, vars: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(size, size);
    let mut idx = 0;
    for c in 0..size {
        for r in 0..=c {
            m[(r, c)] = vars[idx];
            m[(c, r)] = vars[idx];
            idx += 1;
        }
    }
    m
}
