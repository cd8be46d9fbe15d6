use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data_io::{read_pgm, write_grid, CsvTable};
use crate::error::ConfigError;
use crate::grid::GridFunction;
use crate::morphpde::{fd_hj_solve, hopf_lax_solve, LpNorm, MorphPdeProblem, MorphSign};
use crate::Result;

/// Initial condition on `[−1, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub enum PdeInit {
    /// `exp(−‖x‖² / 0.2)`.
    Bump,
    /// 1 on the right half, 0 on the left.
    Edge,
    /// A binary PGM, mapped to `[−1, 1]`.
    Image(PathBuf),
}

impl FromStr for PdeInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "bump" => Self::Bump,
            "edge" => Self::Edge,
            "" => return Err("empty initial condition".into()),
            path => Self::Image(PathBuf::from(path)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdeMethod {
    HopfLax,
    Fd,
    Both,
}

impl FromStr for PdeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hopflax" => Ok(Self::HopfLax),
            "fd" => Ok(Self::Fd),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown method `{s}`; expected hopflax, fd or both")),
        }
    }
}

pub fn parse_lp_norm(s: &str) -> Result<LpNorm, String> {
    match s {
        "1" => Ok(LpNorm::L1),
        "2" => Ok(LpNorm::L2),
        "inf" => Ok(LpNorm::LInf),
        _ => Err(format!("unsupported norm `{s}`; expected 1, 2 or inf")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdeLabRequest {
    pub init: PdeInit,
    pub k: f64,
    pub norm: LpNorm,
    pub t: f64,
    pub method: PdeMethod,
    /// Grid side for the analytic initial conditions.
    pub size: usize,
    pub sign: MorphSign,
}

impl Default for PdeLabRequest {
    fn default() -> Self {
        Self {
            init: PdeInit::Bump,
            k: 2.0,
            norm: LpNorm::L2,
            t: 0.25,
            method: PdeMethod::Both,
            size: 64,
            sign: MorphSign::Erosion,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PdeLabReport {
    pub hopf_lax: Option<GridFunction>,
    pub fd: Option<GridFunction>,
    /// `(L∞, mean absolute)` gap between the two solvers.
    pub gap: Option<(f64, f64)>,
}

/// CFL number for the finite-difference solver.
pub const FD_CFL: f64 = 0.5;

pub fn initial_condition(init: &PdeInit, size: usize) -> Result<(GridFunction, f64)> {
    let spacing = |n: usize| 2.0 / (n.max(2) as f64 - 1.0);
    match init {
        PdeInit::Image(path) => {
            let f = read_pgm(path)?;
            let h = spacing(f.height().max(f.width()));
            Ok((f, h))
        }
        analytic => {
            if size < 2 {
                return Err(ConfigError::new("--size", format!("must be at least 2, got {size}")).into());
            }
            let h = spacing(size);
            let f = GridFunction::from_fn(1, size, size, |_, y, x| {
                let (px, py) = (-1.0 + x as f64 * h, -1.0 + y as f64 * h);
                match analytic {
                    PdeInit::Bump => (-(px * px + py * py) / 0.2).exp(),
                    _ => {
                        if px >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            })?;
            Ok((f, h))
        }
    }
}

pub fn run_pde_lab(req: &PdeLabRequest) -> Result<PdeLabReport> {
    if !(req.t > 0.0 && req.t.is_finite()) {
        return Err(ConfigError::new("t", format!("must be positive, got {}", req.t)).into());
    }
    if !(req.k > 1.0 && req.k.is_finite()) {
        return Err(ConfigError::new("k", format!("must be > 1, got {}", req.k)).into());
    }
    let (initial, h) = initial_condition(&req.init, req.size)?;
    let problem = MorphPdeProblem {
        initial,
        k: req.k,
        lp_norm: req.norm,
        sign: req.sign,
        horizon: req.t,
        grid_spacing: h,
    };
    let mut report = PdeLabReport::default();
    if req.method != PdeMethod::Fd {
        report.hopf_lax = Some(hopf_lax_solve(&problem)?);
    }
    if req.method != PdeMethod::HopfLax {
        report.fd = Some(fd_hj_solve(&problem, FD_CFL)?);
    }
    if let (Some(a), Some(b)) = (&report.hopf_lax, &report.fd) {
        report.gap = Some((a.max_abs_diff(b), a.l1_diff(b)));
    }
    Ok(report)
}

/// Writes `input.pgm`, one grid per solver and `report.csv`.
pub fn write_pde_lab(dir: &Path, req: &PdeLabRequest, report: &PdeLabReport) -> Result<Vec<PathBuf>> {
    let (initial, _) = initial_condition(&req.init, req.size)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, g: &GridFunction| -> Result<()> {
        let path = dir.join(name);
        write_grid(std::slice::from_ref(g), 1, &path)?;
        written.push(path);
        Ok(())
    };
    emit("input.pgm", &initial)?;
    if let Some(g) = &report.hopf_lax {
        emit("hopflax.pgm", g)?;
    }
    if let Some(g) = &report.fd {
        emit("fd.pgm", g)?;
    }
    let mut table = CsvTable::new(["quantity", "value"]);
    table.push(["k".to_string(), req.k.to_string()]);
    table.push(["t".to_string(), req.t.to_string()]);
    if let Some((linf, l1)) = report.gap {
        table.push(["linf_gap".to_string(), format!("{linf:e}")]);
        table.push(["mean_abs_gap".to_string(), format!("{l1:e}")]);
    }
    let path = dir.join("report.csv");
    table.write(&path)?;
    written.push(path);
    Ok(written)
}
