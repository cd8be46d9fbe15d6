use crate::error::MorphError;
use crate::grid::GridFunction;

use super::{c_k, LpNorm, MorphPdeProblem, MorphSign};

/// Legendre–Fenchel transform of `H(q) = ‖q‖_p^k`:
/// `L(v) = c_k ‖v‖_{p*}^{k/(k−1)}` with `p*` the dual exponent.
pub fn lagrangian(vx: f64, vy: f64, k: f64, norm: LpNorm) -> f64 {
    let r = norm.dual().norm2(vx, vy);
    if r == 0.0 {
        0.0
    } else {
        c_k(k) * r.powf(k / (k - 1.0))
    }
}

/// `u(x, t) = inf_y { f(y) + t L((x − y)/t) }` over every grid point
/// (supremum with `−t L` for dilation). No wrap-around.
pub fn hopf_lax_solve(problem: &MorphPdeProblem) -> Result<GridFunction, MorphError> {
    problem.validate()?;
    let f = &problem.initial;
    let (channels, height, width) = f.shape();
    let t = problem.horizon;
    let h = problem.grid_spacing;

    // t·L((x − y)/t) depends only on the lattice offset.
    let (ph, pw) = (2 * height - 1, 2 * width - 1);
    let mut action = vec![0.0; ph * pw];
    for (iy, dy) in (-(height as isize - 1)..=(height as isize - 1)).enumerate() {
        for (ix, dx) in (-(width as isize - 1)..=(width as isize - 1)).enumerate() {
            let vx = dx as f64 * h / t;
            let vy = dy as f64 * h / t;
            action[iy * pw + ix] = t * lagrangian(vx, vy, problem.k, problem.lp_norm);
        }
    }

    let mut out = GridFunction::zeros(channels, height, width)?;
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let mut best = match problem.sign {
                    MorphSign::Erosion => f64::INFINITY,
                    MorphSign::Dilation => f64::NEG_INFINITY,
                };
                for yy in 0..height {
                    for xx in 0..width {
                        let off = (y + height - 1 - yy) * pw + (x + width - 1 - xx);
                        let fy = f.get(c, yy, xx);
                        match problem.sign {
                            MorphSign::Erosion => best = best.min(fy + action[off]),
                            MorphSign::Dilation => best = best.max(fy - action[off]),
                        }
                    }
                }
                out.set(c, y, x, best);
            }
        }
    }
    Ok(out)
}
