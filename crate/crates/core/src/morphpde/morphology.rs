use crate::error::MorphError;
use crate::geometry::GridGeometry;
use crate::grid::GridFunction;

use super::structuring::{StructuringSpec, Window};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Extremum {
    Min,
    Max,
}

/// Offsets `(dy, dx)` in row-major scan order with their structuring values.
struct OffsetTable {
    offsets: Vec<(isize, isize)>,
    penalty: Vec<f64>,
}

impl OffsetTable {
    fn periodic(radius: usize, value: impl Fn(f64, f64) -> f64) -> Self {
        let r = radius as isize;
        let mut offsets = Vec::with_capacity((2 * radius + 1).pow(2));
        let mut penalty = Vec::with_capacity(offsets.capacity());
        for dy in -r..=r {
            for dx in -r..=r {
                offsets.push((dy, dx));
                penalty.push(value(dx as f64, dy as f64));
            }
        }
        Self { offsets, penalty }
    }
}

fn check_window(f: &GridFunction, window: Window) -> Result<(), MorphError> {
    if let Window::Periodic { radius } = window {
        if radius == 0 {
            return Err(MorphError::InvalidRadius);
        }
        if radius > f.height().min(f.width()) {
            return Err(MorphError::WindowTooLarge {
                radius,
                height: f.height(),
                width: f.width(),
            });
        }
    }
    Ok(())
}

/// Shared scan: `out(x) = ext_y [ f(y) ∓ b(y − x) ]`. The first offset in
/// row-major order wins ties.
fn scan(
    f: &GridFunction,
    window: Window,
    value: impl Fn(f64, f64) -> f64,
    ext: Extremum,
) -> Result<GridFunction, MorphError> {
    check_window(f, window)?;
    let (channels, height, width) = f.shape();
    let mut out = GridFunction::zeros(channels, height, width)?;
    match window {
        Window::Periodic { radius } => {
            let table = OffsetTable::periodic(radius, value);
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        let mut best = match ext {
                            Extremum::Min => f64::INFINITY,
                            Extremum::Max => f64::NEG_INFINITY,
                        };
                        for (&(dy, dx), &b) in table.offsets.iter().zip(&table.penalty) {
                            let v = f.get_wrapped(c, y as isize + dy, x as isize + dx);
                            match ext {
                                Extremum::Min => {
                                    let cand = v + b;
                                    if cand < best {
                                        best = cand;
                                    }
                                }
                                Extremum::Max => {
                                    let cand = v - b;
                                    if cand > best {
                                        best = cand;
                                    }
                                }
                            }
                        }
                        out.set(c, y, x, best);
                    }
                }
            }
        }
        Window::Full => {
            // penalty[(dy + H − 1)(2W − 1) + dx + W − 1] for dy, dx spanning the grid
            let (ph, pw) = (2 * height - 1, 2 * width - 1);
            let mut penalty = Vec::with_capacity(ph * pw);
            for dy in -(height as isize - 1)..=(height as isize - 1) {
                for dx in -(width as isize - 1)..=(width as isize - 1) {
                    penalty.push(value(dx as f64, dy as f64));
                }
            }
            for c in 0..channels {
                let src = f.channel(c);
                for y in 0..height {
                    for x in 0..width {
                        let mut best = match ext {
                            Extremum::Min => f64::INFINITY,
                            Extremum::Max => f64::NEG_INFINITY,
                        };
                        for yy in 0..height {
                            let prow = (yy + height - 1 - y) * pw + (width - 1 - x);
                            let srow = &src[yy * width..(yy + 1) * width];
                            let pen = &penalty[prow..prow + width];
                            for (&v, &b) in srow.iter().zip(pen) {
                                match ext {
                                    Extremum::Min => {
                                        let cand = v + b;
                                        if cand < best {
                                            best = cand;
                                        }
                                    }
                                    Extremum::Max => {
                                        let cand = v - b;
                                        if cand > best {
                                            best = cand;
                                        }
                                    }
                                }
                            }
                        }
                        out.set(c, y, x, best);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Group morphological erosion `out(x) = min_y [ f(y) + b_t^k(d(x, y)) ]`,
/// channel by channel.
pub fn erode(f: &GridFunction, spec: &StructuringSpec, geom: &GridGeometry) -> Result<GridFunction, MorphError> {
    scan(
        f,
        spec.window(),
        |dx, dy| spec.offset_value(dx, dy, geom),
        Extremum::Min,
    )
}

/// Group morphological dilation `out(x) = max_y [ f(y) − b_t^k(d(x, y)) ]`.
pub fn dilate(f: &GridFunction, spec: &StructuringSpec, geom: &GridGeometry) -> Result<GridFunction, MorphError> {
    scan(
        f,
        spec.window(),
        |dx, dy| spec.offset_value(dx, dy, geom),
        Extremum::Max,
    )
}

/// Windowed minimum over a periodic `(2r+1)²` square.
pub fn flat_erode(f: &GridFunction, radius: usize) -> Result<GridFunction, MorphError> {
    scan(f, Window::Periodic { radius }, |_, _| 0.0, Extremum::Min)
}

/// Windowed maximum over a periodic `(2r+1)²` square.
pub fn flat_dilate(f: &GridFunction, radius: usize) -> Result<GridFunction, MorphError> {
    scan(f, Window::Periodic { radius }, |_, _| 0.0, Extremum::Max)
}
