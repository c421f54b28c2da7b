//! Explicit finite-volume advection-diffusion on a regular grid.
//!
//! Row 0 is the northern edge; `u` points east, `v` north.

use crate::error::{Result, SynthError};

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn filled(nx: usize, ny: usize, v: f64) -> Self {
        Self {
            nx,
            ny,
            data: vec![v; nx * ny],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.nx + col]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Values just outside each edge, listed west to east (north, south) or
/// north to south (west, east).
#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    pub north: Vec<f64>,
    pub south: Vec<f64>,
    pub west: Vec<f64>,
    pub east: Vec<f64>,
}

impl Ring {
    pub fn uniform(nx: usize, ny: usize, v: f64) -> Self {
        Self {
            north: vec![v; nx],
            south: vec![v; nx],
            west: vec![v; ny],
            east: vec![v; ny],
        }
    }

    /// `(1 - w) * a + w * b`, edge by edge.
    pub fn lerp(a: &Ring, b: &Ring, w: f64) -> Ring {
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + w * (q - p)).collect();
        Ring {
            north: mix(&a.north, &b.north),
            south: mix(&a.south, &b.south),
            west: mix(&a.west, &b.west),
            east: mix(&a.east, &b.east),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transport {
    pub dx: f64,
    pub u: f64,
    pub v: f64,
    pub diffusion: f64,
    /// Per second.
    pub decay: f64,
}

/// Edge treatment: `None` is zero flux, `Some(ring)` takes outside values from the ring.
#[derive(Debug, Clone, Copy, Default)]
pub struct Boundary<'a> {
    pub advection: Option<&'a Ring>,
    pub diffusion: Option<&'a Ring>,
}

/// Largest explicit step for which upwind advection plus diffusion stays
/// positive and monotone.
pub fn stable_dt(t: &Transport) -> f64 {
    let rate = (t.u.abs() + t.v.abs()) / t.dx + 4.0 * t.diffusion / (t.dx * t.dx) + t.decay;
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// Number of equal sub-steps covering `span_s`, either from a requested step
/// (checked against the bound) or at 90 % of the bound.
pub fn substeps(t: &Transport, span_s: f64, requested: Option<f64>) -> Result<(usize, f64)> {
    let bound = stable_dt(t);
    let dt = match requested {
        Some(dt) if dt > bound || !(dt > 0.0) => {
            return Err(SynthError::Parameter(format!(
                "time step {dt} s violates the CFL bound: stable steps are <= {bound:.3} s \
                 (dx {} m, wind ({:.2}, {:.2}) m/s, diffusion {} m2/s)",
                t.dx, t.u, t.v, t.diffusion
            )))
        }
        Some(dt) => dt,
        None => 0.9 * bound,
    };
    let n = (span_s / dt).ceil().max(1.0) as usize;
    Ok((n, span_s / n as f64))
}

/// Scratch buffers reused across steps.
#[derive(Debug, Default)]
pub struct Workspace {
    fx: Vec<f64>,
    fy: Vec<f64>,
}

/// One explicit step: `c += dt * (-div(flux) + source - decay * c)`.
pub fn step(c: &mut Field, t: &Transport, source: Option<&[f64]>, dt: f64, bc: Boundary<'_>, ws: &mut Workspace) {
    let (nx, ny) = (c.nx, c.ny);
    let (u, v, d, dx) = (t.u, t.v, t.diffusion, t.dx);
    // fx[r * (nx + 1) + k]: eastward flux through the west face of column k
    ws.fx.resize((nx + 1) * ny, 0.0);
    // fy[k * nx + col]: northward flux through the north face of row k
    ws.fy.resize((ny + 1) * nx, 0.0);
    let adv = |up_west: f64, up_east: f64, vel: f64| if vel > 0.0 { vel * up_west } else { vel * up_east };
    for r in 0..ny {
        let row = &c.data[r * nx..(r + 1) * nx];
        let f = &mut ws.fx[r * (nx + 1)..(r + 1) * (nx + 1)];
        for k in 1..nx {
            f[k] = adv(row[k - 1], row[k], u) - d * (row[k] - row[k - 1]) / dx;
        }
        f[0] = bc.advection.map_or(0.0, |g| adv(g.west[r], row[0], u))
            + bc.diffusion.map_or(0.0, |g| -d * (row[0] - g.west[r]) / dx);
        f[nx] = bc.advection.map_or(0.0, |g| adv(row[nx - 1], g.east[r], u))
            + bc.diffusion.map_or(0.0, |g| -d * (g.east[r] - row[nx - 1]) / dx);
    }
    // northward: the upwind cell of a face is the southern one when v > 0
    let adv_n = |south: f64, north: f64| if v > 0.0 { v * south } else { v * north };
    for k in 0..=ny {
        for col in 0..nx {
            let flux = if k == 0 {
                let g = |ring: &Ring| ring.north[col];
                bc.advection.map_or(0.0, |ring| adv_n(c.data[col], g(ring)))
                    + bc.diffusion.map_or(0.0, |ring| -d * (g(ring) - c.data[col]) / dx)
            } else if k == ny {
                let s = c.data[(ny - 1) * nx + col];
                bc.advection.map_or(0.0, |ring| adv_n(ring.south[col], s))
                    + bc.diffusion.map_or(0.0, |ring| -d * (s - ring.south[col]) / dx)
            } else {
                let north = c.data[(k - 1) * nx + col];
                let south = c.data[k * nx + col];
                adv_n(south, north) - d * (north - south) / dx
            };
            ws.fy[k * nx + col] = flux;
        }
    }
    for r in 0..ny {
        for col in 0..nx {
            let i = r * nx + col;
            let div = (ws.fx[r * (nx + 1) + col + 1] - ws.fx[r * (nx + 1) + col]) / dx
                + (ws.fy[r * nx + col] - ws.fy[(r + 1) * nx + col]) / dx;
            let s = source.map_or(0.0, |s| s[i]);
            c.data[i] += dt * (-div + s - t.decay * c.data[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calm() -> Transport {
        Transport {
            dx: 100.0,
            u: 0.0,
            v: 0.0,
            diffusion: 20.0,
            decay: 0.0,
        }
    }

    #[test]
    fn diffusion_conserves_mass_with_zero_flux_edges() {
        let mut c = Field::filled(30, 20, 0.0);
        c.data[7 * 30 + 4] = 1_000.0;
        let t = calm();
        let (n, dt) = substeps(&t, 20.0 * 3_600.0, None).unwrap();
        let mut ws = Workspace::default();
        for _ in 0..n {
            step(&mut c, &t, None, dt, Boundary::default(), &mut ws);
        }
        assert!((c.total() - 1_000.0).abs() <= 1e-6 * 1_000.0, "{}", c.total());
        assert!(c.data.iter().all(|&v| v >= 0.0));
        // spread out
        assert!(c.data[7 * 30 + 4] < 100.0);
    }

    #[test]
    fn wind_moves_mass_downwind() {
        let mut c = Field::filled(20, 20, 0.0);
        c.data[10 * 20 + 5] = 1.0;
        let t = Transport {
            u: 3.0,
            v: 2.0,
            diffusion: 0.0,
            ..calm()
        };
        let (n, dt) = substeps(&t, 100.0, None).unwrap();
        let mut ws = Workspace::default();
        for _ in 0..n {
            step(&mut c, &t, None, dt, Boundary::default(), &mut ws);
        }
        // east and north of the start (north = smaller row)
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in 0..20 {
            for col in 0..20 {
                cx += c.at(r, col) * col as f64;
                cy += c.at(r, col) * r as f64;
            }
        }
        let m = c.total();
        assert!((m - 1.0).abs() < 1e-12);
        assert!((cx / m - 8.0).abs() < 1e-9, "{}", cx / m);
        assert!((cy / m - 8.0).abs() < 1e-9, "{}", cy / m);
    }

    #[test]
    fn open_boundary_relaxes_to_inflow_value() {
        let mut c = Field::filled(10, 10, 0.0);
        let ring = Ring::uniform(10, 10, 5.0);
        let t = Transport {
            u: -2.0,
            v: 1.0,
            ..calm()
        };
        let (n, dt) = substeps(&t, 6.0 * 3_600.0, None).unwrap();
        let mut ws = Workspace::default();
        let bc = Boundary {
            advection: Some(&ring),
            diffusion: Some(&ring),
        };
        for _ in 0..n {
            step(&mut c, &t, None, dt, bc, &mut ws);
        }
        assert!(c.data.iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn steady_state_with_source_and_decay() {
        let mut c = Field::filled(4, 4, 0.0);
        let t = Transport {
            diffusion: 0.0,
            decay: 1e-3,
            ..calm()
        };
        let src = vec![0.02; 16];
        let mut ws = Workspace::default();
        for _ in 0..20_000 {
            step(&mut c, &t, Some(&src), 1.0, Boundary::default(), &mut ws);
        }
        assert!(c.data.iter().all(|&v| (v - 20.0).abs() < 1e-6));
    }

    #[test]
    fn cfl_violation_names_bound() {
        let t = Transport {
            u: 5.0,
            ..calm()
        };
        let bound = stable_dt(&t);
        assert!((bound - 1.0 / (0.05 + 0.008)).abs() < 1e-12);
        let err = substeps(&t, 3_600.0, Some(60.0)).unwrap_err().to_string();
        assert!(err.contains("17.241"), "{err}");
        assert!(substeps(&t, 3_600.0, Some(10.0)).is_ok());
    }
}
