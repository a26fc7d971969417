//! Physical setup of the demos: the acoustic medium description, the Ricker
//! source signature and the smooth convection initial condition.

use crate::{Error, Result};

/// Ricker wavelet `(1 - 2π²f²(t-t₀)²)·exp(-π²f²(t-t₀)²)` with `t₀ = 1/f`,
/// peak amplitude 1 at `t = t₀`.
pub fn ricker(t: f64, f0: f64) -> f64 {
    let t0 = 1.0 / f0;
    let arg = std::f64::consts::PI.powi(2) * f0.powi(2) * (t - t0).powi(2);
    (1.0 - 2.0 * arg) * (-arg).exp()
}

/// Smooth compactly supported bump: `sin²(π(ξ-0.5)/0.5)` on `ξ ∈ [0.5, 1.0]`,
/// zero elsewhere. Stands in for the hat profile of the convection tutorial
/// without its discontinuous edges.
pub fn smooth_bump(xi: f64) -> f64 {
    if (0.5..=1.0).contains(&xi) {
        let s = (std::f64::consts::PI * (xi - 0.5) / 0.5).sin();
        s * s
    } else {
        0.0
    }
}

/// Convection initial condition `u₀(x, y) = 1 + b(2x/3)·b(2y/3)`.
pub fn init_smooth(x: f64, y: f64) -> f64 {
    1.0 + smooth_bump(x * 2.0 / 3.0) * smooth_bump(y * 2.0 / 3.0)
}

/// Medium and acquisition geometry of the acoustic demo.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub shape: Vec<usize>,
    /// Shared spacing of all space dimensions (length units).
    pub spacing: f64,
    /// Square slowness per grid point (1/velocity²).
    pub m: Vec<f64>,
    /// Absorbing dampening factor per grid point, zero in the interior.
    pub eta: Vec<f64>,
    /// Absorbing layer width in grid points (0 disables dampening).
    pub damp_width: usize,
    pub src_coords: Vec<Vec<f64>>,
    pub rec_coords: Vec<Vec<f64>>,
    /// Ricker peak frequency (1/time units).
    pub f0: f64,
    pub dt: f64,
    pub ntime: usize,
}

impl AcousticModel {
    /// Stability bound `dt <= h·√(min m)/√ndim`.
    pub fn dt_limit(&self) -> f64 {
        let m_min = self.m.iter().cloned().fold(f64::INFINITY, f64::min);
        self.spacing * m_min.sqrt() / (self.shape.len() as f64).sqrt()
    }

    pub fn points(&self) -> usize {
        self.shape.iter().product()
    }

    /// Domain length along one dimension.
    pub fn extent(&self, d: usize) -> f64 {
        (self.shape[d] - 1) as f64 * self.spacing
    }

    pub fn validate(&self) -> Result<()> {
        assert_eq!(self.m.len(), self.points());
        assert_eq!(self.eta.len(), self.points());
        assert!(self.m.iter().all(|&v| v > 0.0), "square slowness must be positive");
        assert!(self.eta.iter().all(|&v| v >= 0.0), "dampening must be non-negative");
        let limit = self.dt_limit();
        if self.dt > limit {
            return Err(Error::CflViolation {
                dt: self.dt,
                limit,
            });
        }
        Ok(())
    }

    /// Two-layer medium (velocity `v_top` above the half-depth interface,
    /// `v_bottom` below), a quadratic dampening profile in a boundary layer
    /// of `damp_width` points, one source near the top center and a line of
    /// receivers a little deeper. `dt = 0` picks half the stability bound.
    ///
    /// `margin` keeps every source/receiver cell at least that many grid
    /// points away from the boundary, so the interpolation cells stay inside
    /// the region the stencil update actually writes (`order/2 + 1` covers a
    /// given space order).
    pub fn two_layer(
        shape: &[usize],
        spacing: f64,
        v_top: f64,
        v_bottom: f64,
        damp_width: usize,
        nrec: usize,
        ntime: usize,
        f0: f64,
        dt: f64,
        margin: usize,
    ) -> AcousticModel {
        let ndim = shape.len();
        let points: usize = shape.iter().product();
        let mut strides = vec![1usize; ndim];
        for i in (0..ndim - 1).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let depth_dim = ndim - 1;

        let mut m = vec![0.0; points];
        let mut eta = vec![0.0; points];
        let m_top = 1.0 / (v_top * v_top);
        let m_bottom = 1.0 / (v_bottom * v_bottom);
        let eta_max = if damp_width > 0 {
            // Keeps (m + dt·eta) well away from zero while absorbing over a
            // few tens of steps.
            0.5 * m_top.min(m_bottom)
        } else {
            0.0
        };
        for lin in 0..points {
            let idx: Vec<usize> = (0..ndim).map(|d| (lin / strides[d]) % shape[d]).collect();
            m[lin] = if idx[depth_dim] >= shape[depth_dim] / 2 {
                m_bottom
            } else {
                m_top
            };
            if damp_width > 0 {
                let dist = idx
                    .iter()
                    .zip(shape)
                    .map(|(i, n)| (*i).min(n - 1 - i))
                    .min()
                    .unwrap();
                if dist < damp_width {
                    let d = (damp_width - dist) as f64 / damp_width as f64;
                    eta[lin] = eta_max * d * d;
                }
            }
        }

        let m_min = m_top.min(m_bottom);
        let dt = if dt > 0.0 {
            dt
        } else {
            0.5 * spacing * m_min.sqrt() / (ndim as f64).sqrt()
        };

        // Source near the top center; receivers in a horizontal line below.
        let mid = |d: usize| (shape[d] - 1) as f64 * spacing / 2.0;
        let mut src = vec![0.0; ndim];
        for d in 0..ndim - 1 {
            src[d] = mid(d);
        }
        src[depth_dim] = (margin.max(2) as f64) * spacing;

        let lx = (shape[0] - 1) as f64 * spacing;
        let lo = margin as f64 * spacing;
        let hi = lx - margin as f64 * spacing;
        let rec_coords: Vec<Vec<f64>> = (0..nrec)
            .map(|r| {
                let frac = if nrec == 1 {
                    0.5
                } else {
                    r as f64 / (nrec - 1) as f64
                };
                let mut c = vec![0.0; ndim];
                c[0] = lo + frac * (hi - lo);
                for d in 1..ndim - 1 {
                    c[d] = mid(d);
                }
                c[depth_dim] = (margin.max(3) as f64) * spacing;
                c
            })
            .collect();

        AcousticModel {
            shape: shape.to_vec(),
            spacing,
            m,
            eta,
            damp_width,
            src_coords: vec![src],
            rec_coords,
            f0,
            dt,
            ntime,
        }
    }
}
