//! Off-grid point sets: linear interpolation (gather) and injection
//! (scatter-add) between sparse points and the cartesian grid.
//!
//! Interpolation and injection build on the same bilinear/trilinear cell
//! weights, which makes the pair discrete adjoints of each other — the
//! property the acoustic dot test depends on.

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::expr::{Expr, Sym};
use crate::grid::FnMeta;

/// Identity and shape of a point set, shared by the symbolic side.
pub struct PointsMeta {
    pub name: Arc<str>,
    pub npoint: usize,
    pub ndim: usize,
    pub ntime: usize,
}

impl fmt::Debug for PointsMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PointsMeta({}, npoint={})", self.name, self.npoint)
    }
}

/// Cell weights of one point: the enclosing cell's base node plus `2^ndim`
/// corner weights in binary corner order (last dimension fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct InterpStencil {
    pub base: Vec<i64>,
    pub weights: Vec<f64>,
}

impl InterpStencil {
    /// Linear buffer offsets and weights of all corners.
    pub fn corners<'a>(
        &'a self,
        strides: &'a [usize],
    ) -> impl Iterator<Item = (usize, f64)> + 'a {
        let ndim = self.base.len();
        (0..self.weights.len()).map(move |c| {
            let mut lin = 0usize;
            for d in 0..ndim {
                let bit = (c >> (ndim - 1 - d)) & 1;
                lin += (self.base[d] as usize + bit) * strides[d];
            }
            (lin, self.weights[c])
        })
    }
}

/// Bilinear (2D) / trilinear (3D) weights of a physical coordinate on a
/// function's grid. The containing cell must lie fully inside the domain;
/// points on the far boundary node snap to the last interior cell.
pub fn interp_weights(coord: &[f64], shape: &[usize], spacing: &[f64]) -> Result<InterpStencil> {
    let ndim = coord.len();
    assert_eq!(ndim, shape.len());
    let oob = || Error::OutOfDomain(coord.to_vec());

    let mut base = Vec::with_capacity(ndim);
    let mut frac = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let pos = coord[d] / spacing[d];
        if !(0.0..=(shape[d] - 1) as f64).contains(&pos) {
            return Err(oob());
        }
        let mut b = pos.floor() as i64;
        let mut f = pos - b as f64;
        if b as usize >= shape[d] - 1 {
            // On the far node: use the last cell with fraction 1.
            b = shape[d] as i64 - 2;
            f = pos - b as f64;
        }
        base.push(b);
        frac.push(f);
    }

    let mut weights = vec![0.0; 1 << ndim];
    for (c, w) in weights.iter_mut().enumerate() {
        let mut acc = 1.0;
        for d in 0..ndim {
            let bit = (c >> (ndim - 1 - d)) & 1;
            acc *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
        }
        *w = acc;
    }
    Ok(InterpStencil { base, weights })
}

/// Which way a sparse phase moves data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparseKind {
    /// Gather grid values into the point set's time series.
    Interpolate,
    /// Scatter-add an expression from the point set into the field.
    Inject,
}

/// A sparse phase of an operator: executed once per time step between the
/// stencil sweeps, sequentially point by point.
#[derive(Clone)]
pub struct SparseOp {
    pub kind: SparseKind,
    pub points: Arc<PointsMeta>,
    /// Scatter destination (inject) or the function whose grid locates the
    /// points (interpolate).
    pub field: Arc<FnMeta>,
    /// Interpolate: expression gathered at each cell corner. Inject: value
    /// added per point; may reference the point-value symbol (the set's
    /// name) and grid functions at the corner location.
    pub expr: Expr,
}

/// Named set of off-grid points with per-timestep values: sources and
/// receivers of the wave demos.
pub struct SparsePointSet<T: Elem> {
    meta: Arc<PointsMeta>,
    /// npoint × ndim, physical units.
    coords: Vec<f64>,
    /// ntime × npoint, row-major by time step.
    values: Vec<T>,
}

impl<T: Elem> SparsePointSet<T> {
    pub fn new(name: &str, ntime: usize, npoint: usize, ndim: usize) -> Self {
        SparsePointSet {
            meta: Arc::new(PointsMeta {
                name: Arc::from(name),
                npoint,
                ndim,
                ntime,
            }),
            coords: vec![0.0; npoint * ndim],
            values: vec![T::ZERO; ntime * npoint],
        }
    }

    pub fn meta(&self) -> &Arc<PointsMeta> {
        &self.meta
    }
    pub fn name(&self) -> &str {
        &self.meta.name
    }
    pub fn npoint(&self) -> usize {
        self.meta.npoint
    }
    pub fn ntime(&self) -> usize {
        self.meta.ntime
    }

    pub fn coord(&self, p: usize) -> &[f64] {
        &self.coords[p * self.meta.ndim..(p + 1) * self.meta.ndim]
    }
    pub fn set_coord(&mut self, p: usize, c: &[f64]) {
        assert_eq!(c.len(), self.meta.ndim);
        self.coords[p * self.meta.ndim..(p + 1) * self.meta.ndim].copy_from_slice(c);
    }

    pub fn value(&self, t: usize, p: usize) -> T {
        self.values[t * self.meta.npoint + p]
    }
    pub fn set_value(&mut self, t: usize, p: usize, v: T) {
        self.values[t * self.meta.npoint + p] = v;
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    /// One time row of values.
    pub fn row(&self, t: usize) -> &[T] {
        &self.values[t * self.meta.npoint..(t + 1) * self.meta.npoint]
    }

    /// The symbol under which a point's current value appears in inject
    /// expressions.
    pub fn value_sym(&self) -> Expr {
        Expr::Sym(Sym(self.meta.name.clone()))
    }

    /// Gather `expr` (grid accesses evaluated at the cell corners) into this
    /// set's values, one assignment per point per time step.
    pub fn interpolate(&self, field: &Arc<FnMeta>, expr: Expr) -> SparseOp {
        SparseOp {
            kind: SparseKind::Interpolate,
            points: self.meta.clone(),
            field: field.clone(),
            expr,
        }
    }

    /// Scatter-add `expr` into `field` around each point.
    pub fn inject(&self, field: &Arc<FnMeta>, expr: Expr) -> SparseOp {
        SparseOp {
            kind: SparseKind::Inject,
            points: self.meta.clone(),
            field: field.clone(),
            expr,
        }
    }

    /// Cell weights of every point on the given function's grid; fails fast
    /// on the first out-of-domain point.
    pub fn stencils(&self, field: &FnMeta) -> Result<Vec<InterpStencil>> {
        (0..self.meta.npoint)
            .map(|p| interp_weights(self.coord(p), field.shape(), field.spacing()))
            .collect()
    }

    /// Store as CSV: header row, coordinate columns, then one column per
    /// time step.
    pub fn store_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let dims = ["x", "y", "z"];
        let mut head: Vec<String> = (0..self.meta.ndim)
            .map(|d| dims.get(d).copied().unwrap_or("w").to_string())
            .collect();
        head.extend((0..self.meta.ntime).map(|t| format!("v{t}")));
        out.push_str(&head.join(","));
        out.push('\n');
        for p in 0..self.meta.npoint {
            let mut row: Vec<String> = self.coord(p).iter().map(|c| format!("{c:?}")).collect();
            row.extend((0..self.meta.ntime).map(|t| format!("{:?}", self.value(t, p).to_f64())));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load a point set stored by `store_csv`.
    pub fn load_csv(name: &str, ndim: usize, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty point file".into()))??;
        let ncols = header.split(',').count();
        if ncols < ndim {
            return Err(Error::Parse("fewer columns than dimensions".into()));
        }
        let ntime = ncols - ndim;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Parse(format!("bad float {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != ncols {
                return Err(Error::Parse("ragged point file".into()));
            }
            rows.push(row);
        }
        let mut set = SparsePointSet::new(name, ntime, rows.len(), ndim);
        for (p, row) in rows.iter().enumerate() {
            set.set_coord(p, &row[..ndim]);
            for t in 0..ntime {
                set.set_value(t, p, T::from_f64(row[ndim + t]));
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn unit_grid(n: usize) -> (Vec<usize>, Vec<f64>) {
        (vec![n, n], vec![1.0, 1.0])
    }

    #[test]
    fn weight_on_a_grid_node() {
        let (shape, sp) = unit_grid(8);
        let st = interp_weights(&[3.0, 5.0], &shape, &sp).unwrap();
        assert_eq!(st.base, vec![3, 5]);
        assert_eq!(st.weights, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_at_cell_center() {
        let (shape, sp) = unit_grid(8);
        let st = interp_weights(&[3.5, 5.5], &shape, &sp).unwrap();
        assert_eq!(st.weights, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn weights_at_quarter_points() {
        let (shape, sp) = unit_grid(8);
        let st = interp_weights(&[2.25, 4.75], &shape, &sp).unwrap();
        assert_eq!(st.base, vec![2, 4]);
        assert_eq!(st.weights, vec![0.1875, 0.5625, 0.0625, 0.1875]);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let (shape, sp) = unit_grid(8);
        assert!(matches!(
            interp_weights(&[-0.5, 3.0], &shape, &sp),
            Err(Error::OutOfDomain(_))
        ));
        assert!(matches!(
            interp_weights(&[3.0, 7.01], &shape, &sp),
            Err(Error::OutOfDomain(_))
        ));
        // The far corner node itself is still usable.
        let st = interp_weights(&[7.0, 7.0], &shape, &sp).unwrap();
        assert_eq!(st.base, vec![6, 6]);
        let total: f64 = st.weights.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn partition_of_unity() {
        let (shape, sp) = unit_grid(9);
        let mut state = 0xDEADBEEFu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f64 / 10_000.0 * 8.0
        };
        for _ in 0..200 {
            let c = [next(), next()];
            let st = interp_weights(&c, &shape, &sp).unwrap();
            let total: f64 = st.weights.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "coord {c:?}");
            assert!(st.weights.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn linear_fields_interpolate_exactly() {
        // Bilinear weights reproduce affine functions: f(x,y) = 2x - 3y + 1.
        let (shape, sp) = unit_grid(9);
        let strides = [9usize, 1];
        let mut field = vec![0.0f64; 81];
        for i in 0..9 {
            for j in 0..9 {
                field[i * 9 + j] = 2.0 * i as f64 - 3.0 * j as f64 + 1.0;
            }
        }
        for c in [[0.3, 0.7], [4.21, 6.93], [7.5, 0.25]] {
            let st = interp_weights(&c, &shape, &sp).unwrap();
            let got: f64 = st.corners(&strides).map(|(lin, w)| w * field[lin]).sum();
            let expect = 2.0 * c[0] - 3.0 * c[1] + 1.0;
            assert!((got - expect).abs() <= 1e-12, "coord {c:?}");
        }
        // The spec's unit example: f = x + y at (0.3, 0.7) gives 1.0.
        for v in field.iter_mut() {
            *v = 0.0;
        }
        for i in 0..9 {
            for j in 0..9 {
                field[i * 9 + j] = i as f64 + j as f64;
            }
        }
        let st = interp_weights(&[0.3, 0.7], &shape, &sp).unwrap();
        let got: f64 = st.corners(&strides).map(|(lin, w)| w * field[lin]).sum();
        assert!((got - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn injection_preserves_totals() {
        let (shape, sp) = unit_grid(8);
        let strides = [8usize, 1];
        let mut field = vec![0.0f64; 64];
        // On a node: a single exact increment.
        let st = interp_weights(&[2.0, 2.0], &shape, &sp).unwrap();
        for (lin, w) in st.corners(&strides) {
            field[lin] += w * 1.0;
        }
        assert_eq!(field[2 * 8 + 2], 1.0);
        assert_eq!(field.iter().sum::<f64>(), 1.0);
        // At a cell center: four quarter increments, same total.
        let st = interp_weights(&[4.5, 4.5], &shape, &sp).unwrap();
        for (lin, w) in st.corners(&strides) {
            field[lin] += w * 1.0;
        }
        assert!((field.iter().sum::<f64>() - 2.0).abs() <= 1e-12);
        assert_eq!(field[4 * 8 + 4], 0.25);
    }

    #[test]
    fn interpolate_inject_adjointness() {
        // <interpolate(g), r> == <g, inject(r)> over random configurations,
        // checked with brute-force inner products.
        let mut state = 0x13572468ACE1u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 100_000) as f64 / 50_000.0 - 1.0
        };
        for case in 0..50 {
            let n = 6 + case % 5;
            let shape = vec![n, n];
            let sp = vec![1.0, 1.0];
            let strides = [n, 1];
            let npts = 1 + case % 7;

            let g: Vec<f64> = (0..n * n).map(|_| next()).collect();
            let r: Vec<f64> = (0..npts).map(|_| next()).collect();
            let coords: Vec<[f64; 2]> = (0..npts)
                .map(|_| {
                    [
                        (next() + 1.0) / 2.0 * (n - 1) as f64,
                        (next() + 1.0) / 2.0 * (n - 1) as f64,
                    ]
                })
                .collect();

            let mut lhs = 0.0;
            let mut injected = vec![0.0f64; n * n];
            for (p, c) in coords.iter().enumerate() {
                let st = interp_weights(c, &shape, &sp).unwrap();
                let gathered: f64 = st.corners(&strides).map(|(lin, w)| w * g[lin]).sum();
                lhs += gathered * r[p];
                for (lin, w) in st.corners(&strides) {
                    injected[lin] += w * r[p];
                }
            }
            let rhs: f64 = g.iter().zip(&injected).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                (lhs - rhs).abs() / scale <= 1e-12,
                "case {case}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        let mut set = SparsePointSet::<f64>::new("rec", 3, 2, 2);
        set.set_coord(0, &[1.25, 2.5]);
        set.set_coord(1, &[3.75, 0.5]);
        for t in 0..3 {
            for p in 0..2 {
                set.set_value(t, p, (t * 10 + p) as f64 + 0.125);
            }
        }
        set.store_csv(&path).unwrap();
        let loaded = SparsePointSet::<f64>::load_csv("rec", 2, &path).unwrap();
        assert_eq!(loaded.npoint(), 2);
        assert_eq!(loaded.ntime(), 3);
        assert_eq!(loaded.coord(1), &[3.75, 0.5]);
        assert_eq!(loaded.value(2, 1), 21.125);
    }

    #[test]
    fn stencils_fail_fast_outside_the_grid() {
        let grid = Grid::regular(&[8, 8], 0.5);
        let u = grid.function::<f64>("u", 2);
        let mut pts = SparsePointSet::<f64>::new("src", 4, 1, 2);
        pts.set_coord(0, &[5.0, 1.0]); // x beyond (8-1)*0.5
        assert!(matches!(
            pts.stencils(u.meta()),
            Err(Error::OutOfDomain(_))
        ));
    }
}
