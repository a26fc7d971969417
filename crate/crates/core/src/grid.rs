//! Cartesian grids and grid functions.
//!
//! A [`GridFunction`] couples a symbolic handle (name, halo, time order) with
//! the data buffers the kernels run on. Time-varying functions own
//! `time_order + 1` cyclic buffers; execution indexes them modulo the buffer
//! count. The symbolic side lives in an immutable [`FnMeta`] shared by every
//! access expression referencing the function.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::expr::{Access, Axis, Deriv, Expr, IndexExpr, Side};

/// Structured cartesian grid: ordered space dimensions, points per dimension
/// and physical spacing per dimension.
#[derive(Clone, Debug)]
pub struct Grid {
    dims: Vec<Arc<str>>,
    shape: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(dims: &[&str], shape: &[usize], spacing: &[f64]) -> Grid {
        assert_eq!(dims.len(), shape.len());
        assert_eq!(dims.len(), spacing.len());
        assert!(shape.iter().all(|&n| n >= 3), "grid extents must be >= 3");
        assert!(spacing.iter().all(|&h| h > 0.0), "spacing must be positive");
        Grid {
            dims: dims.iter().map(|d| Arc::from(*d)).collect(),
            shape: shape.to_vec(),
            spacing: spacing.to_vec(),
        }
    }

    /// Square 2D/3D grid with one shared spacing.
    pub fn regular(shape: &[usize], spacing: f64) -> Grid {
        let names = ["x", "y", "z"];
        assert!(shape.len() <= 3, "regular grids support up to 3 dimensions");
        Grid::new(
            &names[..shape.len()],
            shape,
            &vec![spacing; shape.len()],
        )
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }
    pub fn dims(&self) -> &[Arc<str>] {
        &self.dims
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Dense function over all grid dimensions.
    pub fn function<T: Elem>(&self, name: &str, space_order: u32) -> GridFunction<T> {
        GridFunction::new(self, name, self.dims.clone(), false, 0, space_order)
    }

    /// Time-varying function over all grid dimensions.
    pub fn time_function<T: Elem>(
        &self,
        name: &str,
        time_order: u32,
        space_order: u32,
    ) -> GridFunction<T> {
        assert!(time_order >= 1);
        GridFunction::new(self, name, self.dims.clone(), true, time_order, space_order)
    }

    /// Dense function over a subset of the grid dimensions (utility fields
    /// such as a boundary profile varying along one axis).
    pub fn function_on<T: Elem>(&self, name: &str, dims: &[&str]) -> GridFunction<T> {
        let sel: Vec<Arc<str>> = dims
            .iter()
            .map(|want| {
                self.dims
                    .iter()
                    .find(|d| &***d == *want)
                    .unwrap_or_else(|| panic!("grid has no dimension {want}"))
                    .clone()
            })
            .collect();
        GridFunction::new(self, name, sel, false, 0, 2)
    }
}

/// Immutable symbolic metadata of a grid function. Identity (equality,
/// ordering, hashing) is by name: one kernel never mixes two distinct
/// functions under the same name.
pub struct FnMeta {
    name: Arc<str>,
    dims: Vec<Arc<str>>,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    time_varying: bool,
    time_order: u32,
    space_order: u32,
}

impl FnMeta {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn name_arc(&self) -> Arc<str> {
        self.name.clone()
    }
    pub fn dims(&self) -> &[Arc<str>] {
        &self.dims
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn is_time_varying(&self) -> bool {
        self.time_varying
    }
    pub fn time_order(&self) -> u32 {
        self.time_order
    }
    pub fn space_order(&self) -> u32 {
        self.space_order
    }
    pub fn halo(&self) -> u32 {
        self.space_order / 2
    }
    /// Number of data buffers (cyclic time levels).
    pub fn buffer_count(&self) -> usize {
        if self.time_varying {
            self.time_order as usize + 1
        } else {
            1
        }
    }
    pub fn points(&self) -> usize {
        self.shape.iter().product()
    }
    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Metadata for an internal scratch field (hoisted precomputations).
    pub fn scratch(name: &str, like: &FnMeta) -> Arc<FnMeta> {
        Arc::new(FnMeta {
            name: Arc::from(name),
            dims: like.dims.clone(),
            shape: like.shape.clone(),
            spacing: like.spacing.clone(),
            time_varying: false,
            time_order: 0,
            space_order: 0,
        })
    }
}

impl PartialEq for FnMeta {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}
impl Eq for FnMeta {}
impl PartialOrd for FnMeta {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for FnMeta {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name.cmp(&other.name)
    }
}
impl std::hash::Hash for FnMeta {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.name.hash(state);
    }
}
impl fmt::Debug for FnMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnMeta({})", self.name)
    }
}

/// A named field on a grid, optionally time-varying, owning its data.
pub struct GridFunction<T: Elem> {
    meta: Arc<FnMeta>,
    buffers: Vec<Vec<T>>,
}

impl<T: Elem> GridFunction<T> {
    fn new(
        grid: &Grid,
        name: &str,
        dims: Vec<Arc<str>>,
        time_varying: bool,
        time_order: u32,
        space_order: u32,
    ) -> GridFunction<T> {
        assert!(
            space_order >= 2 && space_order % 2 == 0,
            "space_order must be even and >= 2"
        );
        let shape: Vec<usize> = dims
            .iter()
            .map(|d| {
                let i = grid.dims.iter().position(|g| g == d).unwrap();
                grid.shape[i]
            })
            .collect();
        let spacing: Vec<f64> = dims
            .iter()
            .map(|d| {
                let i = grid.dims.iter().position(|g| g == d).unwrap();
                grid.spacing[i]
            })
            .collect();
        let meta = Arc::new(FnMeta {
            name: Arc::from(name),
            dims,
            shape,
            spacing,
            time_varying,
            time_order,
            space_order,
        });
        let n = meta.points();
        let buffers = (0..meta.buffer_count()).map(|_| vec![T::ZERO; n]).collect();
        GridFunction { meta, buffers }
    }

    pub fn meta(&self) -> &Arc<FnMeta> {
        &self.meta
    }
    pub fn name(&self) -> &str {
        self.meta.name()
    }

    pub fn buffer(&self, level: usize) -> &[T] {
        &self.buffers[level]
    }
    pub fn buffer_mut(&mut self, level: usize) -> &mut [T] {
        &mut self.buffers[level]
    }
    pub fn buffers_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.buffers
    }
    pub fn fill(&mut self, v: T) {
        for b in &mut self.buffers {
            b.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn idx_of(&self, idx: &[usize]) -> usize {
        let strides = self.meta.strides();
        idx.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    /// Set every point of every buffer from a coordinate-based function.
    pub fn set_from(&mut self, mut f: impl FnMut(&[f64]) -> T) {
        let shape = self.meta.shape().to_vec();
        let spacing = self.meta.spacing().to_vec();
        let n = self.meta.points();
        let strides = self.meta.strides();
        let mut coords = vec![0.0; shape.len()];
        for lin in 0..n {
            for (d, s) in strides.iter().enumerate() {
                coords[d] = ((lin / s) % shape[d]) as f64 * spacing[d];
            }
            let v = f(&coords);
            for b in &mut self.buffers {
                b[lin] = v;
            }
        }
    }

    // --- symbolic builders -------------------------------------------------

    /// Access at the iteration point (`u(t, x, y)` / `p(x, y)`).
    pub fn at(&self) -> Expr {
        Expr::Access(self.center())
    }

    fn center(&self) -> Access {
        Access {
            func: self.meta.clone(),
            time: self.meta.time_varying.then_some(0),
            idx: vec![IndexExpr::Rel(0); self.meta.dims.len()],
        }
    }

    /// Low-level indexed access (`p[x, 0]`, `p[x - 1, y]`, ...).
    pub fn idx(&self, idx: &[IndexExpr]) -> Expr {
        assert_eq!(idx.len(), self.meta.dims.len());
        Expr::Access(Access {
            func: self.meta.clone(),
            time: self.meta.time_varying.then_some(0),
            idx: idx.to_vec(),
        })
    }

    /// Access shifted in time by `steps` grid steps.
    pub fn time_shift(&self, steps: i32) -> Result<Expr> {
        if !self.meta.time_varying {
            return Err(Error::NotTimeVarying(self.name().into()));
        }
        if steps.unsigned_abs() > self.meta.time_order {
            return Err(Error::HaloExceeded {
                func: self.name().into(),
                offset: steps as i64,
                halo: self.meta.time_order as i64,
            });
        }
        let mut a = self.center();
        a.time = Some(steps);
        Ok(Expr::Access(a))
    }

    /// The furthest forward stencil point in time (`u(t + s, ...)`).
    pub fn forward(&self) -> Expr {
        self.time_shift(1).expect("forward needs a time-varying function")
    }
    pub fn forward_access(&self) -> Access {
        match self.forward() {
            Expr::Access(a) => a,
            _ => unreachable!(),
        }
    }

    /// The furthest backward stencil point in time (`u(t - s, ...)`).
    pub fn backward(&self) -> Expr {
        self.time_shift(-1).expect("backward needs a time-varying function")
    }
    pub fn backward_access(&self) -> Access {
        match self.backward() {
            Expr::Access(a) => a,
            _ => unreachable!(),
        }
    }

    fn deriv(&self, axis: Axis, order: u32, side: Side, accuracy: u32) -> Expr {
        Expr::Deriv(Deriv {
            arg: Box::new(self.at()),
            axis,
            order,
            side,
            accuracy,
        })
    }

    /// Forward derivative in time, first order accurate.
    pub fn dt(&self) -> Expr {
        self.deriv(Axis::Time, 1, Side::Right, 1)
    }
    /// Second centered derivative in time.
    pub fn dt2(&self) -> Expr {
        self.deriv(Axis::Time, 2, Side::Centered, 2)
    }
    /// Backward (left) first derivative in x.
    pub fn dxl(&self) -> Expr {
        self.deriv(Axis::Space(0), 1, Side::Left, 1)
    }
    /// Backward (left) first derivative in y.
    pub fn dyl(&self) -> Expr {
        self.deriv(Axis::Space(1), 1, Side::Left, 1)
    }
    /// Centered first derivative in a space dimension at the function's
    /// space order.
    pub fn dc(&self, dim: usize) -> Expr {
        self.deriv(Axis::Space(dim), 1, Side::Centered, self.meta.space_order)
    }
    /// Second centered derivative in x at the function's space order.
    pub fn dx2(&self) -> Expr {
        self.deriv(Axis::Space(0), 2, Side::Centered, self.meta.space_order)
    }
    /// Second centered derivative in y at the function's space order.
    pub fn dy2(&self) -> Expr {
        self.deriv(Axis::Space(1), 2, Side::Centered, self.meta.space_order)
    }
    /// Sum of second centered derivatives over all space dimensions.
    pub fn laplace(&self) -> Expr {
        Expr::Add(
            (0..self.meta.dims.len())
                .map(|d| self.deriv(Axis::Space(d), 2, Side::Centered, self.meta.space_order))
                .collect(),
        )
    }

    // --- I/O ----------------------------------------------------------------

    /// Dump one time level as flat little-endian binary, row-major.
    pub fn dump_binary(&self, level: usize, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.buffers[level].len() * T::BYTES);
        for v in &self.buffers[level] {
            v.write_le(&mut bytes);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Load one time level from flat binary written by `dump_binary`.
    pub fn load_binary(&mut self, level: usize, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let expect = self.buffers[level].len() * T::BYTES;
        if bytes.len() != expect {
            return Err(Error::Parse(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                expect,
                bytes.len()
            )));
        }
        for (i, v) in self.buffers[level].iter_mut().enumerate() {
            *v = T::read_le(&bytes[i * T::BYTES..]);
        }
        Ok(())
    }

    /// Dump one time level as CSV, one line per row of the innermost
    /// dimension.
    pub fn dump_csv(&self, level: usize, path: &Path) -> Result<()> {
        let shape = self.meta.shape();
        let cols = *shape.last().unwrap();
        let rows = self.meta.points() / cols;
        let buf = &self.buffers[level];
        let mut out = String::new();
        for r in 0..rows {
            let line: Vec<String> = (0..cols)
                .map(|c| format!("{:?}", buf[r * cols + c].to_f64()))
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load one time level from CSV written by `dump_csv`.
    pub fn load_csv(&mut self, level: usize, path: &Path) -> Result<()> {
        let shape = self.meta.shape().to_vec();
        let cols = *shape.last().unwrap();
        let file = std::fs::File::open(path)?;
        let mut values = Vec::with_capacity(self.meta.points());
        for line in std::io::BufReader::new(file).lines() {
            for field in line?.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad float {field:?}: {e}")))?;
                values.push(T::from_f64(v));
            }
        }
        if values.len() != self.meta.points() {
            return Err(Error::Parse(format!(
                "expected {} values ({} per row), found {}",
                self.meta.points(),
                cols,
                values.len()
            )));
        }
        self.buffers[level].copy_from_slice(&values);
        Ok(())
    }
}
