//! C source emission.
//!
//! The emitted kernel is a verification artifact: golden-file tested for
//! byte stability and optionally compiled with a system compiler, but not
//! the execution path. Layout mirrors the in-process engine: one flat array
//! per function (time levels folded into the leading index), restrict
//! pointers, a direction-aware time loop, blocked space loops with min()
//! remainder bounds, and OpenMP pragmas on parallel and SIMD loops.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::expr::{decompose, Access, Expr, IndexExpr};
use crate::schedule::{BodyItem, LoopNest, SpaceLoop, TimeAxis};
use crate::sparse::{SparseKind, SparseOp};

#[derive(Clone, Debug)]
pub struct EmitOptions {
    pub kernel_name: String,
    /// C element type, "double" or "float".
    pub elem: String,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            kernel_name: "kernel".into(),
            elem: "double".into(),
        }
    }
}

fn lit(v: f64, elem: &str) -> String {
    let s = if v == v.trunc() && v.abs() < 1e15 {
        format!("{:.1}", v)
    } else {
        format!("{:?}", v)
    };
    if elem == "float" {
        format!("{s}f")
    } else {
        s
    }
}

/// Time-level variable name for a (offset, modulus) pair.
fn level_var(off: i32, modulus: usize) -> String {
    let o = match off.cmp(&0) {
        std::cmp::Ordering::Less => format!("m{}", -off),
        std::cmp::Ordering::Equal => "0".into(),
        std::cmp::Ordering::Greater => format!("p{off}"),
    };
    format!("t{o}_{modulus}")
}

struct Emitter<'a> {
    nest: &'a LoopNest,
    opts: &'a EmitOptions,
    out: String,
    indent: usize,
}

impl<'a> Emitter<'a> {
    fn line(&mut self, s: &str) {
        for _ in 0..self.indent {
            self.out.push_str("  ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }
    fn blank(&mut self) {
        self.out.push('\n');
    }

    fn spatial_index(&self, a: &Access, corner: Option<&BTreeMap<String, String>>) -> String {
        let strides = a.func.strides();
        let mut parts: Vec<String> = Vec::new();
        for (k, ix) in a.idx.iter().enumerate() {
            let dim = &*a.func.dims()[k];
            let stride = strides[k];
            let base = match corner {
                Some(map) => map.get(dim).cloned().unwrap_or_else(|| dim.to_string()),
                None => dim.to_string(),
            };
            let idx = match ix {
                IndexExpr::Rel(0) => base,
                IndexExpr::Rel(o) if *o > 0 => format!("({base} + {o})"),
                IndexExpr::Rel(o) => format!("({base} - {})", -o),
                IndexExpr::Abs(v) => {
                    parts.push(format!("{}", v * stride as i64));
                    continue;
                }
            };
            if stride == 1 {
                parts.push(idx);
            } else {
                parts.push(format!("{idx}*{stride}"));
            }
        }
        if parts.is_empty() {
            "0".into()
        } else {
            parts.join(" + ")
        }
    }

    fn access_ref(&self, a: &Access, corner: Option<&BTreeMap<String, String>>) -> String {
        let spatial = self.spatial_index(a, corner);
        // Inside sparse phases time offsets are relative to the advancing
        // (freshly written) level.
        let advance: i32 = corner
            .and_then(|m| m.get("@advance"))
            .map(|v| v.parse().unwrap())
            .unwrap_or(0);
        match a.time {
            Some(off) if a.func.is_time_varying() => {
                let lv = level_var(off + advance, a.func.buffer_count());
                format!("{}[{lv}*{} + {spatial}]", a.name(), a.func.points())
            }
            _ => format!("{}[{spatial}]", a.name()),
        }
    }

    /// C rendering with precedence: 0 sum, 1 product, 2 atom.
    fn c_expr(&self, e: &Expr, prec: u8, corner: Option<&BTreeMap<String, String>>) -> String {
        match e {
            Expr::Const(c) => {
                let v = c.get();
                let s = lit(v, &self.opts.elem);
                if v < 0.0 && prec > 0 {
                    format!("({s})")
                } else {
                    s
                }
            }
            Expr::Sym(s) => match corner.and_then(|m| m.get(&format!("@{}", s.name()))) {
                Some(repl) => repl.clone(),
                None => s.name().to_string(),
            },
            Expr::Access(a) => self.access_ref(a, corner),
            Expr::Pow(b, k) => {
                let x = self.c_expr(b, 2, corner);
                let chain = vec![x; *k as usize].join("*");
                format!("({chain})")
            }
            Expr::Mul(ops) => {
                let (coeff, rest): (Option<f64>, &[Expr]) = match &ops[0] {
                    Expr::Const(c) => (Some(c.get()), &ops[1..]),
                    _ => (None, &ops[..]),
                };
                let mut parts: Vec<String> = Vec::new();
                let mut neg = false;
                if let Some(c) = coeff {
                    if c == -1.0 {
                        neg = true;
                    } else {
                        parts.push(lit(c.abs(), &self.opts.elem));
                        neg = c < 0.0;
                    }
                }
                for f in rest {
                    parts.push(self.c_expr(f, 2, corner));
                }
                let body = parts.join("*");
                let s = if neg { format!("-{body}") } else { body };
                if prec > 1 || (neg && prec > 0) {
                    format!("({s})")
                } else {
                    s
                }
            }
            Expr::Div(n, d) => {
                let np = if matches!(**n, Expr::Mul(_)) { 1 } else { 2 };
                let s = format!(
                    "{}/{}",
                    self.c_expr(n, np, corner),
                    self.c_expr(d, 2, corner)
                );
                if prec > 1 {
                    format!("({s})")
                } else {
                    s
                }
            }
            Expr::Add(ops) => {
                let mut s = self.c_expr(&ops[0], 1, corner);
                for op in &ops[1..] {
                    let (c, key) = decompose(op);
                    if c < 0.0 {
                        let pos = crate::expr::recompose(-c, key.unwrap_or_else(|| Expr::num(1.0)));
                        write!(s, " - {}", self.c_expr(&pos, 1, corner)).unwrap();
                    } else {
                        write!(s, " + {}", self.c_expr(op, 1, corner)).unwrap();
                    }
                }
                if prec > 0 {
                    format!("({s})")
                } else {
                    s
                }
            }
            Expr::Deriv(_) => panic!("cannot emit an unexpanded derivative"),
        }
    }

    fn open_loop(&mut self, l: &SpaceLoop, parallel: bool, simd: bool, nontemporal: bool) -> usize {
        let mut opened = 0;
        let pragma = |parallel: bool, simd: bool| match (parallel, simd) {
            (true, true) => Some("#pragma omp parallel for simd schedule(static)".to_string()),
            (true, false) => Some("#pragma omp parallel for schedule(static)".to_string()),
            (false, true) => Some("#pragma omp simd".to_string()),
            (false, false) => None,
        };
        if l.block > 0 {
            if let Some(pr) = pragma(parallel, false) {
                self.line(&pr);
            }
            self.line(&format!(
                "for (long {0}b = {1}; {0}b < {2}; {0}b += {3})",
                l.dim, l.lo, l.hi, l.block
            ));
            self.line("{");
            self.indent += 1;
            opened += 1;
            if simd {
                if nontemporal {
                    self.line("#pragma vector nontemporal");
                }
                self.line("#pragma omp simd");
            }
            self.line(&format!(
                "for (long {0} = {0}b; {0} < SF_MIN({0}b + {1}, {2}); {0} += 1)",
                l.dim, l.block, l.hi
            ));
        } else {
            if simd && nontemporal {
                self.line("#pragma vector nontemporal");
            }
            if let Some(pr) = pragma(parallel, simd) {
                self.line(&pr);
            }
            self.line(&format!(
                "for (long {0} = {1}; {0} < {2}; {0} += 1)",
                l.dim, l.lo, l.hi
            ));
        }
        self.line("{");
        self.indent += 1;
        opened + 1
    }

    fn close(&mut self, n: usize) {
        for _ in 0..n {
            self.indent -= 1;
            self.line("}");
        }
    }

    fn emit_time_level_vars(&mut self) {
        let mut pairs: std::collections::BTreeSet<(i32, usize)> = std::collections::BTreeSet::new();
        fn note_access(pairs: &mut std::collections::BTreeSet<(i32, usize)>, a: &Access) {
            if a.func.is_time_varying() {
                if let Some(off) = a.time {
                    pairs.insert((off, a.func.buffer_count()));
                }
            }
        }
        for item in &self.nest.items {
            match item {
                BodyItem::Stencil(st) => {
                    for (_, e) in &st.temps {
                        e.for_each_access(&mut |a| note_access(&mut pairs, a));
                    }
                    for (lhs, rhs) in &st.assigns {
                        note_access(&mut pairs, lhs);
                        rhs.for_each_access(&mut |a| note_access(&mut pairs, a));
                    }
                }
                BodyItem::Sparse(op) => {
                    let dir = self
                        .nest
                        .time
                        .as_ref()
                        .map(|t| t.direction.advance())
                        .unwrap_or(0);
                    if op.field.is_time_varying() {
                        pairs.insert((dir, op.field.buffer_count()));
                    }
                    op.expr.for_each_access(&mut |a| {
                        if a.func.is_time_varying() {
                            pairs.insert(
                                (dir + a.time.unwrap_or(0), a.func.buffer_count()),
                            );
                        }
                    });
                }
            }
        }
        for (off, m) in pairs {
            let expr = match off.cmp(&0) {
                std::cmp::Ordering::Equal => format!("sf_mod(t, {m})"),
                std::cmp::Ordering::Greater => format!("sf_mod(t + {off}, {m})"),
                std::cmp::Ordering::Less => format!("sf_mod(t - {}, {m})", -off),
            };
            self.line(&format!("const long {} = {expr};", level_var(off, m)));
        }
    }

    fn emit_sparse(&mut self, op: &SparseOp) {
        let elem = self.opts.elem.clone();
        let meta = &op.field;
        let ndim = op.points.ndim;
        let np = op.points.npoint;
        let name = &*op.points.name;
        let verb = match op.kind {
            SparseKind::Interpolate => "interpolate",
            SparseKind::Inject => "inject",
        };
        self.line(&format!("/* {verb}: {name} <-> {} */", meta.name()));
        self.line(&format!("for (long p = 0; p < {np}; p += 1)"));
        self.line("{");
        self.indent += 1;

        let dims: Vec<String> = meta.dims().iter().map(|d| d.to_string()).collect();
        for (d, dim) in dims.iter().enumerate() {
            let sp = meta.spacing()[d];
            let extent = meta.shape()[d];
            self.line(&format!(
                "const {elem} g{dim} = {name}_coords[p*{ndim} + {d}]/{};",
                lit(sp, &elem)
            ));
            self.line(&format!("long i{dim} = (long)g{dim};"));
            self.line(&format!(
                "if (i{dim} > {max}) i{dim} = {max};",
                max = extent - 2
            ));
            self.line(&format!("const {elem} f{dim} = g{dim} - ({elem})i{dim};"));
        }

        // Corner weights in binary corner order.
        for corner in 0..(1usize << ndim) {
            let mut w = Vec::new();
            let mut label = String::new();
            for (d, dim) in dims.iter().enumerate() {
                let bit = (corner >> (ndim - 1 - d)) & 1;
                label.push_str(&bit.to_string());
                w.push(if bit == 1 {
                    format!("f{dim}")
                } else {
                    format!("(1.0{} - f{dim})", if elem == "float" { "f" } else { "" })
                });
            }
            self.line(&format!("const {elem} w{label} = {};", w.join("*")));
        }

        let lvl = if meta.is_time_varying() {
            let dir = self
                .nest
                .time
                .as_ref()
                .map(|t| t.direction.advance())
                .unwrap_or(0);
            format!("{}*{} + ", level_var(dir, meta.buffer_count()), meta.points())
        } else {
            String::new()
        };

        let mut acc_terms: Vec<String> = Vec::new();
        for corner in 0..(1usize << ndim) {
            let mut label = String::new();
            let mut map: BTreeMap<String, String> = BTreeMap::new();
            let row = if self.nest.time.is_some() { "t" } else { "0" };
            map.insert(
                format!("@{name}"),
                format!("{name}_data[{row}*{np} + p]"),
            );
            let advance = if self.nest.time.is_some() {
                self.nest
                    .time
                    .as_ref()
                    .map(|t| t.direction.advance())
                    .unwrap_or(0)
            } else {
                0
            };
            map.insert("@advance".into(), advance.to_string());
            let mut spatial: Vec<String> = Vec::new();
            let strides = meta.strides();
            for (d, dim) in dims.iter().enumerate() {
                let bit = (corner >> (ndim - 1 - d)) & 1;
                label.push_str(&bit.to_string());
                let pos = if bit == 1 {
                    format!("(i{dim} + 1)")
                } else {
                    format!("i{dim}")
                };
                map.insert(dim.clone(), pos.clone());
                if strides[d] == 1 {
                    spatial.push(pos);
                } else {
                    spatial.push(format!("{pos}*{}", strides[d]));
                }
            }
            let cell = format!("{lvl}{}", spatial.join(" + "));
            let value = self.c_expr(&op.expr, 1, Some(&map));
            match op.kind {
                SparseKind::Interpolate => {
                    acc_terms.push(format!("w{label}*{value}"));
                }
                SparseKind::Inject => {
                    self.line(&format!(
                        "{}[{cell}] += w{label}*{value};",
                        meta.name()
                    ));
                }
            }
        }
        if op.kind == SparseKind::Interpolate {
            self.line(&format!(
                "{name}_data[t*{np} + p] = {};",
                acc_terms.join(" + ")
            ));
        }
        self.indent -= 1;
        self.line("}");
    }
}

/// Render a scheduled nest as a self-contained C translation unit.
/// Byte-identical output for identical input.
pub fn emit_c(nest: &LoopNest, opts: &EmitOptions) -> String {
    let mut written: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut fields: BTreeMap<String, std::sync::Arc<crate::grid::FnMeta>> = BTreeMap::new();
    let mut scalars: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut point_sets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let scratch: std::collections::BTreeSet<String> = nest
        .hoisted_fields
        .iter()
        .map(|hf| hf.meta.name().to_string())
        .collect();
    let temp_names: std::collections::BTreeSet<String> = nest
        .items
        .iter()
        .filter_map(|i| match i {
            BodyItem::Stencil(st) => Some(st.temps.iter().map(|(s, _)| s.name().to_string())),
            _ => None,
        })
        .flatten()
        .chain(nest.hoisted_scalars.iter().map(|(s, _)| s.name().to_string()))
        .collect();

    {
        fn note_expr(
            fields: &mut BTreeMap<String, std::sync::Arc<crate::grid::FnMeta>>,
            scalars: &mut std::collections::BTreeSet<String>,
            temp_names: &std::collections::BTreeSet<String>,
            e: &Expr,
            point_sym: Option<&str>,
        ) {
            e.for_each_access(&mut |a| {
                fields.insert(a.name().to_string(), a.func.clone());
            });
            for s in crate::expr::free_symbols(e).scalars {
                let n = s.name().to_string();
                if !temp_names.contains(&n) && Some(n.as_str()) != point_sym {
                    scalars.insert(n);
                }
            }
        }
        for hf in &nest.hoisted_fields {
            note_expr(&mut fields, &mut scalars, &temp_names, &hf.expr, None);
        }
        for (_, e) in &nest.hoisted_scalars {
            note_expr(&mut fields, &mut scalars, &temp_names, e, None);
        }
        for item in &nest.items {
            match item {
                BodyItem::Stencil(st) => {
                    for (_, e) in &st.temps {
                        note_expr(&mut fields, &mut scalars, &temp_names, e, None);
                    }
                    for (lhs, rhs) in &st.assigns {
                        fields.insert(lhs.name().to_string(), lhs.func.clone());
                        written.insert(lhs.name().to_string());
                        note_expr(&mut fields, &mut scalars, &temp_names, rhs, None);
                    }
                }
                BodyItem::Sparse(op) => {
                    fields.insert(op.field.name().to_string(), op.field.clone());
                    point_sets
                        .insert(op.points.name.to_string(), (op.points.npoint, op.points.ndim));
                    if op.kind == SparseKind::Inject {
                        written.insert(op.field.name().to_string());
                    }
                    note_expr(
                        &mut fields,
                        &mut scalars,
                        &temp_names,
                        &op.expr,
                        Some(&op.points.name),
                    );
                }
            }
        }
    }

    let elem = opts.elem.clone();
    let mut params: Vec<String> = Vec::new();
    for (name, meta) in &fields {
        if scratch.contains(name) {
            continue;
        }
        let qual = if written.contains(name) { "" } else { "const " };
        let total = meta.points() * meta.buffer_count();
        params.push(format!("{qual}{elem} *restrict {name} /* [{total}] */"));
    }
    for (name, (np, nd)) in &point_sets {
        params.push(format!(
            "const {elem} *restrict {name}_coords /* [{np} x {nd}] */"
        ));
        params.push(format!("{elem} *restrict {name}_data"));
    }
    for s in &scalars {
        params.push(format!("const {elem} {s}"));
    }
    if nest.time.is_some() {
        params.push("const long t_start".into());
        params.push("const long t_end".into());
    }

    let mut em = Emitter {
        nest,
        opts,
        out: String::new(),
        indent: 0,
    };
    em.line(&format!("/* {}: generated stencil kernel */", opts.kernel_name));
    em.line("#include <stddef.h>");
    em.blank();
    em.line("#define SF_MIN(a, b) ((a) < (b) ? (a) : (b))");
    em.blank();
    em.line("static inline long sf_mod(long a, long b)");
    em.line("{");
    em.indent += 1;
    em.line("long r = a % b;");
    em.line("return r < 0 ? r + b : r;");
    em.indent -= 1;
    em.line("}");
    em.blank();
    em.line(&format!("void {}({})", opts.kernel_name, params.join(", ")));
    em.line("{");
    em.indent += 1;

    if !nest.hoisted_scalars.is_empty() {
        em.line("/* hoisted scalars */");
        for (sym, e) in &nest.hoisted_scalars {
            let v = em.c_expr(e, 0, None);
            em.line(&format!("const {elem} {} = {v};", sym.name()));
        }
        em.blank();
    }

    if !nest.hoisted_fields.is_empty() {
        em.line("/* hoisted time-invariant precomputations */");
        for hf in &nest.hoisted_fields {
            em.line(&format!(
                "static {elem} {}[{}] __attribute__((aligned(64)));",
                hf.meta.name(),
                hf.meta.points()
            ));
        }
        for hf in &nest.hoisted_fields {
            let mut opened = 0;
            for l in &hf.loops {
                opened += em.open_loop(l, false, false, false);
            }
            let center = Access {
                func: hf.meta.clone(),
                time: None,
                idx: vec![IndexExpr::Rel(0); hf.meta.dims().len()],
            };
            let lhs = em.access_ref(&center, None);
            let rhs = em.c_expr(&hf.expr, 0, None);
            em.line(&format!("{lhs} = {rhs};"));
            em.close(opened);
        }
        em.blank();
    }

    let mut time_opened = 0;
    if let Some(t) = &nest.time {
        match t.direction {
            TimeAxis::Forward => em.line("for (long t = t_start; t < t_end; t += 1)"),
            TimeAxis::Backward => em.line("for (long t = t_end - 1; t >= t_start; t -= 1)"),
        }
        em.line("{");
        em.indent += 1;
        time_opened = 1;
        em.emit_time_level_vars();
    }

    for item in &nest.items {
        match item {
            BodyItem::Stencil(st) => {
                let mut opened = 0;
                let nloops = st.loops.len();
                for (i, l) in st.loops.iter().enumerate() {
                    let parallel = st.parallel && i == 0;
                    let simd = st.simd && i + 1 == nloops;
                    opened += em.open_loop(l, parallel, simd, st.nontemporal);
                }
                for (sym, e) in &st.temps {
                    let v = em.c_expr(e, 0, None);
                    em.line(&format!("const {elem} {} = {v};", sym.name()));
                }
                for (lhs, rhs) in &st.assigns {
                    let l = em.access_ref(lhs, None);
                    let r = em.c_expr(rhs, 0, None);
                    em.line(&format!("{l} = {r};"));
                }
                em.close(opened);
            }
            BodyItem::Sparse(op) => em.emit_sparse(op),
        }
    }

    em.close(time_opened);
    em.indent -= 1;
    em.line("}");
    em.out
}
