//! Modelling layer for LMI problems: matrix-valued decision variables, affine matrix
//! expressions, symmetric block constraints and linear equalities, lowered onto
//! [`crate::sdp`].
//!
//! Strictness is handled by margin maximization. Every constraint is tagged
//! [`Kind::Strict`], [`Kind::NonStrict`] or [`Kind::Bound`]; the solve modes in
//! [`Mode`] decide which tags receive the margin `t I`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matkit::{Mat, SymMat};
use crate::sdp::{self, LpRows, PsdBlock, SdpData, SdpOptions, SdpStatus, SparseSym};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Sym(usize),
    Mat(usize, usize),
}

/// Handle to a decision variable registered with an [`LmiProblem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    start: usize,
    shape: Shape,
}

impl Var {
    pub fn rows(&self) -> usize {
        match self.shape {
            Shape::Scalar => 1,
            Shape::Sym(n) => n,
            Shape::Mat(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape {
            Shape::Scalar => 1,
            Shape::Sym(n) => n,
            Shape::Mat(_, c) => c,
        }
    }

    pub fn len(&self) -> usize {
        match self.shape {
            Shape::Scalar => 1,
            Shape::Sym(n) => n * (n + 1) / 2,
            Shape::Mat(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global scalar index of entry `(a, b)`.
    pub fn index(&self, a: usize, b: usize) -> usize {
        match self.shape {
            Shape::Scalar => self.start,
            Shape::Sym(n) => {
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                self.start + sym_packed(n, a, b)
            }
            Shape::Mat(r, _) => self.start + a + b * r,
        }
    }

    /// Enumerates `(a, b, index)` over stored entries (upper triangle for symmetric).
    fn entries(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        match self.shape {
            Shape::Scalar => out.push((0, 0, self.start)),
            Shape::Sym(n) => {
                for a in 0..n {
                    for b in a..n {
                        out.push((a, b, self.index(a, b)));
                    }
                }
            }
            Shape::Mat(r, c) => {
                for b in 0..c {
                    for a in 0..r {
                        out.push((a, b, self.index(a, b)));
                    }
                }
            }
        }
        out
    }
}

fn sym_packed(n: usize, a: usize, b: usize) -> usize {
    // Row-major upper triangle: row a starts at a*n - a*(a-1)/2.
    a * n - a * a.saturating_sub(1) / 2 + (b - a)
}

#[derive(Clone, Debug)]
enum Term {
    Const(Mat),
    /// `scale * L * op(V) * R`, with `op` the transpose when `transpose` is set.
    Lin {
        var: Var,
        left: Option<Mat>,
        right: Option<Mat>,
        transpose: bool,
        scale: f64,
    },
    /// `v * M` for a scalar variable `v`.
    ScalarMul { var: Var, mat: Mat },
    /// `scale * G V Gᵀ` for symmetric `V`; lowered through the block dictionary.
    Congruence { var: Var, g: Mat, scale: f64 },
}

/// Affine matrix expression in the decision variables.
#[derive(Clone, Debug)]
pub struct Expr {
    rows: usize,
    cols: usize,
    terms: Vec<Term>,
}

impl Expr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Expr {
            rows,
            cols,
            terms: vec![],
        }
    }

    pub fn constant(m: Mat) -> Self {
        Expr {
            rows: m.nrows(),
            cols: m.ncols(),
            terms: vec![Term::Const(m)],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(Mat::identity(n, n))
    }

    pub fn var(v: Var) -> Self {
        Expr {
            rows: v.rows(),
            cols: v.cols(),
            terms: vec![Term::Lin {
                var: v,
                left: None,
                right: None,
                transpose: false,
                scale: 1.0,
            }],
        }
    }

    /// `v * M` for a scalar variable `v`.
    pub fn scalar(v: Var, m: &Mat) -> Self {
        assert_eq!(v.shape, Shape::Scalar, "Expr::scalar needs a scalar variable");
        Expr {
            rows: m.nrows(),
            cols: m.ncols(),
            terms: vec![Term::ScalarMul {
                var: v,
                mat: m.clone(),
            }],
        }
    }

    /// `G V Gᵀ` for a symmetric variable `V`.
    pub fn congruence(g: &Mat, v: Var) -> Self {
        assert!(matches!(v.shape, Shape::Sym(n) if n == g.ncols()), "congruence shape");
        Expr {
            rows: g.nrows(),
            cols: g.nrows(),
            terms: vec![Term::Congruence {
                var: v,
                g: g.clone(),
                scale: 1.0,
            }],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn add(mut self, other: Expr) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "Expr::add shape");
        self.terms.extend(other.terms);
        self
    }

    pub fn sub(self, other: Expr) -> Self {
        self.add(other.scale(-1.0))
    }

    pub fn scale(mut self, s: f64) -> Self {
        for t in &mut self.terms {
            match t {
                Term::Const(m) | Term::ScalarMul { mat: m, .. } => *m *= s,
                Term::Lin { scale, .. } | Term::Congruence { scale, .. } => *scale *= s,
            }
        }
        self
    }

    /// `A * self`.
    pub fn lmul(self, a: &Mat) -> Self {
        assert_eq!(a.ncols(), self.rows, "Expr::lmul shape");
        let terms = self
            .terms
            .into_iter()
            .map(|t| match t {
                Term::Const(m) => Term::Const(a * m),
                Term::ScalarMul { var, mat } => Term::ScalarMul { var, mat: a * mat },
                Term::Lin {
                    var,
                    left,
                    right,
                    transpose,
                    scale,
                } => Term::Lin {
                    var,
                    left: Some(match left {
                        Some(l) => a * l,
                        None => a.clone(),
                    }),
                    right,
                    transpose,
                    scale,
                },
                Term::Congruence { var, g, scale } => Term::Lin {
                    var,
                    left: Some(a * &g),
                    right: Some(g.transpose()),
                    transpose: false,
                    scale,
                },
            })
            .collect();
        Expr {
            rows: a.nrows(),
            cols: self.cols,
            terms,
        }
    }

    /// `self * B`.
    pub fn rmul(self, b: &Mat) -> Self {
        assert_eq!(b.nrows(), self.cols, "Expr::rmul shape");
        let terms = self
            .terms
            .into_iter()
            .map(|t| match t {
                Term::Const(m) => Term::Const(m * b),
                Term::ScalarMul { var, mat } => Term::ScalarMul { var, mat: mat * b },
                Term::Lin {
                    var,
                    left,
                    right,
                    transpose,
                    scale,
                } => Term::Lin {
                    var,
                    left,
                    right: Some(match right {
                        Some(r) => r * b,
                        None => b.clone(),
                    }),
                    transpose,
                    scale,
                },
                Term::Congruence { var, g, scale } => Term::Lin {
                    var,
                    left: Some(g.clone()),
                    right: Some(g.transpose() * b),
                    transpose: false,
                    scale,
                },
            })
            .collect();
        Expr {
            rows: self.rows,
            cols: b.ncols(),
            terms,
        }
    }

    /// `A self Aᵀ`; congruence terms stay in congruence form.
    pub fn congruence_by(self, a: &Mat) -> Self {
        assert_eq!(a.ncols(), self.rows, "Expr::congruence_by shape");
        assert_eq!(self.rows, self.cols, "Expr::congruence_by needs a square expression");
        let at = a.transpose();
        let terms = self
            .terms
            .into_iter()
            .map(|t| match t {
                Term::Const(m) => Term::Const(a * m * &at),
                Term::ScalarMul { var, mat } => Term::ScalarMul { var, mat: a * mat * &at },
                Term::Lin {
                    var,
                    left,
                    right,
                    transpose,
                    scale,
                } => Term::Lin {
                    var,
                    left: Some(match left {
                        Some(l) => a * l,
                        None => a.clone(),
                    }),
                    right: Some(match right {
                        Some(r) => r * &at,
                        None => at.clone(),
                    }),
                    transpose,
                    scale,
                },
                Term::Congruence { var, g, scale } => Term::Congruence { var, g: a * g, scale },
            })
            .collect();
        Expr {
            rows: a.nrows(),
            cols: a.nrows(),
            terms,
        }
    }

    pub fn t(self) -> Self {
        let terms = self
            .terms
            .into_iter()
            .map(|t| match t {
                Term::Const(m) => Term::Const(m.transpose()),
                Term::ScalarMul { var, mat } => Term::ScalarMul {
                    var,
                    mat: mat.transpose(),
                },
                Term::Lin {
                    var,
                    left,
                    right,
                    transpose,
                    scale,
                } => Term::Lin {
                    var,
                    left: right.map(|r| r.transpose()),
                    right: left.map(|l| l.transpose()),
                    transpose: !transpose,
                    scale,
                },
                c @ Term::Congruence { .. } => c,
            })
            .collect();
        Expr {
            rows: self.cols,
            cols: self.rows,
            terms,
        }
    }

    /// Evaluates the expression at the given scalar values.
    pub fn eval(&self, y: &[f64]) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        for t in &self.terms {
            match t {
                Term::Const(m) => out += m,
                Term::ScalarMul { var, mat } => out += mat * y[var.start],
                Term::Lin {
                    var,
                    left,
                    right,
                    transpose,
                    scale,
                } => {
                    let mut v = var_value(*var, y);
                    if *transpose {
                        v = v.transpose();
                    }
                    if let Some(l) = left {
                        v = l * v;
                    }
                    if let Some(r) = right {
                        v *= r;
                    }
                    out += v * *scale;
                }
                Term::Congruence { var, g, scale } => {
                    out += g * var_value(*var, y) * g.transpose() * *scale;
                }
            }
        }
        out
    }

    /// Per-entry derivative contributions `(p, q, index, value)`; constants go to `konst`.
    fn linear_parts(&self, konst: &mut Mat, out: &mut Vec<(usize, usize, usize, f64)>) {
        for t in &self.terms {
            match t {
                Term::Const(m) => *konst += m,
                Term::ScalarMul { var, mat } => {
                    for q in 0..mat.ncols() {
                        for p in 0..mat.nrows() {
                            let v = mat[(p, q)];
                            if v != 0.0 {
                                out.push((p, q, var.start, v));
                            }
                        }
                    }
                }
                Term::Lin {
                    var,
                    left,
                    right,
                    transpose,
                    scale,
                } => {
                    let is_sym = matches!(var.shape, Shape::Sym(_));
                    for (a, b, idx) in var.entries() {
                        let mut pairs = vec![(a, b)];
                        if is_sym && a != b {
                            pairs.push((b, a));
                        }
                        for (va, vb) in pairs {
                            // Entry (va, vb) of V sits at (vb, va) of Vᵀ.
                            let (ra, cb) = if *transpose { (vb, va) } else { (va, vb) };
                            let lcol = column(left.as_ref(), ra, self.rows);
                            let rrow = row(right.as_ref(), cb, self.cols);
                            for &(p, lv) in &lcol {
                                for &(q, rv) in &rrow {
                                    out.push((p, q, idx, scale * lv * rv));
                                }
                            }
                        }
                    }
                }
                Term::Congruence { var, g, scale } => {
                    for (a, b, idx) in var.entries() {
                        let mut pairs = vec![(a, b)];
                        if a != b {
                            pairs.push((b, a));
                        }
                        for (va, vb) in pairs {
                            let lcol = column(Some(g), va, self.rows);
                            let rcol = column(Some(g), vb, self.rows);
                            for &(p, lv) in &lcol {
                                for &(q, rv) in &rcol {
                                    out.push((p, q, idx, scale * lv * rv));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn column(m: Option<&Mat>, j: usize, rows: usize) -> Vec<(usize, f64)> {
    match m {
        None => {
            debug_assert!(j < rows);
            vec![(j, 1.0)]
        }
        Some(m) => (0..m.nrows())
            .filter_map(|i| {
                let v = m[(i, j)];
                (v != 0.0).then_some((i, v))
            })
            .collect(),
    }
}

fn row(m: Option<&Mat>, i: usize, cols: usize) -> Vec<(usize, f64)> {
    match m {
        None => {
            debug_assert!(i < cols);
            vec![(i, 1.0)]
        }
        Some(m) => (0..m.ncols())
            .filter_map(|j| {
                let v = m[(i, j)];
                (v != 0.0).then_some((j, v))
            })
            .collect(),
    }
}

fn var_value(v: Var, y: &[f64]) -> Mat {
    let mut m = Mat::zeros(v.rows(), v.cols());
    for (a, b, idx) in v.entries() {
        m[(a, b)] = y[idx];
        if matches!(v.shape, Shape::Sym(_)) {
            m[(b, a)] = y[idx];
        }
    }
    m
}

/// How a constraint participates in the margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Must hold strictly; receives the margin in every mode.
    Strict,
    /// Non-strict inequality; receives the margin only in [`Mode::Phase1`].
    NonStrict,
    /// Bounds and normalizations; never receive a margin.
    Bound,
}

/// A symmetric block matrix constraint `F(y) ⪰ 0` given by its upper block triangle.
#[derive(Clone, Debug)]
pub struct BlockLmi {
    sizes: Vec<usize>,
    blocks: BTreeMap<(usize, usize), Expr>,
}

impl BlockLmi {
    pub fn new(sizes: &[usize]) -> Self {
        BlockLmi {
            sizes: sizes.to_vec(),
            blocks: BTreeMap::new(),
        }
    }

    /// A single-block constraint `e ⪰ 0`.
    pub fn single(e: Expr) -> Self {
        let mut b = BlockLmi::new(&[e.rows()]);
        b.set(0, 0, e);
        b
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn offset(&self, i: usize) -> usize {
        self.sizes[..i].iter().sum()
    }

    /// Sets block `(i, j)` with `i <= j`; the mirrored block is implied. Diagonal blocks are
    /// symmetrized. Repeated calls accumulate.
    pub fn set(&mut self, i: usize, j: usize, e: Expr) -> &mut Self {
        assert!(i <= j, "set the upper block triangle");
        assert_eq!((e.rows(), e.cols()), (self.sizes[i], self.sizes[j]), "block ({i},{j}) shape");
        let slot = self.blocks.remove(&(i, j));
        let e = match slot {
            Some(prev) => prev.add(e),
            None => e,
        };
        self.blocks.insert((i, j), e);
        self
    }

    /// The whole constraint as one symmetric expression.
    pub fn to_expr(&self) -> Expr {
        let n = self.dim();
        let select = |i: usize| {
            let mut p = Mat::zeros(n, self.sizes[i]);
            p.view_mut((self.offset(i), 0), (self.sizes[i], self.sizes[i])).fill_with_identity();
            p
        };
        let mut out = Expr::zeros(n, n);
        for (&(i, j), e) in &self.blocks {
            if i == j {
                out = out.add(e.clone().congruence_by(&select(i)));
            } else {
                let (pi, pj) = (select(i), select(j));
                out = out.add(e.clone().lmul(&pi).rmul(&pj.transpose()));
                out = out.add(e.clone().t().lmul(&pj).rmul(&pi.transpose()));
            }
        }
        out
    }

    /// `Tᵀ F T` as a single-block constraint.
    pub fn transformed(&self, t: &Mat) -> BlockLmi {
        BlockLmi::single(self.to_expr().congruence_by(&t.transpose()))
    }

    pub fn eval(&self, y: &[f64]) -> SymMat {
        let n = self.dim();
        let mut out = Mat::zeros(n, n);
        for (&(i, j), e) in &self.blocks {
            let v = e.eval(y);
            let (ro, co) = (self.offset(i), self.offset(j));
            if i == j {
                let s = (&v + v.transpose()) * 0.5;
                let mut view = out.view_mut((ro, co), v.shape());
                view += &s;
            } else {
                let mut view = out.view_mut((ro, co), v.shape());
                view += &v;
                let mut view = out.view_mut((co, ro), (v.ncols(), v.nrows()));
                view += v.transpose();
            }
        }
        SymMat::symmetrize(out)
    }
}

/// Solve modes; see the module documentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Maximize `t` with `t I` subtracted from strict and non-strict constraints.
    Phase1 { t_max: f64 },
    /// Maximize `t` with `t I` subtracted from strict constraints only.
    StrictOnly { t_max: f64 },
    /// Minimize the objective with the fixed margin subtracted from strict constraints.
    Optimize { margin: f64 },
}

#[derive(Clone, Debug)]
pub struct LmiSolution {
    pub values: Vec<f64>,
    pub margin: f64,
    pub objective: f64,
    pub status: SdpStatus,
    pub iterations: usize,
}

impl LmiSolution {
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.start]
    }

    pub fn sym(&self, v: Var) -> SymMat {
        SymMat::symmetrize(var_value(v, &self.values))
    }

    pub fn mat(&self, v: Var) -> Mat {
        var_value(v, &self.values)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LmiProblem {
    n: usize,
    constraints: Vec<(BlockLmi, Kind)>,
    equalities: Vec<Expr>,
    objective: Vec<(usize, f64)>,
    box_bound: Option<f64>,
    options: Option<SdpOptions>,
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&mut self, shape: Shape) -> Var {
        let v = Var {
            start: self.n,
            shape,
        };
        self.n += v.len();
        v
    }

    pub fn scalar(&mut self) -> Var {
        self.alloc(Shape::Scalar)
    }

    pub fn sym(&mut self, n: usize) -> Var {
        self.alloc(Shape::Sym(n))
    }

    pub fn mat(&mut self, r: usize, c: usize) -> Var {
        self.alloc(Shape::Mat(r, c))
    }

    pub fn num_scalars(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, lmi: BlockLmi, kind: Kind) -> usize {
        self.constraints.push((lmi, kind));
        self.constraints.len() - 1
    }

    /// Elementwise `lhs = rhs`.
    pub fn equal(&mut self, lhs: Expr, rhs: Expr) {
        self.equalities.push(lhs.sub(rhs));
    }

    /// Adds `coef * entry` to the minimization objective.
    pub fn minimize_entry(&mut self, v: Var, a: usize, b: usize, coef: f64) {
        self.objective.push((v.index(a, b), coef));
    }

    /// Adds `coef * trace(V)` to the minimization objective.
    pub fn minimize_trace(&mut self, v: Var, coef: f64) {
        for i in 0..v.rows().min(v.cols()) {
            self.objective.push((v.index(i, i), coef));
        }
    }

    /// Bounds every scalar by `|y_i| <= r`.
    pub fn set_box(&mut self, r: f64) {
        self.box_bound = Some(r);
    }

    pub fn set_options(&mut self, o: SdpOptions) {
        self.options = Some(o);
    }

    pub fn constraint(&self, k: usize) -> &BlockLmi {
        &self.constraints[k].0
    }

    pub fn constraints(&self) -> impl Iterator<Item = (&BlockLmi, Kind)> {
        self.constraints.iter().map(|(b, k)| (b, *k))
    }

    /// Lowers to SDP form; scalar index `n` is the margin variable `t`.
    fn lower(&self, mode: Mode) -> SdpData {
        let m = self.n + 1;
        let t_idx = self.n;
        let mut blocks = Vec::new();
        let mut lp = LpRows::default();
        for (lmi, kind) in &self.constraints {
            let dim = lmi.dim();
            let (t_coef, shift) = match (mode, kind) {
                (_, Kind::Bound) => (0.0, 0.0),
                (Mode::Phase1 { .. }, _) => (-1.0, 0.0),
                (Mode::StrictOnly { .. }, Kind::Strict) => (-1.0, 0.0),
                (Mode::StrictOnly { .. }, Kind::NonStrict) => (0.0, 0.0),
                (Mode::Optimize { margin }, Kind::Strict) => (0.0, -margin),
                (Mode::Optimize { .. }, Kind::NonStrict) => (0.0, 0.0),
            };
            let mut f0 = Mat::zeros(dim, dim);
            let mut dict_cols: Vec<Mat> = Vec::new();
            let mut acc: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
            let push = |acc: &mut BTreeMap<usize, BTreeMap<(usize, usize), f64>>,
                            idx: usize,
                            x: usize,
                            y: usize,
                            v: f64| {
                let key = if x <= y { (x, y) } else { (y, x) };
                *acc.entry(idx).or_default().entry(key).or_insert(0.0) += v;
            };
            for (&(i, j), e) in &lmi.blocks {
                let (ro, co) = (lmi.offset(i), lmi.offset(j));
                let diag = i == j;
                let mut konst = Mat::zeros(e.rows(), e.cols());
                let mut parts = Vec::new();
                // Congruence terms on diagonal blocks use the dictionary.
                let mut rest = e.clone();
                if diag {
                    let mut kept = Vec::new();
                    for t in e.terms.iter() {
                        if let Term::Congruence { var, g, scale } = t {
                            let mut emb = Mat::zeros(dim, g.ncols());
                            emb.view_mut((ro, 0), g.shape()).copy_from(g);
                            let goff = match dict_cols.iter().position(|c| *c == emb) {
                                Some(p) => dim + dict_cols[..p].iter().map(|c| c.ncols()).sum::<usize>(),
                                None => {
                                    let off = dim + dict_cols.iter().map(|c| c.ncols()).sum::<usize>();
                                    dict_cols.push(emb);
                                    off
                                }
                            };
                            for (a, b, idx) in var.entries() {
                                push(&mut acc, idx, goff + a, goff + b, *scale);
                            }
                        } else {
                            kept.push(t.clone());
                        }
                    }
                    rest.terms = kept;
                }
                rest.linear_parts(&mut konst, &mut parts);
                for (p, q, idx, v) in parts {
                    let (x, y) = (ro + p, co + q);
                    if diag {
                        // Half at (x,y), half at (y,x).
                        if x == y {
                            push(&mut acc, idx, x, y, v);
                        } else {
                            push(&mut acc, idx, x, y, 0.5 * v);
                        }
                    } else {
                        push(&mut acc, idx, x, y, v);
                    }
                }
                if diag {
                    let s = (&konst + konst.transpose()) * 0.5;
                    let mut view = f0.view_mut((ro, co), s.shape());
                    view += &s;
                } else {
                    let mut view = f0.view_mut((ro, co), konst.shape());
                    view += &konst;
                    let mut view = f0.view_mut((co, ro), (konst.ncols(), konst.nrows()));
                    view += konst.transpose();
                }
            }
            for i in 0..dim {
                f0[(i, i)] += shift;
            }
            if t_coef != 0.0 {
                for i in 0..dim {
                    push(&mut acc, t_idx, i, i, t_coef);
                }
            }
            let coeffs: Vec<(usize, SparseSym)> = acc
                .into_iter()
                .map(|(idx, map)| {
                    let entries = map.into_iter().filter(|(_, v)| *v != 0.0).map(|((a, b), v)| (a, b, v)).collect();
                    (idx, SparseSym { entries })
                })
                .filter(|(_, s)| !s.entries.is_empty())
                .collect();
            if dim == 1 && dict_cols.is_empty() {
                lp.h.push(f0[(0, 0)]);
                lp.g.push(
                    coeffs
                        .into_iter()
                        .map(|(i, s)| (i, s.entries.iter().map(|e| e.2).sum()))
                        .collect(),
                );
            } else {
                let g: usize = dict_cols.iter().map(|c| c.ncols()).sum();
                let mut dict = Mat::zeros(dim, g);
                let mut off = 0;
                for c in &dict_cols {
                    dict.view_mut((0, off), c.shape()).copy_from(c);
                    off += c.ncols();
                }
                blocks.push(PsdBlock {
                    dim,
                    f0,
                    dict,
                    coeffs,
                });
            }
        }
        if let Some(r) = self.box_bound {
            for i in 0..self.n {
                lp.h.push(r);
                lp.g.push(vec![(i, 1.0)]);
                lp.h.push(r);
                lp.g.push(vec![(i, -1.0)]);
            }
        }
        let mut c = vec![0.0; m];
        match mode {
            Mode::Phase1 { t_max } | Mode::StrictOnly { t_max } => {
                c[t_idx] = -1.0;
                lp.h.push(t_max);
                lp.g.push(vec![(t_idx, -1.0)]);
            }
            Mode::Optimize { .. } => {
                for &(i, v) in &self.objective {
                    c[i] += v;
                }
                // Pin t to zero.
                lp.h.push(1.0);
                lp.g.push(vec![(t_idx, -1.0)]);
                lp.h.push(1.0);
                lp.g.push(vec![(t_idx, 1.0)]);
                c[t_idx] = 1.0;
            }
        }
        SdpData { m, c, blocks, lp }
    }

    /// Equality constraints as rows over the scalars: `(coefficients, rhs)`.
    fn equality_rows(&self) -> Vec<(Vec<(usize, f64)>, f64)> {
        let mut rows = Vec::new();
        for e in &self.equalities {
            let mut konst = Mat::zeros(e.rows(), e.cols());
            let mut parts = Vec::new();
            e.linear_parts(&mut konst, &mut parts);
            let mut map: BTreeMap<(usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
            for (p, q, idx, v) in parts {
                *map.entry((p, q)).or_default().entry(idx).or_insert(0.0) += v;
            }
            for p in 0..e.rows() {
                for q in 0..e.cols() {
                    let coefs: Vec<(usize, f64)> = map
                        .get(&(p, q))
                        .map(|m| m.iter().filter(|(_, v)| **v != 0.0).map(|(i, v)| (*i, *v)).collect())
                        .unwrap_or_default();
                    if coefs.is_empty() && konst[(p, q)] == 0.0 {
                        continue;
                    }
                    rows.push((coefs, -konst[(p, q)]));
                }
            }
        }
        rows
    }

    pub fn solve(&self, mode: Mode) -> Result<LmiSolution> {
        let data = self.lower(mode);
        let eq = self.equality_rows();
        let opts = self.options.clone().unwrap_or_default();
        let (sol, y) = if eq.is_empty() {
            let sol = sdp::solve(&data, &opts);
            let y = sol.y.clone();
            (sol, y)
        } else {
            let elim = Elimination::new(&eq, data.m)?;
            let reduced = elim.apply(&data);
            let sol = sdp::solve(&reduced, &opts);
            let y = elim.recover(&sol.y);
            (sol, y)
        };
        if sol.status == SdpStatus::Failed {
            return Err(Error::Solver(format!(
                "interior point did not converge (gap {:.2e}, pinf {:.2e}, dinf {:.2e}, {} iterations)",
                sol.rel_gap, sol.primal_infeas, sol.dual_infeas, sol.iterations
            )));
        }
        let margin = match mode {
            Mode::Optimize { margin } => margin,
            _ => y[self.n],
        };
        let objective = self.objective.iter().map(|&(i, v)| v * y[i]).sum();
        Ok(LmiSolution {
            values: y[..self.n].to_vec(),
            margin,
            objective,
            status: sol.status,
            iterations: sol.iterations,
        })
    }

    /// Minimum eigenvalue of each constraint at `values`, in insertion order.
    pub fn residuals(&self, values: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|(b, _)| b.eval(values).min_eig()).collect()
    }

    /// Largest violation of the equality constraints at `values`.
    pub fn equality_residual(&self, values: &[f64]) -> f64 {
        self.equalities
            .iter()
            .map(|e| e.eval(values).amax())
            .fold(0.0, f64::max)
    }
}

/// Substitution `y_S = y0_S + N z_S` on the scalars touched by equalities.
struct Elimination {
    m: usize,
    touched: Vec<usize>,
    y0: Vec<f64>,
    null: Mat,
    /// New index for each untouched scalar; touched scalars map to `None`.
    keep: Vec<Option<usize>>,
}

impl Elimination {
    fn new(rows: &[(Vec<(usize, f64)>, f64)], m: usize) -> Result<Self> {
        let mut touched: Vec<usize> = rows.iter().flat_map(|(c, _)| c.iter().map(|e| e.0)).collect();
        touched.sort_unstable();
        touched.dedup();
        let pos: BTreeMap<usize, usize> = touched.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut a = Mat::zeros(rows.len(), touched.len());
        let mut b = Mat::zeros(rows.len(), 1);
        for (r, (coefs, rhs)) in rows.iter().enumerate() {
            for &(i, v) in coefs {
                a[(r, pos[&i])] += v;
            }
            b[(r, 0)] = *rhs;
        }
        let y0 = crate::matkit::pinv_rect(&a, 1e-10) * &b;
        if (&a * &y0 - &b).norm() > 1e-8 * (1.0 + b.norm()) {
            return Err(Error::Solver("inconsistent equality constraints".into()));
        }
        let s = touched.len();
        let svd = a.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let smax = svd.singular_values.max().max(1e-300);
        let rank = svd.singular_values.iter().filter(|&&x| x > 1e-10 * smax).count();
        // Complete the row space to a basis; nullspace = orthogonal complement.
        let proj = if rank > 0 {
            let vr = vt.rows(0, rank).transpose();
            Mat::identity(s, s) - &vr * vr.transpose()
        } else {
            Mat::identity(s, s)
        };
        let null = crate::matkit::range_basis(&proj, 1e-8);
        let mut keep = vec![None; m];
        let mut next = 0;
        for (i, k) in keep.iter_mut().enumerate() {
            if !pos.contains_key(&i) {
                *k = Some(next);
                next += 1;
            }
        }
        Ok(Elimination {
            m,
            touched,
            y0: y0.iter().cloned().collect(),
            null,
            keep,
        })
    }

    fn reduced_dim(&self) -> usize {
        self.keep.iter().filter(|k| k.is_some()).count() + self.null.ncols()
    }

    fn z_index_null(&self, k: usize) -> usize {
        self.keep.iter().filter(|k| k.is_some()).count() + k
    }

    fn full_y0(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for (k, &i) in self.touched.iter().enumerate() {
            y[i] = self.y0[k];
        }
        y
    }

    /// Maps a coefficient keyed by original scalar `i` onto reduced scalars.
    fn map_index(&self, i: usize) -> Vec<(usize, f64)> {
        match self.keep[i] {
            Some(j) => vec![(j, 1.0)],
            None => {
                let k = self.touched.binary_search(&i).unwrap();
                (0..self.null.ncols())
                    .filter_map(|c| {
                        let v = self.null[(k, c)];
                        (v.abs() > 1e-15).then(|| (self.z_index_null(c), v))
                    })
                    .collect()
            }
        }
    }

    fn apply(&self, data: &SdpData) -> SdpData {
        let y0 = self.full_y0();
        let mut blocks = Vec::new();
        for b in &data.blocks {
            let mut f0 = b.f0.clone();
            // F0 + Σ y0_i F_i via the dictionary.
            let d = b.dim + b.dict.ncols();
            let mut s = Mat::zeros(d, d);
            let mut acc: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
            for (i, c) in &b.coeffs {
                for &(a, bb, v) in &c.entries {
                    s[(a, bb)] += y0[*i] * v;
                    if a != bb {
                        s[(bb, a)] += y0[*i] * v;
                    }
                    for (j, w) in self.map_index(*i) {
                        *acc.entry(j).or_default().entry((a, bb)).or_insert(0.0) += v * w;
                    }
                }
            }
            let g = b.dict.ncols();
            let n = b.dim;
            let lowered = if g == 0 {
                s
            } else {
                let t = s.view((0, n), (n, g)) * b.dict.transpose();
                s.view((0, 0), (n, n)) + &t + t.transpose() + &b.dict * s.view((n, n), (g, g)) * b.dict.transpose()
            };
            f0 += lowered;
            let coeffs = acc
                .into_iter()
                .map(|(j, map)| {
                    (
                        j,
                        SparseSym {
                            entries: map
                                .into_iter()
                                .filter(|(_, v)| v.abs() > 1e-15)
                                .map(|((a, bb), v)| (a, bb, v))
                                .collect(),
                        },
                    )
                })
                .filter(|(_, s)| !s.entries.is_empty())
                .collect();
            blocks.push(PsdBlock {
                dim: b.dim,
                f0,
                dict: b.dict.clone(),
                coeffs,
            });
        }
        let mut lp = LpRows::default();
        for (h, row) in data.lp.h.iter().zip(&data.lp.g) {
            let mut hh = *h;
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &(i, v) in row {
                hh += v * y0[i];
                for (j, w) in self.map_index(i) {
                    *acc.entry(j).or_insert(0.0) += v * w;
                }
            }
            lp.h.push(hh);
            lp.g.push(acc.into_iter().filter(|(_, v)| v.abs() > 1e-15).collect());
        }
        let mut c = vec![0.0; self.reduced_dim()];
        for (i, &ci) in data.c.iter().enumerate() {
            if ci != 0.0 {
                for (j, w) in self.map_index(i) {
                    c[j] += ci * w;
                }
            }
        }
        SdpData {
            m: self.reduced_dim(),
            c,
            blocks,
            lp,
        }
    }

    fn recover(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.full_y0();
        for i in 0..self.m {
            match self.keep[i] {
                Some(j) => y[i] = z[j],
                None => {
                    for (j, w) in self.map_index(i) {
                        y[i] += w * z[j];
                    }
                }
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_indices_are_dense_and_unique() {
        let mut p = LmiProblem::new();
        let _a = p.scalar();
        let s = p.sym(4);
        let mut seen: Vec<usize> = s.entries().iter().map(|e| e.2).collect();
        seen.sort();
        assert_eq!(seen, (1..11).collect::<Vec<_>>());
        assert_eq!(s.index(2, 1), s.index(1, 2));
    }

    #[test]
    fn lyapunov_margin() {
        // A stable: find P with P - A P Aᵀ >= t I, P <= I.
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.2, 0.0, 0.3]);
        let mut p = LmiProblem::new();
        let pv = p.sym(2);
        let lyap = Expr::var(pv).sub(Expr::var(pv).lmul(&a).rmul(&a.transpose()));
        p.add(BlockLmi::single(lyap), Kind::Strict);
        p.add(BlockLmi::single(Expr::var(pv)), Kind::Strict);
        p.add(BlockLmi::single(Expr::identity(2).sub(Expr::var(pv))), Kind::Bound);
        let sol = p.solve(Mode::Phase1 { t_max: 1.0 }).unwrap();
        assert!(sol.margin > 0.1);
        let res = p.residuals(&sol.values);
        assert!(res[0] >= sol.margin - 1e-7 && res[1] >= sol.margin - 1e-7);
    }

    #[test]
    fn unstable_lyapunov_has_negative_margin() {
        let a = Mat::from_row_slice(1, 1, &[1.5]);
        let mut p = LmiProblem::new();
        let pv = p.sym(1);
        let lyap = Expr::var(pv).sub(Expr::var(pv).lmul(&a).rmul(&a.transpose()));
        p.add(BlockLmi::single(lyap), Kind::Strict);
        p.add(BlockLmi::single(Expr::var(pv)), Kind::Strict);
        p.add(BlockLmi::single(Expr::identity(1).sub(Expr::var(pv))), Kind::Bound);
        let sol = p.solve(Mode::Phase1 { t_max: 1.0 }).unwrap();
        assert!(sol.margin < 0.0);
    }

    #[test]
    fn equality_elimination() {
        // minimize x + y s.t. x - y = 1, [[x, 1],[1, y+2]] >= 0 (with y = x - 1).
        let mut p = LmiProblem::new();
        let x = p.scalar();
        let y = p.scalar();
        p.equal(
            Expr::var(x).sub(Expr::var(y)),
            Expr::constant(Mat::from_element(1, 1, 1.0)),
        );
        let mut b = BlockLmi::new(&[1, 1]);
        b.set(0, 0, Expr::var(x));
        b.set(0, 1, Expr::constant(Mat::from_element(1, 1, 1.0)));
        b.set(1, 1, Expr::var(y).add(Expr::constant(Mat::from_element(1, 1, 2.0))));
        p.add(b, Kind::NonStrict);
        p.minimize_entry(x, 0, 0, 1.0);
        p.minimize_entry(y, 0, 0, 1.0);
        p.set_box(100.0);
        let sol = p.solve(Mode::Optimize { margin: 0.0 }).unwrap();
        // x(x+1) >= 1 -> x = (-1 + sqrt5)/2.
        let xs = (-1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.scalar(x) - xs).abs() < 1e-6, "{}", sol.scalar(x));
        assert!(p.equality_residual(&sol.values) < 1e-9);
    }

    #[test]
    fn congruence_matches_explicit_product() {
        let g = Mat::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 0.0, -1.0]);
        let mut p = LmiProblem::new();
        let v = p.sym(2);
        let e1 = Expr::congruence(&g, v);
        let e2 = Expr::var(v).lmul(&g).rmul(&g.transpose());
        let y: Vec<f64> = vec![1.0, 0.5, -2.0];
        assert!((e1.eval(&y) - e2.eval(&y)).norm() < 1e-14);
    }

    #[test]
    fn transformed_block_matches_explicit_congruence() {
        let mut p = LmiProblem::new();
        let v = p.sym(2);
        let w = p.mat(1, 2);
        let a = p.scalar();
        let g = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let mut b = BlockLmi::new(&[2, 1]);
        b.set(0, 0, Expr::congruence(&g, v).add(Expr::scalar(a, &Mat::identity(2, 2))));
        b.set(0, 1, Expr::var(w).t());
        b.set(1, 1, Expr::scalar(a, &Mat::from_element(1, 1, 3.0)));
        let t = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, -1.0, 2.0, 1.0]);
        let y = vec![0.3, -0.2, 1.1, 0.7, -0.4, 2.0];
        let direct = t.transpose() * b.eval(&y).as_mat() * &t;
        let via = b.transformed(&t).eval(&y);
        assert!((direct - via.as_mat()).norm() < 1e-13);
        assert!((b.to_expr().eval(&y) - b.eval(&y).as_mat()).norm() < 1e-14);
    }
}
