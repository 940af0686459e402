//! Primal-dual interior-point solver for block-diagonal linear matrix inequalities.
//!
//! Solves `minimize cᵀy` subject to `F0_b + Σ yᵢ F_{i,b} ⪰ 0` for every PSD block `b` and
//! `h + G y ≥ 0` (linear rows), using the HKM search direction with Mehrotra
//! predictor-corrector steps from an infeasible start.
//!
//! Each PSD block stores its coefficients in a *dictionary* basis `D = [I | G_extra]`:
//! `F_{i,b} = D Cᵢ Dᵀ` with sparse symmetric `Cᵢ`. Congruence terms `G V Gᵀ` thereby stay
//! sparse, which keeps Schur-matrix assembly cheap for large blocks.

use nalgebra::Cholesky;

use crate::matkit::{Mat, Vector};

/// Sparse symmetric matrix `Σ v (E_ab + E_ba)` for `a < b` plus `v E_aa` on the diagonal,
/// stored as upper-triangular triplets.
#[derive(Clone, Debug, Default)]
pub struct SparseSym {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    fn full(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(2 * self.entries.len());
        for &(a, b, v) in &self.entries {
            out.push((a, b, v));
            if a != b {
                out.push((b, a, v));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PsdBlock {
    pub dim: usize,
    pub f0: Mat,
    /// Extra dictionary columns (`dim x g`), appended after the identity part.
    pub dict: Mat,
    /// `(variable index, coefficient in dictionary coordinates)`, one entry per variable.
    pub coeffs: Vec<(usize, SparseSym)>,
}

#[derive(Clone, Debug, Default)]
pub struct LpRows {
    pub h: Vec<f64>,
    pub g: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
pub struct SdpData {
    pub m: usize,
    pub c: Vec<f64>,
    pub blocks: Vec<PsdBlock>,
    pub lp: LpRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    /// Stopped early but residuals and gap are below the relaxed tolerance.
    Inaccurate,
    /// Stopped early at a strictly feasible `y` with a small duality gap but an inaccurate
    /// dual certificate. `y` is usable as a feasible point.
    FeasibleOnly,
    Failed,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub y: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub rel_gap: f64,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
}

/// Largest relative gap at which a stalled but feasible iterate is still reported.
const FEASIBLE_GAP: f64 = 1e-4;

/// Interior-point options.
#[derive(Clone, Debug)]
pub struct SdpOptions {
    pub tol: f64,
    pub relaxed_tol: f64,
    pub max_iter: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            relaxed_tol: 1e-6,
            max_iter: 120,
        }
    }
}

struct BlockCache {
    full: Vec<(usize, Vec<(usize, usize, f64)>)>,
}

impl PsdBlock {
    fn d(&self) -> usize {
        self.dim + self.dict.ncols()
    }

    /// `Dᵀ R D` for symmetric `R`.
    fn lift(&self, r: &Mat) -> Mat {
        let g = self.dict.ncols();
        if g == 0 {
            return r.clone();
        }
        let n = self.dim;
        let rg = r * &self.dict;
        let grg = self.dict.transpose() * &rg;
        let mut out = Mat::zeros(n + g, n + g);
        out.view_mut((0, 0), (n, n)).copy_from(r);
        out.view_mut((0, n), (n, g)).copy_from(&rg);
        out.view_mut((n, 0), (g, n)).copy_from(&rg.transpose());
        out.view_mut((n, n), (g, g)).copy_from(&grg);
        out
    }

    /// `D S Dᵀ` for a `d x d` matrix `S`.
    fn lower(&self, s: &Mat) -> Mat {
        let g = self.dict.ncols();
        if g == 0 {
            return s.clone();
        }
        let n = self.dim;
        let sii = s.view((0, 0), (n, n));
        let sig = s.view((0, n), (n, g));
        let sgg = s.view((n, n), (g, g));
        let t = sig * self.dict.transpose();
        let mut out = sii + &t + t.transpose();
        out += &self.dict * sgg * self.dict.transpose();
        out
    }

    /// `Σ yᵢ F_{i}` (dense).
    fn apply(&self, y: &[f64]) -> Mat {
        let d = self.d();
        let mut s = Mat::zeros(d, d);
        for (i, c) in &self.coeffs {
            let yi = y[*i];
            if yi == 0.0 {
                continue;
            }
            for &(a, b, v) in &c.entries {
                s[(a, b)] += yi * v;
                if a != b {
                    s[(b, a)] += yi * v;
                }
            }
        }
        self.lower(&s)
    }

    /// Adds `<F_i, R>` to `out[i]` for symmetric `R`.
    fn project(&self, r: &Mat, out: &mut [f64]) {
        let rt = self.lift(r);
        for (i, c) in &self.coeffs {
            let mut acc = 0.0;
            for &(a, b, v) in &c.entries {
                acc += if a == b { v * rt[(a, b)] } else { 2.0 * v * rt[(a, b)] };
            }
            out[*i] += acc;
        }
    }

    fn schur(&self, cache: &BlockCache, x: &Mat, sinv: &Mat, m: &mut Mat) {
        let xt = self.lift(x);
        let st = self.lift(sinv);
        let nv = cache.full.len();
        for p in 0..nv {
            let (i, ref ep) = cache.full[p];
            for q in p..nv {
                let (j, ref eq) = cache.full[q];
                let mut acc = 0.0;
                for &(a, b, v) in ep {
                    for &(c, d, w) in eq {
                        acc += v * w * xt[(b, c)] * st[(d, a)];
                    }
                }
                m[(i, j)] += acc;
                if i != j {
                    m[(j, i)] += acc;
                }
            }
        }
    }
}

fn sym(m: Mat) -> Mat {
    let t = m.transpose();
    (m + t) * 0.5
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Largest step `α ≤ cap` with `X + α dX ⪰ 0`, given `X = L Lᵀ`.
fn max_step(chol: &Cholesky<f64, nalgebra::Dyn>, dx: &Mat) -> f64 {
    let l = chol.l();
    let y = l.solve_lower_triangular(dx).expect("triangular solve");
    let z = l.solve_lower_triangular(&y.transpose()).expect("triangular solve");
    let lam = sym(z).symmetric_eigenvalues().min();
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

fn lp_max_step(x: &[f64], dx: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for (xi, di) in x.iter().zip(dx) {
        if *di < 0.0 {
            a = a.min(-xi / di);
        }
    }
    a
}

struct Direction {
    dy: Vec<f64>,
    dx: Vec<Mat>,
    ds: Vec<Mat>,
    dxl: Vec<f64>,
    dsl: Vec<f64>,
}

pub fn solve(data: &SdpData, opts: &SdpOptions) -> SdpSolution {
    let m = data.m;
    let nb = data.blocks.len();
    let nl = data.lp.h.len();
    let caches: Vec<BlockCache> = data
        .blocks
        .iter()
        .map(|b| {
            let mut full: Vec<(usize, Vec<(usize, usize, f64)>)> = Vec::new();
            for (i, c) in &b.coeffs {
                full.push((*i, c.full()));
            }
            BlockCache { full }
        })
        .collect();
    let n_total: f64 = data.blocks.iter().map(|b| b.dim as f64).sum::<f64>() + nl as f64;

    let cnorm = data.c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let f0norm = (data.blocks.iter().map(|b| b.f0.norm_squared()).sum::<f64>()
        + data.lp.h.iter().map(|v| v * v).sum::<f64>())
    .sqrt();

    let mut y = vec![0.0; m];
    let mut xs: Vec<Mat> = Vec::with_capacity(nb);
    let mut ss: Vec<Mat> = Vec::with_capacity(nb);
    for b in &data.blocks {
        let n = b.dim as f64;
        let xi = (10.0f64).max(n.sqrt()).max(cnorm.sqrt());
        let eta = (10.0f64).max(n.sqrt()).max(b.f0.norm());
        xs.push(Mat::identity(b.dim, b.dim) * xi);
        ss.push(Mat::identity(b.dim, b.dim) * eta);
    }
    let hmax = data.lp.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let _ = hmax;
    let mut xl = vec![(10.0f64).max(cnorm.sqrt()); nl];
    let mut sl: Vec<f64> = data.lp.h.iter().map(|h| (10.0f64).max(h.abs())).collect();

    let mut best: Option<SdpSolution> = None;
    let mut best_feasible: Option<SdpSolution> = None;
    let mut iterations = 0;
    let mut status = SdpStatus::Failed;
    let mut worse_count = 0usize;

    for it in 0..opts.max_iter {
        iterations = it;
        // Residuals.
        let rd: Vec<Mat> = data
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| &b.f0 + b.apply(&y) - &ss[k])
            .collect();
        let rdl: Vec<f64> = (0..nl)
            .map(|k| {
                data.lp.h[k] + data.lp.g[k].iter().map(|&(i, v)| v * y[i]).sum::<f64>() - sl[k]
            })
            .collect();
        let mut ax = vec![0.0; m];
        for (k, b) in data.blocks.iter().enumerate() {
            b.project(&xs[k], &mut ax);
        }
        for k in 0..nl {
            for &(i, v) in &data.lp.g[k] {
                ax[i] += v * xl[k];
            }
        }
        let rp: Vec<f64> = (0..m).map(|i| data.c[i] - ax[i]).collect();
        let gap: f64 = (0..nb).map(|k| dot(&xs[k], &ss[k])).sum::<f64>()
            + (0..nl).map(|k| xl[k] * sl[k]).sum::<f64>();
        let mu = gap / n_total;
        let pobj: f64 = (0..m).map(|i| data.c[i] * y[i]).sum();
        let dobj: f64 = -(0..nb).map(|k| dot(&data.blocks[k].f0, &xs[k])).sum::<f64>()
            - (0..nl).map(|k| data.lp.h[k] * xl[k]).sum::<f64>();
        let pinf = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + cnorm);
        let dinf = (rd.iter().map(|r| r.norm_squared()).sum::<f64>()
            + rdl.iter().map(|v| v * v).sum::<f64>())
        .sqrt()
            / (1.0 + f0norm);
        let relgap = gap.max(0.0) / (1.0 + pobj.abs() + dobj.abs());
        let err = relgap.max(pinf).max(dinf);
        let snapshot = SdpSolution {
            status: SdpStatus::Inaccurate,
            y: y.clone(),
            objective: pobj,
            iterations: it,
            rel_gap: relgap,
            primal_infeas: pinf,
            dual_infeas: dinf,
        };
        let better = match &best {
            None => true,
            Some(b) => err < b.rel_gap.max(b.primal_infeas).max(b.dual_infeas),
        };
        if dinf < opts.relaxed_tol
            && best_feasible.as_ref().is_none_or(|b| relgap < b.rel_gap)
        {
            best_feasible = Some(SdpSolution {
                status: SdpStatus::FeasibleOnly,
                ..snapshot.clone()
            });
        }
        if better {
            best = Some(snapshot);
            worse_count = 0;
        } else {
            worse_count += 1;
        }
        if relgap < opts.tol && pinf < opts.tol && dinf < opts.tol {
            status = SdpStatus::Optimal;
            break;
        }
        if !y.iter().all(|v| v.is_finite()) || y.iter().any(|v| v.abs() > 1e14) {
            break;
        }
        let best_err = best.as_ref().map(|b| b.rel_gap.max(b.primal_infeas).max(b.dual_infeas)).unwrap_or(f64::INFINITY);
        if (best_err < 1e-4 && worse_count >= 4) || (best_err < opts.relaxed_tol && worse_count >= 2) {
            break;
        }

        // Factorizations.
        let mut sinv = Vec::with_capacity(nb);
        let mut schol = Vec::with_capacity(nb);
        let mut xchol = Vec::with_capacity(nb);
        let mut ok = true;
        for k in 0..nb {
            match (Cholesky::new(ss[k].clone()), Cholesky::new(xs[k].clone())) {
                (Some(cs), Some(cx)) => {
                    sinv.push(sym(cs.inverse()));
                    schol.push(cs);
                    xchol.push(cx);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let mut schur = Mat::zeros(m, m);
        for (k, b) in data.blocks.iter().enumerate() {
            b.schur(&caches[k], &xs[k], &sinv[k], &mut schur);
        }
        for k in 0..nl {
            let w = xl[k] / sl[k];
            let row = &data.lp.g[k];
            for &(i, vi) in row {
                for &(j, vj) in row {
                    schur[(i, j)] += w * vi * vj;
                }
            }
        }
        let diag_max = (0..m).map(|i| schur[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-300);
        let chol = {
            let mut reg = 0.0;
            let mut out = None;
            for _ in 0..6 {
                let mut mm = schur.clone();
                for i in 0..m {
                    mm[(i, i)] += reg;
                }
                if let Some(c) = Cholesky::new(mm) {
                    out = Some(c);
                    break;
                }
                reg = if reg == 0.0 { 1e-14 * diag_max } else { reg * 100.0 };
            }
            out
        };
        let chol = match chol {
            Some(c) => c,
            None => break,
        };

        let direction = |sigma: f64, corr: Option<&Direction>| -> Direction {
            let mut rhs: Vec<f64> = data.c.iter().map(|v| -v).collect();
            let mut wmats = Vec::with_capacity(nb);
            for k in 0..nb {
                let mut w = &sinv[k] * (sigma * mu) - &xs[k] * &rd[k] * &sinv[k];
                if let Some(c) = corr {
                    w -= &c.dx[k] * &c.ds[k] * &sinv[k];
                }
                let w = sym(w);
                data.blocks[k].project(&w, &mut rhs);
                wmats.push(w);
            }
            let mut wl = vec![0.0; nl];
            for k in 0..nl {
                let mut w = sigma * mu / sl[k] - xl[k] * rdl[k] / sl[k];
                if let Some(c) = corr {
                    w -= c.dxl[k] * c.dsl[k] / sl[k];
                }
                wl[k] = w;
                for &(i, v) in &data.lp.g[k] {
                    rhs[i] += v * w;
                }
            }
            let dy = chol.solve(&Vector::from_vec(rhs));
            let dyv: Vec<f64> = dy.iter().cloned().collect();
            let mut dx = Vec::with_capacity(nb);
            let mut ds = Vec::with_capacity(nb);
            for k in 0..nb {
                let dsk = &rd[k] + data.blocks[k].apply(&dyv);
                let dsk = sym(dsk);
                let dxk = sym(&wmats[k] - &xs[k] - &xs[k] * &dsk * &sinv[k]);
                dx.push(dxk);
                ds.push(dsk);
            }
            let mut dxl = vec![0.0; nl];
            let mut dsl = vec![0.0; nl];
            for k in 0..nl {
                let dsk = rdl[k] + data.lp.g[k].iter().map(|&(i, v)| v * dyv[i]).sum::<f64>();
                dsl[k] = dsk;
                dxl[k] = wl[k] - xl[k] - xl[k] * dsk / sl[k];
            }
            Direction {
                dy: dyv,
                dx,
                ds,
                dxl,
                dsl,
            }
        };
        let steps = |d: &Direction| -> (f64, f64) {
            let mut ap = lp_max_step(&xl, &d.dxl);
            let mut ad = lp_max_step(&sl, &d.dsl);
            for k in 0..nb {
                ap = ap.min(max_step(&xchol[k], &d.dx[k]));
                ad = ad.min(max_step(&schol[k], &d.ds[k]));
            }
            (ap, ad)
        };

        let pred = direction(0.0, None);
        let (ap, ad) = steps(&pred);
        let (ap1, ad1) = (ap.min(1.0), ad.min(1.0));
        let mut gap_aff = 0.0;
        for k in 0..nb {
            gap_aff += dot(&(&xs[k] + &pred.dx[k] * ap1), &(&ss[k] + &pred.ds[k] * ad1));
        }
        for k in 0..nl {
            gap_aff += (xl[k] + ap1 * pred.dxl[k]) * (sl[k] + ad1 * pred.dsl[k]);
        }
        let ratio = (gap_aff / gap).clamp(0.0, 1.0);
        let sigma = ratio.powi(3).clamp(0.0, 1.0);
        let corr = direction(sigma, Some(&pred));
        let (ap, ad) = steps(&corr);
        let gamma = 0.9 + 0.09 * ap1.min(ad1);
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);

        for k in 0..nb {
            xs[k] = sym(&xs[k] + &corr.dx[k] * ap);
            ss[k] = sym(&ss[k] + &corr.ds[k] * ad);
        }
        for k in 0..nl {
            xl[k] += ap * corr.dxl[k];
            sl[k] += ad * corr.dsl[k];
        }
        for i in 0..m {
            y[i] += ad * corr.dy[i];
        }
        if ap < 1e-10 && ad < 1e-10 {
            break;
        }
    }
    match status {
        SdpStatus::Optimal => SdpSolution {
            status,
            y: y.clone(),
            objective: (0..m).map(|i| data.c[i] * y[i]).sum(),
            iterations,
            rel_gap: best.as_ref().map(|b| b.rel_gap).unwrap_or(0.0),
            primal_infeas: best.as_ref().map(|b| b.primal_infeas).unwrap_or(0.0),
            dual_infeas: best.as_ref().map(|b| b.dual_infeas).unwrap_or(0.0),
        },
        _ => {
            let mut b = best.unwrap_or(SdpSolution {
                status: SdpStatus::Failed,
                y,
                objective: f64::NAN,
                iterations,
                rel_gap: f64::INFINITY,
                primal_infeas: f64::INFINITY,
                dual_infeas: f64::INFINITY,
            });
            let err = b.rel_gap.max(b.primal_infeas).max(b.dual_infeas);
            if err < opts.relaxed_tol {
                b.status = SdpStatus::Inaccurate;
            } else if let Some(f) = best_feasible.filter(|f| f.rel_gap < FEASIBLE_GAP) {
                b = f;
            } else {
                b.status = SdpStatus::Failed;
            }
            b.iterations = iterations;
            b
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeff(entries: &[(usize, usize, f64)]) -> SparseSym {
        SparseSym {
            entries: entries.to_vec(),
        }
    }

    #[test]
    fn min_eigenvalue_as_sdp() {
        // maximize t s.t. A - t I >= 0  <=>  minimize -t.
        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let data = SdpData {
            m: 1,
            c: vec![-1.0],
            blocks: vec![PsdBlock {
                dim: 2,
                f0: a.clone(),
                dict: Mat::zeros(2, 0),
                coeffs: vec![(0, coeff(&[(0, 0, -1.0), (1, 1, -1.0)]))],
            }],
            lp: LpRows::default(),
        };
        let sol = solve(&data, &SdpOptions::default());
        assert_eq!(sol.status, SdpStatus::Optimal);
        let lmin = a.symmetric_eigenvalues().min();
        assert!((sol.y[0] - lmin).abs() < 1e-7, "{} vs {}", sol.y[0], lmin);
    }

    #[test]
    fn dictionary_matches_plain_representation() {
        // maximize t s.t. g g^T * 1 + I * 0.5 - t I >= 0 with the rank-one part in the dictionary.
        let g = Mat::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let data = SdpData {
            m: 2,
            c: vec![-1.0, 0.0],
            blocks: vec![PsdBlock {
                dim: 3,
                f0: Mat::identity(3, 3) * 0.5,
                dict: g.clone(),
                coeffs: vec![
                    (0, coeff(&[(0, 0, -1.0), (1, 1, -1.0), (2, 2, -1.0)])),
                    (1, coeff(&[(3, 3, 1.0)])),
                ],
            }],
            lp: LpRows {
                h: vec![1.0, 1.0],
                g: vec![vec![(1, -1.0)], vec![(1, 1.0)]],
            },
        };
        // s = 0.5 + y1 * |g|^2 restricted; eigen of 0.5 I + y1 g g^T minimal is 0.5 for y1>=0.
        let sol = solve(&data, &SdpOptions::default());
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.y[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn linear_program() {
        // minimize x1 + x2 s.t. x1 >= 1, x2 >= 2, x1 + x2 <= 10.
        let data = SdpData {
            m: 2,
            c: vec![1.0, 1.0],
            blocks: vec![],
            lp: LpRows {
                h: vec![-1.0, -2.0, 10.0],
                g: vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, -1.0), (1, -1.0)]],
            },
        };
        let sol = solve(&data, &SdpOptions::default());
        assert_eq!(sol.status, SdpStatus::Optimal, "{sol:?}");
        assert!((sol.objective - 3.0).abs() < 1e-7);
    }
}
