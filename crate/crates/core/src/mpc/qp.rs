//! Dense convex QP solver:
//!
//!     min  1/2 x'Px + q'x
//!     s.t. Gx <= h,  Ax = b
//!
//! Mehrotra predictor-corrector interior point. Each Newton system is
//! reduced to a regularized Schur complement solved with two Cholesky
//! factorizations plus iterative refinement, so the solve is deterministic:
//! identical problems produce bit-identical iterates.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem skeleton; add rows as needed.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.num_vars();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(Error::config("P dimension mismatch"));
        }
        if self.g.ncols() != n && self.g.nrows() > 0 {
            return Err(Error::config("G dimension mismatch"));
        }
        if self.g.nrows() != self.h.len() {
            return Err(Error::config("G/h row mismatch"));
        }
        if self.a.ncols() != n && self.a.nrows() > 0 {
            return Err(Error::config("A dimension mismatch"));
        }
        if self.a.nrows() != self.b.len() {
            return Err(Error::config("A/b row mismatch"));
        }
        let sym_err = (&self.p - self.p.transpose()).amax();
        if sym_err > 1e-9 * (1.0 + self.p.amax()) {
            return Err(Error::config("P must be symmetric"));
        }
        // PSD check: a strictly shifted copy must factor
        let mut shifted = self.p.clone();
        for i in 0..n {
            shifted[(i, i)] += 1e-9 * (1.0 + self.p[(i, i)].abs());
        }
        if Cholesky::new(shifted).is_none() {
            return Err(Error::numerical("P is not positive semidefinite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Inequality multipliers (nonnegative).
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

const REG: f64 = 1e-9;

/// Factorized reduced KKT system
///   [H  A'] [dx]   [r1]
///   [A  0 ] [dy] = [r2]
/// with H = P + G'WG. A regularized copy H + reg I is factorized (Schur
/// complement M = A H^-1 A' + reg I for the equality block); refinement
/// residuals are taken against the exact H so the bias cancels.
struct KktSolver<'a> {
    h_chol: Cholesky<f64, nalgebra::Dyn>,
    m_chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    h_true: DMatrix<f64>,
    a: &'a DMatrix<f64>,
}

impl<'a> KktSolver<'a> {
    fn new(h_true: DMatrix<f64>, a: &'a DMatrix<f64>) -> Result<Self> {
        let mut h_reg = h_true.clone();
        for i in 0..h_reg.nrows() {
            h_reg[(i, i)] += REG * (1.0 + h_reg[(i, i)].abs());
        }
        let h_chol = Cholesky::new(h_reg)
            .ok_or_else(|| Error::numerical("KKT block not positive definite"))?;
        let m_chol = if a.nrows() > 0 {
            let hinv_at = h_chol.solve(&a.transpose());
            let mut m = a * hinv_at;
            for i in 0..m.nrows() {
                m[(i, i)] += REG;
            }
            Some(
                Cholesky::new(m)
                    .ok_or_else(|| Error::numerical("equality Schur complement singular"))?,
            )
        } else {
            None
        };
        Ok(Self {
            h_chol,
            m_chol,
            h_true,
            a,
        })
    }

    fn solve_once(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match &self.m_chol {
            None => (self.h_chol.solve(r1), DVector::zeros(0)),
            Some(m_chol) => {
                let hinv_r1 = self.h_chol.solve(r1);
                let rhs = self.a * hinv_r1 - r2;
                let dy = m_chol.solve(&rhs);
                let dx = self.h_chol.solve(&(r1 - self.a.transpose() * &dy));
                (dx, dy)
            }
        }
    }

    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut dx, mut dy) = self.solve_once(r1, r2);
        // two refinement rounds against the unregularized system
        for _ in 0..2 {
            let res1 = r1 - &self.h_true * &dx
                - if self.a.nrows() > 0 {
                    self.a.transpose() * &dy
                } else {
                    DVector::zeros(dx.len())
                };
            let res2 = if self.a.nrows() > 0 {
                r2 - self.a * &dx
            } else {
                DVector::zeros(0)
            };
            let (cx, cy) = self.solve_once(&res1, &res2);
            dx += cx;
            dy += cy;
        }
        (dx, dy)
    }
}

/// Max KKT violation: dual residual, equality residual, primal violation,
/// multiplier sign, complementarity.
fn full_residual(
    prob: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> f64 {
    let me = prob.a.nrows();
    let mut r_dual = &prob.p * x + &prob.q;
    if prob.g.nrows() > 0 {
        r_dual += prob.g.transpose() * z;
    }
    if me > 0 {
        r_dual += prob.a.transpose() * y;
    }
    let mut res = r_dual.amax();
    if me > 0 {
        res = res.max((&prob.a * x - &prob.b).amax());
    }
    let gx = &prob.g * x;
    for i in 0..prob.g.nrows() {
        let slack = prob.h[i] - gx[i];
        res = res.max(-slack).max(-z[i]).max((z[i] * slack).abs());
    }
    res
}

/// Active-set polish: rows whose multiplier dominates the slack are pinned
/// as equalities and the reduced KKT system is re-solved, recovering the
/// exact optimum once the interior point method has identified the active
/// set. The caller keeps the result only if the residual improves.
fn polished(
    prob: &QpProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = prob.num_vars();
    let mi = prob.g.nrows();
    let me = prob.a.nrows();
    let gx = &prob.g * x;
    let active: Vec<usize> = (0..mi)
        .filter(|&i| z[i] > (prob.h[i] - gx[i]).abs())
        .collect();
    let na = active.len();
    let mut a_aug = DMatrix::zeros(me + na, n);
    let mut b_aug = DVector::zeros(me + na);
    if me > 0 {
        a_aug.view_mut((0, 0), (me, n)).copy_from(&prob.a);
        b_aug.rows_mut(0, me).copy_from(&prob.b);
    }
    for (k, &i) in active.iter().enumerate() {
        a_aug.row_mut(me + k).copy_from(&prob.g.row(i));
        b_aug[me + k] = prob.h[i];
    }
    let kkt = KktSolver::new(prob.p.clone(), &a_aug).ok()?;
    let (px, yz) = kkt.solve(&(-&prob.q), &b_aug);
    let py = DVector::from_fn(me, |i, _| yz[i]);
    let mut pz = DVector::zeros(mi);
    for (k, &i) in active.iter().enumerate() {
        pz[i] = yz[me + k];
    }
    Some((px, py, pz))
}

/// Largest step in [0, 1] keeping v + alpha dv >= (1 - eta) v.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

pub fn solve_qp(prob: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    prob.check()?;
    let n = prob.num_vars();
    let mi = prob.g.nrows();
    let me = prob.a.nrows();

    // no inequalities: one exact KKT solve
    if mi == 0 {
        let kkt = KktSolver::new(prob.p.clone(), &prob.a)?;
        let r1 = -&prob.q;
        let (x, y) = kkt.solve(&r1, &prob.b);
        let r_dual = &prob.p * &x + &prob.q
            + if me > 0 {
                prob.a.transpose() * &y
            } else {
                DVector::zeros(n)
            };
        let r_eq = if me > 0 {
            &prob.a * &x - &prob.b
        } else {
            DVector::zeros(0)
        };
        let res = r_dual.amax().max(if me > 0 { r_eq.amax() } else { 0.0 });
        return Ok(QpSolution {
            x,
            y,
            z: DVector::zeros(0),
            status: if res <= tol * 10.0 {
                QpStatus::Converged
            } else {
                QpStatus::MaxIterations
            },
            iterations: 1,
            kkt_residual: res,
        });
    }

    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(me);
    let mut s = DVector::from_fn(mi, |i, _| (prob.h[i]).max(1.0));
    let mut z = DVector::from_element(mi, 1.0);

    let scale = 1.0
        + prob.q.amax().max(if mi > 0 { prob.h.amax() } else { 0.0 }).max(if me > 0 {
            prob.b.amax()
        } else {
            0.0
        });

    let mut best_res = f64::INFINITY;
    let mut best = (x.clone(), y.clone(), s.clone(), z.clone());
    let mut diverged = false;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let r_dual = &prob.p * &x
            + &prob.q
            + prob.g.transpose() * &z
            + if me > 0 {
                prob.a.transpose() * &y
            } else {
                DVector::zeros(n)
            };
        let r_eq = if me > 0 {
            &prob.a * &x - &prob.b
        } else {
            DVector::zeros(0)
        };
        let r_ineq = &prob.g * &x + &s - &prob.h;
        let mu = s.dot(&z) / mi as f64;

        let res = r_dual
            .amax()
            .max(if me > 0 { r_eq.amax() } else { 0.0 })
            .max(r_ineq.amax())
            .max(mu);
        // amax skips NaN entries, so divergence needs an explicit check
        if !res.is_finite() || !mu.is_finite() {
            diverged = true;
            break;
        }
        if res < best_res {
            best_res = res;
            best = (x.clone(), y.clone(), s.clone(), z.clone());
        }
        if res <= tol * scale {
            let mut out = (x, y, z, 0.0);
            out.3 = full_residual(prob, &out.0, &out.1, &out.2);
            if let Some((px, py, pz)) = polished(prob, &out.0, &out.2) {
                let pres = full_residual(prob, &px, &py, &pz);
                if pres < out.3 {
                    out = (px, py, pz, pres);
                }
            }
            return Ok(QpSolution {
                x: out.0,
                y: out.1,
                z: out.2,
                status: QpStatus::Converged,
                iterations: iter,
                kkt_residual: out.3,
            });
        }

        // H = P + G' diag(z/s) G
        let mut h = prob.p.clone();
        for r in 0..mi {
            let w = z[r] / s[r];
            for i in 0..n {
                let gi = prob.g[(r, i)];
                if gi == 0.0 {
                    continue;
                }
                let wgi = w * gi;
                for j in 0..n {
                    h[(i, j)] += wgi * prob.g[(r, j)];
                }
            }
        }
        // numerical breakdown (weights overflow) ends the iteration, the
        // best iterate so far is classified below
        let Ok(kkt) = KktSolver::new(h, &prob.a) else {
            diverged = true;
            break;
        };

        // affine predictor: rc = s o z
        let rc: DVector<f64> = s.component_mul(&z);
        let solve_direction = |rc: &DVector<f64>| {
            let mut r1 = -&r_dual;
            for r in 0..mi {
                let coef = (z[r] * r_ineq[r] - rc[r]) / s[r];
                for i in 0..n {
                    r1[i] -= prob.g[(r, i)] * coef;
                }
            }
            let r2 = -&r_eq;
            let (dx, dy) = kkt.solve(&r1, &r2);
            let mut ds = DVector::zeros(mi);
            let mut dz = DVector::zeros(mi);
            let gdx = &prob.g * &dx;
            for r in 0..mi {
                ds[r] = -r_ineq[r] - gdx[r];
                dz[r] = -(rc[r] + z[r] * ds[r]) / s[r];
            }
            (dx, dy, ds, dz)
        };

        let (_dx_a, _dy_a, ds_a, dz_a) = solve_direction(&rc);
        let ap = max_step(&s, &ds_a);
        let ad = max_step(&z, &dz_a);
        let mu_aff = (&s + &ds_a * ap).dot(&(&z + &dz_a * ad)) / mi as f64;
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };

        // corrector
        let rc_corr: DVector<f64> =
            DVector::from_fn(mi, |i, _| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu);
        let (dx, dy, ds, dz) = solve_direction(&rc_corr);

        let eta = 0.99;
        let alpha_p = (eta * max_step(&s, &ds)).min(1.0);
        let alpha_d = (eta * max_step(&z, &dz)).min(1.0);
        x += &dx * alpha_p;
        s += &ds * alpha_p;
        y += &dy * alpha_d;
        z += &dz * alpha_d;
    }

    // did not converge: report the best iterate and classify the stall.
    // A large primal residual with vanished complementarity (or outright
    // numerical divergence, which infeasible central paths produce) is
    // reported as infeasible.
    let (x, y, s, z) = best;
    let r_ineq = &prob.g * &x + &s - &prob.h;
    let r_eq = if me > 0 {
        &prob.a * &x - &prob.b
    } else {
        DVector::zeros(0)
    };
    let primal = r_ineq.amax().max(if me > 0 { r_eq.amax() } else { 0.0 });
    let mu = s.dot(&z) / mi as f64;
    let status = if primal > 1e3 * tol * scale && (mu < tol || diverged) {
        QpStatus::Infeasible
    } else {
        QpStatus::MaxIterations
    };
    Ok(QpSolution {
        x,
        y,
        z,
        status,
        iterations,
        kkt_residual: best_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut p = &m * m.transpose();
        for i in 0..n {
            p[(i, i)] += 0.1;
        }
        p
    }

    #[test]
    fn one_dimensional_bound() {
        // min u^2 s.t. u >= 1
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 2.0),
            q: DVector::zeros(1),
            g: DMatrix::from_element(1, 1, -1.0),
            h: DVector::from_element(1, -1.0),
            a: DMatrix::zeros(0, 1),
            b: DVector::zeros(0),
        };
        let sol = solve_qp(&prob, 1e-8, 50).unwrap();
        assert_eq!(sol.status, QpStatus::Converged);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn equality_qp_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(2..7);
            let me = rng.gen_range(1..n);
            let p = random_psd(&mut rng, n);
            let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let a = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(me, |_, _| rng.gen_range(-1.0..1.0));
            let prob = QpProblem {
                p: p.clone(),
                q: q.clone(),
                g: DMatrix::zeros(0, n),
                h: DVector::zeros(0),
                a: a.clone(),
                b: b.clone(),
            };
            let sol = solve_qp(&prob, 1e-10, 50).unwrap();

            // direct dense KKT solve
            let mut kkt = DMatrix::zeros(n + me, n + me);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p);
            kkt.view_mut((0, n), (n, me)).copy_from(&a.transpose());
            kkt.view_mut((n, 0), (me, n)).copy_from(&a);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-&q));
            rhs.rows_mut(n, me).copy_from(&b);
            let direct = kkt.lu().solve(&rhs).unwrap();
            for i in 0..n {
                assert_relative_eq!(sol.x[i], direct[i], epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn deterministic_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let p = random_psd(&mut rng, n);
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let g = DMatrix::from_fn(4, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = DVector::from_element(4, 1.0);
        let prob = QpProblem {
            p,
            q,
            g,
            h,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        };
        let s1 = solve_qp(&prob, 1e-8, 50).unwrap();
        let s2 = solve_qp(&prob, 1e-8, 50).unwrap();
        assert_eq!(s1.iterations, s2.iterations);
        for i in 0..n {
            assert_eq!(s1.x[i].to_bits(), s2.x[i].to_bits());
        }
    }

    #[test]
    fn detects_infeasible() {
        // x <= -1 and x >= 1
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 1.0),
            q: DVector::zeros(1),
            g: DMatrix::from_vec(2, 1, vec![1.0, -1.0]),
            h: DVector::from_vec(vec![-1.0, -1.0]),
            a: DMatrix::zeros(0, 1),
            b: DVector::zeros(0),
        };
        let sol = solve_qp(&prob, 1e-8, 60).unwrap();
        assert_ne!(sol.status, QpStatus::Converged);
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let mut p = DMatrix::zeros(2, 2);
        p[(0, 1)] = 1.0;
        let prob = QpProblem::new(p, DVector::zeros(2));
        assert!(solve_qp(&prob, 1e-8, 10).is_err());
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let mut p = DMatrix::zeros(2, 2);
        p[(0, 0)] = 1.0;
        p[(1, 1)] = -1.0;
        let prob = QpProblem::new(p, DVector::zeros(2));
        assert!(solve_qp(&prob, 1e-8, 10).is_err());
    }
}
