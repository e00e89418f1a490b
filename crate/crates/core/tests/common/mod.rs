//! Brute-force reference solver for small box-and-equality QPs:
//!
//!     min 1/2 x'Px + q'x   s.t.  A x = b,  lo <= x <= hi
//!
//! Every variable is either free, clamped at its lower bound or clamped at
//! its upper bound; enumerating all 3^n patterns and solving the reduced
//! KKT system for each gives the exact optimum for strictly convex P
//! without any iterative machinery, so it is an independent check on the
//! interior-point path.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use quadstep::mpc::QpProblem;

#[derive(Debug, Clone)]
pub struct BoxQp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl BoxQp {
    /// The same problem in the inequality form the production solver takes:
    /// G = [I; -I], h = [hi; -lo].
    pub fn to_problem(&self) -> QpProblem {
        let n = self.q.len();
        let mut g = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            h[i] = self.hi[i];
            g[(n + i, i)] = -1.0;
            h[n + i] = -self.lo[i];
        }
        let mut prob = QpProblem::new(self.p.clone(), self.q.clone());
        prob.g = g;
        prob.h = h;
        prob.a = self.a.clone();
        prob.b = self.b.clone();
        prob
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x)
    }
}

/// Feasible random instance: strictly convex P, bounds straddling a point
/// x0 that also satisfies the equalities (b = A x0), so the brute-force
/// search always has at least one valid pattern.
pub fn random_box_qp(rng: &mut ChaCha8Rng, n: usize, me: usize) -> BoxQp {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let lo = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..-0.1));
    let hi = DVector::from_fn(n, |_, _| rng.gen_range(0.1..2.0));
    let x0 = DVector::from_fn(n, |i, _| rng.gen_range(lo[i]..hi[i]));
    let a = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let b = &a * &x0;
    BoxQp { p, q, lo, hi, a, b }
}

/// Exhaustive active-set enumeration. Returns the optimal point and
/// objective, or None when no pattern passes the KKT checks (which for a
/// feasible strictly convex instance means the equality rows are rank
/// deficient).
pub fn solve_by_enumeration(qp: &BoxQp) -> Option<(DVector<f64>, f64)> {
    let n = qp.q.len();
    let me = qp.b.len();
    let eps = 1e-8;
    let mut best: Option<(DVector<f64>, f64)> = None;

    // pattern digit per variable: 0 = free, 1 = at lo, 2 = at hi
    for pattern in 0..3usize.pow(n as u32) {
        let mut digits = vec![0u8; n];
        let mut rem = pattern;
        for d in digits.iter_mut() {
            *d = (rem % 3) as u8;
            rem /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| digits[i] == 0).collect();
        let nf = free.len();

        let mut x = DVector::zeros(n);
        for i in 0..n {
            match digits[i] {
                1 => x[i] = qp.lo[i],
                2 => x[i] = qp.hi[i],
                _ => {}
            }
        }

        // reduced KKT in the free variables and equality multipliers:
        // [P_FF A_F'; A_F 0] [x_F; y] = [-q_F - P_FC x_C; b - A_C x_C]
        let dim = nf + me;
        let mut k = DMatrix::zeros(dim, dim);
        let mut r = DVector::zeros(dim);
        for (fi, &i) in free.iter().enumerate() {
            for (fj, &j) in free.iter().enumerate() {
                k[(fi, fj)] = qp.p[(i, j)];
            }
            for row in 0..me {
                k[(fi, nf + row)] = qp.a[(row, i)];
                k[(nf + row, fi)] = qp.a[(row, i)];
            }
            let mut rhs = -qp.q[i];
            for j in 0..n {
                if digits[j] != 0 {
                    rhs -= qp.p[(i, j)] * x[j];
                }
            }
            r[fi] = rhs;
        }
        for row in 0..me {
            let mut rhs = qp.b[row];
            for j in 0..n {
                if digits[j] != 0 {
                    rhs -= qp.a[(row, j)] * x[j];
                }
            }
            r[nf + row] = rhs;
        }

        let y;
        if dim > 0 {
            let lu = k.clone().lu();
            let Some(z) = lu.solve(&r) else { continue };
            // singular patterns slip through LU with garbage; reject by residual
            if (&k * &z - &r).amax() > eps * (1.0 + r.amax()) {
                continue;
            }
            for (fi, &i) in free.iter().enumerate() {
                x[i] = z[fi];
            }
            y = DVector::from_fn(me, |row, _| z[nf + row]);
        } else {
            y = DVector::zeros(me);
        }

        // primal: free vars inside their box, equalities already exact
        if free.iter().any(|&i| x[i] < qp.lo[i] - eps || x[i] > qp.hi[i] + eps) {
            continue;
        }
        if me > 0 && (&qp.a * &x - &qp.b).amax() > eps {
            continue;
        }

        // dual: grad = Px + q + A'y must vanish on free vars (by
        // construction), be >= 0 at lower clamps and <= 0 at upper clamps
        let grad = &qp.p * &x + &qp.q + qp.a.transpose() * &y;
        let dual_ok = (0..n).all(|i| match digits[i] {
            1 => grad[i] >= -eps,
            2 => grad[i] <= eps,
            _ => true,
        });
        if !dual_ok {
            continue;
        }

        let obj = qp.objective(&x);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((x, obj));
        }
    }
    best
}
