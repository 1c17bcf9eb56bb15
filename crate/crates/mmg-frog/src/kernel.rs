//! Low-rank kernel representation of the vacuum-subtracted spectrogram.
//!
//! The vacuum-subtracted intensity is *linear* in two kernels of the state:
//! the Hermitian P(t,t') = sum_n cplus_n psi_n(t) conj(psi_n(t')) and the
//! symmetric Q(t,t') = sum_n cminus_n psi_n(t) psi_n(t'), where
//! cplus = ((var_x - 1/4) + (var_p - 1/4)) / 2 and
//! cminus = ((var_p - 1/4) - (var_x - 1/4)) / 2.
//!
//! Fitting (P, Q) to the data is therefore a convex least-squares problem;
//! the mode structure enters only through a rank-M projection. Gradient
//! descent directly on modes and variances crawls along the degenerate
//! valleys of basis rotations with compensating variances; projected
//! gradient iteration in kernel space has no such gauge directions, and the
//! modes fall out of an eigendecomposition.
//!
//! With a_i = gs_i * phase_i and c_i = gs_i * conj(phase_i) per delay i, the
//! pixel model is
//!   dI(w, tau_i) = lambda * [ T(diag(a) P diag(a)*) / 2
//!                           + T(diag(c) conj(P) diag(c)*) / 2
//!                           + Re T(diag(a) Q diag(c)*) ](w)
//! where T(M)(w_j) = sum_{t,t'} D_{jt} M_{tt'} conj(D_{jt'}) and D is the
//! centered unitary DFT. T depends on M only through its diagonal-lag sums,
//! so each delay costs O(n^2).

use ndarray::Array2;
use num_complex::Complex64;

use crate::forward::DelayKernels;

pub(crate) struct KernelOperator {
    n: usize,
    /// Vacuum-referencing scale applied to every intensity value.
    scale2: f64,
    /// lag_table[j][m + n - 1] = e^{-i 2pi (j - n/2) m / n} / n.
    lag_table: Array2<Complex64>,
    /// gs * phase per delay.
    a: Vec<Vec<Complex64>>,
    /// gs * conj(phase) per delay.
    c: Vec<Vec<Complex64>>,
}

impl KernelOperator {
    pub(crate) fn new(kernels: &DelayKernels) -> Self {
        let n = kernels.n_t;
        let h = (n / 2) as f64;
        let theta = 2.0 * std::f64::consts::PI / n as f64;
        let mut lag_table = Array2::default((n, 2 * n - 1));
        for j in 0..n {
            let fj = j as f64 - h;
            for (mi, cell) in lag_table.row_mut(j).iter_mut().enumerate() {
                let m = mi as f64 - (n as f64 - 1.0);
                *cell = Complex64::from_polar(1.0 / n as f64, -theta * fj * m);
            }
        }
        let a: Vec<Vec<Complex64>> = kernels
            .gs
            .iter()
            .zip(&kernels.phase)
            .map(|(g, ph)| g.iter().zip(ph).map(|(&g, &p)| g * p).collect())
            .collect();
        let c: Vec<Vec<Complex64>> = kernels
            .gs
            .iter()
            .zip(&kernels.phase)
            .map(|(g, ph)| g.iter().zip(ph).map(|(&g, &p)| g * p.conj()).collect())
            .collect();
        Self {
            n,
            scale2: kernels.sqrt_scale * kernels.sqrt_scale,
            lag_table,
            a,
            c,
        }
    }

    pub(crate) fn n(&self) -> usize {
        self.n
    }

    pub(crate) fn n_delays(&self) -> usize {
        self.a.len()
    }

    /// T(M)(w_j) for the weighted kernel M, via its diagonal-lag sums.
    fn toeplitz_eval(&self, m: &Array2<Complex64>, out: &mut [Complex64]) {
        let n = self.n;
        let mut lags = vec![Complex64::default(); 2 * n - 1];
        for t in 0..n {
            for tp in 0..n {
                lags[t + n - 1 - tp] += m[(t, tp)];
            }
        }
        for j in 0..n {
            let row = self.lag_table.row(j);
            let mut acc = Complex64::default();
            for (w, l) in row.iter().zip(&lags) {
                acc += w * l;
            }
            out[j] = acc;
        }
    }

    /// Intensity columns dI[delay][w] of the kernel pair.
    pub(crate) fn forward(&self, p: &Array2<Complex64>, q: &Array2<Complex64>) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut cols = Vec::with_capacity(self.n_delays());
        let mut weighted = Array2::<Complex64>::default((n, n));
        let mut tp1 = vec![Complex64::default(); n];
        let mut tp2 = vec![Complex64::default(); n];
        let mut tq = vec![Complex64::default(); n];
        for i in 0..self.n_delays() {
            let (a, c) = (&self.a[i], &self.c[i]);
            for t in 0..n {
                for tp in 0..n {
                    weighted[(t, tp)] = a[t] * p[(t, tp)] * a[tp].conj();
                }
            }
            self.toeplitz_eval(&weighted, &mut tp1);
            for t in 0..n {
                for tp in 0..n {
                    weighted[(t, tp)] = c[t] * p[(t, tp)].conj() * c[tp].conj();
                }
            }
            self.toeplitz_eval(&weighted, &mut tp2);
            for t in 0..n {
                for tp in 0..n {
                    weighted[(t, tp)] = a[t] * q[(t, tp)] * c[tp].conj();
                }
            }
            self.toeplitz_eval(&weighted, &mut tq);
            cols.push(
                (0..n)
                    .map(|j| self.scale2 * (0.5 * (tp1[j].re + tp2[j].re) + tq[j].re))
                    .collect(),
            );
        }
        cols
    }

    /// Centered unitary DFT of a length-n vector, read off the lag table.
    fn centered_dft(&self, x: &[Complex64], out: &mut [Complex64]) {
        let n = self.n;
        let s = (n as f64).sqrt();
        let off = n / 2 - 1;
        for j in 0..n {
            let row = self.lag_table.row(j);
            let mut acc = Complex64::default();
            for t in 0..n {
                acc += row[t + off] * x[t];
            }
            out[j] = acc * s;
        }
    }

    /// Exact least-squares refit of the kernel pair restricted to the span
    /// of the orthonormal columns `v`: P = V A V^H (A Hermitian M x M) and
    /// Q = V B V^T (B complex symmetric M x M). The spectrogram is linear in
    /// (A, B), so the masked fit is a small dense normal-equations solve;
    /// this makes each projected-gradient iterate loss-optimal within its
    /// current mode span, which is what turns the slow hard-thresholding
    /// iteration into a fast alternating minimization.
    ///
    /// On success overwrites (p, q) with the refit kernels and returns true;
    /// on a singular or non-finite solve leaves them untouched.
    pub(crate) fn refit_in_span(
        &self,
        v: &[Vec<Complex64>],
        meas: &[Vec<f64>],
        mask: &[Vec<bool>],
        p: &mut Array2<Complex64>,
        q: &mut Array2<Complex64>,
    ) -> bool {
        let n = self.n;
        let m = v.len();
        let npair = m * (m - 1) / 2;
        // A: m real diagonals + complex upper triangle; B: complex diagonal
        // and upper triangle
        let np = m + 2 * npair + 2 * m + 2 * npair;
        let mut gtg = vec![vec![0.0f64; np]; np];
        let mut gty = vec![0.0f64; np];
        let mut u = vec![vec![Complex64::default(); n]; m];
        let mut w = vec![vec![Complex64::default(); n]; m];
        let mut row = vec![0.0f64; np];
        let mut scratch = vec![Complex64::default(); n];
        for i in 0..self.n_delays() {
            let (a, c) = (&self.a[i], &self.c[i]);
            // per-mode spectral amplitudes: u_k = D(a .* v_k),
            // w_k = D(c .* conj(v_k)); every basis-kernel pixel value is a
            // bilinear combination of these
            for k in 0..m {
                for t in 0..n {
                    scratch[t] = a[t] * v[k][t];
                }
                self.centered_dft(&scratch, &mut u[k]);
                for t in 0..n {
                    scratch[t] = c[t] * v[k][t].conj();
                }
                self.centered_dft(&scratch, &mut w[k]);
            }
            for j in 0..n {
                if !mask[i][j] {
                    continue;
                }
                let mut idx = 0;
                for k in 0..m {
                    row[idx] = 0.5 * self.scale2 * (u[k][j].norm_sqr() + w[k][j].norm_sqr());
                    idx += 1;
                }
                for k in 0..m {
                    for l in k + 1..m {
                        let zu = u[k][j] * u[l][j].conj();
                        let zw = w[k][j] * w[l][j].conj();
                        row[idx] = self.scale2 * (zu.re + zw.re);
                        row[idx + 1] = self.scale2 * (zw.im - zu.im);
                        idx += 2;
                    }
                }
                for k in 0..m {
                    let z = u[k][j] * w[k][j].conj();
                    row[idx] = self.scale2 * z.re;
                    row[idx + 1] = -self.scale2 * z.im;
                    idx += 2;
                }
                for k in 0..m {
                    for l in k + 1..m {
                        let z = u[k][j] * w[l][j].conj() + u[l][j] * w[k][j].conj();
                        row[idx] = self.scale2 * z.re;
                        row[idx + 1] = -self.scale2 * z.im;
                        idx += 2;
                    }
                }
                let y = meas[i][j];
                for r in 0..np {
                    let rv = row[r];
                    if rv == 0.0 {
                        continue;
                    }
                    gty[r] += rv * y;
                    for (s2, &cv) in row.iter().enumerate().skip(r) {
                        gtg[r][s2] += rv * cv;
                    }
                }
            }
        }
        for r in 0..np {
            for s2 in 0..r {
                gtg[r][s2] = gtg[s2][r];
            }
        }
        let diag_scale = (0..np).map(|r| gtg[r][r]).fold(0.0f64, f64::max);
        if !(diag_scale > 0.0) {
            return false;
        }
        // tiny ridge keeps modes invisible to the data (e.g. vacuum) solvable
        for (r, g) in gtg.iter_mut().enumerate() {
            g[r] += 1e-12 * diag_scale;
        }
        let x = match solve_dense(gtg, gty) {
            Some(x) if x.iter().all(|v| v.is_finite()) => x,
            _ => return false,
        };
        let mut a_m = Array2::<Complex64>::default((m, m));
        let mut b_m = Array2::<Complex64>::default((m, m));
        let mut idx = 0;
        for k in 0..m {
            a_m[(k, k)] = Complex64::new(x[idx], 0.0);
            idx += 1;
        }
        for k in 0..m {
            for l in k + 1..m {
                a_m[(k, l)] = Complex64::new(x[idx], x[idx + 1]);
                a_m[(l, k)] = a_m[(k, l)].conj();
                idx += 2;
            }
        }
        for k in 0..m {
            b_m[(k, k)] = Complex64::new(x[idx], x[idx + 1]);
            idx += 2;
        }
        for k in 0..m {
            for l in k + 1..m {
                b_m[(k, l)] = Complex64::new(x[idx], x[idx + 1]);
                b_m[(l, k)] = b_m[(k, l)];
                idx += 2;
            }
        }
        // P = V A V^H, Q = V B V^T
        let mut wa = vec![vec![Complex64::default(); n]; m];
        let mut wb = vec![vec![Complex64::default(); n]; m];
        for l in 0..m {
            for t in 0..n {
                let mut acca = Complex64::default();
                let mut accb = Complex64::default();
                for k in 0..m {
                    acca += a_m[(k, l)] * v[k][t];
                    accb += b_m[(k, l)] * v[k][t];
                }
                wa[l][t] = acca;
                wb[l][t] = accb;
            }
        }
        for t in 0..n {
            for tp in 0..n {
                let mut sp = Complex64::default();
                let mut sq = Complex64::default();
                for l in 0..m {
                    sp += wa[l][t] * v[l][tp].conj();
                    sq += wb[l][t] * v[l][tp];
                }
                p[(t, tp)] = sp;
                q[(t, tp)] = sq;
            }
        }
        true
    }

    /// Gradient of f(P, Q) = sum_px resid_px * dI_px under the real inner
    /// product Re tr(G^H dP) + Re tr(G^H dQ); the caller supplies the
    /// residual (zero outside the mask).
    pub(crate) fn adjoint(
        &self,
        resid: &[Vec<f64>],
    ) -> (Array2<Complex64>, Array2<Complex64>) {
        let n = self.n;
        let mut gp = Array2::<Complex64>::default((n, n));
        let mut gq = Array2::<Complex64>::default((n, n));
        let mut rho = vec![Complex64::default(); 2 * n - 1];
        for (i, r) in resid.iter().enumerate() {
            // rho(m) = (1/n) sum_j r_j e^{+i theta (j-h) m}: conjugate of the
            // lag table contraction
            for (mi, cell) in rho.iter_mut().enumerate() {
                let mut acc = Complex64::default();
                for j in 0..n {
                    acc += self.lag_table[(j, mi)].conj() * r[j];
                }
                *cell = acc;
            }
            let (a, c) = (&self.a[i], &self.c[i]);
            // F_{t t'} = rho(t' - t); H1 = diag(a) F diag(a)^*,
            // H2 = diag(c) F diag(c)^*, K = diag(a) F diag(c)^*;
            // G_P += (conj(H1) + H2) / 2, G_Q += conj(K)
            for t in 0..n {
                for tp in 0..n {
                    let f = rho[tp + n - 1 - t];
                    let h1 = a[t] * f * a[tp].conj();
                    let h2 = c[t] * f * c[tp].conj();
                    gp[(t, tp)] += 0.5 * (h1.conj() + h2);
                    gq[(t, tp)] += (a[t] * f * c[tp].conj()).conj();
                }
            }
        }
        for g in [&mut gp, &mut gq] {
            for v in g.iter_mut() {
                *v *= self.scale2;
            }
        }
        // project onto the constraint manifolds: P Hermitian, Q symmetric
        for t in 0..n {
            for tp in t..n {
                let ph = 0.5 * (gp[(t, tp)] + gp[(tp, t)].conj());
                gp[(t, tp)] = ph;
                gp[(tp, t)] = ph.conj();
                let qs = 0.5 * (gq[(t, tp)] + gq[(tp, t)]);
                gq[(t, tp)] = qs;
                gq[(tp, t)] = qs;
            }
        }
        (gp, gq)
    }
}

/// Gaussian elimination with partial pivoting for the small normal systems.
fn solve_dense(mut g: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let dim = rhs.len();
    for col in 0..dim {
        let mut pivot = col;
        for r in col + 1..dim {
            if g[r][col].abs() > g[pivot][col].abs() {
                pivot = r;
            }
        }
        if g[pivot][col].abs() <= 1e-300 {
            return None;
        }
        g.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in col + 1..dim {
            let f = g[r][col] / g[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..dim {
                g[r][c] -= f * g[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0f64; dim];
    for r in (0..dim).rev() {
        let mut acc = rhs[r];
        for c in r + 1..dim {
            acc -= g[r][c] * x[c];
        }
        x[r] = acc / g[r][r];
        if !x[r].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// y = M x.
fn matvec(m: &Array2<Complex64>, x: &[Complex64], y: &mut [Complex64]) {
    let n = x.len();
    for t in 0..n {
        let row = m.row(t);
        let mut acc = Complex64::default();
        for (v, xv) in row.iter().zip(x) {
            acc += v * xv;
        }
        y[t] = acc;
    }
}

/// y = conj(M) x (for Q^H x with symmetric Q).
fn matvec_conj(m: &Array2<Complex64>, x: &[Complex64], y: &mut [Complex64]) {
    let n = x.len();
    for t in 0..n {
        let row = m.row(t);
        let mut acc = Complex64::default();
        for (v, xv) in row.iter().zip(x) {
            acc += v.conj() * xv;
        }
        y[t] = acc;
    }
}

fn dot(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Modified Gram-Schmidt on plain-l2 columns; near-null columns are replaced
/// by coordinate vectors to keep the basis full rank.
fn orthonormalize_columns(v: &mut [Vec<Complex64>]) {
    let n = v[0].len();
    for k in 0..v.len() {
        for prev in 0..k {
            let (head, tail) = v.split_at_mut(k);
            let proj = dot(&head[prev], &tail[0]);
            for t in 0..n {
                let p = head[prev][t];
                tail[0][t] -= proj * p;
            }
        }
        let norm = v[k].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-150 {
            for z in &mut v[k] {
                *z /= norm;
            }
        } else {
            for (t, z) in v[k].iter_mut().enumerate() {
                *z = if t == k { Complex64::new(1.0, 0.0) } else { Complex64::default() };
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small Hermitian matrix; returns
/// eigenvalues and overwrites `vecs` with the corresponding eigenvector
/// columns (vecs[k] is the k-th eigenvector in the input basis).
pub(crate) fn jacobi_hermitian(a: &mut Array2<Complex64>, vecs: &mut Array2<Complex64>) -> Vec<f64> {
    let m = a.nrows();
    for i in 0..m {
        for j in 0..m {
            vecs[(i, j)] = if i == j { Complex64::new(1.0, 0.0) } else { Complex64::default() };
        }
    }
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..m {
            for q in p + 1..m {
                off = off.max(a[(p, q)].norm());
            }
        }
        let scale: f64 = (0..m).map(|i| a[(i, i)].re.abs()).fold(1e-300, f64::max);
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[(p, q)];
                if apq.norm() <= 1e-300 {
                    continue;
                }
                let phi = apq.arg();
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let theta = 0.5 * (2.0 * apq.norm()).atan2(app - aqq);
                let (cs, sn) = (theta.cos(), theta.sin());
                let e = Complex64::from_polar(1.0, phi);
                // columns p, q mix by the unitary [[cs, -sn e], [sn e*, cs]]
                for i in 0..m {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = cs * aip + sn * e.conj() * aiq;
                    a[(i, q)] = -sn * e * aip + cs * aiq;
                }
                for j in 0..m {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = cs * apj + sn * e * aqj;
                    a[(q, j)] = -sn * e.conj() * apj + cs * aqj;
                }
                for i in 0..m {
                    let vip = vecs[(i, p)];
                    let viq = vecs[(i, q)];
                    vecs[(i, p)] = cs * vip + sn * e.conj() * viq;
                    vecs[(i, q)] = -sn * e * vip + cs * viq;
                }
            }
        }
    }
    (0..m).map(|i| a[(i, i)].re).collect()
}

/// Takagi factorization of a small complex symmetric matrix A = U diag(s) U^T
/// with s >= 0: eigenvectors of the Hermitian A conj(A) give the directions,
/// and a phase rotation aligns each one.
fn takagi_small(a: &Array2<Complex64>) -> Array2<Complex64> {
    let m = a.nrows();
    let mut h = Array2::<Complex64>::default((m, m));
    for i in 0..m {
        for j in 0..m {
            let mut acc = Complex64::default();
            for k in 0..m {
                acc += a[(i, k)] * a[(k, j)].conj();
            }
            h[(i, j)] = acc;
        }
    }
    let mut vecs = Array2::<Complex64>::default((m, m));
    jacobi_hermitian(&mut h, &mut vecs);
    // per column u: A conj(u) = s e^{i phi} u; replace u by e^{i phi / 2} u
    let mut out = vecs.clone();
    for k in 0..m {
        let u: Vec<Complex64> = (0..m).map(|i| vecs[(i, k)]).collect();
        let mut w = vec![Complex64::default(); m];
        for i in 0..m {
            let mut acc = Complex64::default();
            for j in 0..m {
                acc += a[(i, j)] * u[j].conj();
            }
            w[i] = acc;
        }
        let overlap = dot(&u, &w);
        if overlap.norm() > 1e-300 {
            let half = Complex64::from_polar(1.0, 0.5 * overlap.arg());
            for i in 0..m {
                out[(i, k)] = u[i] * half;
            }
        }
    }
    out
}

/// Projects (P, Q) onto kernel pairs generated by M shared orthonormal
/// modes, warm-starting the invariant subspace from `v`. Returns the plain
/// (unit-l2) coefficients (cplus, cminus) per mode; `v` holds the modes, and
/// P, Q are overwritten by their projections.
pub(crate) fn rank_project(
    p: &mut Array2<Complex64>,
    q: &mut Array2<Complex64>,
    v: &mut Vec<Vec<Complex64>>,
    subspace_iters: usize,
) -> (Vec<f64>, Vec<Complex64>) {
    let n = p.nrows();
    let m = v.len();
    let mut tmp = vec![Complex64::default(); n];
    // subspace iteration on S = P P^H + Q Q^H = P^2 + Q conj(Q)
    for _ in 0..subspace_iters {
        let mut next: Vec<Vec<Complex64>> = Vec::with_capacity(m);
        for col in v.iter() {
            let mut sv = vec![Complex64::default(); n];
            matvec(p, col, &mut tmp);
            matvec(p, &tmp.clone(), &mut sv);
            matvec_conj(q, col, &mut tmp);
            let mut qq = vec![Complex64::default(); n];
            matvec(q, &tmp, &mut qq);
            for t in 0..n {
                sv[t] += qq[t];
            }
            next.push(sv);
        }
        orthonormalize_columns(&mut next);
        *v = next;
    }
    // diagonalize P within the subspace: the shared eigenbasis makes the
    // restriction Pm = V^H P V diagonal in the true modes
    let mut pm = Array2::<Complex64>::default((m, m));
    let pv: Vec<Vec<Complex64>> = v
        .iter()
        .map(|col| {
            let mut y = vec![Complex64::default(); n];
            matvec(p, col, &mut y);
            y
        })
        .collect();
    for i in 0..m {
        for j in 0..m {
            pm[(i, j)] = dot(&v[i], &pv[j]);
        }
    }
    let mut u = Array2::<Complex64>::default((m, m));
    let mut cplus = jacobi_hermitian(&mut pm, &mut u);
    let mut rotated: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; m];
    for k in 0..m {
        for t in 0..n {
            let mut acc = Complex64::default();
            for i in 0..m {
                acc += v[i][t] * u[(i, k)];
            }
            rotated[k][t] = acc;
        }
    }
    *v = rotated;
    // degenerate cplus clusters are only split by Q: Takagi-diagonalize the
    // corresponding block of Qm = V^H Q conj(V)
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| cplus[j].partial_cmp(&cplus[i]).unwrap());
    let sorted_v: Vec<Vec<Complex64>> = order.iter().map(|&i| v[i].clone()).collect();
    let sorted_c: Vec<f64> = order.iter().map(|&i| cplus[i]).collect();
    *v = sorted_v;
    cplus = sorted_c;
    let cscale = cplus.iter().fold(1e-300f64, |acc, c| acc.max(c.abs()));
    let mut k0 = 0;
    while k0 < m {
        let mut k1 = k0 + 1;
        while k1 < m && (cplus[k1] - cplus[k0]).abs() <= 1e-6 * cscale {
            k1 += 1;
        }
        if k1 - k0 > 1 {
            let mm = k1 - k0;
            let mut qm = Array2::<Complex64>::default((mm, mm));
            for i in 0..mm {
                matvec_conj(q, &v[k0 + i], &mut tmp);
                // tmp = conj(Q) v_i, so conj(tmp) = Q conj(v_i)
                for j in 0..mm {
                    let mut acc = Complex64::default();
                    for t in 0..n {
                        acc += v[k0 + j][t].conj() * tmp[t].conj();
                    }
                    qm[(j, i)] = acc;
                }
            }
            let u = takagi_small(&qm);
            let mut rot: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; mm];
            for k in 0..mm {
                for t in 0..n {
                    let mut acc = Complex64::default();
                    for i in 0..mm {
                        acc += v[k0 + i][t] * u[(i, k)].conj();
                    }
                    rot[k][t] = acc;
                }
            }
            for k in 0..mm {
                v[k0 + k] = rot[k].clone();
            }
        }
        k0 = k1;
    }
    // cminus_k = v_k^H Q conj(v_k)
    let mut cminus = Vec::with_capacity(m);
    for col in v.iter() {
        matvec_conj(q, col, &mut tmp);
        let mut acc = Complex64::default();
        for t in 0..n {
            acc += col[t].conj() * tmp[t].conj();
        }
        cminus.push(acc);
    }
    // rebuild the projected kernels
    for t in 0..n {
        for tp in 0..n {
            let mut sp = Complex64::default();
            let mut sq = Complex64::default();
            for k in 0..m {
                sp += cplus[k] * v[k][t] * v[k][tp].conj();
                sq += cminus[k] * v[k][t] * v[k][tp];
            }
            p[(t, tp)] = sp;
            q[(t, tp)] = sq;
        }
    }
    (cplus, cminus)
}
