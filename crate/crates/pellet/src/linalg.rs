//! Small deterministic linear-algebra kernels: CSR matrices, Jacobi-CG,
//! Thomas solves, partial-pivot elimination, and a symmetric-tridiagonal
//! eigensolver (Sturm bisection + inverse iteration).

/// Compressed sparse rows, built from (row, col, value) triplets with
/// duplicate entries summed.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Csr {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &k in &order {
            let (r, c, v) = triplets[k];
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr {
            n,
            row_ptr,
            col: merged.iter().map(|m| m.1).collect(),
            val: merged.iter().map(|m| m.2).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col[k] == r {
                    d[r] += self.val[k];
                }
            }
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients with Jacobi preconditioning.  Fixed evaluation order,
/// so results are bitwise reproducible for identical inputs.  Converges on
/// ‖r‖ ≤ rel_tol·‖b‖ (absolute fallback for b = 0).
pub fn cg_jacobi(a: &Csr, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>, String> {
    let n = a.n;
    let norm_b = dot(b, b).sqrt();
    let stop = if norm_b > 0.0 { rel_tol * norm_b } else { rel_tol };
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if dot(&r, &r).sqrt() <= stop {
        return Ok(x);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(format!("matrix is not positive definite (pᵀAp = {pap:e})"));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= stop {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(format!("conjugate gradients stalled after {max_iter} iterations"))
}

/// Thomas algorithm for a tridiagonal system (sub, diag, sup).
pub fn solve_tridiagonal(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, String> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    if diag[0] == 0.0 {
        return Err("zero pivot in tridiagonal solve".into());
    }
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i - 1] * c[i - 1];
        if denom == 0.0 {
            return Err("zero pivot in tridiagonal solve".into());
        }
        c[i] = if i < n - 1 { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c[i] * next;
    }
    Ok(x)
}

/// Gaussian elimination with partial pivoting on an n×m augmented system
/// rows·x = rhs (square).  Returns None for a numerically singular matrix.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Null-space direction of an m×(m+1) system by partial-pivot elimination:
/// returns x with rows·x = 0 and a forced unit entry in the free column.
pub fn nullspace_rectangular(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = rows.len();
    let n = m + 1;
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let mut pivot_cols = Vec::with_capacity(m);
    let mut r = 0usize;
    for col in 0..n {
        if r == m {
            break;
        }
        let piv = (r..m).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[piv][col].abs() < 1e-13 {
            continue;
        }
        a.swap(r, piv);
        for row in 0..m {
            if row != r {
                let f = a[row][col] / a[r][col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row][k] -= f * a[r][k];
                    }
                }
            }
        }
        pivot_cols.push(col);
        r += 1;
    }
    let free_col = (0..n).find(|c| !pivot_cols.contains(c))?;
    let mut x = vec![0.0; n];
    x[free_col] = 1.0;
    for (row, &pc) in pivot_cols.iter().enumerate() {
        x[pc] = -a[row][free_col] / a[row][pc];
    }
    Some(x)
}

/// Eigenvalues of a symmetric tridiagonal matrix by Sturm-sequence bisection;
/// eigenvectors by inverse iteration.  Returns the lowest `count` pairs in
/// ascending order.
pub fn tridiag_eigen(
    diag: &[f64],
    off: &[f64],
    count: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), String> {
    let n = diag.len();
    if count > n {
        return Err("requested more eigenpairs than matrix dimension".into());
    }
    // Gershgorin bounds.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = (if i > 0 { off[i - 1].abs() } else { 0.0 })
            + (if i < n - 1 { off[i].abs() } else { 0.0 });
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }

    // Sturm count: number of eigenvalues below x.
    let count_below = |x: f64| -> usize {
        let mut cnt = 0usize;
        let mut d = diag[0] - x;
        if d < 0.0 {
            cnt += 1;
        }
        for i in 1..n {
            let denom = if d.abs() < 1e-300 { 1e-300_f64.copysign(if d < 0.0 { -1.0 } else { 1.0 }) } else { d };
            d = (diag[i] - x) - off[i - 1] * off[i - 1] / denom;
            if d < 0.0 {
                cnt += 1;
            }
        }
        cnt
    };

    let mut lambdas = Vec::with_capacity(count);
    for k in 0..count {
        let (mut a, mut b) = (lo, hi);
        while b - a > tol * (1.0 + a.abs().max(b.abs())) {
            let mid = 0.5 * (a + b);
            if count_below(mid) > k {
                b = mid;
            } else {
                a = mid;
            }
        }
        lambdas.push(0.5 * (a + b));
    }

    let mut vectors = Vec::with_capacity(count);
    for (k, &lam) in lambdas.iter().enumerate() {
        // Shift slightly off the eigenvalue so the shifted matrix stays
        // invertible; the shift direction separates clustered pairs.
        let scale = 1.0 + lam.abs();
        let shift = lam + 1e-11 * scale;
        let sub: Vec<f64> = off.to_vec();
        let dd: Vec<f64> = diag.iter().map(|d| d - shift).collect();
        let mut v = vec![0.0; n];
        // Deterministic start, orthogonal-ish to lower modes.
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = ((i + 1) as f64 * 0.7391 + (k + 1) as f64 * 0.3571).sin();
        }
        for _ in 0..64 {
            // Orthogonalise against previously found vectors (handles
            // clustered eigenvalues).
            for prev in vectors.iter().take(k) {
                let prev: &Vec<f64> = prev;
                let c = dot(&v, prev);
                for i in 0..n {
                    v[i] -= c * prev[i];
                }
            }
            let w = solve_tridiagonal(&sub, &dd, &sub, &v)?;
            let norm = dot(&w, &w).sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err("inverse iteration broke down".into());
            }
            let mut w: Vec<f64> = w.iter().map(|x| x / norm).collect();
            // Fix sign for determinism: first significant entry positive.
            if let Some(first) = w.iter().find(|x| x.abs() > 1e-8) {
                if *first < 0.0 {
                    for x in &mut w {
                        *x = -*x;
                    }
                }
            }
            let delta: f64 = v
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        vectors.push(v);
    }
    Ok((lambdas, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_merges_duplicates() {
        let a = Csr::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 5.0), (0, 1, -1.0)]);
        let mut y = vec![0.0; 2];
        a.matvec(&[1.0, 1.0], &mut y);
        assert_eq!(y, vec![2.0, 5.0]);
        assert_eq!(a.diagonal(), vec![3.0, 5.0]);
    }

    #[test]
    fn cg_solves_spd() {
        let a = Csr::from_triplets(
            3,
            &[(0, 0, 4.0), (1, 1, 3.0), (2, 2, 2.0), (0, 1, 1.0), (1, 0, 1.0)],
        );
        let x = cg_jacobi(&a, &[5.0, 4.0, 2.0], 1e-14, 100).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!((x[1] - 1.0).abs() < 1e-10);
        assert!((x[2] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cg_bitwise_reproducible() {
        let a = Csr::from_triplets(
            4,
            &[
                (0, 0, 4.0),
                (1, 1, 5.0),
                (2, 2, 6.0),
                (3, 3, 7.0),
                (0, 1, 1.0),
                (1, 0, 1.0),
                (2, 3, -1.5),
                (3, 2, -1.5),
            ],
        );
        let b = [1.0, -2.0, 3.0, 0.5];
        let x1 = cg_jacobi(&a, &b, 1e-12, 100).unwrap();
        let x2 = cg_jacobi(&a, &b, 1e-12, 100).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn thomas_matches_dense() {
        let sub = [1.0, 2.0];
        let diag = [4.0, 5.0, 6.0];
        let sup = [1.5, 0.5];
        let rhs = [1.0, 2.0, 3.0];
        let x = solve_tridiagonal(&sub, &diag, &sup, &rhs).unwrap();
        let dense = vec![
            vec![4.0, 1.5, 0.0],
            vec![1.0, 5.0, 0.5],
            vec![0.0, 2.0, 6.0],
        ];
        let y = solve_dense(dense, rhs.to_vec()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tridiag_eigen_dirichlet_laplacian() {
        // −u'' on (0,1), h = 1/(n+1): eigenvalues (4/h²)·sin²(kπh/2).
        let n = 50;
        let h = 1.0 / (n as f64 + 1.0);
        let diag = vec![2.0 / (h * h); n];
        let off = vec![-1.0 / (h * h); n - 1];
        let (lam, vecs) = tridiag_eigen(&diag, &off, 5, 1e-13).unwrap();
        for k in 0..5 {
            let exact = (4.0 / (h * h)) * ((k as f64 + 1.0) * std::f64::consts::PI * h / 2.0)
                .sin()
                .powi(2);
            assert!((lam[k] - exact).abs() < 1e-8 * exact, "λ_{k}");
            // Residual check ‖Av − λv‖.
            let v = &vecs[k];
            let mut res: f64 = 0.0;
            for i in 0..n {
                let mut av = diag[i] * v[i];
                if i > 0 {
                    av += off[i - 1] * v[i - 1];
                }
                if i < n - 1 {
                    av += off[i] * v[i + 1];
                }
                res += (av - lam[k] * v[i]).powi(2);
            }
            assert!(res.sqrt() < 1e-7 * lam[k]);
        }
    }

    #[test]
    fn nullspace_small() {
        // x + y + z = 0, x − z = 0 → direction (1, −2, 1).
        let rows = vec![vec![1.0, 1.0, 1.0], vec![1.0, 0.0, -1.0]];
        let x = nullspace_rectangular(&rows).unwrap();
        let r1 = x[0] + x[1] + x[2];
        let r2 = x[0] - x[2];
        assert!(r1.abs() < 1e-12 && r2.abs() < 1e-12);
        assert!(x.iter().any(|v| v.abs() > 0.5));
    }
}
