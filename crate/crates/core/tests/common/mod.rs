//! Independent oracles shared by the integration tests and the acceptance
//! harness. The feature oracle calls none of the library's numerical kernels.

#![allow(dead_code)]

pub mod gradcheck;

pub mod features {
    /// A space-time field: `[time][space]`.
    pub type Field = Vec<Vec<f64>>;

    pub struct Setup {
        pub n: usize,
        pub eps: f64,
        pub nu: f64,
        pub dt: f64,
        pub steps: usize,
        pub substeps: usize,
    }

    /// Solves `(I − δt·ν·Δ) y = b` on the interior by dense Gaussian
    /// elimination with partial pivoting; boundary entries are zero.
    pub fn implicit_solve(s: &Setup, b: &[f64]) -> Vec<f64> {
        let m = s.n - 2;
        let c = s.dt * s.nu / (s.eps * s.eps);
        let mut a = vec![vec![0.0; m + 1]; m];
        for i in 0..m {
            a[i][i] = 1.0 + 2.0 * c;
            if i > 0 {
                a[i][i - 1] = -c;
            }
            if i + 1 < m {
                a[i][i + 1] = -c;
            }
            a[i][m] = b[i + 1];
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..m {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=m {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut y = vec![0.0; s.n];
        for i in 0..m {
            y[i + 1] = a[i][m] / a[i][i];
        }
        y
    }

    pub fn derivative(s: &Setup, x: &[f64]) -> Vec<f64> {
        let n = s.n;
        let h = s.eps;
        let mut y = vec![0.0; n];
        y[0] = (x[1] - x[0]) / h;
        y[n - 1] = (x[n - 1] - x[n - 2]) / h;
        for i in 1..n - 1 {
            y[i] = (x[i + 1] - x[i - 1]) / (2.0 * h);
        }
        y
    }

    pub fn integral(s: &Setup, z: &Field) -> Field {
        let mut out = vec![vec![0.0; s.n]; s.steps + 1];
        for k in 0..s.steps {
            let b: Vec<f64> = (0..s.n).map(|i| out[k][i] + s.dt * z[k][i]).collect();
            out[k + 1] = implicit_solve(s, &b);
        }
        out
    }

    fn product(fields: &[&Field], s: &Setup) -> Field {
        let mut out = vec![vec![1.0; s.n]; s.steps + 1];
        for f in fields {
            for t in 0..=s.steps {
                for i in 0..s.n {
                    out[t][i] *= f[t][i];
                }
            }
        }
        out
    }

    fn sequences(len: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..k {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..len).map(move |c| {
                        let mut q = p.clone();
                        q.push(c);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Literal expansion of the set-builder rounds: ordered factor sequences,
    /// no deduplication.
    pub fn brute_force(
        s: &Setup,
        nml: (usize, usize, usize),
        u0: &[f64],
        f_slices: &[Vec<f64>],
        xi: &[Vec<f64>],
    ) -> Vec<Field> {
        let (n, m, l) = nml;
        let mut s_in = vec![u0.to_vec()];
        for k in 0..s.steps {
            let next = implicit_solve(s, &s_in[k]);
            s_in.push(next);
        }
        let f: Field = (0..=s.steps)
            .map(|j| f_slices[(j / s.substeps).min(f_slices.len() - 1)].clone())
            .collect();
        let mut x: Field = xi.to_vec();
        x.push(vec![0.0; s.n]);

        let mut set: Vec<Field> = vec![s_in];
        for _ in 0..n {
            let mut pool: Vec<Field> = vec![];
            for e in &set {
                pool.push(e.clone());
                pool.push(e.iter().map(|row| derivative(s, row)).collect());
            }
            let mut z: Vec<Field> = vec![];
            let mut add = |leaf: Option<&Field>, kmin: usize, kmax: usize| {
                for k in kmin..=kmax {
                    for seq in sequences(pool.len(), k) {
                        let mut parts: Vec<&Field> = seq.iter().map(|&c| &pool[c]).collect();
                        if let Some(lf) = leaf {
                            parts.push(lf);
                        }
                        if !parts.is_empty() {
                            z.push(product(&parts, s));
                        }
                    }
                }
            };
            if m >= 1 {
                add(None, 1, m);
                add(Some(&f), 0, m - 1);
            }
            if l >= 1 {
                add(Some(&x), 0, l - 1);
            }
            let mut next: Vec<Field> = z.iter().map(|zz| integral(s, zz)).collect();
            next.extend(set);
            set = next;
        }
        set
    }
}

pub mod fd {
    /// Relative error between an analytic directional derivative and its
    /// central finite difference.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }
}
