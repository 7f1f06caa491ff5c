//! Truncated SVD by power iteration on `AᵀA` with deflation.

/// One singular triple `σ u vᵀ` with unit `u` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    /// Relative tolerance on the change of the `AᵀA` eigenvalue estimate.
    pub tol: f64,
    /// Iteration cap per singular triple.
    pub max_iter: usize,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NotConverged {
    pub triple: usize,
    pub last_change: f64,
}

// Singular values below this fraction of the leading one are treated as rank exhaustion.
const RANK_CUTOFF: f64 = 1e-12;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn orthogonalize(v: &mut [f64], basis: &[SingularTriple]) {
    for t in basis {
        let dot: f64 = v.iter().zip(&t.v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&t.v).for_each(|(a, b)| *a -= dot * b);
    }
}

impl PowerIteration {
    /// Up to `rank` leading singular triples of the row-major `rows × cols`
    /// matrix `a`, in non-increasing order of `σ`. Fewer are returned when the
    /// matrix rank is lower.
    pub fn top_triples(
        &self,
        a: &[f64],
        rows: usize,
        cols: usize,
        rank: usize,
    ) -> Result<Vec<SingularTriple>, NotConverged> {
        debug_assert_eq!(a.len(), rows * cols);
        let mut residual = a.to_vec();
        let mut triples: Vec<SingularTriple> = Vec::with_capacity(rank);
        let mut av = vec![0.0; rows];

        for t in 0..rank.min(rows).min(cols) {
            if let Some(first) = triples.first() {
                if norm(&residual) <= RANK_CUTOFF * first.sigma {
                    break;
                }
            }
            // Start from the heaviest residual row: it has a non-zero component in the row space.
            let start = (0..rows)
                .max_by(|&i, &j| {
                    let ni = norm(&residual[i * cols..(i + 1) * cols]);
                    let nj = norm(&residual[j * cols..(j + 1) * cols]);
                    ni.total_cmp(&nj).then(j.cmp(&i))
                })
                .expect("rows > 0");
            let mut v = residual[start * cols..(start + 1) * cols].to_vec();
            orthogonalize(&mut v, &triples);
            let start_norm = norm(&v);
            if start_norm == 0.0 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= start_norm);

            let mut prev = 0.0;
            let mut converged = false;
            let mut change = f64::INFINITY;
            for _ in 0..self.max_iter {
                for (i, out) in av.iter_mut().enumerate() {
                    *out = residual[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(&v)
                        .map(|(x, y)| x * y)
                        .sum();
                }
                let mut z = vec![0.0; cols];
                for (i, &s) in av.iter().enumerate() {
                    for (zj, r) in z.iter_mut().zip(&residual[i * cols..(i + 1) * cols]) {
                        *zj += s * r;
                    }
                }
                orthogonalize(&mut z, &triples);
                let lambda = norm(&z);
                if lambda == 0.0 {
                    converged = true;
                    break;
                }
                z.iter_mut().for_each(|x| *x /= lambda);
                v = z;
                change = (lambda - prev).abs();
                if change <= self.tol * lambda {
                    converged = true;
                    break;
                }
                prev = lambda;
            }
            if !converged {
                return Err(NotConverged {
                    triple: t,
                    last_change: change,
                });
            }

            let mut u: Vec<f64> = (0..rows)
                .map(|i| {
                    residual[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(&v)
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            let sigma = norm(&u);
            let leading = triples.first().map_or(sigma, |f| f.sigma);
            if sigma == 0.0 || sigma <= RANK_CUTOFF * leading {
                break;
            }
            u.iter_mut().for_each(|x| *x /= sigma);
            for i in 0..rows {
                let row = &mut residual[i * cols..(i + 1) * cols];
                let su = sigma * u[i];
                row.iter_mut().zip(&v).for_each(|(r, vj)| *r -= su * vj);
            }
            triples.push(SingularTriple { sigma, u, v });
        }
        Ok(triples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let t = PowerIteration::default().top_triples(&a, 3, 3, 2).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t[0].sigma - 3.0).abs() < 1e-12);
        assert!((t[1].sigma - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_stops_early() {
        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 0.1, -0.4, 2.0];
        let a: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
        let t = PowerIteration::default().top_triples(&a, 3, 4, 3).unwrap();
        assert_eq!(t.len(), 1);
        let expected = norm(&u) * norm(&v);
        assert!((t[0].sigma - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn zero_matrix_has_no_triples() {
        let t = PowerIteration::default().top_triples(&[0.0; 6], 2, 3, 2).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        // The first eigenvalue change is measured from zero, so one iteration never converges.
        let a = [1.0, 0.2, 0.3, 0.9];
        let pi = PowerIteration { tol: 1e-10, max_iter: 1 };
        let err = pi.top_triples(&a, 2, 2, 1).unwrap_err();
        assert_eq!(err.triple, 0);
    }
}
