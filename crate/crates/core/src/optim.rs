//! Derivative-free Nelder–Mead minimiser for low-dimensional problems.

#[derive(Debug, Clone, Copy)]
pub(crate) struct NelderMead {
    pub max_evals: usize,
    /// Relative spread of objective values across the simplex.
    pub f_tol: f64,
    pub initial_step: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, start: &[f64], mut f: F) -> Minimum {
        let dim = start.len();
        let mut evals = 0usize;
        let mut eval = |p: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(p);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        let v0 = eval(start, &mut evals);
        simplex.push((start.to_vec(), v0));
        for i in 0..dim {
            let mut p = start.to_vec();
            p[i] += self.initial_step;
            let v = eval(&p, &mut evals);
            simplex.push((p, v));
        }

        let mut converged = false;
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (best, worst) = (simplex[0].1, simplex[dim].1);
            if (worst - best).abs() <= self.f_tol * best.abs().max(1e-12) {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; dim];
            for (p, _) in &simplex[..dim] {
                for (c, x) in centroid.iter_mut().zip(p) {
                    *c += x / dim as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[dim].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };

            let reflected = along(-1.0);
            let fr = eval(&reflected, &mut evals);
            if fr < simplex[0].1 {
                let expanded = along(-2.0);
                let fe = eval(&expanded, &mut evals);
                simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            } else if fr < simplex[dim - 1].1 {
                simplex[dim] = (reflected, fr);
            } else {
                let (contracted, fc) = if fr < worst {
                    let p = along(-0.5);
                    let v = eval(&p, &mut evals);
                    (p, v)
                } else {
                    let p = along(0.5);
                    let v = eval(&p, &mut evals);
                    (p, v)
                };
                if fc < fr.min(worst) {
                    simplex[dim] = (contracted, fc);
                } else {
                    let b = simplex[0].0.clone();
                    for s in simplex.iter_mut().skip(1) {
                        let p: Vec<f64> = b.iter().zip(&s.0).map(|(x, y)| x + 0.5 * (y - x)).collect();
                        let v = eval(&p, &mut evals);
                        *s = (p, v);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (point, value) = simplex.swap_remove(0);
        Minimum {
            point,
            value,
            evals,
            converged,
        }
    }
}
