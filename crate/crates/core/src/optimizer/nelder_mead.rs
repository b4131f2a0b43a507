//! Nelder–Mead simplex search on the unit cube.
//!
//! Vertices are clamped to `[0, 1]^n` after every move, so the objective is
//! only ever evaluated inside the box.

#[derive(Debug, Clone, Copy)]
pub struct NmOptions {
    /// Objective evaluations allowed, including the initial simplex.
    pub max_evals: usize,
    /// Edge length of the initial simplex.
    pub initial_scale: f64,
    /// Stop when every vertex is within this distance of the best one.
    pub x_tol: f64,
    /// Stop when the spread of values is below this fraction of the best.
    pub f_rel_tol: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self {
            max_evals: 1000,
            initial_scale: 0.2,
            x_tol: 1e-7,
            f_rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Best value after each iteration.
    pub history: Vec<f64>,
}

fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

fn affine(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    // a + t (b - a)
    let mut out: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai + t * (bi - ai))
        .collect();
    clamp_unit(&mut out);
    out
}

/// Maximizes `f` starting from `x0`, whose value `f0` is already known.
pub fn maximize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    f0: f64,
    opts: NmOptions,
) -> NmOutcome {
    let n = x0.len();
    let mut evals = 0;
    let mut history = Vec::new();
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        if evals >= opts.max_evals {
            break;
        }
        let mut v = x0.to_vec();
        v[i] = if v[i] + opts.initial_scale <= 1.0 {
            v[i] + opts.initial_scale
        } else {
            v[i] - opts.initial_scale
        };
        clamp_unit(&mut v);
        let fv = f(&v);
        evals += 1;
        simplex.push((v, fv));
    }
    if simplex.len() < n + 1 {
        return best_of(simplex, evals, history);
    }

    let by_value_desc = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| b.1.total_cmp(&a.1);
    loop {
        simplex.sort_by(by_value_desc);
        history.push(simplex[0].1);
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread_x = simplex[1..]
            .iter()
            .flat_map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (best - worst).abs() <= opts.f_rel_tol * best.abs() || spread_x <= opts.x_tol {
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst_x = simplex[n].0.clone();

        let reflected = affine(&centroid, &worst_x, -1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr > best {
            if evals < opts.max_evals {
                let expanded = affine(&centroid, &worst_x, -2.0);
                let fe = f(&expanded);
                evals += 1;
                simplex[n] = if fe > fr {
                    (expanded, fe)
                } else {
                    (reflected, fr)
                };
            } else {
                simplex[n] = (reflected, fr);
            }
            continue;
        }
        if fr > simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
            continue;
        }
        if evals >= opts.max_evals {
            break;
        }
        // Contract towards the better of the worst and reflected points.
        let (target, f_target) = if fr > worst {
            (&reflected, fr)
        } else {
            (&worst_x, worst)
        };
        let contracted = affine(&centroid, target, 0.5);
        let fc = f(&contracted);
        evals += 1;
        if fc > f_target {
            simplex[n] = (contracted, fc);
            continue;
        }
        // Shrink towards the best vertex.
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            if evals >= opts.max_evals {
                break;
            }
            let v = affine(&anchor, &vertex.0, 0.5);
            let fv = f(&v);
            evals += 1;
            *vertex = (v, fv);
        }
    }
    best_of(simplex, evals, history)
}

fn best_of(simplex: Vec<(Vec<f64>, f64)>, evals: usize, history: Vec<f64>) -> NmOutcome {
    // The first maximum wins, which keeps ties deterministic.
    let mut best = 0;
    for (i, (_, fv)) in simplex.iter().enumerate() {
        if *fv > simplex[best].1 {
            best = i;
        }
    }
    let (x, f) = simplex
        .into_iter()
        .nth(best)
        .expect("simplex is never empty");
    NmOutcome {
        x,
        f,
        evals,
        history,
    }
}
