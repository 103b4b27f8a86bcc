//! Derivative-free local search over a box.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop when the simplex spread in `f` falls below this.
    pub f_tol: f64,
    /// Stop when every vertex lies within this distance of the best one.
    pub x_tol: f64,
    /// Initial simplex edge as a fraction of each box side.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iter: 2000, f_tol: 1e-12, x_tol: 1e-10, initial_step: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((xi, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *xi = xi.clamp(*l, *h);
    }
}

fn blend(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
}

/// Nelder–Mead with every trial point projected onto `[lo, hi]`. Infeasible
/// points should be reported by `f` as `+∞`; a non-finite start is returned
/// unchanged.
pub fn nelder_mead<F>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut start = x0.to_vec();
    project(&mut start, lo, hi);
    let f0 = f(&start);
    if !f0.is_finite() {
        return Minimum { x: start, f: f0, iterations: 0 };
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.clone(), f0));
    for i in 0..n {
        let mut v = start.clone();
        let step = opts.initial_step * (hi[i] - lo[i]);
        // Step inward from whichever face is closer.
        v[i] = if v[i] + step <= hi[i] { v[i] + step } else { v[i] - step };
        project(&mut v, lo, hi);
        let fv = f(&v);
        simplex.push((v, fv));
    }

    let eval = |mut x: Vec<f64>| {
        project(&mut x, lo, hi);
        let fx = f(&x);
        (x, fx)
    };

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (worst.is_finite() && spread <= opts.f_tol * (1.0 + best.abs())) || size <= opts.x_tol {
            break;
        }
        let mut centroid = vec_zeros(n);
        for (v, _) in &simplex[..n] {
            for (c, vi) in centroid.iter_mut().zip(v) {
                *c += vi / n as f64;
            }
        }
        let (reflected, fr) = eval(blend(&centroid, &simplex[n].0, -1.0));
        if fr < simplex[0].1 {
            let (expanded, fe) = eval(blend(&centroid, &simplex[n].0, -2.0));
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let toward = if fr < simplex[n].1 { &reflected } else { &simplex[n].0 };
            let (contracted, fc) = eval(blend(&centroid, toward, 0.5));
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    *vertex = eval(blend(&anchor, &vertex.0, 0.5));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    Minimum { x, f, iterations }
}

fn vec_zeros(n: usize) -> Vec<f64> {
    alloc::vec![0.0; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NelderMeadOptions { max_iter: 10_000, ..Default::default() };
        let m = nelder_mead(f, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn minimum_on_box_face() {
        let f = |x: &[f64]| x[0] + (x[1] - 0.3).powi(2);
        let m = nelder_mead(f, &[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0], &NelderMeadOptions::default());
        assert!(m.x[0] < 1e-8);
        assert!((m.x[1] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn infeasible_region_is_avoided() {
        let f = |x: &[f64]| if x[0] + x[1] < 1.0 { f64::INFINITY } else { x[0] * x[0] + x[1] * x[1] };
        let m = nelder_mead(f, &[1.0, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &NelderMeadOptions::default());
        assert!((m.f - 0.5).abs() < 1e-3, "{m:?}");
    }
}
