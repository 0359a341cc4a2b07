//! Box-constrained quadratic program solved by projected Newton iterations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Solution of `min ½ xᵀHx + gᵀx` subject to `lower ≤ x ≤ upper`.
#[derive(Debug, Clone)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    /// `true` for dimensions not held at a bound.
    pub free: Vec<bool>,
    /// Cholesky factor of `H` restricted to the free dimensions.
    pub free_factor: Option<Cholesky<f64, Dyn>>,
    pub iterations: usize,
}

fn sub_matrix(h: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| h[(idx[i], idx[j])])
}

fn objective(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

fn clamp(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    x.zip_zip_map(lower, upper, |v, l, u| v.max(l).min(u))
}

/// Returns `None` when `H` restricted to the free set is not positive definite.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x0: &DVector<f64>,
    tolerance: f64,
    max_iters: usize,
) -> Option<BoxQpSolution> {
    let n = g.len();
    let mut x = clamp(x0, lower, upper);
    let mut value = objective(h, g, &x);
    let mut free = vec![true; n];
    let mut factor: Option<Cholesky<f64, Dyn>> = None;
    let mut factored_set: Option<Vec<bool>> = None;
    let mut iterations = 0;

    for iter in 0..max_iters {
        iterations = iter + 1;
        let grad = g + h * &x;
        for i in 0..n {
            let at_lower = x[i] <= lower[i] && grad[i] > 0.0;
            let at_upper = x[i] >= upper[i] && grad[i] < 0.0;
            free[i] = !(at_lower || at_upper);
        }
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            factor = None;
            factored_set = Some(free.clone());
            break;
        }
        if factored_set.as_ref() != Some(&free) {
            factor = Some(Cholesky::new(sub_matrix(h, &idx))?);
            factored_set = Some(free.clone());
        }
        let grad_free = DVector::from_iterator(idx.len(), idx.iter().map(|&i| grad[i]));
        if grad_free.norm() < tolerance {
            break;
        }
        // Newton step on the free dimensions with the clamped ones held fixed.
        let step_free = -factor.as_ref().unwrap().solve(&grad_free);
        let mut search = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            search[i] = step_free[k];
        }
        let slope = search.dot(&grad);
        if slope >= 0.0 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-12 {
            let candidate = clamp(&(&x + step * &search), lower, upper);
            let candidate_value = objective(h, g, &candidate);
            if (candidate_value - value) / (step * slope) >= 0.1 {
                accepted = Some((candidate, candidate_value));
                break;
            }
            step *= 0.6;
        }
        match accepted {
            Some((candidate, candidate_value)) => {
                x = candidate;
                value = candidate_value;
            }
            None => break,
        }
    }

    // Final active set and factor consistent with the returned point.
    let grad = g + h * &x;
    for i in 0..n {
        let at_lower = x[i] <= lower[i] && grad[i] > 0.0;
        let at_upper = x[i] >= upper[i] && grad[i] < 0.0;
        free[i] = !(at_lower || at_upper);
    }
    let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    let free_factor = if idx.is_empty() {
        None
    } else if factored_set.as_ref() == Some(&free) && factor.is_some() {
        factor
    } else {
        Some(Cholesky::new(sub_matrix(h, &idx))?)
    };
    Some(BoxQpSolution { x, free, free_factor, iterations })
}
