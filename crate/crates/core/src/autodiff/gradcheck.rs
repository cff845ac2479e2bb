//! Central finite differences and gradient comparison.

use super::{DiffError, ParamStore, Tensor};

/// Central-difference gradient `(f(θ+h) − f(θ−h)) / 2h` for every scalar
/// of every parameter in `params`.
///
/// `loss_fn` is evaluated on a private copy of the store, so `params` is
/// left untouched.
pub fn finite_diff_gradients<F>(
    mut loss_fn: F,
    params: &ParamStore,
    step: f64,
) -> Result<Vec<Tensor>, DiffError>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(DiffError::BadStep(step));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let numel = params.get(id).value.numel();
        let mut grad = Tensor::zeros(params.get(id).value.shape());
        for i in 0..numel {
            let orig = params.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = loss_fn(&work);
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = loss_fn(&work);
            work.get_mut(id).value.data_mut()[i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(DiffError::NonFiniteLoss {
                    param: params.get(id).name.clone(),
                    index: i,
                });
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between two gradients, taken
/// over the whole tensor. Two all-zero gradients have error 0.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// One line of a gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Compares the gradients held in `params` against `numeric`.
pub fn compare_gradients(params: &ParamStore, numeric: &[Tensor], tol: f64) -> Vec<GradCheckRow> {
    params
        .iter()
        .zip(numeric)
        .map(|(p, n)| {
            let rel_error = relative_error(&p.grad, n);
            GradCheckRow {
                name: p.name.clone(),
                numel: p.value.numel(),
                rel_error,
                max_abs_error: p.grad.max_abs_diff(n),
                passed: rel_error <= tol,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let x = [0.5, -1.25, 2.0];
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.3, 0.1, -0.7]));
        let g = finite_diff_gradients(
            |s| s.iter().next().unwrap().value.data().iter().zip(&x).map(|(w, x)| w * x).sum(),
            &store,
            1e-3,
        )
        .unwrap();
        for (gi, xi) in g[0].data().iter().zip(&x) {
            assert!((gi - xi).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_gradient_is_w() {
        let w = Tensor::vector(vec![1.5, -0.2, 3.0, 0.01]);
        let mut store = ParamStore::new();
        store.insert("w", w.clone());
        let g = finite_diff_gradients(
            |s| 0.5 * s.iter().next().unwrap().value.data().iter().map(|v| v * v).sum::<f64>(),
            &store,
            1e-4,
        )
        .unwrap();
        assert!(relative_error(&g[0], &w) <= 1e-9);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0]));
        store.insert("b", Tensor::vector(vec![1.0, 0.0]));
        let err = finite_diff_gradients(
            |s| {
                let b = s.iter().nth(1).unwrap().value.data()[1];
                if b > 0.0 { f64::NAN } else { 0.0 }
            },
            &store,
            1e-3,
        )
        .unwrap_err();
        assert_eq!(
            err,
            DiffError::NonFiniteLoss {
                param: "b".into(),
                index: 1
            }
        );
    }

    #[test]
    fn rejects_nonpositive_step() {
        let store = ParamStore::new();
        assert!(finite_diff_gradients(|_| 0.0, &store, 0.0).is_err());
    }
}
