use serde::Serialize;

use super::{ParamStore, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step, in (0, 1e-2].
    pub h: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so parameters whose true
    /// gradient is zero are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided);
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_entries_per_param: None,
        }
    }
}

/// `max_rel_err` is `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the checked
/// entries of one parameter. The worst entry is the one with the largest
/// absolute disagreement.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(floor)
}

/// Compare the gradients currently stored in `store` against central
/// differences of `f`. Every entry is perturbed in place and restored.
pub fn finite_diff_check<F, E>(
    store: &mut ParamStore,
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore) -> Result<f64, E>,
    E: From<TensorError>,
{
    if !(opts.h > 0.0 && opts.h <= 1e-2) {
        return Err(TensorError::Contract(format!(
            "finite-difference step {} outside (0, 1e-2]",
            opts.h
        ))
        .into());
    }
    let first = f(store)?;
    let second = f(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second }.into());
    }

    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.get(id).tensor.numel();
        let indices: Vec<usize> = match opts.max_entries_per_param {
            Some(n) if n < numel => {
                let stride = numel as f64 / n as f64;
                (0..n).map(|i| (i as f64 * stride) as usize).collect()
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        let mut analytic = Vec::with_capacity(indices.len());
        let mut numeric = Vec::with_capacity(indices.len());
        let mut worst = -1.0;
        for i in indices {
            let original = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = original + opts.h;
            let plus = f(store);
            store.get_mut(id).tensor.data_mut()[i] = original - opts.h;
            let minus = f(store);
            store.get_mut(id).tensor.data_mut()[i] = original;
            let n = (plus? - minus?) / (2.0 * opts.h);
            let a = store.get(id).grad[i];
            if (a - n).abs() > worst {
                worst = (a - n).abs();
                check.worst_index = i;
                check.analytic = a;
                check.numeric = n;
            }
            analytic.push(a);
            numeric.push(n);
        }
        check.max_rel_err = relative_error(&analytic, &numeric, opts.floor);
        check.passed = check.max_rel_err <= opts.tol;
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: params.iter().all(|p| p.passed),
        params,
        tol: opts.tol,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn linear_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(vec![1], vec![0.25]).unwrap())
            .unwrap();
        s
    }

    // f = Σ c_i w_i + 3 b
    fn linear(s: &ParamStore) -> Result<f64, TensorError> {
        let c = [1.5, -2.0, 0.75];
        let w = s.by_name("w")?.tensor.data();
        let b = s.by_name("b")?.tensor.data()[0];
        Ok(w.iter().zip(c).map(|(w, c)| w * c).sum::<f64>() + 3.0 * b)
    }

    fn fill_linear_grads(s: &mut ParamStore) {
        let w = s.id("w").unwrap();
        s.get_mut(w).grad = vec![1.5, -2.0, 0.75];
        let b = s.id("b").unwrap();
        s.get_mut(b).grad = vec![3.0];
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let mut s = linear_store();
        fill_linear_grads(&mut s);
        let report = finite_diff_check(&mut s, linear, GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn planted_fault_fails_exactly_that_parameter() {
        let mut s = linear_store();
        fill_linear_grads(&mut s);
        let w = s.id("w").unwrap();
        s.get_mut(w).grad.iter_mut().for_each(|g| *g *= 1.1);
        let report = finite_diff_check(&mut s, linear, GradCheckOptions::default()).unwrap();
        let failing: Vec<_> = report.failing().map(|p| p.name.as_str()).collect();
        assert_eq!(failing, vec!["w"]);
    }

    #[test]
    fn detects_nondeterminism() {
        let mut s = linear_store();
        let mut calls = 0.0;
        let result = finite_diff_check(
            &mut s,
            |_| {
                calls += 1.0;
                Ok::<_, TensorError>(calls)
            },
            GradCheckOptions::default(),
        );
        assert!(matches!(result, Err(TensorError::NonDeterministic { .. })));
    }

    #[test]
    fn step_must_be_small_and_positive() {
        let mut s = linear_store();
        let opts = GradCheckOptions {
            h: 0.1,
            ..Default::default()
        };
        assert!(finite_diff_check(&mut s, linear, opts).is_err());
    }

    #[test]
    fn restores_parameters() {
        let mut s = linear_store();
        fill_linear_grads(&mut s);
        let before = s.clone();
        finite_diff_check(&mut s, linear, GradCheckOptions::default()).unwrap();
        assert_eq!(before, s);
    }

    #[test]
    fn tape_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap())
            .unwrap();
        let eval = |s: &ParamStore, grads: bool| -> Result<(f64, Vec<f64>), TensorError> {
            let mut t = Tape::new();
            let x = t.leaf(s.by_name("x")?.tensor.clone(), true)?;
            let sq = t.mul(x, x)?;
            let y = t.sum(sq)?;
            if grads {
                t.backward(y)?;
            }
            Ok((
                t.value(y).item()?,
                t.grad(x).map(|g| g.to_vec()).unwrap_or_default(),
            ))
        };
        let (_, g) = eval(&s, true).unwrap();
        assert_eq!(g, vec![6.0, -2.0]);
        let id = s.id("x").unwrap();
        s.get_mut(id).grad = g;
        let report = finite_diff_check(
            &mut s,
            |s| eval(s, false).map(|r| r.0),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
    }
}
