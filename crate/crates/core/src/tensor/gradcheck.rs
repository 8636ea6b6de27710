use super::{ParamStore, Tape, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of a scalar function at `x` along every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error.is_nan() || p.max_rel_error > self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Compares tape gradients of `loss` with central finite differences for
/// every element of every parameter in `params`.
///
/// `loss` must build the whole forward pass on the tape it is given; it is
/// called once for the analytic pass and twice per parameter element.
pub fn grad_check<E, F>(params: &ParamStore<f64>, loss: F, h: f64, tolerance: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, E>,
    E: From<super::TensorError>,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let out = loss(&mut tape)?;
        tape.backward(out)?;
        tape.param_gradients()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::with_params(store);
        let out = loss(&mut tape)?;
        Ok(tape.data(out)[0])
    };

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..n {
            let x0 = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        tolerance,
        params: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tensor, TensorError};

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(|x| x[0].powi(3) + x[1] * x[0], &[2.0, -1.0], 1e-5);
        assert!((d[0] - 11.0).abs() < 1e-8);
        assert!((d[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn reports_a_broken_gradient_instead_of_failing() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap()).unwrap();
        // Correct gradient path.
        let ok = grad_check::<TensorError, _>(
            &store,
            |tape| {
                let w = tape.param(id);
                let sq = tape.mul(w, w)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        // A stop-gradient constant hides one path from the tape.
        let bad = grad_check::<TensorError, _>(
            &store,
            |tape| {
                let w = tape.param(id);
                let frozen = tape.constant(tape.value(w));
                let sq = tape.mul(w, frozen)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.failures()[0].name, "w");
    }
}
