//! Central finite differences, the independent oracle for gradient claims.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum of `|g_ad - g_fd| / max(1, |g_fd|)` over coordinates.
///
/// `f` is evaluated at `point ± h e_i`; `analytic` is the gradient under test.
pub fn finite_difference_check<F>(f: F, point: &[f64], h: f64, analytic: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::precondition(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("gradient has {} entries, point has {}", analytic.len(), point.len()),
        ));
    }
    let numeric = central_differences(&f, point, h)?;
    Ok(numeric
        .iter()
        .zip(analytic)
        .map(|(fd, ad)| (ad - fd).abs() / fd.abs().max(1.0))
        .fold(0.0, f64::max))
}

pub fn central_differences<F>(f: &F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = f(&probe)?;
        probe[i] = point[i] - h;
        let down = f(&probe)?;
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Runs `build` on a fresh tape with `point` as the only variable and compares
/// the reverse-mode gradient of its scalar output with central differences.
pub fn gradient_check<B>(build: B, point: &[f64], h: f64) -> Result<f64>
where
    B: Fn(&mut Tape, Var) -> Result<Var>,
{
    let evaluate = |x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::vector(x.to_vec())?)?;
        let out = build(&mut tape, w)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let w = tape.variable(Tensor::vector(point.to_vec())?)?;
    let out = build(&mut tape, w)?;
    let grads = tape.backward(out, &[w])?;
    let analytic = grads.get(w).expect("requested leaf").data().to_vec();
    finite_difference_check(evaluate, point, h, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_difference_check(|x| Ok(x[0] * x[0]), &[1.0], 1e-4, &[2.0]).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(finite_difference_check(|x| Ok(x[0]), &[1.0], 0.0, &[1.0]).is_err());
        assert!(finite_difference_check(|_| Ok(f64::NAN), &[1.0], 1e-4, &[1.0]).is_err());
    }

    type Build = fn(&mut Tape, Var) -> Result<Var>;

    fn sum_of(tape: &mut Tape, v: Var) -> Result<Var> {
        tape.sum(v)
    }

    const UNARY: &[(&str, Build)] = &[
        ("sigmoid", |t, w| { let y = t.sigmoid(w)?; sum_of(t, y) }),
        ("squash", |t, w| { let y = t.squash(w)?; sum_of(t, y) }),
        ("tanh", |t, w| { let y = t.tanh(w)?; sum_of(t, y) }),
        ("exp", |t, w| { let y = t.exp(w)?; sum_of(t, y) }),
        ("ln", |t, w| { let e = t.exp(w)?; let y = t.ln(e)?; let s = t.mul(y, y)?; sum_of(t, s) }),
        ("log_sigmoid", |t, w| { let y = t.log_sigmoid(w)?; sum_of(t, y) }),
        ("powf", |t, w| { let e = t.exp(w)?; let y = t.powf(e, -0.5)?; sum_of(t, y) }),
        ("softmax", |t, w| { let y = t.softmax(w, 0.7)?; let c = t.slice(y, 0, 1)?; sum_of(t, c) }),
        ("log_softmax", |t, w| { let y = t.log_softmax(w, 0.4)?; let c = t.slice(y, 1, 1)?; sum_of(t, c) }),
        ("mean", |t, w| { let s = t.mul(w, w)?; t.mean(s) }),
        ("normalize", |t, w| { let n = t.normalize(w)?; let c = t.slice(n, 0, 2)?; let p = t.mul(c, c)?; let q = t.slice(p, 1, 1)?; sum_of(t, q) }),
        ("concat", |t, w| { let c = t.concat(&[w, w])?; let s = t.sin_proxy(c)?; sum_of(t, s) }),
        ("scale_by", |t, w| { let s = t.sum(w)?; let y = t.scale_by(w, s)?; let z = t.tanh(y)?; sum_of(t, z) }),
        ("div", |t, w| { let e = t.exp(w)?; let d = t.div(w, e)?; sum_of(t, d) }),
        ("window", |t, w| {
            let m = t.reshape(w, &[2, 3])?;
            let sq = t.mul(m, m)?;
            let c = t.window_cov(sq, m, 2)?;
            sum_of(t, c)
        }),
        ("matmul", |t, w| {
            let a = t.reshape(w, &[2, 3])?;
            let b = t.reshape(w, &[3, 2])?;
            let p = t.matmul(a, b)?;
            let y = t.tanh(p)?;
            sum_of(t, y)
        }),
        ("matvec", |t, w| {
            let m = t.reshape(w, &[3, 2])?;
            let v = t.slice(w, 2, 2)?;
            let y = t.matvec(m, v)?;
            let z = t.sigmoid(y)?;
            sum_of(t, z)
        }),
    ];

    impl Tape {
        /// Smooth nonlinearity composed from primitives, used only to make sums non-trivial.
        fn sin_proxy(&mut self, a: Var) -> Result<Var> {
            let t = self.tanh(a)?;
            self.mul(t, a)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn every_op_matches_finite_differences(values in proptest::collection::vec(-1.5f64..1.5, 6)) {
            for (name, build) in UNARY {
                let err = gradient_check(build, &values, 1e-4).unwrap();
                prop_assert!(err <= 1e-4, "{name}: {err}");
            }
        }

        #[test]
        fn backward_is_linear_over_terms(values in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let term_a: Build = |t, w| { let y = t.tanh(w)?; t.sum(y) };
            let term_b: Build = |t, w| { let y = t.softmax(w, 0.5)?; let l = t.ln(y)?; t.sum(l) };
            let grad = |build: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
                let mut tape = Tape::new();
                let w = tape.variable(Tensor::vector(values.clone()).unwrap()).unwrap();
                let out = build(&mut tape, w).unwrap();
                tape.backward(out, &[w]).unwrap().get(w).unwrap().data().to_vec()
            };
            let ga = grad(&term_a);
            let gb = grad(&term_b);
            let both = grad(&|t: &mut Tape, w: Var| {
                let a = term_a(t, w)?;
                let b = term_b(t, w)?;
                t.add(a, b)
            });
            for i in 0..values.len() {
                prop_assert!((both[i] - (ga[i] + gb[i])).abs() <= 1e-12);
            }
        }
    }
}
