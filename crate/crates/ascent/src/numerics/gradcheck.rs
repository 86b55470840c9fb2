//! Central finite-difference gradient verification.
//!
//! The checker perturbs one coordinate at a time, (f(x + h e) - f(x - h e)) / 2h,
//! and compares against a caller-supplied analytic gradient with the relative
//! error |a - n| / max(|a|, |n|, 1e-8). The closure is re-evaluated from
//! scratch per probe, so it must be deterministic.

use super::rng::Rng;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check every coordinate of `x`.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_coords(f, x, analytic, h, &coords)
}

/// Check up to `max_coords` coordinates chosen without replacement; large
/// parameter tensors get probed at a sample instead of exhaustively.
pub fn finite_diff_check_sampled(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> GradCheckReport {
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut all);
        all.truncate(max_coords);
        all
    };
    check_coords(f, x, analytic, h, &coords)
}

fn check_coords(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> GradCheckReport {
    assert_eq!(analytic.len(), x.numel(), "analytic gradient length");
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: coords.len(),
    };
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn linear_map_is_exact_to_machine_precision() {
        // f(x) = 3 x0 - 2 x1; central differences are exact for linear f.
        let x = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let f = |t: &Tensor| 3.0 * t.data()[0] - 2.0 * t.data()[1];
        let report = finite_diff_check(f, &x, &[3.0, -2.0], 1e-5);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn sum_of_squares_at_one() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let f = |t: &Tensor| t.data()[0] * t.data()[0];
        let report = finite_diff_check(f, &x, &[2.0], 1e-5);
        assert!(report.passes(1e-8), "err {}", report.max_rel_err);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let x = Tensor::new(vec![1], vec![1.5]).unwrap();
        let f = |t: &Tensor| t.data()[0] * t.data()[0];
        let report = finite_diff_check(f, &x, &[5.0], 1e-5);
        assert!(!report.passes(1e-4));
        assert_eq!(report.worst_index, 0);
    }

    #[test]
    fn tape_quadratic_matches() {
        // loss = sum((x W) .* (x W)) through the tape, checked against FD on W.
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.8, 0.5]).unwrap();
        let mut w = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.4, 0.7, -0.5, 0.2]).unwrap();
        w.set_requires_grad(true);
        let run = |wt: &Tensor| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(wt);
            let y = tape.matmul(xv, wv).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(y2);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data()[0],
                tape.grad(wv).unwrap().to_vec(),
            )
        };
        let (_, analytic) = run(&w);
        let report = finite_diff_check(|wt| run(wt).0, &w, &analytic, 1e-5);
        assert!(report.passes(1e-7), "err {}", report.max_rel_err);
    }

    #[test]
    fn sampling_respects_budget() {
        let x = Tensor::zeros(&[100]);
        let f = |t: &Tensor| t.data().iter().sum::<f64>();
        let analytic = vec![1.0; 100];
        let mut rng = crate::numerics::Rng::new(3);
        let report = finite_diff_check_sampled(f, &x, &analytic, 1e-5, 10, &mut rng);
        assert_eq!(report.coords_checked, 10);
        assert!(report.passes(1e-8));
    }
}
