use super::Tensor;

/// Central-difference gradient of a scalar function: `(f(x+he) - f(x-he)) / 2h`
/// per element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    out
}

/// Relative error with an absolute floor so that near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floored(a, b, 1e-8)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-7);
    }
}
