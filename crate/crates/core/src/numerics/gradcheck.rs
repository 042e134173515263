//! Central finite differences, used as the independent oracle for the tape.

use crate::numerics::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for the listed coordinates of `x`
/// (all coordinates when `coords` is `None`). Unlisted coordinates are 0.
pub fn central_difference(
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps the ratio meaningful
/// for gradients near zero, where the difference quotient's own rounding
/// error dominates.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
