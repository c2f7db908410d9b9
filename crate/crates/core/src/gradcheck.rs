//! Central finite differences for the unit tests.

use alloc::vec::Vec;

/// Absolute floor below which a component is treated as zero.
pub const ABS_FLOOR: f64 = 1e-8;

pub fn numeric_grad(values: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = values.to_vec();
    (0..values.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        assert!(
            (a - n).abs() <= rel * scale + ABS_FLOOR,
            "{what}[{i}]: analytic {a} vs numeric {n}"
        );
    }
}

/// Central differences that also report, per coordinate, whether the stencil
/// flipped any ReLU input sign. `f` returns the objective and the sign pattern.
/// Coordinates whose stencil crosses a kink come back as `None`.
pub fn numeric_grad_masked(
    values: &[f64],
    step: f64,
    f: impl Fn(&[f64]) -> (f64, Vec<bool>),
) -> Vec<Option<f64>> {
    let (_, base) = f(values);
    let mut probe = values.to_vec();
    (0..values.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let (plus, pp) = f(&probe);
            probe[i] = orig - step;
            let (minus, pm) = f(&probe);
            probe[i] = orig;
            (pp == base && pm == base).then(|| (plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Like [`assert_close`] but skipping masked coordinates; at most
/// `max_skip_frac` of them may be masked. Returns the number checked.
pub fn assert_close_masked(analytic: &[f64], numeric: &[Option<f64>], rel: f64, max_skip_frac: f64, what: &str) -> usize {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    let mut checked = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let Some(n) = n else { continue };
        checked += 1;
        let scale = a.abs().max(n.abs());
        assert!((a - n).abs() <= rel * scale + ABS_FLOOR, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
    let skipped = analytic.len() - checked;
    assert!(
        skipped as f64 <= max_skip_frac * analytic.len() as f64,
        "{what}: {skipped} of {} coordinates cross a ReLU kink",
        analytic.len()
    );
    checked
}
