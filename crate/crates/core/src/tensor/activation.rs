use super::Tensor4;
use crate::error::Result;

pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    grad_out.expect_shape("relu_backward", input.shape())?;
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_forward(input: &Tensor4) -> Tensor4 {
    input.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + libm::exp(-v))
        } else {
            let e = libm::exp(v);
            e / (1.0 + e)
        }
    })
}

/// Gradient through a sigmoid given its *output*.
pub fn sigmoid_backward(output: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    grad_out.expect_shape("sigmoid_backward", output.shape())?;
    output.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, numeric_grad};
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu_forward(&row(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&row(&[-1.0, 2.0]), &row(&[5.0, 5.0])).unwrap().data(), &[0.0, 5.0]);
        assert_eq!(relu_backward(&row(&[0.0]), &row(&[3.0])).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Tensor4::random_uniform(Shape::new(2, 3, 4, 4), -2.0, 2.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-2 {
                *v = 0.5;
            }
        });
        let probe = Tensor4::random_uniform(x.shape(), -1.0, 1.0, &mut rng);
        let analytic = relu_backward(&x, &probe).unwrap();
        let numeric = numeric_grad(x.data(), 1e-4, |v| {
            v.iter().zip(probe.data()).map(|(a, p)| if *a > 0.0 { a * p } else { 0.0 }).sum()
        });
        assert_close(analytic.data(), &numeric, 1e-5, "relu");
    }

    #[test]
    fn sigmoid_is_bounded_and_stable() {
        let y = sigmoid_forward(&row(&[-800.0, -1.0, 0.0, 1.0, 800.0]));
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y.data()[2], 0.5);
        let g = sigmoid_backward(&y, &row(&[1.0; 5])).unwrap();
        assert_eq!(g.data()[2], 0.25);
    }
}
