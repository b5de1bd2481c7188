//! Dense linear algebra and a small feed-forward classifier with
//! hand-written gradients.

mod gradcheck;
mod loss;
mod matrix;
mod net;

pub use gradcheck::{check_gradient, grad_check, relative_error, RELATIVE_ERROR_FLOOR};
pub use loss::{
    cross_entropy, cross_entropy_label, entropy, log_softmax, mse, mse_grad, softmax,
    validate_distribution, PROBABILITY_SUM_TOL,
};
pub use matrix::{dot, norm, Matrix};
pub use net::{
    backward, forward, Activation, ClassifierNet, DenseLayer, ForwardCache, LayerGrads, NetGrads,
    NET_FORMAT_VERSION,
};

use crate::error::{ensure, Result};

/// In-place `params -= lr * grads`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    ensure!(lr > 0.0 && lr.is_finite(), "learning rate must be > 0, got {lr}");
    ensure!(
        params.len() == grads.len(),
        "sgd shape mismatch: {} params vs {} grads",
        params.len(),
        grads.len()
    );
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn linear(weight: Vec<Vec<f64>>) -> ClassifierNet {
        let w = Matrix::from_rows(&weight).unwrap();
        let bias = vec![0.0; w.rows()];
        ClassifierNet::from_layers(vec![DenseLayer::new(w, bias, Activation::Identity).unwrap()])
            .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let net = linear(vec![vec![0.0; 3]; 2]);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 5.0], vec![3.0, 3.0, 3.0]]).unwrap();
        let (logits, _) = forward(&net, &x).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = ClassifierNet::from_layers(vec![DenseLayer::new(
            Matrix::identity(2),
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (logits, _) = forward(&net, &x).unwrap();
        assert_eq!(logits.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = linear(vec![vec![1.0, 0.0]]);
        let x = Matrix::zeros(1, 3);
        assert!(forward(&net, &x).is_err());
    }

    #[test]
    fn two_layer_forward_matches_straight_line_recomputation() {
        let mut rng = seeded(11);
        let net = ClassifierNet::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = [0.25, -1.5, 0.75];
        let (logits, _) = forward(&net, &Matrix::from_vec(1, 3, x.to_vec()).unwrap()).unwrap();

        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z = l0.weight.get(j, 0) * x[0]
                + l0.weight.get(j, 1) * x[1]
                + l0.weight.get(j, 2) * x[2]
                + l0.bias[j];
            *h = z.tanh();
        }
        for k in 0..2 {
            let mut z = l1.bias[k];
            for (j, h) in hidden.iter().enumerate() {
                z += l1.weight.get(k, j) * h;
            }
            assert!((logits.get(0, k) - z).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = seeded(3);
        let net = ClassifierNet::new(&[5, 7, 3], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let a = forward(&net, &x).unwrap().0;
        let b = forward(&net, &x).unwrap().0;
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seeded(5);
        let net = ClassifierNet::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let (_, cache) = forward(&net, &x).unwrap();
        let (g, dx) = backward(&net, &cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_g_times_w() {
        let net = linear(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]);
        let x = Matrix::from_rows(&[vec![0.3, 0.1, -0.2]]).unwrap();
        let (_, cache) = forward(&net, &x).unwrap();
        let g = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let (_, dx) = backward(&net, &cache, &g).unwrap();
        assert_eq!(dx.row(0), &[3.0, 3.5, 2.0]);
    }

    #[test]
    fn stale_or_mismatched_cache_is_rejected() {
        let mut rng = seeded(5);
        let mut net = ClassifierNet::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let other = ClassifierNet::new(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let (_, cache) = forward(&net, &x).unwrap();
        assert!(backward(&other, &cache, &Matrix::zeros(1, 2)).is_err());
        assert!(backward(&net, &cache, &Matrix::zeros(2, 2)).is_err());
        net.param_slices_mut()[0][0] += 1.0;
        assert!(backward(&net, &cache, &Matrix::zeros(1, 2)).is_err());
    }

    fn targets(rows: usize, classes: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|r| {
                let mut t = vec![0.0; classes];
                t[r % classes] = 1.0;
                t
            })
            .collect()
    }

    #[test]
    fn grad_check_linear_net_is_exact() {
        let mut rng = seeded(21);
        let net = ClassifierNet::new(&[4, 3], Activation::Identity, &mut rng).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        // Cross-entropy is not linear in the logits, so "exact" means
        // truncation error O(h^2) with a tiny h-independent constant.
        let err = grad_check(&net, &x, &targets(3, 3), 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_two_layer_tanh() {
        let mut rng = seeded(22);
        let net = ClassifierNet::new(&[5, 6, 3], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let err = grad_check(&net, &x, &targets(4, 3), 1e-5).unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn gradient_checker_detects_corruption() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let good = check_gradient(f, &[1.0, 2.0], &[2.0, 3.0], 1e-5);
        let bad = check_gradient(f, &[1.0, 2.0], &[2.0, 3.5], 1e-5);
        assert!(good < 1e-8);
        assert!(bad > 1e-2);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let mut rng = seeded(1);
        let net = ClassifierNet::new(&[2, 2], Activation::Identity, &mut rng).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(grad_check(&net, &x, &targets(1, 2), 0.0).is_err());
        assert!(grad_check(&net, &x, &targets(1, 2), 1e-2).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        sgd_step(&mut p, &[0.5], 0.1).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);

        let mut q = vec![0.3, -0.7];
        sgd_step(&mut q, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(q, vec![0.3, -0.7]);

        assert!(sgd_step(&mut q, &[1.0], 0.1).is_err());
        assert!(sgd_step(&mut q, &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let mut rng = seeded(9);
        let net = ClassifierNet::new(&[4, 8, 3], Activation::Tanh, &mut rng).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: ClassifierNet = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
        assert!(json.contains("\"version\":1"));
        assert!(json.contains("\"dims\":[4,8,3]"));
    }

    #[test]
    fn deserialization_validates_dims() {
        let mut rng = seeded(9);
        let net = ClassifierNet::new(&[2, 2], Activation::Tanh, &mut rng).unwrap();
        let json = serde_json::to_string(&net).unwrap().replace("\"dims\":[2,2]", "\"dims\":[2,3]");
        assert!(serde_json::from_str::<ClassifierNet>(&json).is_err());
    }
}
