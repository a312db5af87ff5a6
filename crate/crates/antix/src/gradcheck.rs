//! Central-difference verification of tape gradients.

use crate::tape::{Result, Tape, Var};
use crate::tensor::Tensor;

/// A probe the checker can differentiate twice: once analytically through the
/// tape, once numerically by perturbing the trainables.
///
/// `scalar_loss` must register every tensor that `trainables_mut` exposes as a
/// tape param under the same name, and inputs should stay away from relu
/// kinks (|pre-activation| > 10 * eps) for the comparison to be meaningful.
pub trait Differentiable {
    fn scalar_loss(&self, tape: &mut Tape) -> Result<Var>;
    fn trainables_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

fn eval_loss(subject: &impl Differentiable) -> f64 {
    let mut tape = Tape::new();
    let loss = subject
        .scalar_loss(&mut tape)
        .expect("grad_check probe failed to build");
    tape.value(loss).item()
}

/// Max over all trainable entries of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn grad_check(subject: &mut impl Differentiable, eps: f64) -> f64 {
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
    );

    let analytic = {
        let mut tape = Tape::new();
        let loss = subject
            .scalar_loss(&mut tape)
            .expect("grad_check probe failed to build");
        tape.backward(loss).expect("grad_check backward failed");
        tape.param_grads()
    };

    let layout: Vec<(String, usize)> = subject
        .trainables_mut()
        .iter()
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();

    let mut max_rel = 0.0_f64;
    for (pi, (name, numel)) in layout.iter().enumerate() {
        let grads = analytic
            .get(name)
            .unwrap_or_else(|| panic!("loss did not register trainable {name:?}"));
        for idx in 0..*numel {
            subject.trainables_mut()[pi].1.data_mut()[idx] += eps;
            let plus = eval_loss(subject);
            subject.trainables_mut()[pi].1.data_mut()[idx] -= 2.0 * eps;
            let minus = eval_loss(subject);
            subject.trainables_mut()[pi].1.data_mut()[idx] += eps;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct ConstantNet {
        w: Tensor,
    }

    impl Differentiable for ConstantNet {
        fn scalar_loss(&self, tape: &mut Tape) -> Result<Var> {
            let w = tape.param("w", &self.w)?;
            // relu(-1 - w^2) is identically zero near w=0.1: constant loss
            let sq = tape.mul(w, w)?;
            let neg = tape.affine(sq, -1.0, -1.0);
            let r = tape.relu(neg);
            Ok(tape.sum_all(r))
        }
        fn trainables_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("w".into(), &mut self.w)]
        }
    }

    #[test]
    fn constant_network_has_zero_error() {
        let mut net = ConstantNet {
            w: Tensor::vector(vec![0.1, -0.2]),
        };
        assert_eq!(grad_check(&mut net, 1e-5), 0.0);
    }

    struct TanhMlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        input: Tensor,
    }

    impl Differentiable for TanhMlp {
        fn scalar_loss(&self, tape: &mut Tape) -> Result<Var> {
            let x = tape.leaf(self.input.clone());
            let w1 = tape.param("w1", &self.w1)?;
            let b1 = tape.param("b1", &self.b1)?;
            let w2 = tape.param("w2", &self.w2)?;
            let b2 = tape.param("b2", &self.b2)?;
            let h = tape.linear(x, w1, b1)?;
            let h = tape.tanh(h);
            let out = tape.linear(h, w2, b2)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        }
        fn trainables_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![
                ("w1".into(), &mut self.w1),
                ("b1".into(), &mut self.b1),
                ("w2".into(), &mut self.w2),
                ("b2".into(), &mut self.b2),
            ]
        }
    }

    #[test]
    fn two_layer_tanh_mlp_below_1e6() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut net = TanhMlp {
            w1: Tensor::fan_in_uniform(vec![8, 3], 3, &mut rng),
            b1: Tensor::fan_in_uniform(vec![8], 3, &mut rng),
            w2: Tensor::fan_in_uniform(vec![2, 8], 8, &mut rng),
            b2: Tensor::fan_in_uniform(vec![2], 8, &mut rng),
            input: Tensor::vector(vec![0.4, -0.9, 0.2]),
        };
        let err = grad_check(&mut net, 1e-5);
        assert!(err < 1e-6, "grad_check error {err}");
    }

    #[test]
    #[should_panic(expected = "eps must lie in")]
    fn eps_out_of_range_panics() {
        let mut net = ConstantNet {
            w: Tensor::vector(vec![0.1]),
        };
        grad_check(&mut net, 1e-2);
    }
}
