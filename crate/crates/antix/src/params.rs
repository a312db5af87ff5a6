//! Named-parameter enumeration shared by the optimizer, checkpointing, and
//! the gradient checker.

use crate::tensor::Tensor;

/// Anything holding named trainable tensors. Visit order is the canonical
/// order for a type and must be stable across calls.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// `target <- (1 - tau) * target + tau * source`, matched by name.
pub fn soft_update(target: &mut impl Parameterized, source: &impl Parameterized, tau: f64) {
    let src: std::collections::BTreeMap<String, Tensor> = source.named_params().into_iter().collect();
    target.visit_params_mut(&mut |name, t| {
        let s = src
            .get(name)
            .unwrap_or_else(|| panic!("soft_update: source has no parameter {name:?}"));
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (1.0 - tau) * *tv + tau * sv;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl Parameterized for Pair {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn soft_update_endpoints_and_midpoint() {
        let source = Pair {
            a: Tensor::scalar(1.0),
            b: Tensor::scalar(2.0),
        };
        // tau = 1 -> copies source
        let mut t = Pair {
            a: Tensor::scalar(0.0),
            b: Tensor::scalar(0.0),
        };
        soft_update(&mut t, &source, 1.0);
        assert_eq!(t.a.item(), 1.0);
        assert_eq!(t.b.item(), 2.0);
        // tau = 0 -> unchanged
        let mut t = Pair {
            a: Tensor::scalar(5.0),
            b: Tensor::scalar(6.0),
        };
        soft_update(&mut t, &source, 0.0);
        assert_eq!(t.a.item(), 5.0);
        // tau = 0.25 between 0 and 1 -> 0.25
        let mut t = Pair {
            a: Tensor::scalar(0.0),
            b: Tensor::scalar(0.0),
        };
        soft_update(&mut t, &source, 0.25);
        assert_eq!(t.a.item(), 0.25);
        assert_eq!(t.b.item(), 0.5);
    }
}
