//! RMSProp with a per-parameter squared-gradient accumulator.

use crate::net::Params;
use ndarray::NdFloat;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("non-finite gradient in layer '{layer}'; step skipped")]
pub struct NonFiniteGradient {
    pub layer: &'static str,
}

/// Optimizer state. `acc` tracks the exponential moving average of squared
/// gradients, layer by layer in the canonical parameter order.
#[derive(Clone, Debug)]
pub struct RmsProp<F> {
    pub lr: F,
    pub rho: F,
    pub eps: F,
    pub acc: Params<F>,
}

impl<F: NdFloat> RmsProp<F> {
    pub fn new(lr: f64, rho: f64, eps: f64) -> RmsProp<F> {
        RmsProp {
            lr: F::from(lr).unwrap(),
            rho: F::from(rho).unwrap(),
            eps: F::from(eps).unwrap(),
            acc: Params::zeros(),
        }
    }

    /// The defaults used everywhere: lr 1e-3, rho 0.9, eps 1e-6.
    pub fn standard() -> RmsProp<F> {
        RmsProp::new(1e-3, 0.9, 1e-6)
    }

    /// One update: `acc <- rho acc + (1 - rho) g^2`, then
    /// `p <- p - lr g / (sqrt(acc) + eps)`. A non-finite gradient anywhere
    /// leaves both parameters and accumulator untouched.
    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>) -> Result<(), NonFiniteGradient> {
        for (name, g) in grads.layers() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NonFiniteGradient { layer: name });
            }
        }
        let one_minus_rho = F::one() - self.rho;
        for (((_, mut p), (_, mut a)), (_, g)) in params
            .layers_mut()
            .into_iter()
            .zip(self.acc.layers_mut())
            .zip(grads.layers())
        {
            for ((pv, av), &gv) in p.iter_mut().zip(a.iter_mut()).zip(g.iter()) {
                *av = self.rho * *av + one_minus_rho * gv * gv;
                *pv = *pv - self.lr * gv / (av.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays_the_accumulator() {
        let mut opt = RmsProp::<f64>::standard();
        opt.acc.fc_b.fill(1.0);
        let mut p = Params::he_init(1);
        let before = p.clone();
        opt.step(&mut p, &Params::zeros()).unwrap();
        for ((_, a), (_, b)) in p.layers().iter().zip(before.layers().iter()) {
            assert_eq!(a, b);
        }
        assert!(opt.acc.fc_b.iter().all(|&v| (v - 0.9).abs() < 1e-15));
    }

    // Single parameter, lr = 0.001, rho = 0.9, eps = 1e-6, acc = 0, g = 2:
    //   acc    = 0.1 * 4 = 0.4
    //   dp     = -0.001 * 2 / (sqrt(0.4) + 1e-6)
    // both evaluated by hand from the update rule, not via the optimizer.
    #[test]
    fn scalar_update_matches_hand_arithmetic() {
        let mut opt = RmsProp::<f64>::new(0.001, 0.9, 1e-6);
        let mut p = Params::zeros();
        p.out_b[0] = 5.0;
        let mut g = Params::zeros();
        g.out_b[0] = 2.0;
        opt.step(&mut p, &g).unwrap();
        let expected_dp = -0.001 * 2.0 / (0.4f64.sqrt() + 1e-6);
        assert!((expected_dp - -3.162_272_660_176e-3).abs() < 1e-14);
        assert!((opt.acc.out_b[0] - 0.4).abs() < 1e-15);
        assert!((p.out_b[0] - (5.0 + expected_dp)).abs() < 1e-15);
    }

    #[test]
    fn repeated_identical_steps_shrink() {
        let mut opt = RmsProp::<f64>::standard();
        let mut p = Params::zeros();
        let mut g = Params::zeros();
        g.fc_b[3] = 1.5;
        opt.step(&mut p, &g).unwrap();
        let first = p.fc_b[3];
        opt.step(&mut p, &g).unwrap();
        let second = p.fc_b[3] - first;
        assert!(second.abs() < first.abs(), "{second} !< {first}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut opt = RmsProp::<f32>::standard();
        let mut p = Params::he_init(2);
        let before = p.clone();
        let mut g = Params::zeros();
        g.conv2_w[[0, 0, 0, 0]] = f32::NAN;
        let err = opt.step(&mut p, &g).unwrap_err();
        assert_eq!(err.layer, "conv2_w");
        assert_eq!(p.conv2_w, before.conv2_w);
        assert!(opt.acc.conv2_w.iter().all(|&v| v == 0.0));
    }
}
