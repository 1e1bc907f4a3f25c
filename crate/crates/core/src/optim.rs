//! Heavy-ball momentum SGD over extractor parameters:
//! v ← momentum·v + g, p ← p − lr·v (no dampening, no weight decay).

use nalgebra::{DMatrix, DVector};

use crate::error::{CafeError, Result};
use crate::model::{GradientSet, ToyModel};

#[derive(Debug, Clone)]
pub struct MomentumState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl MomentumState {
    /// Zero-initialized velocity buffers mirroring the extractor shapes.
    pub fn new(model: &ToyModel, lr: f64, momentum: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(CafeError::invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CafeError::invalid("momentum must lie in [0, 1)"));
        }
        Ok(MomentumState {
            lr,
            momentum,
            velocity: GradientSet::zeros(model).layers,
        })
    }

    pub fn velocity(&self) -> &[(DMatrix<f64>, DVector<f64>)] {
        &self.velocity
    }
}

/// One in-place update of the extractor. A non-finite gradient aborts the
/// step before touching any parameter, surfacing loss divergence as an error
/// instead of silently poisoning the model.
pub fn sgd_momentum_step(
    model: &mut ToyModel,
    grads: &GradientSet,
    state: &mut MomentumState,
) -> Result<()> {
    if grads.layers.len() != state.velocity.len() {
        return Err(CafeError::invalid("gradient/velocity layer count mismatch"));
    }
    for ((wg, bg), (wv, bv)) in grads.layers.iter().zip(&state.velocity) {
        if wg.shape() != wv.shape() || bg.len() != bv.len() {
            return Err(CafeError::invalid("gradient shape does not mirror parameters"));
        }
    }
    if !grads.all_finite() {
        return Err(CafeError::numerical(
            "non-finite gradient; optimization step aborted",
        ));
    }
    for (idx, (wg, bg)) in grads.layers.iter().enumerate() {
        let (wv, bv) = &mut state.velocity[idx];
        *wv = &*wv * state.momentum + wg;
        *bv = &*bv * state.momentum + bg;
        model.extractor[idx].weight -= &*wv * state.lr;
        model.extractor[idx].bias -= &*bv * state.lr;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};
    use nalgebra::dmatrix;

    /// Single 1×1 linear layer whose weight plays the role of the scalar p.
    fn scalar_model(p: f64) -> ToyModel {
        ToyModel::new(
            vec![Layer {
                weight: dmatrix![p],
                bias: DVector::zeros(1),
                activation: Activation::Identity,
            }],
            dmatrix![1.0],
            DVector::zeros(1),
        )
        .unwrap()
    }

    fn scalar_grads(g: f64) -> GradientSet {
        GradientSet {
            layers: vec![(dmatrix![g], DVector::zeros(1))],
        }
    }

    #[test]
    fn momentum_zero_is_vanilla_sgd() {
        let mut model = scalar_model(1.0);
        let mut state = MomentumState::new(&model, 0.1, 0.0).unwrap();
        sgd_momentum_step(&mut model, &scalar_grads(2.0), &mut state).unwrap();
        assert!((model.extractor[0].weight[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut model = scalar_model(1.0);
        let mut state = MomentumState::new(&model, 0.1, 0.8).unwrap();
        // seed the velocity with one unit gradient: v = 1
        sgd_momentum_step(&mut model, &scalar_grads(1.0), &mut state).unwrap();
        let p_before = model.extractor[0].weight[(0, 0)];
        sgd_momentum_step(&mut model, &scalar_grads(0.0), &mut state).unwrap();
        assert!((state.velocity()[0].0[(0, 0)] - 0.8).abs() < 1e-15);
        assert!((p_before - model.extractor[0].weight[(0, 0)] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn two_steps_accumulate_classic_momentum() {
        // constant g=1, momentum 0.8, lr 1: Δp = 1 then 1.8, total 2.8
        let mut model = scalar_model(0.0);
        let mut state = MomentumState::new(&model, 1.0, 0.8).unwrap();
        sgd_momentum_step(&mut model, &scalar_grads(1.0), &mut state).unwrap();
        sgd_momentum_step(&mut model, &scalar_grads(1.0), &mut state).unwrap();
        assert!((model.extractor[0].weight[(0, 0)] + 2.8).abs() < 1e-15);
    }

    #[test]
    fn update_is_linear_in_gradient() {
        let base = scalar_model(0.5);
        let run = |g: f64| {
            let mut m = base.clone();
            let mut s = MomentumState::new(&m, 0.3, 0.0).unwrap();
            sgd_momentum_step(&mut m, &scalar_grads(g), &mut s).unwrap();
            base.extractor[0].weight[(0, 0)] - m.extractor[0].weight[(0, 0)]
        };
        let d1 = run(1.0);
        let d2 = run(2.0);
        let d3 = run(3.0);
        assert!((d2 - 2.0 * d1).abs() < 1e-15);
        assert!((d3 - (d1 + d2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut model = scalar_model(1.0);
        let mut state = MomentumState::new(&model, 0.1, 0.8).unwrap();
        let err = sgd_momentum_step(&mut model, &scalar_grads(f64::NAN), &mut state).unwrap_err();
        assert!(matches!(err, CafeError::NumericalError(_)));
        assert_eq!(model.extractor[0].weight[(0, 0)], 1.0);
        assert_eq!(state.velocity()[0].0[(0, 0)], 0.0);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let model = scalar_model(1.0);
        assert!(MomentumState::new(&model, -0.1, 0.5).is_err());
        assert!(MomentumState::new(&model, 0.1, 1.0).is_err());
        assert!(MomentumState::new(&model, f64::NAN, 0.5).is_err());
    }
}
