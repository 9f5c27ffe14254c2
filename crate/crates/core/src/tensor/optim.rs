use super::{ParamSet, Tensor};
use crate::error::{PintError, Result};

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
/// `v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdOptimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(PintError::Parameter(format!("learning rate {learning_rate} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(PintError::Parameter(format!("momentum {momentum} outside [0,1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(PintError::Parameter(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Updates every parameter from its gradient, then zeroes the gradients.
    /// Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(pos) = params.iter().position(|p| p.grad().is_none()) {
            return Err(PintError::Contract(format!("parameter {pos} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.numel())
        {
            return Err(PintError::Contract("velocity buffers do not match parameters".into()));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad().unwrap().to_vec();
            let data = p.data_mut();
            for ((theta, vel), g) in data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel + g + self.weight_decay * *theta;
                *theta -= self.learning_rate * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }

    /// Steps every tensor of a named set in order.
    pub fn step_set(&mut self, params: &mut ParamSet) -> Result<()> {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| t).collect();
        self.step(&mut refs)
    }

    /// Velocity buffers named after `params` (for checkpointing).
    pub fn velocity_set(&self, params: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (i, (name, p)) in params.iter().enumerate() {
            let data = self.velocity.get(i).cloned().unwrap_or_else(|| vec![0.0; p.numel()]);
            out.insert(name, Tensor::new(p.shape().to_vec(), data)?)?;
        }
        Ok(out)
    }

    pub fn load_velocity_set(&mut self, params: &ParamSet, velocity: &ParamSet) -> Result<()> {
        params.check_aligned(velocity)?;
        self.velocity = velocity.iter().map(|(_, t)| t.data().to_vec()).collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(theta: f64, grad: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![theta]).unwrap().requiring_grad();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.0).unwrap();
        let mut p = param(1.0, 2.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0).unwrap();
        let mut p = param(0.0, 1.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut opt = SgdOptimizer::new(0.01, 0.0, 0.0001).unwrap();
        let mut p = param(1.0, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 1.0 - 0.01 * 0.0001);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.0).unwrap();
        let mut p = Tensor::zeros(&[1]).requiring_grad();
        assert!(matches!(opt.step(&mut [&mut p]), Err(PintError::Contract(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdOptimizer::new(0.0, 0.0, 0.0).is_err());
        assert!(SgdOptimizer::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdOptimizer::new(0.1, 0.0, -1.0).is_err());
    }
}
