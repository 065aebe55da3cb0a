use super::scalar::Scalar;
use super::tensor::ParamStore;
use crate::error::{Result, SifmError};

/// Bias-corrected Adam state over the flattened parameters of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || beta1 == 0.0 || !(0.0..1.0).contains(&beta2) || beta2 == 0.0 {
            return Err(SifmError::Config(format!("adam betas must lie in (0,1), got {beta1}, {beta2}")));
        }
        if !(lr > 0.0) || !(eps >= 0.0) {
            return Err(SifmError::Config(format!("adam needs lr > 0 and eps >= 0, got {lr}, {eps}")));
        }
        Ok(Self { step_count: 0, m: vec![T::zero(); num_params], v: vec![T::zero(); num_params], lr, beta1, beta2, eps })
    }

    pub fn for_store(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        Self::new(params.numel(), lr, beta1, beta2, eps)
    }
}

/// One Adam update of every parameter from its accumulated gradient.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.numel() || state.v.len() != params.numel() {
        return Err(SifmError::Contract(format!(
            "adam state sized for {} parameters, store has {}",
            state.m.len(),
            params.numel()
        )));
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
        return Err(SifmError::Contract(format!("parameter {name} has no gradient")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let step = T::lit(state.lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(state.eps);
    let mut offset = 0;
    for (_, tensor) in params.iter_mut() {
        let n = tensor.len();
        let grad = tensor.grad.take().expect("checked above");
        let m = &mut state.m[offset..offset + n];
        let v = &mut state.v[offset..offset + n];
        for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *p -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
        tensor.grad = Some(grad);
        offset += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.insert(format!("p{i}"), Tensor::scalar(v)).unwrap();
        }
        s
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = store(&[1.5, -2.0]);
        s.zero_grad();
        let mut st = AdamState::for_store(&s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(st.step_count, 1);
        assert_eq!(s.get("p0").unwrap().data(), &[1.5]);
        assert_eq!(s.get("p1").unwrap().data(), &[-2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after one step with g = 1, so the update is lr/(1+eps).
        let mut s = store(&[0.0]);
        s.get_mut("p0").unwrap().grad = Some(vec![1.0]);
        let mut st = AdamState::for_store(&s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        adam_step(&mut s, &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get("p0").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = store(&[0.3, 0.3]);
        let mut st = AdamState::for_store(&s, 0.01, 0.9, 0.999, 1e-8).unwrap();
        for k in 0..25 {
            let g = (k as f64 * 0.7).sin();
            s.get_mut("p0").unwrap().grad = Some(vec![g]);
            s.get_mut("p1").unwrap().grad = Some(vec![g]);
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.get("p0").unwrap().data(), s.get("p1").unwrap().data());
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut s = store(&[1.0]);
        let mut st = AdamState::for_store(&s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!(matches!(adam_step(&mut s, &mut st), Err(SifmError::Contract(_))));
    }

    #[test]
    fn rejects_betas_outside_unit_interval() {
        assert!(AdamState::<f32>::new(1, 0.1, 1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::<f32>::new(1, 0.1, 0.9, 0.0, 1e-8).is_err());
    }
}
