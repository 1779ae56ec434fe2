use super::CnnParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 0.001, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("adam betas must lie in [0, 1)".into());
        }
        if !(self.alpha > 0.0) || !(self.epsilon > 0.0) {
            return Err("adam alpha and epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Moment accumulators, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: CnnParams,
    pub v: CnnParams,
}

impl AdamState {
    pub fn new(like: &CnnParams) -> Self {
        Self { step: 0, m: CnnParams::zeros(*like.config()), v: CnnParams::zeros(*like.config()) }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut CnnParams, state: &mut AdamState, grads: &CnnParams, config: &AdamConfig) {
    assert!(params.same_shape(grads) && params.same_shape(&state.m), "adam shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    let tensors = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    let gs = grads.tensors();
    for (((p, m), v), g) in tensors.into_iter().zip(ms).zip(vs).zip(gs) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= config.alpha * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}
