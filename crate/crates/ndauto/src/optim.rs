use crate::error::{shape_err, NdError, Result};
use crate::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one pair per parameter slice.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            config,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: Real,
    pub clipped: bool,
}

pub fn global_norm(grads: &[Tensor]) -> Real {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<Real>()
        .sqrt()
}

/// Rescale all gradients jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: Real) -> Real {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One Adam update with optional global-norm clipping. A non-finite gradient
/// aborts before anything is modified.
pub fn adam_step(
    store: &mut ParamStore,
    mut grads: Vec<Tensor>,
    state: &mut AdamState,
    max_grad_norm: Option<Real>,
) -> Result<StepStats> {
    if grads.len() != store.len() || state.first_moment.len() != store.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} grads, {} params, {} moments",
                grads.len(),
                store.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (id, g) in store.ids().zip(&grads) {
        if g.shape() != store.get(id).shape() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{}: grad {:?} vs param {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                ),
            ));
        }
        if !g.all_finite() {
            return Err(NdError::NonFinite {
                what: format!("gradient of {}", store.name(id)),
            });
        }
    }
    let grad_norm = match max_grad_norm {
        Some(m) => clip_global_norm(&mut grads, m),
        None => global_norm(&grads),
    };
    let clipped = max_grad_norm.is_some_and(|m| grad_norm > m);

    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (id, g)) in store.ids().zip(&grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g.data()[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g.data()[k] * g.data()[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        }
    }
    Ok(StepStats { grad_norm, clipped })
}
