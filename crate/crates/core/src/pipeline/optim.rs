use std::collections::BTreeMap;

use crate::detector::{DetectorParams, GroupMask, ParamGroup};

/// SGD with momentum and L2 weight decay over the groups of a mask.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: DetectorParams,
}

impl Sgd {
    pub fn new(params: &DetectorParams, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    /// `v <- mu v + (g + wd p)`, `p <- p - lr v` on every trainable tensor.
    pub fn step(&mut self, params: &mut DetectorParams, grads: &DetectorParams, mask: GroupMask, lr: f64) {
        for g in mask.groups() {
            let names: Vec<String> = params.names_in(g).into_iter().map(str::to_string).collect();
            for name in names {
                let grad = grads.get(&name);
                let v = self.velocity.get_mut(&name);
                let p = params.get_mut(&name);
                for i in 0..p.len() {
                    v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * p[i];
                    p[i] -= lr * v[i];
                }
            }
        }
    }
}

/// Gradient buffer as the optimizer sees it: frozen groups zeroed.
pub fn masked_gradients(grads: &mut DetectorParams, mask: GroupMask) {
    for g in ParamGroup::ALL {
        if mask.contains(g) {
            continue;
        }
        let names: Vec<String> = grads.names_in(g).into_iter().map(str::to_string).collect();
        for name in names {
            grads.get_mut(&name).fill(0.0);
        }
    }
}

pub fn group_norms(grads: &DetectorParams) -> BTreeMap<ParamGroup, f64> {
    ParamGroup::ALL.into_iter().map(|g| (g, grads.group_norm(g))).collect()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut DetectorParams, max_norm: f64) -> f64 {
    let norm = grads
        .tensors
        .values()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
