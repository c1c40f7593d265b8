//! Grad-CAM over the last convolutional feature map.
//!
//! Channel importance is the spatial mean of the derivative of the action
//! output with respect to that channel; the class activation map is the
//! ReLU of the importance-weighted channel sum.

use crate::env::Action;
use crate::error::{shape_err, Result};
use crate::network::{objective_logit_grad, Objective, PolicyNetwork, NUM_ACTIONS};
use crate::tensor::{bilinear_upsample, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights<T: Scalar = f32> {
    /// One weight per feature-map channel.
    pub alpha: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Class activation map at feature-map resolution, non-negative.
    pub raw: Tensor,
    /// `raw` upsampled to the observation size and divided by its maximum;
    /// identically zero when `raw` is.
    pub upsampled: Tensor,
    /// Action being explained.
    pub action: Action,
    pub probs: [f32; NUM_ACTIONS],
    /// Action actually taken in the frame.
    pub taken: Action,
}

/// `alpha_k = (1/Z) sum_ij dJ/dA^k_ij` from a feature-map gradient `[K,h,w]`.
pub fn weights_from_gradient<T: Scalar>(grad: &Tensor<T>) -> Result<ImportanceWeights<T>> {
    if grad.ndim() != 3 {
        return shape_err(format!("feature-map gradient must be [K,h,w], got {:?}", grad.shape()));
    }
    let z = grad.shape()[1] * grad.shape()[2];
    let zt = T::lit(z as f64);
    let alpha = grad
        .data()
        .chunks_exact(z)
        .map(|ch| ch.iter().copied().sum::<T>() / zt)
        .collect();
    Ok(ImportanceWeights { alpha })
}

/// `ReLU(sum_k alpha_k A^k)` for a feature map `[K,h,w]`, returned as `[h,w]`.
pub fn class_activation_map<T: Scalar>(feature_map: &Tensor<T>, weights: &ImportanceWeights<T>) -> Result<Tensor<T>> {
    if feature_map.ndim() != 3 || feature_map.shape()[0] != weights.alpha.len() {
        return shape_err(format!(
            "feature map {:?} does not match {} importance weights",
            feature_map.shape(),
            weights.alpha.len()
        ));
    }
    let (h, w) = (feature_map.shape()[1], feature_map.shape()[2]);
    let mut cam = vec![T::zero(); h * w];
    for (ch, &a) in feature_map.data().chunks_exact(h * w).zip(&weights.alpha) {
        for (c, &v) in cam.iter_mut().zip(ch) {
            *c = *c + a * v;
        }
    }
    for c in &mut cam {
        if !(*c > T::zero()) {
            *c = T::zero();
        }
    }
    Tensor::new(vec![h, w], cam)
}

/// Importance weights and feature map from one forward/backward pass.
pub fn importance_weights_with<T: Scalar>(
    net: &PolicyNetwork<T>,
    obs: &Tensor<T>,
    action: Action,
    objective: Objective,
) -> Result<(ImportanceWeights<T>, Tensor<T>, [T; NUM_ACTIONS])> {
    let fwd = net.forward(obs)?;
    let dlogits = objective_logit_grad(fwd.head.probs.data(), action, objective);
    let back = net.backward(&fwd, &dlogits, false, false)?;
    let probs = fwd.probs();
    Ok((weights_from_gradient(&back.feature_map)?, fwd.feature_map, probs))
}

/// Importance weights of the action probability `pi(a|s)`.
pub fn importance_weights<T: Scalar>(net: &PolicyNetwork<T>, obs: &Tensor<T>, action: Action) -> Result<ImportanceWeights<T>> {
    Ok(importance_weights_with(net, obs, action, Objective::Probability)?.0)
}

pub fn grad_cam(net: &PolicyNetwork, obs: &Tensor, action: Action) -> Result<AttributionMap> {
    grad_cam_with(net, obs, action, Objective::Probability)
}

pub fn grad_cam_with(net: &PolicyNetwork, obs: &Tensor, action: Action, objective: Objective) -> Result<AttributionMap> {
    let (weights, feature_map, probs) = importance_weights_with(net, obs, action, objective)?;
    let raw = class_activation_map(&feature_map, &weights)?;
    let (h, w) = net.input_shape();
    Ok(AttributionMap {
        upsampled: normalized_upsample(&raw, h, w)?,
        raw,
        action,
        probs,
        taken: action,
    })
}

/// Bilinear upsample followed by division by the maximum.
pub fn normalized_upsample(raw: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut up = bilinear_upsample(raw, h, w)?;
    let max = up.max();
    if max > 0.0 {
        for v in up.data_mut() {
            *v /= max;
        }
    } else {
        up = Tensor::zeros(&[h, w]);
    }
    Ok(up)
}

/// Share of the attribution mass that falls inside `mask` (values > 0.5
/// count as inside). Zero for an all-zero map.
pub fn cube_mass_fraction(map: &AttributionMap, mask: &Tensor) -> Result<f64> {
    if map.upsampled.len() != mask.len() {
        return shape_err(format!(
            "mask {:?} does not match attribution {:?}",
            mask.shape(),
            map.upsampled.shape()
        ));
    }
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for (&v, &m) in map.upsampled.data().iter().zip(mask.data()) {
        total += v as f64;
        if m > 0.5 {
            inside += v as f64;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}
