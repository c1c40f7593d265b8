//! The convolutional policy network.
//!
//! Architecture (fixed):
//!
//! ```text
//! obs [1,H,W]
//!   -> conv 8@5x5 stride 2 -> ReLU
//!   -> conv 16@5x5 stride 2 -> ReLU      (feature map used by Grad-CAM)
//!   -> flatten -> dense 64 -> ReLU       (hidden features used by t-SNE)
//!   -> dense 3 -> softmax                (Left, Forward, Right)
//! ```
//!
//! The network is generic over the scalar type so the exact same forward and
//! backward code can be run in `f64` for gradient checking.

use crate::env::Action;
use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{
    conv2d_backward_impl, conv2d_forward, dense_backward_impl, dense_forward, relu_backward,
    relu_forward, softmax, Scalar, Tensor,
};

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const HIDDEN: usize = 64;
pub const NUM_ACTIONS: usize = 3;

/// Parameter names in canonical order. Gradients and the weights file use
/// the same order.
pub const PARAMETER_NAMES: [&str; 8] = [
    "conv1.kernels",
    "conv1.bias",
    "conv2.kernels",
    "conv2.bias",
    "fc1.weights",
    "fc1.bias",
    "fc2.weights",
    "fc2.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork<T: Scalar = f32> {
    input_h: usize,
    input_w: usize,
    params: Vec<Tensor<T>>,
}

/// Which scalar of the network output a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// `pi(a|s)`, the post-softmax probability.
    #[default]
    Probability,
    /// `log pi(a|s)`, used by REINFORCE.
    LogProbability,
    /// The pre-softmax score of the action.
    Logit,
}

/// All intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub conv1_pre: Tensor<T>,
    pub conv1_out: Tensor<T>,
    pub conv2_pre: Tensor<T>,
    /// Last convolutional feature map after ReLU, `[16, h', w']`.
    pub feature_map: Tensor<T>,
    pub head: HeadForward<T>,
}

/// Activations of the dense head, starting from a feature map.
#[derive(Debug, Clone)]
pub struct HeadForward<T: Scalar = f32> {
    pub hidden_pre: Tensor<T>,
    /// Penultimate activations after ReLU, `[64]`.
    pub hidden: Tensor<T>,
    /// Raw scores, unaffected by masking.
    pub logits: Tensor<T>,
    /// Action distribution; masked actions have probability exactly 0.
    pub probs: Tensor<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn probs(&self) -> [T; NUM_ACTIONS] {
        let p = self.head.probs.data();
        [p[0], p[1], p[2]]
    }

    pub fn hidden(&self) -> &Tensor<T> {
        &self.head.hidden
    }
}

#[derive(Debug, Clone)]
pub struct Backward<T: Scalar = f32> {
    /// Parameter gradients in [`PARAMETER_NAMES`] order, when requested.
    pub params: Option<Vec<Tensor<T>>>,
    /// Gradient with respect to the post-ReLU feature map.
    pub feature_map: Tensor<T>,
    /// Gradient with respect to the observation, when requested.
    pub input: Option<Tensor<T>>,
}

fn out_len(n: usize) -> Option<usize> {
    (n >= KERNEL).then(|| (n - KERNEL) / STRIDE + 1)
}

/// Spatial size of the Grad-CAM feature map for a given input size.
pub fn feature_map_size(input_h: usize, input_w: usize) -> Option<(usize, usize)> {
    let h = out_len(out_len(input_h)?)?;
    let w = out_len(out_len(input_w)?)?;
    Some((h, w))
}

fn parameter_shapes(input_h: usize, input_w: usize) -> Result<[Vec<usize>; 8]> {
    let (fh, fw) = feature_map_size(input_h, input_w).ok_or_else(|| {
        Error::Shape(format!("input {input_h}x{input_w} too small for two 5x5 stride-2 convs"))
    })?;
    let flat = CONV2_CHANNELS * fh * fw;
    Ok([
        vec![CONV1_CHANNELS, 1, KERNEL, KERNEL],
        vec![CONV1_CHANNELS],
        vec![CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL],
        vec![CONV2_CHANNELS],
        vec![HIDDEN, flat],
        vec![HIDDEN],
        vec![NUM_ACTIONS, HIDDEN],
        vec![NUM_ACTIONS],
    ])
}

/// `d objective / d logits` for the given action and distribution.
pub fn objective_logit_grad<T: Scalar>(
    probs: &[T],
    action: Action,
    objective: Objective,
) -> Tensor<T> {
    let a = action.index();
    let data = (0..probs.len())
        .map(|j| {
            let delta = if j == a { T::one() } else { T::zero() };
            match objective {
                Objective::Probability => probs[a] * (delta - probs[j]),
                Objective::LogProbability => delta - probs[j],
                Objective::Logit => delta,
            }
        })
        .collect();
    Tensor::from_vec(data)
}

impl<T: Scalar> PolicyNetwork<T> {
    /// He-style initialization (Gaussian, std `sqrt(2 / fan_in)`) for every
    /// weight except the final layer, which starts at zero so the initial
    /// policy is exactly uniform. Biases start at zero.
    pub fn new(input_h: usize, input_w: usize, seed: u64) -> Result<Self> {
        let shapes = parameter_shapes(input_h, input_w)?;
        let mut rng = rng::seeded(seed);
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let is_weight = i % 2 == 0;
                let is_final = i >= 6;
                if !is_weight || is_final {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::lit(std * rng::gaussian(&mut rng)))
                    .collect();
                Tensor::new(shape.clone(), data).expect("init shape")
            })
            .collect();
        Ok(Self {
            input_h,
            input_w,
            params,
        })
    }

    /// Builds a network from named tensors, checking every shape.
    pub fn from_parameters(
        input_h: usize,
        input_w: usize,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let shapes = parameter_shapes(input_h, input_w)?;
        if named.len() != PARAMETER_NAMES.len() {
            return shape_err(format!(
                "expected {} parameter tensors, got {}",
                PARAMETER_NAMES.len(),
                named.len()
            ));
        }
        let mut params = Vec::with_capacity(named.len());
        for (((name, t), expect_name), shape) in named.into_iter().zip(PARAMETER_NAMES).zip(&shapes) {
            if name != expect_name {
                return shape_err(format!("expected parameter '{expect_name}', found '{name}'"));
            }
            if t.shape() != shape.as_slice() {
                return shape_err(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
            params.push(t);
        }
        Ok(Self {
            input_h,
            input_w,
            params,
        })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.input_h, self.input_w)
    }

    pub fn feature_map_shape(&self) -> [usize; 3] {
        let (h, w) = feature_map_size(self.input_h, self.input_w).expect("validated at build");
        [CONV2_CHANNELS, h, w]
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        PARAMETER_NAMES.iter().copied().zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNetwork<U> {
        PolicyNetwork {
            input_h: self.input_h,
            input_w: self.input_w,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Flattened copy of every parameter in canonical order.
    pub fn flat_parameters(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_parameters(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.parameter_count());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// `theta += scale * grads`.
    pub fn add_scaled(&mut self, grads: &[Tensor<T>], scale: T) {
        assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            assert_eq!(p.shape(), g.shape());
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv = *pv + scale * gv;
            }
        }
    }

    fn check_obs(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let expect = [1, self.input_h, self.input_w];
        if obs.len() != self.input_h * self.input_w
            || !(obs.shape() == expect || obs.shape() == [self.input_h, self.input_w])
        {
            return shape_err(format!(
                "observation shape {:?} does not match network input {expect:?}",
                obs.shape()
            ));
        }
        obs.clone().reshape(&expect)
    }

    pub fn forward(&self, obs: &Tensor<T>) -> Result<Forward<T>> {
        self.forward_masked(obs, false)
    }

    /// Forward pass; with `mask_left` the Left logit is treated as negative
    /// infinity so Left gets probability exactly zero.
    pub fn forward_masked(&self, obs: &Tensor<T>, mask_left: bool) -> Result<Forward<T>> {
        let input = self.check_obs(obs)?;
        let p = &self.params;
        let conv1_pre = conv2d_forward(&input, &p[0], &p[1], STRIDE)?;
        let conv1_out = relu_forward(&conv1_pre);
        let conv2_pre = conv2d_forward(&conv1_out, &p[2], &p[3], STRIDE)?;
        let feature_map = relu_forward(&conv2_pre);
        let head = self.head_forward(&feature_map, mask_left)?;
        Ok(Forward {
            input,
            conv1_pre,
            conv1_out,
            conv2_pre,
            feature_map,
            head,
        })
    }

    /// The part of the network after the last convolution, evaluated on an
    /// arbitrary feature map.
    pub fn head_forward(&self, feature_map: &Tensor<T>, mask_left: bool) -> Result<HeadForward<T>> {
        let fm_shape = self.feature_map_shape();
        if feature_map.shape() != fm_shape {
            return shape_err(format!(
                "feature map shape {:?}, expected {fm_shape:?}",
                feature_map.shape()
            ));
        }
        let p = &self.params;
        let hidden_pre = dense_forward(feature_map, &p[4], &p[5])?;
        let hidden = relu_forward(&hidden_pre);
        let logits = dense_forward(&hidden, &p[6], &p[7])?;
        let probs = if mask_left {
            let mut masked = logits.clone();
            masked.data_mut()[Action::Left.index()] = T::neg_infinity();
            softmax(&masked)
        } else {
            softmax(&logits)
        };
        Ok(HeadForward {
            hidden_pre,
            hidden,
            logits,
            probs,
        })
    }

    /// Reverse pass from `d objective / d logits` back through the network.
    /// The feature-map gradient is always produced; parameter and input
    /// gradients only on request.
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        dlogits: &Tensor<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<Backward<T>> {
        let p = &self.params;
        let (dw2, db2, dhidden) = dense_backward_impl(&fwd.head.hidden, &p[6], dlogits, true)?;
        let dhidden_pre = relu_backward(&fwd.head.hidden_pre, &dhidden.expect("requested"))?;
        let (dw1, db1, dfm) = dense_backward_impl(&fwd.feature_map, &p[4], &dhidden_pre, true)?;
        let dfm = dfm.expect("requested");
        if !want_params && !want_input {
            return Ok(Backward {
                params: None,
                feature_map: dfm,
                input: None,
            });
        }
        let dconv2_pre = relu_backward(&fwd.conv2_pre, &dfm)?;
        let (dk2, dc2, dconv1_out) =
            conv2d_backward_impl(&fwd.conv1_out, &p[2], &p[3], STRIDE, &dconv2_pre, true)?;
        let dconv1_pre = relu_backward(&fwd.conv1_pre, &dconv1_out.expect("requested"))?;
        let (dk1, dc1, dinput) =
            conv2d_backward_impl(&fwd.input, &p[0], &p[1], STRIDE, &dconv1_pre, want_input)?;
        Ok(Backward {
            params: want_params.then(|| vec![dk1, dc1, dk2, dc2, dw1, db1, dw2, db2]),
            feature_map: dfm,
            input: dinput,
        })
    }

    /// Gradient of `log pi(a|s)` with respect to every parameter.
    pub fn log_prob_grad(&self, obs: &Tensor<T>, action: Action, mask_left: bool) -> Result<Vec<Tensor<T>>> {
        let fwd = self.forward_masked(obs, mask_left)?;
        let dlogits = objective_logit_grad(fwd.head.probs.data(), action, Objective::LogProbability);
        Ok(self.backward(&fwd, &dlogits, true, false)?.params.expect("requested"))
    }

    /// Gradient of the chosen objective with respect to the observation.
    pub fn input_grad(&self, obs: &Tensor<T>, action: Action, objective: Objective) -> Result<(Forward<T>, Tensor<T>)> {
        let fwd = self.forward(obs)?;
        let dlogits = objective_logit_grad(fwd.head.probs.data(), action, objective);
        let back = self.backward(&fwd, &dlogits, false, true)?;
        Ok((fwd, back.input.expect("requested")))
    }

    /// Folds a permanent Left mask into the output layer: the Left row of the
    /// final dense layer is zeroed and its bias set to `bias`.
    pub fn suppress_left(&mut self, bias: T) {
        let row = Action::Left.index();
        let w = &mut self.params[6];
        for v in &mut w.data_mut()[row * HIDDEN..(row + 1) * HIDDEN] {
            *v = T::zero();
        }
        self.params[7].data_mut()[row] = bias;
    }
}
