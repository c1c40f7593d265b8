//! Central finite differences for validating analytic gradients.
//!
//! Everything here runs in `f64`; callers evaluate their scalar objective in
//! the 64-bit shadow precision and compare against the analytic gradient
//! produced by the same layer code instantiated at `f64`.

use crate::env::Action;
use crate::network::{objective_logit_grad, Forward, HeadForward, Objective, PolicyNetwork};
use crate::rng::{self, SplitMix64};
use crate::tensor::{conv2d_backward, conv2d_forward, dense_backward, dense_forward, relu_backward, relu_forward, Scalar, Tensor};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominator floor for relative error, so entries that are zero in both
/// analytic and numeric form don't divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` at `x` by `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central difference restricted to a subset of coordinates.
pub fn central_difference_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Comparison {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Element-wise comparison; reports the worst entry.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> Comparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = Comparison {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.max_relative_error {
            worst = Comparison {
                max_relative_error: e,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}

/// Relative tolerance every analytic gradient must meet.
pub const TOLERANCE: f64 = 1e-4;

/// Coordinates sampled per parameter tensor in the network-level checks.
const SAMPLES_PER_TENSOR: usize = 12;

/// ReLU inputs closer than this to zero are left out of the ReLU check.
pub const RELU_KINK_MARGIN: f64 = 1e-2;

/// Outcome of one randomized gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    /// Error the check is judged by: the worst entry for single layers, the
    /// worst per-tensor [`norm_relative_error`] for whole-network gradients.
    pub error: f64,
    /// Worst single entry, reported for diagnosis.
    pub comparison: Comparison,
    /// Entries compared.
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

fn gaussian_tensor(shape: &[usize], scale: f64, r: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng::gaussian(r)).collect()).expect("shape")
}

fn uniform_tensor(shape: &[usize], r: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(r)).collect()).expect("shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), data.to_vec()).expect("shape")
}

impl Instance {
    pub fn passes(&self, tol: f64) -> bool {
        self.error < tol
    }
}

/// `||a - n|| / max(||a||, ||n||)` in the Euclidean norm.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let denom = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(RELATIVE_FLOOR);
    diff / denom
}

fn instance(analytic: &[f64], numeric: &[f64], skipped: usize) -> Instance {
    let comparison = compare(analytic, numeric);
    Instance {
        error: comparison.max_relative_error,
        comparison,
        checked: analytic.len(),
        skipped,
    }
}

/// Judged per group of entries (one group per tensor) by norm-relative error.
fn grouped_instance(groups: &[(Vec<f64>, Vec<f64>)], skipped: usize) -> Instance {
    let analytic: Vec<f64> = groups.iter().flat_map(|g| g.0.iter().copied()).collect();
    let numeric: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let error = groups
        .iter()
        .filter(|g| !g.0.is_empty())
        .map(|(a, n)| norm_relative_error(a, n))
        .fold(0.0, f64::max);
    Instance {
        error,
        comparison: compare(&analytic, &numeric),
        checked: analytic.len(),
        skipped,
    }
}

/// Convolution backward on a random `2x8x8` input with `4x2x3x3` kernels,
/// stride 2, under the loss `sum(upstream * conv(x))`.
pub fn conv_instance(seed: u64) -> Instance {
    let mut r = rng::seeded(seed);
    let x = gaussian_tensor(&[2, 8, 8], 1.0, &mut r);
    let k = gaussian_tensor(&[4, 2, 3, 3], 0.5, &mut r);
    let b = gaussian_tensor(&[4], 0.5, &mut r);
    let up = gaussian_tensor(&[4, 3, 3], 1.0, &mut r);
    let g = conv2d_backward(&x, &k, &b, 2, &up).expect("conv backward");
    let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&conv2d_forward(x, k, b, 2).expect("conv forward"), &up)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    analytic.extend_from_slice(g.parameter_grads[0].data());
    numeric.extend(central_difference(|v| loss(&x, &with_data(&k, v), &b), k.data(), DEFAULT_STEP));
    analytic.extend_from_slice(g.parameter_grads[1].data());
    numeric.extend(central_difference(|v| loss(&x, &k, &with_data(&b, v)), b.data(), DEFAULT_STEP));
    analytic.extend_from_slice(g.input_grad.data());
    numeric.extend(central_difference(|v| loss(&with_data(&x, v), &k, &b), x.data(), DEFAULT_STEP));
    instance(&analytic, &numeric, 0)
}

/// Dense backward on a random `7 -> 5` layer.
pub fn dense_instance(seed: u64) -> Instance {
    let mut r = rng::seeded(seed);
    let x = gaussian_tensor(&[7], 1.0, &mut r);
    let w = gaussian_tensor(&[5, 7], 0.5, &mut r);
    let b = gaussian_tensor(&[5], 0.5, &mut r);
    let up = gaussian_tensor(&[5], 1.0, &mut r);
    let g = dense_backward(&x, &w, &up).expect("dense backward");
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&dense_forward(x, w, b).expect("dense forward"), &up)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    analytic.extend_from_slice(g.parameter_grads[0].data());
    numeric.extend(central_difference(|v| loss(&x, &with_data(&w, v), &b), w.data(), DEFAULT_STEP));
    analytic.extend_from_slice(g.parameter_grads[1].data());
    numeric.extend(central_difference(|v| loss(&x, &w, &with_data(&b, v)), b.data(), DEFAULT_STEP));
    analytic.extend_from_slice(g.input_grad.data());
    numeric.extend(central_difference(|v| loss(&with_data(&x, v), &w, &b), x.data(), DEFAULT_STEP));
    instance(&analytic, &numeric, 0)
}

/// ReLU backward on 64 random inputs, excluding those near the kink.
pub fn relu_instance(seed: u64) -> Instance {
    let mut r = rng::seeded(seed);
    let x = gaussian_tensor(&[64], 1.0, &mut r);
    let up = gaussian_tensor(&[64], 1.0, &mut r);
    let g = relu_backward(&x, &up).expect("relu backward");
    let keep: Vec<usize> = (0..x.len()).filter(|&i| x.data()[i].abs() >= RELU_KINK_MARGIN).collect();
    let numeric = central_difference_at(
        |v| dot(&relu_forward(&with_data(&x, v)), &up),
        x.data(),
        &keep,
        DEFAULT_STEP,
    );
    let analytic: Vec<f64> = keep.iter().map(|&i| g.data()[i]).collect();
    instance(&analytic, &numeric, x.len() - keep.len())
}

/// He-initialized network whose output layer and biases are also random, so
/// every parameter carries gradient.
pub fn random_network(input_h: usize, input_w: usize, seed: u64) -> PolicyNetwork<f64> {
    let mut net = PolicyNetwork::<f64>::new(input_h, input_w, seed).expect("network");
    let mut r = rng::seeded(seed ^ 0x6A09_E667_F3BC_C908);
    for (i, p) in net.parameters_mut().iter_mut().enumerate() {
        let scale = match i {
            6 => 0.5,
            _ if i % 2 == 1 => 0.05,
            _ => continue,
        };
        *p = gaussian_tensor(p.shape(), scale, &mut r);
    }
    net
}

/// Signs of every ReLU input in the network, used to detect perturbations
/// that cross a kink.
fn relu_pattern<T: Scalar>(fwd: &Forward<T>) -> Vec<bool> {
    fwd.conv1_pre
        .data()
        .iter()
        .chain(fwd.conv2_pre.data())
        .chain(fwd.head.hidden_pre.data())
        .map(|&v| v > T::zero())
        .collect()
}

fn head_pattern<T: Scalar>(head: &HeadForward<T>) -> Vec<bool> {
    head.hidden_pre.data().iter().map(|&v| v > T::zero()).collect()
}

/// Central differences over `indices`, skipping any coordinate whose
/// perturbation changes `pattern`.
fn kink_aware_difference(
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<bool>),
    x: &[f64],
    indices: &[usize],
) -> (Vec<usize>, Vec<f64>) {
    let (_, base) = eval(x);
    let mut probe = x.to_vec();
    let mut kept = Vec::new();
    let mut numeric = Vec::new();
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + DEFAULT_STEP;
        let (plus, pp) = eval(&probe);
        probe[i] = orig - DEFAULT_STEP;
        let (minus, pm) = eval(&probe);
        probe[i] = orig;
        if pp == base && pm == base {
            kept.push(i);
            numeric.push((plus - minus) / (2.0 * DEFAULT_STEP));
        }
    }
    (kept, numeric)
}

fn sample_indices(len: usize, count: usize, r: &mut SplitMix64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| (rng::uniform(r) * len as f64) as usize % len).collect()
}

/// `grad_theta log pi(a|s)` of the full network against finite differences
/// on a sample of coordinates from every parameter tensor. Odd seeds run
/// with the Left mask and a non-Left action.
pub fn log_prob_instance(seed: u64) -> Instance {
    let net = random_network(32, 32, seed);
    let mut r = rng::seeded(seed ^ 0xBB67_AE85_84CA_A73B);
    let obs = uniform_tensor(&[1, 32, 32], &mut r);
    let mask_left = seed % 2 == 1;
    let action = if mask_left {
        [Action::Forward, Action::Right][(seed / 2 % 2) as usize]
    } else {
        Action::ALL[(seed % 3) as usize]
    };
    let grads = net.log_prob_grad(&obs, action, mask_left).expect("log prob grad");
    let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let theta = net.flat_parameters();
    let mut indices = Vec::new();
    let mut bounds = Vec::new();
    let mut offset = 0;
    for p in net.parameters() {
        indices.extend(sample_indices(p.len(), SAMPLES_PER_TENSOR, &mut r).into_iter().map(|i| offset + i));
        bounds.push(offset..offset + p.len());
        offset += p.len();
    }
    let mut probe_net = net.clone();
    let (kept, numeric) = kink_aware_difference(
        |v| {
            probe_net.set_flat_parameters(v);
            let fwd = probe_net.forward_masked(&obs, mask_left).expect("forward");
            (fwd.head.probs.data()[action.index()].ln(), relu_pattern(&fwd))
        },
        &theta,
        &indices,
    );
    let groups: Vec<(Vec<f64>, Vec<f64>)> = bounds
        .iter()
        .map(|b| {
            kept.iter()
                .zip(&numeric)
                .filter(|(i, _)| b.contains(i))
                .map(|(&i, &n)| (flat_grad[i], n))
                .unzip()
        })
        .collect();
    grouped_instance(&groups, indices.len() - kept.len())
}

/// `grad_s pi(a|s)` used by class model visualization, on 10 random pixels.
pub fn input_grad_instance(seed: u64) -> Instance {
    let net = random_network(32, 32, seed);
    let mut r = rng::seeded(seed ^ 0x3C6E_F372_FE94_F82B);
    let obs = uniform_tensor(&[1, 32, 32], &mut r);
    let action = Action::ALL[(seed % 3) as usize];
    let (_, grad) = net.input_grad(&obs, action, Objective::Probability).expect("input grad");
    let indices = sample_indices(obs.len(), 10, &mut r);
    let (kept, numeric) = kink_aware_difference(
        |v| {
            let fwd = net.forward(&with_data(&obs, v)).expect("forward");
            (fwd.head.probs.data()[action.index()], relu_pattern(&fwd))
        },
        obs.data(),
        &indices,
    );
    let analytic: Vec<f64> = kept.iter().map(|&i| grad.data()[i]).collect();
    grouped_instance(&[(analytic, numeric)], indices.len() - kept.len())
}

/// `d pi(a|s) / dA` at the Grad-CAM layer, checked by perturbing feature-map
/// entries and re-evaluating only the network head. Every entry is checked,
/// and the channel means are compared against the importance weights.
pub fn head_grad_instance(seed: u64) -> Instance {
    let net = random_network(32, 32, seed);
    let mut r = rng::seeded(seed ^ 0xA54F_F53A_5F1D_36F1);
    let obs = uniform_tensor(&[1, 32, 32], &mut r);
    let action = Action::ALL[(seed % 3) as usize];
    let fwd = net.forward(&obs).expect("forward");
    let dlogits = objective_logit_grad(fwd.head.probs.data(), action, Objective::Probability);
    let back = net.backward(&fwd, &dlogits, false, false).expect("backward");
    let fm = &fwd.feature_map;
    let indices: Vec<usize> = (0..fm.len()).collect();
    let (kept, numeric) = kink_aware_difference(
        |v| {
            let head = net.head_forward(&with_data(fm, v), false).expect("head");
            (head.probs.data()[action.index()], head_pattern(&head))
        },
        fm.data(),
        &indices,
    );
    let analytic: Vec<f64> = kept.iter().map(|&i| back.feature_map.data()[i]).collect();
    let mut groups = vec![(analytic, numeric)];
    if kept.len() == fm.len() {
        let z = fm.shape()[1] * fm.shape()[2];
        let alpha = crate::attrib::importance_weights(&net, &obs, action).expect("alpha");
        let numeric_alpha = groups[0].1.chunks_exact(z).map(|c| c.iter().sum::<f64>() / z as f64).collect();
        groups.push((alpha.alpha, numeric_alpha));
    }
    grouped_instance(&groups, indices.len() - kept.len())
}
