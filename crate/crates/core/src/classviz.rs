//! Class model visualization: gradient ascent on the input image to
//! maximize one action's probability.

use crate::env::Action;
use crate::error::{Error, Result};
use crate::network::{Objective, PolicyNetwork};
use crate::rng;
use crate::tensor::Tensor;

/// Neutral gray used for initialization and as the L2 decay reference.
pub const MID_GRAY: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CmvInit {
    #[default]
    MidGray,
    /// Mid-gray plus seeded Gaussian noise (std 0.1), clamped.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmvConfig {
    pub steps: usize,
    pub step_size: f32,
    /// Pulls every pixel toward mid-gray by this fraction of its deviation.
    pub l2_decay: f32,
    /// Apply the 3x3 binomial blur every this many steps; 0 disables it.
    pub blur_every: usize,
    pub clamp_min: f32,
    pub clamp_max: f32,
    pub init: CmvInit,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for CmvConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            step_size: 0.05,
            l2_decay: 1e-3,
            blur_every: 10,
            clamp_min: 0.0,
            clamp_max: 1.0,
            init: CmvInit::MidGray,
            objective: Objective::Probability,
            seed: 0,
        }
    }
}

impl CmvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("class visualization needs at least one step".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.l2_decay >= 0.0) {
            return Err(Error::Config("l2_decay must be non-negative".into()));
        }
        if !(self.clamp_min < self.clamp_max) {
            return Err(Error::Config("clamp range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmvResult {
    /// `[1, H, W]` within the clamp range.
    pub image: Tensor,
    pub final_prob: f32,
    /// `pi(a|s)` after each step.
    pub prob_trace: Vec<f32>,
}

/// Starting image for [`synthesize`], `[1, h, w]`.
pub fn initial_image(h: usize, w: usize, cfg: &CmvConfig) -> Tensor {
    let data = match cfg.init {
        CmvInit::MidGray => vec![MID_GRAY; h * w],
        CmvInit::Noise => {
            let mut r = rng::seeded(cfg.seed);
            (0..h * w)
                .map(|_| (MID_GRAY + 0.1 * rng::gaussian(&mut r) as f32).clamp(cfg.clamp_min, cfg.clamp_max))
                .collect()
        }
    };
    Tensor::new(vec![1, h, w], data).expect("init shape")
}

/// Iterates `s <- clamp(s + step_size * grad_s J - l2_decay * (s - 0.5))`
/// where `J` is the configured objective for `action`, blurring every
/// `blur_every` steps.
pub fn synthesize(net: &PolicyNetwork, action: Action, cfg: &CmvConfig) -> Result<CmvResult> {
    cfg.validate()?;
    let (h, w) = net.input_shape();
    let mut image = initial_image(h, w, cfg);
    let mut prob_trace = Vec::with_capacity(cfg.steps);
    for k in 1..=cfg.steps {
        let (_, grad) = net.input_grad(&image, action, cfg.objective)?;
        for (s, &g) in image.data_mut().iter_mut().zip(grad.data()) {
            let next = *s + cfg.step_size * g - cfg.l2_decay * (*s - MID_GRAY);
            *s = next.clamp(cfg.clamp_min, cfg.clamp_max);
        }
        if cfg.blur_every > 0 && k % cfg.blur_every == 0 {
            image = binomial_blur(&image);
        }
        prob_trace.push(net.forward(&image)?.probs()[action.index()]);
    }
    Ok(CmvResult {
        image,
        final_prob: *prob_trace.last().expect("steps >= 1"),
        prob_trace,
    })
}

/// 3x3 blur with kernel `[1,2,1] x [1,2,1] / 16`, replicating edge pixels.
/// Accepts `[H, W]` or `[1, H, W]`.
pub fn binomial_blur(image: &Tensor) -> Tensor {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let src = image.data();
    const K: [f32; 3] = [1.0, 2.0, 1.0];
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (dy, ky) in K.iter().enumerate() {
                let sy = (y + dy).saturating_sub(1).min(h - 1);
                for (dx, kx) in K.iter().enumerate() {
                    let sx = (x + dx).saturating_sub(1).min(w - 1);
                    acc += ky * kx * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc / 16.0;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("blur shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Third {
    Left,
    Right,
}

/// Mean intensity of the left or right vertical third of an image. The
/// thirds are columns `[0, W/3)` and `[W - W/3, W)` with integer division.
pub fn occlusion_side_statistic(image: &Tensor, side: Third) -> Result<f64> {
    let shape = image.shape();
    if shape.len() < 2 || image.len() != shape[shape.len() - 2] * shape[shape.len() - 1] {
        return Err(Error::Shape(format!("expected a single-channel image, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let third = w / 3;
    if third == 0 {
        return Err(Error::Shape(format!("image width {w} cannot be split into thirds")));
    }
    let cols = match side {
        Third::Left => 0..third,
        Third::Right => w - third..w,
    };
    let data = image.data();
    let mut sum = 0.0f64;
    for y in 0..h {
        for x in cols.clone() {
            sum += data[y * w + x] as f64;
        }
    }
    Ok(sum / (h * third) as f64)
}
