//! Little-endian binary formats for weights (`RLVZ`) and rollouts (`RLRO`).

use std::io::{Cursor, Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rlvis_core::network::NUM_ACTIONS;
use rlvis_core::policy::Trajectory;
use rlvis_core::{Action, PolicyNetwork, Tensor};

use crate::error::{usage, CliError, CliResult};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RLVZ";
pub const WEIGHTS_VERSION: u32 = 1;
pub const ROLLOUT_MAGIC: &[u8; 4] = b"RLRO";
pub const ROLLOUT_VERSION: u32 = 1;

/// Extra tensor in a weights file holding the network input size `[h, w]`.
pub const INPUT_SHAPE_TENSOR: &str = "input_hw";

const PROB_SUM_TOLERANCE: f32 = 1e-5;

fn truncated(what: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{what}: truncated or unreadable ({e})"))
}

fn check_header(r: &mut Cursor<&[u8]>, magic: &[u8; 4], version: u32, what: &str) -> CliResult<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated(what))?;
    if &m != magic {
        return usage(format!("{what}: bad magic {m:?}, expected {:?}", std::str::from_utf8(magic).unwrap()));
    }
    let v = r.read_u32::<LE>().map_err(truncated(what))?;
    if v != version {
        return usage(format!("{what}: unsupported version {v}"));
    }
    Ok(())
}

fn check_consumed(r: &Cursor<&[u8]>, what: &str) -> CliResult<()> {
    let extra = r.get_ref().len() as u64 - r.position();
    if extra != 0 {
        return usage(format!("{what}: {extra} trailing bytes"));
    }
    Ok(())
}

fn to_u32(n: usize, what: &str) -> CliResult<u32> {
    u32::try_from(n).map_err(|_| CliError::Internal(format!("{what} {n} does not fit in u32")))
}

/// Named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightsFile {
    pub fn from_network(net: &PolicyNetwork) -> Self {
        let (h, w) = net.input_shape();
        let mut tensors: Vec<(String, Tensor)> = net
            .named_parameters()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        tensors.push((INPUT_SHAPE_TENSOR.into(), Tensor::from_vec(vec![h as f32, w as f32])));
        Self { tensors }
    }

    pub fn into_network(self) -> CliResult<PolicyNetwork> {
        let mut shape = None;
        let mut params = Vec::new();
        for (name, t) in self.tensors {
            if name == INPUT_SHAPE_TENSOR {
                shape = Some(t);
            } else {
                params.push((name, t));
            }
        }
        let shape = shape.ok_or_else(|| CliError::Usage(format!("weights: missing '{INPUT_SHAPE_TENSOR}' tensor")))?;
        let dims: Vec<usize> = shape.data().iter().map(|&v| v as usize).collect();
        if dims.len() != 2 || shape.data().iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
            return usage(format!("weights: invalid input shape {:?}", shape.data()));
        }
        Ok(PolicyNetwork::from_parameters(dims[0], dims[1], params)?)
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.write_u32::<LE>(WEIGHTS_VERSION).unwrap();
        out.write_u32::<LE>(to_u32(self.tensors.len(), "tensor count")?).unwrap();
        for (name, t) in &self.tensors {
            out.write_u32::<LE>(to_u32(name.len(), "name length")?).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LE>(to_u32(t.ndim(), "ndim")?).unwrap();
            for &d in t.shape() {
                out.write_u32::<LE>(to_u32(d, "dimension")?).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LE>(v).unwrap();
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        const WHAT: &str = "weights";
        let mut r = Cursor::new(bytes);
        check_header(&mut r, WEIGHTS_MAGIC, WEIGHTS_VERSION, WHAT)?;
        let count = r.read_u32::<LE>().map_err(truncated(WHAT))?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.read_u32::<LE>().map_err(truncated(WHAT))? as usize;
            let remaining = bytes.len() - r.position() as usize;
            if len > remaining {
                return usage("weights: tensor name runs past end of file");
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated(WHAT))?;
            let name = String::from_utf8(name).map_err(|_| CliError::Usage("weights: tensor name is not UTF-8".into()))?;
            let ndim = r.read_u32::<LE>().map_err(truncated(WHAT))? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.read_u32::<LE>().map_err(truncated(WHAT))? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let remaining = (bytes.len() - r.position() as usize) / 4;
            let n = match n {
                Some(n) if n <= remaining => n,
                _ => return usage(format!("weights: tensor '{name}' with shape {shape:?} runs past end of file")),
            };
            let mut data = vec![0f32; n];
            r.read_f32_into::<LE>(&mut data).map_err(truncated(WHAT))?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        check_consumed(&r, WHAT)?;
        Ok(Self { tensors })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub episode: u32,
    pub step: u32,
    /// Row-major `image_h * image_w` pixels.
    pub observation: Vec<f32>,
    pub action: Action,
    pub probs: [f32; NUM_ACTIONS],
    pub reward: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutFile {
    pub image_h: usize,
    pub image_w: usize,
    pub records: Vec<RolloutRecord>,
}

impl RolloutFile {
    pub fn new(image_h: usize, image_w: usize) -> Self {
        Self {
            image_h,
            image_w,
            records: Vec::new(),
        }
    }

    /// Appends every step of `traj` as episode number `episode`.
    pub fn push_trajectory(&mut self, episode: u32, traj: &Trajectory) -> CliResult<()> {
        for (t, s) in traj.steps.iter().enumerate() {
            if s.observation.len() != self.image_h * self.image_w {
                return Err(CliError::Internal("observation size does not match rollout file".into()));
            }
            self.records.push(RolloutRecord {
                episode,
                step: to_u32(t, "step")?,
                observation: s.observation.data().to_vec(),
                action: s.action,
                probs: s.probs,
                reward: s.reward,
            });
        }
        Ok(())
    }

    /// Observation of record `i` as a `[1, H, W]` tensor.
    pub fn observation(&self, i: usize) -> Tensor {
        Tensor::new(vec![1, self.image_h, self.image_w], self.records[i].observation.clone())
            .expect("record size checked on construction")
    }

    fn record_size(&self) -> usize {
        8 + 4 * self.image_h * self.image_w + 1 + 4 * NUM_ACTIONS + 4
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.records.len() * self.record_size());
        out.extend_from_slice(ROLLOUT_MAGIC);
        out.write_u32::<LE>(ROLLOUT_VERSION).unwrap();
        out.write_u32::<LE>(to_u32(self.image_h, "image_h")?).unwrap();
        out.write_u32::<LE>(to_u32(self.image_w, "image_w")?).unwrap();
        out.write_u32::<LE>(to_u32(self.records.len(), "record count")?).unwrap();
        for rec in &self.records {
            if rec.observation.len() != self.image_h * self.image_w {
                return Err(CliError::Internal("observation size does not match rollout file".into()));
            }
            out.write_u32::<LE>(rec.episode).unwrap();
            out.write_u32::<LE>(rec.step).unwrap();
            for &v in &rec.observation {
                out.write_f32::<LE>(v).unwrap();
            }
            out.write_u8(rec.action.index() as u8).unwrap();
            for &p in &rec.probs {
                out.write_f32::<LE>(p).unwrap();
            }
            out.write_f32::<LE>(rec.reward).unwrap();
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        const WHAT: &str = "rollouts";
        let mut r = Cursor::new(bytes);
        check_header(&mut r, ROLLOUT_MAGIC, ROLLOUT_VERSION, WHAT)?;
        let image_h = r.read_u32::<LE>().map_err(truncated(WHAT))? as usize;
        let image_w = r.read_u32::<LE>().map_err(truncated(WHAT))? as usize;
        let count = r.read_u32::<LE>().map_err(truncated(WHAT))? as usize;
        if image_h == 0 || image_w == 0 {
            return usage(format!("rollouts: invalid image size {image_h}x{image_w}"));
        }
        let mut file = RolloutFile::new(image_h, image_w);
        let expected = count.checked_mul(file.record_size()).and_then(|n| n.checked_add(20));
        if expected != Some(bytes.len()) {
            return usage(format!(
                "rollouts: {} bytes do not hold {count} records of {image_h}x{image_w}",
                bytes.len()
            ));
        }
        for i in 0..count {
            let episode = r.read_u32::<LE>().map_err(truncated(WHAT))?;
            let step = r.read_u32::<LE>().map_err(truncated(WHAT))?;
            let mut observation = vec![0f32; image_h * image_w];
            r.read_f32_into::<LE>(&mut observation).map_err(truncated(WHAT))?;
            let code = r.read_u8().map_err(truncated(WHAT))?;
            let action = Action::from_index(code as usize)
                .ok_or_else(|| CliError::Usage(format!("rollouts: record {i} has action code {code}")))?;
            let mut probs = [0f32; NUM_ACTIONS];
            r.read_f32_into::<LE>(&mut probs).map_err(truncated(WHAT))?;
            let total: f32 = probs.iter().sum();
            if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
                return usage(format!("rollouts: record {i} probabilities sum to {total}"));
            }
            let reward = r.read_f32::<LE>().map_err(truncated(WHAT))?;
            file.records.push(RolloutRecord {
                episode,
                step,
                observation,
                action,
                probs,
                reward,
            });
        }
        check_consumed(&r, WHAT)?;
        Ok(file)
    }
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> CliResult<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("output path '{}' has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::Internal(format!("cannot write {}: {e}", path.display()))
    })
}

pub fn read_file(path: &std::path::Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}
