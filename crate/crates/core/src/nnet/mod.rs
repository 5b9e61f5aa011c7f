//! The tiny denoising UNet: configuration, named parameter store,
//! sinusoidal timestep embedding, Adam, and checkpoint persistence.

mod adam;
mod checkpoint;
mod embedding;
mod unet;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embedding::timestep_embedding;
pub use unet::{AttentionProbe, BoundParams, UNet};

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Shape of the denoising network.
///
/// `in_channels` counts diffused state plus conditioning planes;
/// `out_channels` counts only the diffused state. Attention runs at
/// the levels listed in `attention_levels` (0 = full resolution).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub num_heads: usize,
    pub norm_groups: usize,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// Checks internal divisibility constraints and, when a canvas
    /// size is given, that it survives the down/up-sampling ladder.
    pub fn validate(&self, canvas: Option<(usize, usize)>) -> Result<(), TensorError> {
        let err = |msg: String| TensorError::invalid("unet_config", msg);
        if self.channel_mults.is_empty() {
            return Err(err("channel_mults must be non-empty".into()));
        }
        if self.out_channels == 0 || self.in_channels <= self.out_channels {
            return Err(err(format!(
                "in_channels {} must exceed out_channels {} (state + conditioning)",
                self.in_channels, self.out_channels
            )));
        }
        if self.num_res_blocks_per_level == 0 {
            return Err(err("need at least one res block per level".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(err(format!("time_embed_dim {} must be even", self.time_embed_dim)));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return Err(err(format!(
                "base_channels {} not divisible by norm_groups {}",
                self.base_channels, self.norm_groups
            )));
        }
        for (l, &m) in self.channel_mults.iter().enumerate() {
            if m == 0 {
                return Err(err(format!("channel mult at level {l} is zero")));
            }
            let c = self.base_channels * m;
            if c % self.norm_groups != 0 {
                return Err(err(format!(
                    "level {l} width {c} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
            if self.has_attention(l) && c % self.num_heads != 0 {
                return Err(err(format!(
                    "level {l} attention width {c} not divisible by {} heads",
                    self.num_heads
                )));
            }
        }
        // Decoder blocks normalize concatenated widths too.
        for l in 0..self.levels() {
            let incoming = if l == self.levels() - 1 {
                self.level_channels(l)
            } else {
                self.level_channels(l + 1)
            };
            let cin = incoming + self.level_channels(l);
            if cin % self.norm_groups != 0 {
                return Err(err(format!(
                    "decoder level {l} input width {cin} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        for &l in &self.attention_levels {
            if l >= self.levels() {
                return Err(err(format!("attention level {l} out of range")));
            }
        }
        if let Some((h, w)) = canvas {
            let down = 1usize << (self.levels() - 1);
            if h % down != 0 || w % down != 0 {
                return Err(err(format!(
                    "canvas {h}x{w} not divisible by 2^(levels-1) = {down}"
                )));
            }
        }
        Ok(())
    }
}

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

/// Ordered name -> parameter map plus the optimizer step counter.
///
/// Insertion order is the forward-pass order and fixes both the
/// checkpoint manifest order and the init RNG draw order.
#[derive(Debug, Clone)]
pub struct UNetParams<T> {
    entries: IndexMap<String, Param<T>>,
    pub step: u64,
    pub config_hash: u64,
    grads_populated: bool,
}

impl<T: Scalar> Default for UNetParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> UNetParams<T> {
    pub fn new() -> Self {
        UNetParams { entries: IndexMap::new(), step: 0, config_hash: 0, grads_populated: false }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        self.entries.insert(name, Param::new(value));
    }

    pub(crate) fn insert_param(&mut self, name: String, param: Param<T>) {
        self.entries.insert(name, param);
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    /// Adds `grad` into the named parameter's gradient buffer
    /// (gradients accumulate across batch shards).
    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<(), TensorError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::invalid("accumulate_grad", format!("unknown parameter {name}")))?;
        if p.grad.numel() != grad.len() {
            return Err(TensorError::shape(
                "accumulate_grad",
                format!("parameter {name}: {} vs {} elements", p.grad.numel(), grad.len()),
            ));
        }
        for (g, &v) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += v;
        }
        self.grads_populated = true;
        Ok(())
    }

    /// Multiplies every gradient by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g = *g * f;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
        self.grads_populated = false;
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        let mut out = UNetParams::new();
        for (name, p) in self.iter() {
            out.entries.insert(
                name.clone(),
                Param { value: p.value.cast(), grad: p.grad.cast(), m: p.m.cast(), v: p.v.cast() },
            );
        }
        out.step = self.step;
        out.config_hash = self.config_hash;
        out
    }
}
