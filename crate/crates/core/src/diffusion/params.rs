//! Trainable and frozen parameter groups of the toy denoiser.

use std::fmt;

use crate::attention::{random_matrix, AttentionWeights, LoraDelta, Matrix};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Per-cell pose and appearance input features: RGB over a 3×3 neighbourhood.
pub const CELL_FEATURES: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub heads: usize,
    pub rank: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    /// Latent grid the model is trained on.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ModelDims {
    pub fn new(channels: usize, heads: usize, rank: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            channels,
            heads,
            rank,
            blocks: 2,
            ff_hidden: 2 * channels,
            grid_h,
            grid_w,
        }
    }

    pub fn locations(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::invalid("latent needs at least 3 channels"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} channels not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if self.rank == 0 || self.rank > self.channels {
            return Err(Error::invalid(format!(
                "rank {} outside [1, {}]",
                self.rank, self.channels
            )));
        }
        if self.blocks == 0 || self.ff_hidden == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    PoseBranch,
    PoseTemporal,
    AppearanceEncoder,
    Lora,
    DenoiserBase,
    DenoiserTemporal,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::PoseBranch,
        Group::PoseTemporal,
        Group::AppearanceEncoder,
        Group::Lora,
        Group::DenoiserBase,
        Group::DenoiserTemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::PoseBranch => "pose_branch",
            Group::PoseTemporal => "pose_temporal",
            Group::AppearanceEncoder => "appearance_encoder",
            Group::Lora => "lora",
            Group::DenoiserBase => "denoiser_base",
            Group::DenoiserTemporal => "denoiser_temporal",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }

    fn index(self) -> usize {
        Group::ALL.iter().position(|g| *g == self).unwrap()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Image level: appearance encoder and LoRA.
    One,
    /// Video level: temporal layers of the denoiser and of the pose branch.
    Two,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::invalid(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn trainable(self) -> &'static [Group] {
        match self {
            Stage::One => &[Group::AppearanceEncoder, Group::Lora],
            Stage::Two => &[Group::PoseTemporal, Group::DenoiserTemporal],
        }
    }
}

/// Attention over frames followed by a zero-initialized output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalLayer {
    pub attn: AttentionWeights,
    pub out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseBranch {
    pub conv: Matrix,
    pub conv_bias: Matrix,
    pub heads: Vec<Matrix>,
    pub head_bias: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceEncoder {
    pub conv: Matrix,
    pub conv_bias: Matrix,
    pub proj: Vec<Matrix>,
    /// 1×1 output scale per block, zero at init.
    pub gate: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserBlock {
    pub attn: AttentionWeights,
    pub attn_out: Matrix,
    pub ff_in: Matrix,
    pub ff_bias: Matrix,
    pub ff_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserBase {
    pub blocks: Vec<DenoiserBlock>,
    pub out: Matrix,
    pub out_bias: Matrix,
}

/// All parameters, grouped by training role.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub dims: ModelDims,
    pub pose_branch: PoseBranch,
    pub pose_temporal: Vec<TemporalLayer>,
    pub appearance: AppearanceEncoder,
    pub lora: Vec<LoraDelta>,
    pub base: DenoiserBase,
    pub temporal: Vec<TemporalLayer>,
    /// Highest training stage completed (0 for fresh parameters).
    pub trained_stage: u32,
    trainable: [bool; 6],
}

macro_rules! group_tensors {
    ($self:ident, $group:expr, $($r:tt)+) => {{
        let mut out = Vec::new();
        match $group {
            Group::PoseBranch => {
                let pb = $($r)+ $self.pose_branch;
                out.push(("conv".to_string(), $($r)+ pb.conv));
                out.push(("conv_bias".to_string(), $($r)+ pb.conv_bias));
                for (i, (h, b)) in ($($r)+ pb.heads).into_iter().zip(($($r)+ pb.head_bias).into_iter()).enumerate() {
                    out.push((format!("block{i}.head"), h));
                    out.push((format!("block{i}.head_bias"), b));
                }
            }
            Group::PoseTemporal | Group::DenoiserTemporal => {
                let layers = if $group == Group::PoseTemporal {
                    $($r)+ $self.pose_temporal
                } else {
                    $($r)+ $self.temporal
                };
                for (i, l) in layers.into_iter().enumerate() {
                    out.push((format!("block{i}.wq"), $($r)+ l.attn.wq));
                    out.push((format!("block{i}.wk"), $($r)+ l.attn.wk));
                    out.push((format!("block{i}.wv"), $($r)+ l.attn.wv));
                    out.push((format!("block{i}.out"), $($r)+ l.out));
                }
            }
            Group::AppearanceEncoder => {
                let ae = $($r)+ $self.appearance;
                out.push(("conv".to_string(), $($r)+ ae.conv));
                out.push(("conv_bias".to_string(), $($r)+ ae.conv_bias));
                for (i, (p, g)) in ($($r)+ ae.proj).into_iter().zip(($($r)+ ae.gate).into_iter()).enumerate() {
                    out.push((format!("block{i}.proj"), p));
                    out.push((format!("block{i}.gate"), g));
                }
            }
            Group::Lora => {
                for (i, d) in ($($r)+ $self.lora).into_iter().enumerate() {
                    out.push((format!("block{i}.b_q"), $($r)+ d.b_q));
                    out.push((format!("block{i}.b_k"), $($r)+ d.b_k));
                    out.push((format!("block{i}.b_v"), $($r)+ d.b_v));
                    out.push((format!("block{i}.a_q"), $($r)+ d.a_q));
                    out.push((format!("block{i}.a_k"), $($r)+ d.a_k));
                    out.push((format!("block{i}.a_v"), $($r)+ d.a_v));
                }
            }
            Group::DenoiserBase => {
                let base = $($r)+ $self.base;
                for (i, b) in ($($r)+ base.blocks).into_iter().enumerate() {
                    out.push((format!("block{i}.wq"), $($r)+ b.attn.wq));
                    out.push((format!("block{i}.wk"), $($r)+ b.attn.wk));
                    out.push((format!("block{i}.wv"), $($r)+ b.attn.wv));
                    out.push((format!("block{i}.attn_out"), $($r)+ b.attn_out));
                    out.push((format!("block{i}.ff_in"), $($r)+ b.ff_in));
                    out.push((format!("block{i}.ff_bias"), $($r)+ b.ff_bias));
                    out.push((format!("block{i}.ff_out"), $($r)+ b.ff_out));
                }
                out.push(("out".to_string(), $($r)+ base.out));
                out.push(("out_bias".to_string(), $($r)+ base.out_bias));
            }
        }
        out
    }};
}

/// Random-init scales of the frozen and trainable parts.
///
/// The denoiser's temporal layers start with random output weights: every
/// stage-2 clip passes through them, while stage 1 never does. Their Q/K
/// start small so temporal attention begins close to uniform; with full-size
/// Q/K the softmax saturates on the large hidden states and SGD at the
/// default rate diverges within a few steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScales {
    /// Std of the frozen base Q/K projections, relative to `1/sqrt(c)`.
    pub base_qk: f64,
    /// Gain of the frozen final output projection.
    pub base_out: f64,
    /// Weight std of the pose and appearance cell encoders.
    pub cell_conv: f64,
    /// Output std of the denoiser's temporal layers, relative to `1/sqrt(c)`.
    /// The pose branch's temporal output always starts at zero.
    pub temporal_out: f64,
    /// Std of every temporal layer's Q/K projections, relative to `1/sqrt(c)`.
    pub temporal_qk: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            base_qk: 1.0,
            base_out: 1.5,
            cell_conv: 1.0,
            temporal_out: 1.0,
            temporal_qk: 0.1,
        }
    }
}

impl DenoiserParams {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init_with(dims, seed, InitScales::default())
    }

    /// Fresh parameters. Each group draws from its own stream so that, e.g.,
    /// the LoRA initialization does not shift the frozen base weights.
    pub fn init_with(dims: ModelDims, seed: u64, scales: InitScales) -> Result<Self> {
        dims.validate()?;
        let c = dims.channels;
        let blocks = dims.blocks;
        let inv_c = 1.0 / (c as f64).sqrt();
        let stream = |g: Group| SplitMix64::fork(seed, g.index() as u64 + 1);

        let mut r = stream(Group::PoseBranch);
        let cell_std = scales.cell_conv / (CELL_FEATURES as f64).sqrt() * 3.0;
        let pose_branch = PoseBranch {
            conv: random_matrix(CELL_FEATURES, c, cell_std, &mut r),
            conv_bias: random_matrix(1, c, 0.1, &mut r),
            heads: (0..blocks)
                .map(|_| random_matrix(c, c, inv_c, &mut r))
                .collect(),
            head_bias: (0..blocks)
                .map(|_| random_matrix(1, c, 0.1, &mut r))
                .collect(),
        };

        let temporal_layers = |r: &mut SplitMix64, out_std: f64| -> Vec<TemporalLayer> {
            (0..blocks)
                .map(|_| TemporalLayer {
                    attn: AttentionWeights {
                        wq: random_matrix(c, c, scales.temporal_qk * inv_c, r),
                        wk: random_matrix(c, c, scales.temporal_qk * inv_c, r),
                        wv: random_matrix(c, c, inv_c, r),
                        heads: dims.heads,
                    },
                    out: if out_std > 0.0 {
                        random_matrix(c, c, out_std, r)
                    } else {
                        Matrix::zeros((c, c))
                    },
                })
                .collect()
        };
        let pose_temporal = temporal_layers(&mut stream(Group::PoseTemporal), 0.0);

        let mut r = stream(Group::AppearanceEncoder);
        let appearance = AppearanceEncoder {
            conv: random_matrix(CELL_FEATURES, c, cell_std, &mut r),
            conv_bias: Matrix::zeros((1, c)),
            proj: (0..blocks)
                .map(|_| random_matrix(c, c, inv_c, &mut r))
                .collect(),
            gate: (0..blocks).map(|_| Matrix::zeros((1, 1))).collect(),
        };

        let mut r = stream(Group::Lora);
        let lora = (0..blocks)
            .map(|_| LoraDelta::init(c, dims.rank, &mut r))
            .collect();

        let mut r = stream(Group::DenoiserBase);
        let ff = dims.ff_hidden;
        let base = DenoiserBase {
            blocks: (0..blocks)
                .map(|_| DenoiserBlock {
                    attn: AttentionWeights {
                        wq: random_matrix(c, c, scales.base_qk * inv_c, &mut r),
                        wk: random_matrix(c, c, scales.base_qk * inv_c, &mut r),
                        wv: random_matrix(c, c, inv_c, &mut r),
                        heads: dims.heads,
                    },
                    attn_out: random_matrix(c, c, inv_c, &mut r),
                    ff_in: random_matrix(c, ff, inv_c, &mut r),
                    ff_bias: Matrix::zeros((1, ff)),
                    ff_out: random_matrix(ff, c, 1.0 / (ff as f64).sqrt(), &mut r),
                })
                .collect(),
            out: random_matrix(c, c, scales.base_out * inv_c, &mut r),
            out_bias: Matrix::zeros((1, c)),
        };

        let temporal = temporal_layers(
            &mut stream(Group::DenoiserTemporal),
            scales.temporal_out * inv_c,
        );

        Ok(Self {
            dims,
            pose_branch,
            pose_temporal,
            appearance,
            lora,
            base,
            temporal,
            trained_stage: 0,
            trainable: [false; 6],
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for g in Group::ALL {
            for (_, t) in z.tensors_mut(g) {
                t.fill(0.0);
            }
        }
        z.trainable = [false; 6];
        z
    }

    pub fn tensors(&self, group: Group) -> Vec<(String, &Matrix)> {
        group_tensors!(self, group, &)
    }

    pub fn tensors_mut(&mut self, group: Group) -> Vec<(String, &mut Matrix)> {
        group_tensors!(self, group, &mut)
    }

    /// FNV-1a 64 over the little-endian bytes of every tensor in the group.
    pub fn digest(&self, group: Group) -> u64 {
        let mut h = Fnv1a::new();
        for (_, t) in self.tensors(group) {
            for v in t.iter() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn digests(&self) -> Vec<(Group, u64)> {
        Group::ALL.iter().map(|&g| (g, self.digest(g))).collect()
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable[group.index()]
    }

    /// Marks exactly the stage's groups trainable.
    pub fn set_stage(&mut self, stage: Stage) {
        self.trainable = [false; 6];
        for g in stage.trainable() {
            self.trainable[g.index()] = true;
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable = [false; 6];
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.is_trainable(*g))
            .collect()
    }

    /// `self -= lr * grads` on trainable groups only.
    pub fn sgd_step(&mut self, grads: &DenoiserParams, lr: f64) {
        for g in self.trainable_groups() {
            let src = grads.tensors(g);
            for ((_, dst), (_, grad)) in self.tensors_mut(g).into_iter().zip(src) {
                dst.scaled_add(-lr, grad);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        Group::ALL.iter().all(|&g| {
            self.tensors(g)
                .iter()
                .all(|(_, t)| t.iter().all(|v| v.is_finite()))
        })
    }

    pub fn parameter_count(&self, group: Group) -> usize {
        self.tensors(group).iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}
