//! Frozen convolutional tangent-patch encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{kernels, NamedTensor, Tensor};

/// Four 3x3 conv + relu stages with widths D/8, D/4, D/2, D. The input is
/// reduced to `feat_hw` by 2x2 average pools after the first stages (and
/// before the first stage when more than four halvings are needed).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    stages: Vec<(Tensor, Tensor)>,
    pre_pools: usize,
    stage_pools: usize,
}

pub const STAGES: usize = 4;

/// Number of halvings from `patch_px` down to `feat_hw`.
pub(crate) fn downsample_steps(patch_px: usize, feat_hw: usize) -> Option<usize> {
    if feat_hw == 0 || patch_px % feat_hw != 0 {
        return None;
    }
    let r = patch_px / feat_hw;
    r.is_power_of_two().then(|| r.trailing_zeros() as usize)
}

fn widths(cfg: &ModelConfig) -> [usize; STAGES + 1] {
    let d = cfg.dim;
    [cfg.in_channels, d / 8, d / 4, d / 2, d]
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let k = downsample_steps(cfg.patch_px, cfg.feat_hw).ok_or_else(|| {
            ModelError::Config(format!(
                "patch {} is not feat_hw {} times a power of two",
                cfg.patch_px, cfg.feat_hw
            ))
        })?;
        let w = widths(cfg);
        let stages = (0..STAGES)
            .map(|s| {
                let (cin, cout) = (w[s], w[s + 1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(rng));
                (weight, Tensor::zeros(&[cout]))
            })
            .collect();
        Ok(Self {
            stages,
            pre_pools: k.saturating_sub(STAGES),
            stage_pools: k.min(STAGES),
        })
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, (w, b))| {
                [
                    NamedTensor {
                        name: format!("encoder.{s}.weight"),
                        tensor: w.clone(),
                    },
                    NamedTensor {
                        name: format!("encoder.{s}.bias"),
                        tensor: b.clone(),
                    },
                ]
            })
            .collect()
    }

    /// Replaces the stage weights with checkpointed ones of identical shape.
    pub fn load(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        for (s, (w, b)) in self.stages.iter_mut().enumerate() {
            for (slot, name) in [(w, format!("encoder.{s}.weight")), (b, format!("encoder.{s}.bias"))] {
                let t = tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))?;
                if t.tensor.shape() != slot.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {:?}",
                        t.tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.tensor.clone();
            }
        }
        Ok(())
    }

    /// Maps (N, C, p, p) patches to tokens (N, D) and feature maps
    /// (N, D, feat_hw, feat_hw).
    pub fn encode(&self, patches: &Tensor) -> Result<(Tensor, Tensor)> {
        let &[n, c, h, w] = patches.shape() else {
            return Err(ModelError::Config(format!("patches must be 4-d, got {:?}", patches.shape())));
        };
        let cin = self.stages[0].0.shape()[1];
        if c != cin {
            return Err(ModelError::Config(format!("encoder takes {cin} channels, got {c}")));
        }
        let mut maps = Vec::new();
        let mut tokens = Vec::new();
        let mut out_dims = (0, 0, 0);
        for i in 0..n {
            let chunk = patches.data()[i * c * h * w..(i + 1) * c * h * w].to_vec();
            let mut x = Tensor::new(vec![1, c, h, w], chunk)?;
            for _ in 0..self.pre_pools {
                x = kernels::avg_pool2d(&x)?;
            }
            for (s, (wt, b)) in self.stages.iter().enumerate() {
                x = kernels::conv2d(&x, wt, Some(b), 1)?;
                x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                if s < self.stage_pools {
                    x = kernels::avg_pool2d(&x)?;
                }
            }
            let &[_, d, fh, fw] = x.shape() else { unreachable!() };
            out_dims = (d, fh, fw);
            let area = (fh * fw) as f64;
            tokens.extend(x.data().chunks(fh * fw).map(|ch| ch.iter().sum::<f64>() / area));
            maps.extend_from_slice(x.data());
        }
        let (d, fh, fw) = out_dims;
        Ok((Tensor::new(vec![n, d], tokens)?, Tensor::new(vec![n, d, fh, fw], maps)?))
    }
}
