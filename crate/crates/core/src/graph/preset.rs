use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stage::{BatchNorm, Conv2d, ConvUnit, Linear, Pool, ResidualBlock, Stage, StageKind};
use super::NetGraph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    /// Seven conv units with batch norm in three pooled groups and a linear
    /// classifier.
    TinyVgg,
    /// [`ArchPreset::TinyVgg`] without batch norm.
    TinyVggNobn,
    /// Stem conv unit and three residual blocks.
    TinyResnet,
    Vgg11Bn,
    Resnet18,
}

impl ArchPreset {
    pub const ALL: [ArchPreset; 5] = [
        ArchPreset::TinyVgg,
        ArchPreset::TinyVggNobn,
        ArchPreset::TinyResnet,
        ArchPreset::Vgg11Bn,
        ArchPreset::Resnet18,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchPreset::TinyVgg => "tiny-vgg",
            ArchPreset::TinyVggNobn => "tiny-vgg-nobn",
            ArchPreset::TinyResnet => "tiny-resnet",
            ArchPreset::Vgg11Bn => "vgg11-bn",
            ArchPreset::Resnet18 => "resnet18",
        }
    }
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown architecture {s:?}")))
    }
}

struct Builder<T> {
    rng: ChaCha8Rng,
    shape: Vec<usize>,
    stages: Vec<Stage<T>>,
}

impl<T: Scalar> Builder<T> {
    /// Kaiming-uniform with fan-in scaling: U(−√(6/fan_in), √(6/fan_in)).
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }

    fn conv_unit(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bn: bool, relu: bool) -> ConvUnit<T> {
        ConvUnit {
            conv: Conv2d {
                weight: self.kaiming(&[c_out, c_in, k, k], c_in * k * k),
                bias: Tensor::zeros(&[c_out]),
                stride,
                pad,
            },
            bn: bn.then(|| BatchNorm::new(c_out)),
            relu,
        }
    }

    fn push(&mut self, kind: StageKind<T>) -> Result<()> {
        let stage = Stage::new(self.stages.len(), kind);
        let out = stage.output_shapes(std::slice::from_ref(&self.shape))?;
        self.shape = out.into_iter().next().expect("single-slot stage");
        self.stages.push(stage);
        Ok(())
    }

    fn conv(&mut self, c_out: usize, k: usize, stride: usize, pad: usize, bn: bool) -> Result<()> {
        let unit = self.conv_unit(self.shape[0], c_out, k, stride, pad, bn, true);
        self.push(StageKind::Conv(unit))
    }

    fn residual(&mut self, c_out: usize, stride: usize) -> Result<()> {
        let c_in = self.shape[0];
        let main1 = self.conv_unit(c_in, c_out, 3, stride, 1, true, true);
        let main2 = self.conv_unit(c_out, c_out, 3, 1, 1, true, false);
        let projection = (stride != 1 || c_in != c_out).then(|| self.conv_unit(c_in, c_out, 1, stride, 0, true, false));
        self.push(StageKind::Residual(ResidualBlock { main1, main2, projection }))
    }

    fn maxpool(&mut self, kernel: usize, stride: usize, pad: usize) -> Result<()> {
        self.push(StageKind::MaxPool(Pool { kernel, stride, pad }))
    }

    fn global_avgpool(&mut self) -> Result<()> {
        let (h, w) = (self.shape[1], self.shape[2]);
        if h != w {
            return Err(Error::Shape(format!("global pooling over non-square {h}x{w} map")));
        }
        self.push(StageKind::AvgPool(Pool { kernel: h, stride: 1, pad: 0 }))
    }

    fn flatten(&mut self) -> Result<()> {
        self.push(StageKind::Flatten)
    }

    fn linear(&mut self, out: usize, relu: bool) -> Result<()> {
        let fan_in = self.shape[0];
        let weight = self.kaiming(&[out, fan_in], fan_in);
        self.push(StageKind::Linear(Linear {
            weight,
            bias: Tensor::zeros(&[out]),
            relu,
        }))
    }

    /// Marks conv-bearing stages droppable, except the last one before the
    /// classifier.
    fn finish(mut self, preset: ArchPreset, input: Vec<usize>, classes: usize, seed: u64) -> Result<NetGraph<T>> {
        let conv: Vec<usize> = (0..self.stages.len()).filter(|&i| self.stages[i].is_conv_bearing()).collect();
        if let Some((_, rest)) = conv.split_last() {
            for &i in rest {
                self.stages[i].droppable = true;
            }
        }
        NetGraph::from_stages(preset.name(), vec![input], classes, seed, self.stages)
    }
}

/// Builds a preset network for `[C, H, W]` inputs. Weights are drawn from
/// a ChaCha stream seeded by `seed`, in stage order.
pub fn build<T: Scalar>(preset: ArchPreset, input: &[usize], classes: usize, seed: u64) -> Result<NetGraph<T>> {
    let [c, h, w] = *input else {
        return Err(Error::Shape(format!("input shape must be [C, H, W], got {input:?}")));
    };
    if c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(Error::Shape(format!("degenerate input {input:?} or class count {classes}")));
    }
    let mut b = Builder::<T> {
        rng: ChaCha8Rng::seed_from_u64(seed),
        shape: input.to_vec(),
        stages: Vec::new(),
    };
    let too_small = |e: Error| match e {
        Error::Shape(msg) => Error::Shape(format!("{preset} does not fit input {input:?}: {msg}")),
        other => other,
    };
    (|| -> Result<()> {
        match preset {
            ArchPreset::TinyVgg | ArchPreset::TinyVggNobn => {
                let bn = preset == ArchPreset::TinyVgg;
                for item in [16, 16, 0, 16, 32, 0, 32, 32, 32, 0] {
                    if item == 0 {
                        b.maxpool(2, 2, 0)?;
                    } else {
                        b.conv(item, 3, 1, 1, bn)?;
                    }
                }
                b.flatten()?;
                b.linear(classes, false)?;
            }
            ArchPreset::TinyResnet => {
                b.conv(8, 3, 1, 1, true)?;
                b.residual(8, 1)?;
                b.residual(16, 2)?;
                b.residual(32, 2)?;
                b.global_avgpool()?;
                b.flatten()?;
                b.linear(classes, false)?;
            }
            ArchPreset::Vgg11Bn => {
                for item in [64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0] {
                    if item == 0 {
                        b.maxpool(2, 2, 0)?;
                    } else {
                        b.conv(item, 3, 1, 1, true)?;
                    }
                }
                b.flatten()?;
                b.linear(4096, true)?;
                b.linear(4096, true)?;
                b.linear(classes, false)?;
            }
            ArchPreset::Resnet18 => {
                b.conv(64, 7, 2, 3, true)?;
                b.maxpool(3, 2, 1)?;
                for (c_out, stride) in [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)] {
                    b.residual(c_out, stride)?;
                }
                b.global_avgpool()?;
                b.flatten()?;
                b.linear(classes, false)?;
            }
        }
        Ok(())
    })()
    .map_err(too_small)?;
    b.finish(preset, input.to_vec(), classes, seed)
}
