use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Arch, FilterVariant, ModelConfig, NormKind, PATCH};
use crate::error::{Error, Result};
use crate::filters::{apply_lpf, edge_filter, FilterSpec};
use crate::tensor::{
    add, add_channel_bias, batch_norm2d, conv2d, depthwise_conv2d, global_avg_pool2d, layer_norm,
    matmul, mean_axis1, relu, BnMode, PaddingMode, Tensor,
};

/// How normalization layers pick their statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Current-batch statistics, running statistics untouched.
    BatchStats,
}

impl From<Mode> for BnMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
            Mode::BatchStats => BnMode::BatchStats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Trainable conv/linear weights and biases.
    Weight,
    /// Normalization affine parameters (the set TENT adapts).
    NormAffine,
    /// Non-trainable state such as BN running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub name: String,
    pub tensor: Tensor,
    pub kind: SlotKind,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    stride: usize,
    padding: PaddingMode,
}

#[derive(Debug, Clone, Copy)]
enum Norm2d {
    Batch {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Bias(usize),
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerNormP {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm2d,
    conv2: Conv,
    norm2: Norm2d,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone)]
struct SeqBlock {
    fc: Linear,
    norm: Option<LayerNormP>,
    residual: bool,
}

#[derive(Debug, Clone)]
enum Body {
    Cnn {
        stem: Conv,
        stem_norm: Norm2d,
        blocks: Vec<ResBlock>,
    },
    Seq {
        embed: Linear,
        blocks: Vec<SeqBlock>,
    },
}

#[derive(Debug, Clone)]
enum Insert {
    Filter(FilterSpec, FilterVariant),
    Conv { weight: usize, bias: usize, kernel: usize },
}

/// Output of [`Model::forward`].
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Input to the classifier head before pooling (`B×C×H×W` or `B×N×C`).
    pub features: Tensor,
    /// Detached activations by name: `stem`, `block1`…, and `filter_in` /
    /// `filter_out` when a filter layer is present.
    pub captures: Vec<(String, Tensor)>,
    /// Running-statistic slots to overwrite after a training step.
    pub running: Vec<(usize, Vec<f32>)>,
}

impl ForwardOutput {
    pub fn capture(&self, name: &str) -> Option<&Tensor> {
        self.captures.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// A model built from a [`ModelConfig`]. Parameters live in a flat list of
/// named [`Slot`]s; layers refer to them by index.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    slots: Vec<Slot>,
    body: Body,
    insert: Option<(usize, Insert)>,
    head: Linear,
}

struct Builder {
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, data: Vec<f32>, shape: &[usize], kind: SlotKind) -> usize {
        let tensor = match kind {
            SlotKind::Buffer => Tensor::new(data, shape),
            _ => Tensor::param(data, shape),
        }
        .expect("parameter shape");
        self.slots.push(Slot { name, tensor, kind });
        self.slots.len() - 1
    }

    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name, data, shape, SlotKind::Weight)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let weight = self.kaiming(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k);
        let padding = if k == 1 {
            PaddingMode::Zero(0)
        } else {
            PaddingMode::Reflect(k / 2)
        };
        Conv { weight, stride, padding }
    }

    fn norm2d(&mut self, name: &str, c: usize, kind: NormKind) -> Norm2d {
        match kind {
            NormKind::Batchnorm => Norm2d::Batch {
                gamma: self.push(format!("{name}.gamma"), vec![1.0; c], &[c], SlotKind::NormAffine),
                beta: self.push(format!("{name}.beta"), vec![0.0; c], &[c], SlotKind::NormAffine),
                mean: self.push(format!("{name}.running_mean"), vec![0.0; c], &[c], SlotKind::Buffer),
                var: self.push(format!("{name}.running_var"), vec![1.0; c], &[c], SlotKind::Buffer),
            },
            _ => Norm2d::Bias(self.push(format!("{name}.bias"), vec![0.0; c], &[c], SlotKind::Weight)),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.kaiming(format!("{name}.weight"), &[fan_in, fan_out], fan_in),
            bias: self.push(format!("{name}.bias"), vec![0.0; fan_out], &[fan_out], SlotKind::Weight),
        }
    }
}

impl Model {
    /// Builds and initializes a model; initialization is a pure function of
    /// the config (including its seed).
    pub fn build(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let widths = cfg.widths();
        let norm = cfg.norm();
        let mut b = Builder {
            slots: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };

        let body = match cfg.arch {
            Arch::SmallCnn => {
                let stem = b.conv("stem.conv", cfg.in_channels, widths[0], 3, 1);
                let stem_norm = b.norm2d("stem.norm", widths[0], norm);
                let blocks = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let name = format!("block{}", i + 1);
                        let conv1 = b.conv(&format!("{name}.conv1"), w[0], w[1], 3, 2);
                        let norm1 = b.norm2d(&format!("{name}.norm1"), w[1], norm);
                        let conv2 = b.conv(&format!("{name}.conv2"), w[1], w[1], 3, 1);
                        let norm2 = b.norm2d(&format!("{name}.norm2"), w[1], norm);
                        let shortcut = Some(b.conv(&format!("{name}.shortcut"), w[0], w[1], 1, 2));
                        ResBlock { conv1, norm1, conv2, norm2, shortcut }
                    })
                    .collect();
                Body::Cnn { stem, stem_norm, blocks }
            }
            Arch::SeqMlp => {
                let patch_dim = cfg.in_channels * PATCH * PATCH;
                let embed = b.linear("embed", patch_dim, widths[0]);
                let blocks = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let name = format!("block{}", i + 1);
                        let fc = b.linear(&format!("{name}.fc"), w[0], w[1]);
                        let norm = (norm == NormKind::Layernorm).then(|| LayerNormP {
                            gamma: b.push(format!("{name}.norm.gamma"), vec![1.0; w[1]], &[w[1]], SlotKind::NormAffine),
                            beta: b.push(format!("{name}.norm.beta"), vec![0.0; w[1]], &[w[1]], SlotKind::NormAffine),
                        });
                        SeqBlock { fc, norm, residual: w[0] == w[1] }
                    })
                    .collect();
                Body::Seq { embed, blocks }
            }
        };
        let last = *widths.last().unwrap();
        let head = b.linear("head", last, cfg.num_classes);

        let insert = if let Some(f) = cfg.filter {
            Some((f.position, Insert::Filter(f, cfg.filter_variant)))
        } else if let Some(c) = cfg.conv_replacement {
            let ch = widths[c.position];
            let k = c.kernel_size;
            let normal = Normal::new(0.0f32, 0.01).unwrap();
            let mut kernel: Vec<f32> = (0..ch * k * k).map(|_| normal.sample(&mut b.rng)).collect();
            for ci in 0..ch {
                kernel[ci * k * k + (k / 2) * k + k / 2] = 1.0;
            }
            let weight = b.push("insert.weight".into(), kernel, &[ch, 1, k, k], SlotKind::Weight);
            let bias = b.push("insert.bias".into(), vec![0.0; ch], &[ch], SlotKind::Weight);
            Some((c.position, Insert::Conv { weight, bias, kernel: k }))
        } else {
            None
        };

        Ok(Model {
            cfg,
            slots: b.slots,
            body,
            insert,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Replaces a slot's tensor; the shape must not change.
    pub fn set_slot(&mut self, index: usize, tensor: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(index)
            .ok_or_else(|| Error::shape(format!("no slot {index}")))?;
        if slot.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "slot {} has shape {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            )));
        }
        slot.tensor = tensor;
        Ok(())
    }

    /// Trainable parameter count (weights and norm affine, no buffers).
    pub fn parameter_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind != SlotKind::Buffer)
            .map(|s| s.tensor.numel())
            .sum()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.cfg.arch == Arch::SmallCnn && self.cfg.norm() == NormKind::Batchnorm
    }

    pub fn filter_spec(&self) -> Option<&FilterSpec> {
        match &self.insert {
            Some((_, Insert::Filter(f, _))) => Some(f),
            _ => None,
        }
    }

    fn t(&self, i: usize) -> &Tensor {
        &self.slots[i].tensor
    }

    fn apply_conv(&self, x: &Tensor, c: &Conv) -> Result<Tensor> {
        conv2d(x, self.t(c.weight), c.stride, c.padding)
    }

    fn apply_norm(&self, x: &Tensor, n: &Norm2d, mode: Mode, running: &mut Vec<(usize, Vec<f32>)>) -> Result<Tensor> {
        match *n {
            Norm2d::Batch { gamma, beta, mean, var } => {
                let out = batch_norm2d(
                    x,
                    self.t(gamma),
                    self.t(beta),
                    self.t(mean).data(),
                    self.t(var).data(),
                    mode.into(),
                )?;
                if let Some((m, v)) = out.running {
                    running.push((mean, m));
                    running.push((var, v));
                }
                Ok(out.out)
            }
            Norm2d::Bias(b) => add_channel_bias(x, self.t(b)),
        }
    }

    fn apply_linear(&self, x: &Tensor, l: &Linear) -> Result<Tensor> {
        add(&matmul(x, self.t(l.weight))?, self.t(l.bias))
    }

    fn apply_insert(&self, h: Tensor, position: usize, captures: &mut Vec<(String, Tensor)>, capture: bool) -> Result<Tensor> {
        let Some((at, insert)) = &self.insert else {
            return Ok(h);
        };
        if *at != position {
            return Ok(h);
        }
        let out = match insert {
            Insert::Filter(spec, FilterVariant::Edge) => edge_filter(&h, spec)?,
            Insert::Filter(spec, FilterVariant::Lowpass) => apply_lpf(&h, spec)?,
            Insert::Conv { weight, bias, kernel } => {
                let y = depthwise_conv2d(&h, self.t(*weight), PaddingMode::Reflect(kernel / 2))?;
                add_channel_bias(&y, self.t(*bias))?
            }
        };
        if capture {
            captures.push(("filter_in".into(), h.detach()));
            captures.push(("filter_out".into(), out.detach()));
        }
        Ok(out)
    }

    /// Image batch `[B×C×H×W]` to token batch `[B×N×(C·P·P)]`, zero-padding
    /// the image to a power-of-two side.
    fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let side = self.cfg.padded_image_size();
        let g = side / PATCH;
        let pd = c * PATCH * PATCH;
        let mut out = vec![0.0f32; b * g * g * pd];
        let xd = x.data();
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let token = (y / PATCH) * g + xx / PATCH;
                        let within = ci * PATCH * PATCH + (y % PATCH) * PATCH + xx % PATCH;
                        out[(bi * g * g + token) * pd + within] = xd[((bi * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        Tensor::new(out, &[b, g * g, pd])
    }

    /// Runs the model. `capture` also returns detached per-layer activations.
    pub fn forward(&self, x: &Tensor, mode: Mode, capture: bool) -> Result<ForwardOutput> {
        let s = x.shape();
        let expect = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::shape(format!(
                "model expects input B×{}×{}×{}, got {s:?}",
                expect[0], expect[1], expect[2]
            )));
        }
        let mut captures = Vec::new();
        let mut running = Vec::new();
        let features = match &self.body {
            Body::Cnn { stem, stem_norm, blocks } => {
                let mut h = self.apply_conv(x, stem)?;
                h = relu(&self.apply_norm(&h, stem_norm, mode, &mut running)?);
                if capture {
                    captures.push(("stem".into(), h.detach()));
                }
                h = self.apply_insert(h, 0, &mut captures, capture)?;
                for (i, blk) in blocks.iter().enumerate() {
                    let mut y = self.apply_conv(&h, &blk.conv1)?;
                    y = relu(&self.apply_norm(&y, &blk.norm1, mode, &mut running)?);
                    y = self.apply_conv(&y, &blk.conv2)?;
                    y = self.apply_norm(&y, &blk.norm2, mode, &mut running)?;
                    let skip = match &blk.shortcut {
                        Some(c) => self.apply_conv(&h, c)?,
                        None => h.clone(),
                    };
                    h = relu(&add(&y, &skip)?);
                    if capture {
                        captures.push((format!("block{}", i + 1), h.detach()));
                    }
                    h = self.apply_insert(h, i + 1, &mut captures, capture)?;
                }
                h
            }
            Body::Seq { embed, blocks } => {
                let tokens = self.patchify(x)?;
                let (b, n, pd) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
                let flat = tokens.reshape(&[b * n, pd])?;
                let mut h = self.apply_linear(&flat, embed)?.reshape(&[b, n, self.t(embed.bias).numel()])?;
                if capture {
                    captures.push(("stem".into(), h.detach()));
                }
                h = self.apply_insert(h, 0, &mut captures, capture)?;
                for (i, blk) in blocks.iter().enumerate() {
                    let c_in = h.shape()[2];
                    let c_out = self.t(blk.fc.bias).numel();
                    let z = relu(&self.apply_linear(&h.reshape(&[b * n, c_in])?, &blk.fc)?)
                        .reshape(&[b, n, c_out])?;
                    let mut y = if blk.residual { add(&h, &z)? } else { z };
                    if let Some(ln) = &blk.norm {
                        y = layer_norm(&y, self.t(ln.gamma), self.t(ln.beta))?;
                    }
                    h = y;
                    if capture {
                        captures.push((format!("block{}", i + 1), h.detach()));
                    }
                    h = self.apply_insert(h, i + 1, &mut captures, capture)?;
                }
                h
            }
        };
        let pooled = match self.cfg.arch {
            Arch::SmallCnn => global_avg_pool2d(&features)?,
            Arch::SeqMlp => mean_axis1(&features)?,
        };
        let logits = self.apply_linear(&pooled, &self.head)?;
        Ok(ForwardOutput {
            logits,
            features,
            captures,
            running,
        })
    }

    /// Writes running statistics produced by a [`Mode::Train`] forward.
    pub fn apply_running(&mut self, running: Vec<(usize, Vec<f32>)>) -> Result<()> {
        for (i, values) in running {
            let shape = self.slots[i].tensor.shape().to_vec();
            self.set_slot(i, Tensor::new(values, &shape)?)?;
        }
        Ok(())
    }

    /// Logits only, no graph needed by the caller.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode, false)?.logits.detach())
    }
}
