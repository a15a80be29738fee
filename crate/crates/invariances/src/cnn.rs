//! The convolutional classifier and its layer-substitution hooks.
//!
//! Five conv blocks (conv 3×3, batch norm, relu, with 2×2 max pooling after
//! blocks 2 and 4), global average pooling and a linear head. Every forward
//! variant — plain, truncated at a layer, or with *substituted filters* at a
//! layer — runs through one shared block implementation, so substituting a
//! layer's own real weights reproduces the plain forward bit for bit.

use std::cell::RefCell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Param, RmsProp, RmsPropConfig, Scalar, Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::rng;

/// How batch norm treats statistics in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with minibatch statistics and fold them into the running
    /// averages (classifier training).
    Train,
    /// Normalize with minibatch statistics but leave all stored state
    /// untouched (the adversarial game, which must not mutate the CNN).
    Static,
    /// Normalize with the stored running statistics (inference and
    /// optimization through the frozen network).
    Eval,
}

/// Whether a forward pass registers network parameters as trainable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamReg {
    Trainable,
    Frozen,
}

/// Network shape; the defaults match the shipped classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// Blocks followed by a 2×2 max pool.
    pub pool_after: Vec<bool>,
    pub in_channels: usize,
    pub classes: usize,
    pub kernel: usize,
    pub pad: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: vec![16, 32, 32, 64, 64],
            pool_after: vec![false, true, false, true, false],
            in_channels: 1,
            classes: 10,
            kernel: 3,
            pad: 1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    /// Input channels of 0-based block `i`.
    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.channels[i - 1]
        }
    }

    /// Filter-bank shape `[c_out, c_in, k, k]` of 1-based layer `layer`.
    pub fn filter_shape(&self, layer: usize) -> Vec<usize> {
        vec![
            self.channels[layer - 1],
            self.block_in_channels(layer - 1),
            self.kernel,
            self.kernel,
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.pool_after.len() != self.channels.len() {
            return Err(Error::invalid(
                "ArchConfig",
                format!(
                    "channels ({}) and pool_after ({}) must be non-empty and equal length",
                    self.channels.len(),
                    self.pool_after.len()
                ),
            ));
        }
        Ok(())
    }
}

/// One conv block's parameters and batch-norm state.
pub struct ConvBlock<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    running_mean: RefCell<Vec<T>>,
    running_var: RefCell<Vec<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    /// He-uniform conv weight, zero bias, identity batch norm.
    pub fn init(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvBlock {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::rand_uniform(rng, vec![c_out, c_in, k, k], -bound, bound),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
            gamma: Param::new(format!("{name}.bn_gamma"), Tensor::full(vec![c_out], T::one())),
            beta: Param::new(format!("{name}.bn_beta"), Tensor::zeros(vec![c_out])),
            running_mean: RefCell::new(vec![T::zero(); c_out]),
            running_var: RefCell::new(vec![T::one(); c_out]),
        }
    }

    pub fn running_mean(&self) -> Vec<T> {
        self.running_mean.borrow().clone()
    }

    pub fn running_var(&self) -> Vec<T> {
        self.running_var.borrow().clone()
    }

    pub fn set_running_stats(&self, mean: Vec<T>, var: Vec<T>) {
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
    }
}

/// Where a substituted filter bank came from.
#[derive(Debug, Clone)]
pub enum Provenance<T: Scalar> {
    /// The network's own trained filters.
    Real,
    /// Emitted by the generator from latent code `z`.
    Generated { z: Tensor<T> },
}

/// A candidate filter bank for one layer: the weights plus their origin.
/// Substitution replaces the layer's conv *weights only* — the layer's real
/// bias and batch-norm parameters stay in place.
#[derive(Debug, Clone)]
pub struct FilterSet<T: Scalar> {
    pub weight: Tensor<T>,
    pub provenance: Provenance<T>,
}

impl<T: Scalar> FilterSet<T> {
    pub fn real(weight: Tensor<T>) -> Self {
        FilterSet {
            weight,
            provenance: Provenance::Real,
        }
    }

    pub fn generated(weight: Tensor<T>, z: Tensor<T>) -> Self {
        FilterSet {
            weight,
            provenance: Provenance::Generated { z },
        }
    }
}

/// Weight source for one block forward: the block's own parameters, one
/// shared substituted bank, or one bank per sample.
pub(crate) enum WeightNode {
    Own,
    Shared(NodeId),
    PerSample(NodeId),
}

/// The classifier. See the module docs for the architecture.
pub struct CnnModel<T: Scalar> {
    pub arch: ArchConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub head_weight: Param<T>,
    pub head_bias: Param<T>,
    /// Seed the parameters were initialized from (recorded in checkpoints).
    pub seed: u64,
}

impl<T: Scalar> CnnModel<T> {
    /// Fresh network with He-uniform conv/head weights drawn from a
    /// dedicated `(seed, "cnn-init")` stream.
    pub fn build(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, "cnn-init");
        let blocks: Vec<ConvBlock<T>> = (0..arch.num_layers())
            .map(|i| {
                ConvBlock::init(
                    &format!("block{}", i + 1),
                    arch.block_in_channels(i),
                    arch.channels[i],
                    arch.kernel,
                    &mut rng,
                )
            })
            .collect();
        let c_last = *arch.channels.last().unwrap();
        let bound = (6.0 / c_last as f64).sqrt();
        let head_weight = Param::new(
            "head.weight",
            Tensor::rand_uniform(&mut rng, vec![arch.classes, c_last], -bound, bound),
        );
        let head_bias = Param::new("head.bias", Tensor::zeros(vec![arch.classes]));
        Ok(CnnModel {
            arch,
            blocks,
            head_weight,
            head_bias,
            seed,
        })
    }

    /// All trainable parameters in a stable order.
    pub fn params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                b.weight.clone(),
                b.bias.clone(),
                b.gamma.clone(),
                b.beta.clone(),
            ]);
        }
        out.push(self.head_weight.clone());
        out.push(self.head_bias.clone());
        out
    }

    /// Validate a 1-based layer index.
    fn check_layer(&self, op: &'static str, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.arch.num_layers() {
            return Err(Error::invalid(
                op,
                format!("layer {layer} out of range 1..={}", self.arch.num_layers()),
            ));
        }
        Ok(layer - 1)
    }

    /// The conv half of block `i` (weights from `weights`, the block's own
    /// bias always added): everything up to but excluding batch norm.
    pub(crate) fn block_conv(
        &self,
        tape: &mut Tape<T>,
        i: usize,
        x: NodeId,
        weights: WeightNode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let block = &self.blocks[i];
        let leaf = |tape: &mut Tape<T>, p: &Param<T>| match reg {
            ParamReg::Trainable => tape.param(p),
            ParamReg::Frozen => tape.frozen(p),
        };
        let bias = leaf(tape, &block.bias);
        match weights {
            WeightNode::Own => {
                let w = leaf(tape, &block.weight);
                tape.conv2d(x, w, Some(bias), 1, self.arch.pad)
            }
            WeightNode::Shared(w) => tape.conv2d(x, w, Some(bias), 1, self.arch.pad),
            WeightNode::PerSample(w) => tape.conv2d_per_sample(x, w, Some(bias), 1, self.arch.pad),
        }
    }

    /// The rest of block `i` after the conv: batch norm → relu → (pool).
    pub(crate) fn block_tail(
        &self,
        tape: &mut Tape<T>,
        i: usize,
        conv: NodeId,
        mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let block = &self.blocks[i];
        let leaf = |tape: &mut Tape<T>, p: &Param<T>| match reg {
            ParamReg::Trainable => tape.param(p),
            ParamReg::Frozen => tape.frozen(p),
        };
        let gamma = leaf(tape, &block.gamma);
        let beta = leaf(tape, &block.beta);
        let bn = match mode {
            BnMode::Train => {
                let (bn, stats) = tape.batchnorm_train(conv, gamma, beta, self.arch.bn_eps)?;
                let mom = T::from_f64(self.arch.bn_momentum);
                let one_minus = T::from_f64(1.0 - self.arch.bn_momentum);
                let mut mean = block.running_mean.borrow_mut();
                let mut var = block.running_var.borrow_mut();
                for (r, &b) in mean.iter_mut().zip(&stats.mean) {
                    *r = one_minus * *r + mom * b;
                }
                for (r, &b) in var.iter_mut().zip(&stats.var) {
                    *r = one_minus * *r + mom * b;
                }
                bn
            }
            BnMode::Static => tape.batchnorm_train(conv, gamma, beta, self.arch.bn_eps)?.0,
            BnMode::Eval => {
                let mean = block.running_mean.borrow().clone();
                let var = block.running_var.borrow().clone();
                tape.batchnorm_eval(conv, gamma, beta, &mean, &var, self.arch.bn_eps)?
            }
        };
        let act = tape.relu(bn);
        if self.arch.pool_after[i] {
            tape.maxpool2d(act, 2)
        } else {
            Ok(act)
        }
    }

    /// One conv block: conv → batch norm → relu → (pool). This is the single
    /// code path used by plain, truncated and substituted forwards; `weights`
    /// selects the filter source and `reg` controls trainability of the
    /// block's own parameters.
    pub(crate) fn block_forward(
        &self,
        tape: &mut Tape<T>,
        i: usize,
        x: NodeId,
        weights: WeightNode,
        mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let conv = self.block_conv(tape, i, x, weights, reg)?;
        self.block_tail(tape, i, conv, mode, reg)
    }

    /// Full forward to logits `[n, classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let act = self.forward_to_layer(tape, x, self.arch.num_layers(), mode, reg)?;
        self.head_forward(tape, act, mode, reg)
    }

    /// Forward through blocks `1..=layer` (1-based), returning the
    /// post-block activation (after relu and any pooling).
    pub fn forward_to_layer(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        layer: usize,
        mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let last = self.check_layer("forward_to_layer", layer)?;
        let mut act = x;
        for i in 0..=last {
            act = self.block_forward(tape, i, act, WeightNode::Own, mode, reg)?;
        }
        Ok(act)
    }

    /// Continue from the post-block activation of 1-based `layer` to logits.
    pub fn forward_from_layer(
        &self,
        tape: &mut Tape<T>,
        act: NodeId,
        layer: usize,
        mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let from = self.check_layer("forward_from_layer", layer)?;
        let mut act = act;
        for i in from + 1..self.arch.num_layers() {
            act = self.block_forward(tape, i, act, WeightNode::Own, mode, reg)?;
        }
        self.head_forward(tape, act, mode, reg)
    }

    /// Global average pooling plus the linear head.
    fn head_forward(
        &self,
        tape: &mut Tape<T>,
        act: NodeId,
        _mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let pooled = tape.global_avg_pool(act)?;
        let w = match reg {
            ParamReg::Trainable => tape.param(&self.head_weight),
            ParamReg::Frozen => tape.frozen(&self.head_weight),
        };
        let b = match reg {
            ParamReg::Trainable => tape.param(&self.head_bias),
            ParamReg::Frozen => tape.frozen(&self.head_bias),
        };
        tape.linear(pooled, w, Some(b))
    }

    /// Forward to the post-block activation of 1-based `layer` with the
    /// layer's conv weights taken from `weights` instead of the block's own
    /// parameters. All network parameters stay frozen. This is the node-level
    /// entry point the adversarial game differentiates through.
    pub(crate) fn substituted_activation(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        layer: usize,
        weights: WeightNode,
        mode: BnMode,
    ) -> Result<NodeId> {
        let idx = self.check_layer("substituted_activation", layer)?;
        let mut act = x;
        for i in 0..idx {
            act = self.block_forward(tape, i, act, WeightNode::Own, mode, ParamReg::Frozen)?;
        }
        self.block_forward(tape, idx, act, weights, mode, ParamReg::Frozen)
    }

    /// Forward to the post-block activation of 1-based `layer`, with the
    /// layer's conv weights replaced by `filters` (its real bias and batch
    /// norm stay). With `FilterSet::real(layer's own weights)` this equals
    /// [`CnnModel::forward_to_layer`] exactly, bit for bit.
    pub fn forward_with_filters(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        layer: usize,
        filters: &FilterSet<T>,
        mode: BnMode,
    ) -> Result<NodeId> {
        self.check_layer("forward_with_filters", layer)?;
        let expected = self.arch.filter_shape(layer);
        if filters.weight.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "forward_with_filters",
                lhs: filters.weight.shape().to_vec(),
                rhs: expected,
            });
        }
        let w = tape.constant(filters.weight.clone());
        self.substituted_activation(tape, x, layer, WeightNode::Shared(w), mode)
    }

    /// Shape `[channels, h, w]` of the post-block activation of 1-based
    /// `layer` for `input_hw` images, applying the same exact-tiling rules
    /// as the forward pass.
    pub fn activation_shape(&self, layer: usize, input_hw: (usize, usize)) -> Result<Vec<usize>> {
        let last = self.check_layer("activation_shape", layer)?;
        let (mut h, mut w) = input_hw;
        for i in 0..=last {
            let conv_extent = |e: usize| -> Result<usize> {
                (e + 2 * self.arch.pad)
                    .checked_sub(self.arch.kernel)
                    .map(|d| d + 1)
                    .ok_or_else(|| Error::invalid("activation_shape", "kernel larger than input"))
            };
            h = conv_extent(h)?;
            w = conv_extent(w)?;
            if self.arch.pool_after[i] {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::invalid(
                        "activation_shape",
                        format!("pool after block {} sees odd extent {h}x{w}", i + 1),
                    ));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(vec![self.arch.channels[last], h, w])
    }

    /// Argmax accuracy on a dataset, eval mode, chunked to bound memory.
    pub fn evaluate(&self, data: &Dataset, batch: usize) -> Result<f64> {
        let n = data.len();
        if n == 0 {
            return Err(Error::invalid("evaluate", "empty dataset"));
        }
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let (images, labels) = data.gather(&indices);
            let mut tape = Tape::new();
            let x = tape.constant(images.cast::<T>());
            let logits = self.forward(&mut tape, x, BnMode::Eval, ParamReg::Frozen)?;
            correct += count_correct(tape.value(logits), &labels);
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    /// Checkpoint with the model tensors plus `meta.*` records (architecture
    /// and seed), so a load can rebuild the exact network.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for b in &self.blocks {
            for p in [&b.weight, &b.bias, &b.gamma, &b.beta] {
                ck.insert(p.name(), &p.value());
            }
            let prefix = b.weight.name();
            let prefix = prefix.strip_suffix(".weight").unwrap();
            ck.insert(
                format!("{prefix}.bn_mean"),
                &Tensor::new(vec![b.running_mean.borrow().len()], b.running_mean.borrow().clone())
                    .unwrap(),
            );
            ck.insert(
                format!("{prefix}.bn_var"),
                &Tensor::new(vec![b.running_var.borrow().len()], b.running_var.borrow().clone())
                    .unwrap(),
            );
        }
        ck.insert("head.weight", &self.head_weight.value());
        ck.insert("head.bias", &self.head_bias.value());

        let to_f64_tensor =
            |v: &[usize]| Tensor::<f64>::new(vec![v.len()], v.iter().map(|&x| x as f64).collect());
        ck.insert("meta.channels", &to_f64_tensor(&self.arch.channels).unwrap());
        ck.insert(
            "meta.pool_after",
            &Tensor::<f64>::new(
                vec![self.arch.pool_after.len()],
                self.arch.pool_after.iter().map(|&b| b as u8 as f64).collect(),
            )
            .unwrap(),
        );
        ck.insert(
            "meta.scalars",
            &Tensor::<f64>::new(
                vec![6],
                vec![
                    self.arch.in_channels as f64,
                    self.arch.classes as f64,
                    self.arch.kernel as f64,
                    self.arch.pad as f64,
                    self.arch.bn_eps,
                    self.arch.bn_momentum,
                ],
            )
            .unwrap(),
        );
        // u64 seed split into two exactly-representable u32 halves
        ck.insert(
            "meta.seed",
            &Tensor::<f64>::new(
                vec![2],
                vec![(self.seed >> 32) as f64, (self.seed & 0xFFFF_FFFF) as f64],
            )
            .unwrap(),
        );
        ck
    }

    /// Rebuild a model from a checkpoint produced by
    /// [`CnnModel::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let channels_t: Tensor<f64> = ck.get("meta.channels")?;
        let pool_t: Tensor<f64> = ck.get("meta.pool_after")?;
        let scalars: Tensor<f64> = ck.get("meta.scalars")?;
        let seed_t: Tensor<f64> = ck.get("meta.seed")?;
        let arch = ArchConfig {
            channels: channels_t.data().iter().map(|&v| v as usize).collect(),
            pool_after: pool_t.data().iter().map(|&v| v != 0.0).collect(),
            in_channels: scalars.data()[0] as usize,
            classes: scalars.data()[1] as usize,
            kernel: scalars.data()[2] as usize,
            pad: scalars.data()[3] as usize,
            bn_eps: scalars.data()[4],
            bn_momentum: scalars.data()[5],
        };
        let seed = ((seed_t.data()[0] as u64) << 32) | (seed_t.data()[1] as u64);
        let model = CnnModel::build(arch, seed)?;
        for (i, b) in model.blocks.iter().enumerate() {
            let prefix = format!("block{}", i + 1);
            b.weight.set_value(ck.get(&format!("{prefix}.weight"))?)?;
            b.bias.set_value(ck.get(&format!("{prefix}.bias"))?)?;
            b.gamma.set_value(ck.get(&format!("{prefix}.bn_gamma"))?)?;
            b.beta.set_value(ck.get(&format!("{prefix}.bn_beta"))?)?;
            let mean: Tensor<T> = ck.get(&format!("{prefix}.bn_mean"))?;
            let var: Tensor<T> = ck.get(&format!("{prefix}.bn_var"))?;
            b.set_running_stats(mean.into_data(), var.into_data());
        }
        model.head_weight.set_value(ck.get("head.weight")?)?;
        model.head_bias.set_value(ck.get("head.bias")?)?;
        Ok(model)
    }

    /// A model with the same architecture whose blocks `1..=layer` *share*
    /// this model's parameter handles (running statistics copied), while
    /// blocks `layer+1..` and the head are freshly He-initialized from a
    /// `(seed, "tail-init")` stream — the starting point for retraining the
    /// network tail on top of a frozen prefix.
    pub fn reinitialized_tail(&self, layer: usize, seed: u64) -> Result<CnnModel<T>> {
        let split = self.check_layer("reinitialized_tail", layer)? + 1;
        let mut rng = rng::stream(seed, "tail-init");
        let blocks: Vec<ConvBlock<T>> = (0..self.arch.num_layers())
            .map(|i| {
                if i < split {
                    let b = &self.blocks[i];
                    ConvBlock {
                        weight: b.weight.clone(),
                        bias: b.bias.clone(),
                        gamma: b.gamma.clone(),
                        beta: b.beta.clone(),
                        running_mean: RefCell::new(b.running_mean()),
                        running_var: RefCell::new(b.running_var()),
                    }
                } else {
                    ConvBlock::init(
                        &format!("block{}", i + 1),
                        self.arch.block_in_channels(i),
                        self.arch.channels[i],
                        self.arch.kernel,
                        &mut rng,
                    )
                }
            })
            .collect();
        let c_last = *self.arch.channels.last().unwrap();
        let bound = (6.0 / c_last as f64).sqrt();
        let head_weight = Param::new(
            "head.weight",
            Tensor::rand_uniform(&mut rng, vec![self.arch.classes, c_last], -bound, bound),
        );
        let head_bias = Param::new("head.bias", Tensor::zeros(vec![self.arch.classes]));
        Ok(CnnModel {
            arch: self.arch.clone(),
            blocks,
            head_weight,
            head_bias,
            seed,
        })
    }

    /// Trainable parameters of blocks `layer+1..` plus the head, in a
    /// stable order — the set [`CnnModel::reinitialized_tail`] retrains.
    pub fn tail_params(&self, layer: usize) -> Result<Vec<Param<T>>> {
        let split = self.check_layer("tail_params", layer)? + 1;
        let mut out = Vec::new();
        for b in &self.blocks[split..] {
            out.extend([
                b.weight.clone(),
                b.bias.clone(),
                b.gamma.clone(),
                b.beta.clone(),
            ]);
        }
        out.push(self.head_weight.clone());
        out.push(self.head_bias.clone());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CnnModel::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Snapshot every parameter and running statistic, in checkpoint byte
    /// form — a cheap way to assert the network was left untouched.
    pub fn state_fingerprint(&self) -> Vec<u8> {
        self.to_checkpoint().to_bytes().expect("serializable model")
    }
}

/// Rows of `logits` whose argmax (first max on ties) equals the label.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Classifier training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Examples from the head of the training set used for the per-epoch
    /// accuracy probe.
    pub eval_subset: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            batch: 128,
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            eval_subset: 10_000,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub subset_accuracy: f64,
}

/// Train the classifier with RMSprop on softmax cross-entropy. Aborts with
/// [`Error::NonFinite`] if the loss ever leaves the reals.
pub fn train_classifier<T: Scalar>(
    model: &CnnModel<T>,
    data: &Dataset,
    cfg: &FitConfig,
) -> Result<Vec<EpochRecord>> {
    let mut stream = data.batches(cfg.batch, cfg.seed)?;
    let mut opt = RmsProp::new(
        model.params(),
        RmsPropConfig {
            lr: cfg.lr,
            rho: cfg.rho,
            eps: cfg.eps,
        },
    );
    let per_epoch = stream.batches_per_epoch();
    let subset = Dataset::from_parts(
        {
            let take = cfg.eval_subset.min(data.len());
            let idx: Vec<usize> = (0..take).collect();
            data.gather(&idx).0
        },
        data.labels[..cfg.eval_subset.min(data.len())].to_vec(),
        data.split,
    )?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let batch = stream.next_batch();
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.cast::<T>());
            let logits = model.forward(&mut tape, x, BnMode::Train, ParamReg::Trainable)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            tape.value(loss).ensure_finite("training loss", step)?;
            loss_sum += tape.value(loss).item().as_f64();
            tape.backward(loss)?;
            opt.step()?;
            opt.zero_grads();
            step += 1;
        }
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            subset_accuracy: model.evaluate(&subset, 256)?,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            channels: vec![4, 6],
            pool_after: vec![false, true],
            in_channels: 1,
            classes: 3,
            kernel: 3,
            pad: 1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&mut rng, vec![n, 1, h, w], 0.0, 1.0)
    }

    #[test]
    fn forward_shapes_track_pooling() {
        let model = CnnModel::<f32>::build(ArchConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_images(2, 28, 28, 0));
        let logits = model.forward(&mut tape, x, BnMode::Eval, ParamReg::Frozen).unwrap();
        assert_eq!(tape.shape(logits), &[2, 10]);

        let mut tape = Tape::new();
        let x = tape.constant(random_images(2, 28, 28, 0));
        for (layer, want) in [
            (1, vec![2, 16, 28, 28]),
            (2, vec![2, 32, 14, 14]),
            (3, vec![2, 32, 14, 14]),
            (4, vec![2, 64, 7, 7]),
            (5, vec![2, 64, 7, 7]),
        ] {
            let act = model
                .forward_to_layer(&mut tape, x, layer, BnMode::Eval, ParamReg::Frozen)
                .unwrap();
            assert_eq!(tape.shape(act), want.as_slice(), "layer {layer}");
        }
    }

    #[test]
    fn activation_shape_matches_the_forward_pass() {
        let model = CnnModel::<f32>::build(ArchConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_images(2, 28, 28, 0));
        for layer in 1..=5 {
            let act = model
                .forward_to_layer(&mut tape, x, layer, BnMode::Eval, ParamReg::Frozen)
                .unwrap();
            let want = model.activation_shape(layer, (28, 28)).unwrap();
            assert_eq!(&tape.shape(act)[1..], want.as_slice(), "layer {layer}");
        }
    }

    #[test]
    fn substituting_real_filters_is_bitwise_identical() {
        let model = CnnModel::<f32>::build(tiny_arch(), 7).unwrap();
        let images = random_images(3, 8, 8, 1);
        for layer in 1..=2 {
            let filters = FilterSet::real(model.blocks[layer - 1].weight.value());
            let mut t1 = Tape::new();
            let x1 = t1.constant(images.clone());
            let plain = model
                .forward_to_layer(&mut t1, x1, layer, BnMode::Eval, ParamReg::Frozen)
                .unwrap();
            let mut t2 = Tape::new();
            let x2 = t2.constant(images.clone());
            let subst = model
                .forward_with_filters(&mut t2, x2, layer, &filters, BnMode::Eval)
                .unwrap();
            assert_eq!(t1.value(plain).data(), t2.value(subst).data(), "layer {layer}");
        }
    }

    #[test]
    fn static_mode_leaves_state_untouched_train_mode_updates_it() {
        let model = CnnModel::<f32>::build(tiny_arch(), 3).unwrap();
        let before = model.state_fingerprint();
        let images = random_images(4, 8, 8, 2);

        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        model.forward(&mut tape, x, BnMode::Static, ParamReg::Frozen).unwrap();
        assert_eq!(model.state_fingerprint(), before, "Static mode mutated the model");

        let mut tape = Tape::new();
        let x = tape.constant(images);
        model.forward(&mut tape, x, BnMode::Train, ParamReg::Frozen).unwrap();
        assert_ne!(model.state_fingerprint(), before, "Train mode failed to update stats");
    }

    #[test]
    fn eval_accuracy_is_batch_size_invariant() {
        let model = CnnModel::<f32>::build(tiny_arch(), 5).unwrap();
        let images = random_images(10, 8, 8, 3);
        let labels: Vec<u8> = (0..10).map(|i| (i % 3) as u8).collect();
        let ds = Dataset::from_parts(images, labels, Split::Test).unwrap();
        let a = model.evaluate(&ds, 10).unwrap();
        let b = model.evaluate(&ds, 3).unwrap();
        let c = model.evaluate(&ds, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cnn.ivf");
        let model = CnnModel::<f32>::build(ArchConfig::default(), 11).unwrap();
        // perturb running stats so they are not the init values
        model.blocks[0].set_running_stats(vec![0.5; 16], vec![2.0; 16]);
        model.save(&path).unwrap();
        let loaded = CnnModel::<f32>::load(&path).unwrap();
        assert_eq!(loaded.seed, 11);
        assert_eq!(loaded.arch.channels, model.arch.channels);
        assert_eq!(model.state_fingerprint(), loaded.state_fingerprint());
    }

    #[test]
    fn checkpoint_has_exactly_32_model_tensors_plus_meta() {
        let model = CnnModel::<f32>::build(ArchConfig::default(), 0).unwrap();
        let ck = model.to_checkpoint();
        let model_tensors: Vec<&str> = ck.names().filter(|n| !n.starts_with("meta.")).collect();
        assert_eq!(model_tensors.len(), 32);
        let expected: Vec<String> = (1..=5)
            .flat_map(|i| {
                ["weight", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var"]
                    .into_iter()
                    .map(move |s| format!("block{i}.{s}"))
            })
            .chain(["head.weight".to_string(), "head.bias".to_string()])
            .collect();
        for name in &expected {
            assert!(ck.contains(name), "missing {name}");
        }
    }

    #[test]
    fn count_correct_uses_first_max_on_ties() {
        let logits = Tensor::<f32>::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(count_correct(&logits, &[0]), 1);
        assert_eq!(count_correct(&logits, &[1]), 0);
    }

    #[test]
    fn one_step_of_training_reduces_loss_on_a_fixed_batch() {
        let model = CnnModel::<f32>::build(tiny_arch(), 9).unwrap();
        let images = random_images(8, 8, 8, 4);
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let loss_of = |model: &CnnModel<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let logits = model.forward(&mut tape, x, BnMode::Static, ParamReg::Frozen).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.value(loss).item() as f64
        };
        let before = loss_of(&model);
        let mut opt = RmsProp::new(
            model.params(),
            RmsPropConfig { lr: 1e-2, rho: 0.9, eps: 1e-8 },
        );
        for _ in 0..5 {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let logits = model.forward(&mut tape, x, BnMode::Train, ParamReg::Trainable).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            opt.step().unwrap();
            opt.zero_grads();
        }
        let after = loss_of(&model);
        assert!(after < before, "loss {before} -> {after}");
    }
}
