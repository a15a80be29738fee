//! The adversarial filter game: learning the set of filter banks a trained
//! classifier is invariant to.
//!
//! A generator maps latent codes `z` to *replacement filter banks* for one
//! conv layer of a frozen, trained [`CnnModel`](crate::cnn::CnnModel). A
//! discriminator watches that layer's post-block activations and tries to
//! tell real filters from generated ones; a recovery head `Q` reads the same
//! activations and reconstructs `z`, which forces distinct codes to produce
//! distinguishable filters. At the end of training, the generator's image is
//! a parametrized family of filter banks the classifier treats as
//! interchangeable — its learned invariances, made explicit.
//!
//! Per iteration, on one shared minibatch of images and codes:
//!
//! 1. the discriminator (trunk + D head) descends the binary cross-entropy
//!    of real-vs-generated activations,
//! 2. the generator descends `mean log(1 − D(fake)) + λ‖z − Q(fake)‖²`,
//! 3. the recovery branch (trunk + Q head) descends `λ‖z − Q(fake)‖²`.
//!
//! The classifier participates only through frozen leaves and batch norm in
//! [`BnMode::Static`], so the game cannot move a single bit of it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Param, RmsProp, RmsPropConfig, Scalar, Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::cnn::{BnMode, CnnModel, FilterSet, ParamReg, WeightNode};
use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::rng;

/// Hyperparameters of the adversarial filter game.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    /// 1-based conv layer whose filters are modelled.
    pub layer: usize,
    /// Latent dimensionality of the generator.
    pub z_dim: usize,
    /// Weight λ of the latent-recovery term.
    pub lambda_info: f64,
    /// Minibatch size m (images and codes per iteration).
    pub batch: usize,
    /// Training iterations.
    pub iters: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Hidden widths of the generator MLP.
    pub g_hidden: Vec<usize>,
    /// Channels of the two strided critic trunk convs.
    pub d_channels: Vec<usize>,
    /// Negative slope of the leaky relu used in G and the critic.
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            layer: 4,
            z_dim: 64,
            lambda_info: 1.0,
            batch: 64,
            iters: 10_000,
            lr: 1e-4,
            rho: 0.99,
            eps: 1e-8,
            g_hidden: vec![256, 512],
            d_channels: vec![64, 128],
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

/// MLP from latent codes to filter banks for one layer.
///
/// Hidden layers use leaky relu; the linear output is scaled by
/// `1/√(c_in·k·k)` so freshly generated banks start at the magnitude of a
/// He-initialized layer rather than saturating the downstream batch norm.
pub struct Generator<T: Scalar> {
    layers: Vec<(Param<T>, Param<T>)>,
    pub filter_shape: Vec<usize>,
    pub z_dim: usize,
    leaky: f64,
    output_scale: f64,
}

impl<T: Scalar> Generator<T> {
    pub fn build(
        z_dim: usize,
        hidden: &[usize],
        filter_shape: Vec<usize>,
        leaky: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if filter_shape.len() != 4 {
            return Err(Error::invalid("Generator", "filter shape must be rank 4"));
        }
        let out_dim: usize = filter_shape.iter().product();
        let fan_in_conv = (filter_shape[1] * filter_shape[2] * filter_shape[3]) as f64;
        let mut dims = vec![z_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let bound = (6.0 / d[0] as f64).sqrt();
                (
                    Param::new(
                        format!("g.fc{}.weight", i + 1),
                        Tensor::rand_uniform(rng, vec![d[1], d[0]], -bound, bound),
                    ),
                    Param::new(format!("g.fc{}.bias", i + 1), Tensor::zeros(vec![d[1]])),
                )
            })
            .collect();
        Ok(Generator {
            layers,
            filter_shape,
            z_dim,
            leaky,
            output_scale: 1.0 / fan_in_conv.sqrt(),
        })
    }

    pub fn params(&self) -> Vec<Param<T>> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    /// Graph node of generated banks `[m, c_out, c_in, k, k]` from codes
    /// `z` of shape `[m, z_dim]`.
    pub fn filters_node(&self, tape: &mut Tape<T>, z: NodeId, reg: ParamReg) -> Result<NodeId> {
        let z_shape = tape.shape(z).to_vec();
        if z_shape.len() != 2 || z_shape[1] != self.z_dim {
            return Err(Error::invalid(
                "Generator",
                format!("expected z of shape [m, {}], got {z_shape:?}", self.z_dim),
            ));
        }
        let m = z_shape[0];
        let mut h = z;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wn = match reg {
                ParamReg::Trainable => tape.param(w),
                ParamReg::Frozen => tape.frozen(w),
            };
            let bn = match reg {
                ParamReg::Trainable => tape.param(b),
                ParamReg::Frozen => tape.frozen(b),
            };
            h = tape.linear(h, wn, Some(bn))?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, T::from_f64(self.leaky));
            }
        }
        let scaled = tape.scale(h, T::from_f64(self.output_scale));
        let mut shape = vec![m];
        shape.extend_from_slice(&self.filter_shape);
        tape.reshape(scaled, shape)
    }

    /// Generated banks as a plain tensor (no gradients).
    pub fn generate_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zn = tape.constant(z.clone());
        let f = self.filters_node(&mut tape, zn, ParamReg::Frozen)?;
        Ok(tape.value(f).clone())
    }

    /// One filter bank from one code `z` of shape `[z_dim]`, tagged with its
    /// provenance.
    pub fn generate(&self, z: &Tensor<T>) -> Result<FilterSet<T>> {
        if z.shape() != [self.z_dim] {
            return Err(Error::invalid(
                "Generator",
                format!("expected z of shape [{}], got {:?}", self.z_dim, z.shape()),
            ));
        }
        let batch = self.generate_batch(&z.reshaped(vec![1, self.z_dim])?)?;
        let weight = Tensor::new(self.filter_shape.clone(), batch.into_data())?;
        Ok(FilterSet::generated(weight, z.clone()))
    }
}

/// Critic over layer activations: a shared strided conv trunk with two
/// heads — D (real-vs-generated probability) and Q (latent recovery).
///
/// Trunk convs use stride 2 and pad 1; each stage picks kernel 3 or 4 by the
/// parity of its input extent so the exact-tiling convolution contract holds
/// on every activation size the classifier can produce.
pub struct DiscriminatorQ<T: Scalar> {
    trunk: Vec<TrunkLayer<T>>,
    d_head: (Param<T>, Param<T>),
    q_head: (Param<T>, Param<T>),
    /// Expected activation shape `[channels, h, w]`.
    pub input_shape: Vec<usize>,
    pub flat_dim: usize,
    leaky: f64,
}

struct TrunkLayer<T: Scalar> {
    weight: Param<T>,
    bias: Param<T>,
}

fn linear_head<T: Scalar>(
    name: &str,
    out: usize,
    flat_dim: usize,
    rng: &mut impl rand::Rng,
) -> (Param<T>, Param<T>) {
    let bound = (6.0 / flat_dim as f64).sqrt();
    (
        Param::new(
            format!("{name}.weight"),
            Tensor::rand_uniform(rng, vec![out, flat_dim], -bound, bound),
        ),
        Param::new(format!("{name}.bias"), Tensor::zeros(vec![out])),
    )
}

impl<T: Scalar> DiscriminatorQ<T> {
    pub fn build(
        input_shape: Vec<usize>,
        d_channels: &[usize],
        z_dim: usize,
        leaky: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::invalid("DiscriminatorQ", "input shape must be [c, h, w]"));
        }
        let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
        let mut trunk = Vec::new();
        for (i, &ch) in d_channels.iter().enumerate() {
            // stride-2, pad-1 exact tiling: (e + 2 - k) must be even, so the
            // kernel follows the parity of the input extent
            let kh = if h % 2 == 0 { 4 } else { 3 };
            let kw = if w % 2 == 0 { 4 } else { 3 };
            if kh != kw {
                return Err(Error::invalid(
                    "DiscriminatorQ",
                    format!("activation extent {h}x{w} has mixed parity"),
                ));
            }
            let fan_in = (c * kh * kw) as f64;
            let bound = (6.0 / fan_in).sqrt();
            trunk.push(TrunkLayer {
                weight: Param::new(
                    format!("d.conv{}.weight", i + 1),
                    Tensor::rand_uniform(rng, vec![ch, c, kh, kw], -bound, bound),
                ),
                bias: Param::new(format!("d.conv{}.bias", i + 1), Tensor::zeros(vec![ch])),
            });
            h = (h + 2 - kh) / 2 + 1;
            w = (w + 2 - kw) / 2 + 1;
            c = ch;
        }
        let flat_dim = c * h * w;
        let d_head = linear_head("d.head", 1, flat_dim, &mut *rng);
        let q_head = linear_head("q.head", z_dim, flat_dim, &mut *rng);
        Ok(DiscriminatorQ {
            trunk,
            d_head,
            q_head,
            input_shape,
            flat_dim,
            leaky,
        })
    }

    /// Trunk parameters (shared by both heads).
    pub fn trunk_params(&self) -> Vec<Param<T>> {
        self.trunk
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn d_params(&self) -> Vec<Param<T>> {
        vec![self.d_head.0.clone(), self.d_head.1.clone()]
    }

    pub fn q_params(&self) -> Vec<Param<T>> {
        vec![self.q_head.0.clone(), self.q_head.1.clone()]
    }

    /// Flat trunk features `[m, flat_dim]` from activations
    /// `[m, c, h, w]`. `reg` governs the trunk parameters.
    pub fn features(&self, tape: &mut Tape<T>, act: NodeId, reg: ParamReg) -> Result<NodeId> {
        let shape = tape.shape(act).to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(Error::invalid(
                "DiscriminatorQ",
                format!("expected activations [m, {:?}], got {shape:?}", self.input_shape),
            ));
        }
        let mut x = act;
        for layer in &self.trunk {
            let w = match reg {
                ParamReg::Trainable => tape.param(&layer.weight),
                ParamReg::Frozen => tape.frozen(&layer.weight),
            };
            let b = match reg {
                ParamReg::Trainable => tape.param(&layer.bias),
                ParamReg::Frozen => tape.frozen(&layer.bias),
            };
            x = tape.conv2d(x, w, Some(b), 2, 1)?;
            x = tape.leaky_relu(x, T::from_f64(self.leaky));
        }
        tape.reshape(x, vec![shape[0], self.flat_dim])
    }

    /// D head: probability `[m, 1]` that the activations came from the real
    /// filters.
    pub fn d_prob(&self, tape: &mut Tape<T>, features: NodeId, reg: ParamReg) -> Result<NodeId> {
        let w = match reg {
            ParamReg::Trainable => tape.param(&self.d_head.0),
            ParamReg::Frozen => tape.frozen(&self.d_head.0),
        };
        let b = match reg {
            ParamReg::Trainable => tape.param(&self.d_head.1),
            ParamReg::Frozen => tape.frozen(&self.d_head.1),
        };
        let logit = tape.linear(features, w, Some(b))?;
        Ok(tape.sigmoid(logit))
    }

    /// Q head: recovered codes `[m, z_dim]`.
    pub fn q_recover(&self, tape: &mut Tape<T>, features: NodeId, reg: ParamReg) -> Result<NodeId> {
        let w = match reg {
            ParamReg::Trainable => tape.param(&self.q_head.0),
            ParamReg::Frozen => tape.frozen(&self.q_head.0),
        };
        let b = match reg {
            ParamReg::Trainable => tape.param(&self.q_head.1),
            ParamReg::Frozen => tape.frozen(&self.q_head.1),
        };
        tape.linear(features, w, Some(b))
    }
}

/// The assembled game: generator, critic and hyperparameters, bound to one
/// layer of a particular classifier.
pub struct FilterGan<T: Scalar> {
    pub generator: Generator<T>,
    pub critic: DiscriminatorQ<T>,
    pub cfg: GanConfig,
    /// Height and width of the classifier inputs the critic was sized for.
    pub input_hw: (usize, usize),
}

impl<T: Scalar> FilterGan<T> {
    /// Build generator and critic for `cfg.layer` of `model`, sizing the
    /// critic from the activation shape that `input_hw` images produce.
    pub fn build(cfg: GanConfig, model: &CnnModel<T>, input_hw: (usize, usize)) -> Result<Self> {
        if cfg.z_dim == 0 || cfg.batch == 0 {
            return Err(Error::invalid("FilterGan", "z_dim and batch must be positive"));
        }
        let mut rng = rng::stream(cfg.seed, "gan-init");
        let generator = Generator::build(
            cfg.z_dim,
            &cfg.g_hidden,
            model.arch.filter_shape(cfg.layer),
            cfg.leaky_slope,
            &mut rng,
        )?;
        let critic = DiscriminatorQ::build(
            model.activation_shape(cfg.layer, input_hw)?,
            &cfg.d_channels,
            cfg.z_dim,
            cfg.leaky_slope,
            &mut rng,
        )?;
        Ok(FilterGan {
            generator,
            critic,
            cfg,
            input_hw,
        })
    }

    /// Every trainable parameter of G, the trunk, and both heads.
    pub fn params(&self) -> Vec<Param<T>> {
        let mut ps = self.generator.params();
        ps.extend(self.critic.trunk_params());
        ps.extend(self.critic.d_params());
        ps.extend(self.critic.q_params());
        ps
    }

    /// Serialize all parameters plus enough metadata to rebuild the
    /// networks against the same classifier.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for p in self.params() {
            ckpt.insert(p.name(), &p.value());
        }
        let c = &self.cfg;
        ckpt.insert(
            "meta.cfg",
            &Tensor::new(
                vec![9],
                vec![
                    c.layer as f64,
                    c.z_dim as f64,
                    c.lambda_info,
                    c.batch as f64,
                    c.iters as f64,
                    c.lr,
                    c.rho,
                    c.eps,
                    c.leaky_slope,
                ],
            )?,
        );
        ckpt.insert(
            "meta.seed",
            &Tensor::new(
                vec![2],
                vec![(c.seed >> 32) as u32 as f64, c.seed as u32 as f64],
            )?,
        );
        let usizes = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        ckpt.insert("meta.g_hidden", &Tensor::new(vec![c.g_hidden.len()], usizes(&c.g_hidden))?);
        ckpt.insert(
            "meta.d_channels",
            &Tensor::new(vec![c.d_channels.len()], usizes(&c.d_channels))?,
        );
        ckpt.insert(
            "meta.input_hw",
            &Tensor::new(vec![2], vec![self.input_hw.0 as f64, self.input_hw.1 as f64])?,
        );
        Ok(ckpt)
    }

    /// Rebuild from a checkpoint against the classifier it was trained
    /// with. Every parameter tensor must be present with its exact shape.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &CnnModel<T>) -> Result<Self> {
        let meta = ckpt.get::<f64>("meta.cfg")?;
        let m = meta.data();
        if m.len() != 9 {
            return Err(Error::invalid("FilterGan::from_checkpoint", "meta.cfg must have 9 entries"));
        }
        let seed_t = ckpt.get::<f64>("meta.seed")?;
        let seed = ((seed_t.data()[0] as u64) << 32) | seed_t.data()[1] as u64;
        let to_usizes = |t: &Tensor<f64>| t.data().iter().map(|&x| x as usize).collect::<Vec<_>>();
        let cfg = GanConfig {
            layer: m[0] as usize,
            z_dim: m[1] as usize,
            lambda_info: m[2],
            batch: m[3] as usize,
            iters: m[4] as usize,
            lr: m[5],
            rho: m[6],
            eps: m[7],
            leaky_slope: m[8],
            g_hidden: to_usizes(&ckpt.get::<f64>("meta.g_hidden")?),
            d_channels: to_usizes(&ckpt.get::<f64>("meta.d_channels")?),
            seed,
        };
        let hw_t = ckpt.get::<f64>("meta.input_hw")?;
        let input_hw = (hw_t.data()[0] as usize, hw_t.data()[1] as usize);
        let gan = FilterGan::build(cfg, model, input_hw)?;
        for p in gan.params() {
            let stored = ckpt.get::<T>(&p.name())?;
            p.set_value(stored)?;
        }
        Ok(gan)
    }

    /// Write the checkpoint to `path`, creating parent directories.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Read a checkpoint written by [`FilterGan::save`].
    pub fn load(path: &std::path::Path, model: &CnnModel<T>) -> Result<Self> {
        FilterGan::from_checkpoint(&Checkpoint::load(path)?, model)
    }

    fn optimizer_config(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.cfg.lr,
            rho: self.cfg.rho,
            eps: self.cfg.eps,
        }
    }

    /// Optimizer over θ_d = trunk + D head.
    pub fn d_optimizer(&self) -> RmsProp<T> {
        let mut params = self.critic.trunk_params();
        params.extend(self.critic.d_params());
        RmsProp::new(params, self.optimizer_config())
    }

    /// Optimizer over θ_g = generator parameters.
    pub fn g_optimizer(&self) -> RmsProp<T> {
        RmsProp::new(self.generator.params(), self.optimizer_config())
    }

    /// Optimizer over θ_q = trunk + Q head.
    pub fn q_optimizer(&self) -> RmsProp<T> {
        let mut params = self.critic.trunk_params();
        params.extend(self.critic.q_params());
        RmsProp::new(params, self.optimizer_config())
    }

    /// Real activations `[m, c, h, w]` at the game's layer.
    pub fn real_activation(
        &self,
        tape: &mut Tape<T>,
        model: &CnnModel<T>,
        images: &Tensor<T>,
    ) -> Result<NodeId> {
        let x = tape.constant(images.clone());
        model.forward_to_layer(tape, x, self.cfg.layer, BnMode::Static, ParamReg::Frozen)
    }

    /// Activations under generated per-sample filter banks, with the
    /// generator's parameters registered per `g_reg`.
    pub fn fake_activation(
        &self,
        tape: &mut Tape<T>,
        model: &CnnModel<T>,
        images: &Tensor<T>,
        z: NodeId,
        g_reg: ParamReg,
    ) -> Result<NodeId> {
        let w = self.generator.filters_node(tape, z, g_reg)?;
        let x = tape.constant(images.clone());
        model.substituted_activation(tape, x, self.cfg.layer, WeightNode::PerSample(w), BnMode::Static)
    }

    /// One discriminator update on a shared minibatch. Returns the descended
    /// objective `−(1/m)Σ[log D(real) + log(1 − D(fake))]`.
    pub fn discriminator_step(
        &self,
        model: &CnnModel<T>,
        images: &Tensor<T>,
        z: &Tensor<T>,
        opt: &mut RmsProp<T>,
        step: usize,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let a_real = self.real_activation(&mut tape, model, images)?;
        let zn = tape.constant(z.clone());
        let a_fake = self.fake_activation(&mut tape, model, images, zn, ParamReg::Frozen)?;
        let f_real = self.critic.features(&mut tape, a_real, ParamReg::Trainable)?;
        let f_fake = self.critic.features(&mut tape, a_fake, ParamReg::Trainable)?;
        let p_real = self.critic.d_prob(&mut tape, f_real, ParamReg::Trainable)?;
        let p_fake = self.critic.d_prob(&mut tape, f_fake, ParamReg::Trainable)?;
        let loss = tape.bce_discriminator(p_real, p_fake)?;
        tape.value(loss).ensure_finite("discriminator objective", step)?;
        let out = tape.value(loss).item().as_f64();
        tape.backward(loss)?;
        opt.step()?;
        opt.zero_grads();
        Ok(out)
    }

    /// One generator update. Returns `(mean log(1 − D(fake)), ‖z − Q‖² mse)`
    /// — the two terms of the descended objective, before the update.
    pub fn generator_step(
        &self,
        model: &CnnModel<T>,
        images: &Tensor<T>,
        z: &Tensor<T>,
        opt: &mut RmsProp<T>,
        step: usize,
    ) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let zn = tape.constant(z.clone());
        let a_fake = self.fake_activation(&mut tape, model, images, zn, ParamReg::Trainable)?;
        let feat = self.critic.features(&mut tape, a_fake, ParamReg::Frozen)?;
        let p_fake = self.critic.d_prob(&mut tape, feat, ParamReg::Frozen)?;
        let adv = tape.bce_generator(p_fake)?;
        let z_hat = self.critic.q_recover(&mut tape, feat, ParamReg::Frozen)?;
        let info = tape.mse(z_hat, zn)?;
        let weighted = tape.scale(info, T::from_f64(self.cfg.lambda_info));
        let loss = tape.add(adv, weighted)?;
        tape.value(loss).ensure_finite("generator objective", step)?;
        let out = (tape.value(adv).item().as_f64(), tape.value(info).item().as_f64());
        tape.backward(loss)?;
        opt.step()?;
        opt.zero_grads();
        Ok(out)
    }

    /// One recovery update (trunk + Q head, generator frozen). Returns the
    /// pre-update `‖z − Q‖²` mse.
    pub fn q_step(
        &self,
        model: &CnnModel<T>,
        images: &Tensor<T>,
        z: &Tensor<T>,
        opt: &mut RmsProp<T>,
        step: usize,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let zn = tape.constant(z.clone());
        let a_fake = self.fake_activation(&mut tape, model, images, zn, ParamReg::Frozen)?;
        let feat = self.critic.features(&mut tape, a_fake, ParamReg::Trainable)?;
        let z_hat = self.critic.q_recover(&mut tape, feat, ParamReg::Trainable)?;
        let info = tape.mse(z_hat, zn)?;
        let loss = tape.scale(info, T::from_f64(self.cfg.lambda_info));
        tape.value(loss).ensure_finite("recovery objective", step)?;
        let out = tape.value(info).item().as_f64();
        tape.backward(loss)?;
        opt.step()?;
        opt.zero_grads();
        Ok(out)
    }
}

/// One iteration's objective values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanIterRecord {
    pub iteration: usize,
    /// Descended discriminator objective (lower = D winning).
    pub disc_objective: f64,
    /// `mean log(1 − D(fake))` seen by the generator (lower = G winning).
    pub gen_objective: f64,
    /// Latent recovery error `‖z − Q(fake)‖²` (mean over the batch).
    pub info_loss: f64,
}

/// Run the full game against the frozen `model` for `gan.cfg.iters`
/// iterations, sampling image minibatches from `data`. Returns one record
/// per iteration.
pub fn train_gan<T: Scalar>(
    gan: &FilterGan<T>,
    model: &CnnModel<T>,
    data: &Dataset,
) -> Result<Vec<GanIterRecord>> {
    let cfg = &gan.cfg;
    let batch_seed = rng::stream(cfg.seed, "gan-batches").gen::<u64>();
    let mut stream = data.batches(cfg.batch, batch_seed)?;
    let mut zrng = rng::stream(cfg.seed, "gan-z");
    let mut opt_d = gan.d_optimizer();
    let mut opt_g = gan.g_optimizer();
    let mut opt_q = gan.q_optimizer();

    let mut log = Vec::with_capacity(cfg.iters);
    for iteration in 0..cfg.iters {
        let batch = stream.next_batch();
        let images = batch.images.cast::<T>();
        let z = Tensor::<T>::rand_normal(&mut zrng, vec![cfg.batch, cfg.z_dim]);

        let disc_objective = gan.discriminator_step(model, &images, &z, &mut opt_d, iteration)?;
        let (gen_objective, info_loss) =
            gan.generator_step(model, &images, &z, &mut opt_g, iteration)?;
        gan.q_step(model, &images, &z, &mut opt_q, iteration)?;

        log.push(GanIterRecord {
            iteration,
            disc_objective,
            gen_objective,
            info_loss,
        });
    }
    Ok(log)
}

/// Mean `‖z − Q(fake)‖²` over held-out codes and images the game never saw
/// during training: fresh z stream, `n_batches` image batches from `data`.
pub fn q_heldout_mse<T: Scalar>(
    gan: &FilterGan<T>,
    model: &CnnModel<T>,
    data: &Dataset,
    n_batches: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = &gan.cfg;
    let batch_seed = rng::stream(seed, "q-heldout-batches").gen::<u64>();
    let mut stream = data.batches(cfg.batch, batch_seed)?;
    let mut zrng = rng::stream(seed, "q-heldout-z");
    let mut total = 0.0;
    for _ in 0..n_batches {
        let batch = stream.next_batch();
        let images = batch.images.cast::<T>();
        let z = Tensor::<T>::rand_normal(&mut zrng, vec![cfg.batch, cfg.z_dim]);
        let mut tape = Tape::new();
        let zn = tape.constant(z);
        let a_fake = gan.fake_activation(&mut tape, model, &images, zn, ParamReg::Frozen)?;
        let feat = gan.critic.features(&mut tape, a_fake, ParamReg::Frozen)?;
        let z_hat = gan.critic.q_recover(&mut tape, feat, ParamReg::Frozen)?;
        let info = tape.mse(z_hat, zn)?;
        total += tape.value(info).item().as_f64();
    }
    Ok(total / n_batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ArchConfig;
    use crate::mnist::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (CnnModel<f32>, FilterGan<f32>, Dataset) {
        let arch = ArchConfig {
            channels: vec![4, 6],
            pool_after: vec![false, true],
            in_channels: 1,
            classes: 3,
            kernel: 3,
            pad: 1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        let model = CnnModel::build(arch, 7).unwrap();
        let cfg = GanConfig {
            layer: 2,
            z_dim: 5,
            batch: 4,
            iters: 3,
            g_hidden: vec![8, 12],
            d_channels: vec![4, 8],
            seed: 13,
            ..GanConfig::default()
        };
        let gan = FilterGan::build(cfg, &model, (8, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Tensor::<f32>::rand_uniform(&mut rng, vec![12, 1, 8, 8], 0.0, 1.0);
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        let data = Dataset::from_parts(images, labels, Split::Train).unwrap();
        (model, gan, data)
    }

    fn minibatch(gan: &FilterGan<f32>, data: &Dataset) -> (Tensor<f32>, Tensor<f32>) {
        let idx: Vec<usize> = (0..gan.cfg.batch).collect();
        let images = data.gather(&idx).0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::<f32>::rand_normal(&mut rng, vec![gan.cfg.batch, gan.cfg.z_dim]);
        (images, z)
    }

    fn fingerprint(params: &[crate::autodiff::Param<f32>]) -> Vec<Vec<u8>> {
        params
            .iter()
            .map(|p| {
                let mut bytes = Vec::new();
                for v in p.value().data() {
                    crate::autodiff::Scalar::write_le(*v, &mut bytes);
                }
                bytes
            })
            .collect()
    }

    #[test]
    fn generator_emits_banks_of_the_layer_shape() {
        let (model, gan, _) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::<f32>::rand_normal(&mut rng, vec![3, 5]);
        let banks = gan.generator.generate_batch(&z).unwrap();
        assert_eq!(banks.shape(), &[3, 6, 4, 3, 3]);
        assert_eq!(model.arch.filter_shape(2), vec![6, 4, 3, 3]);

        // single-bank path agrees with the batched path and keeps provenance
        let z0 = Tensor::<f32>::new(vec![5], z.data()[..5].to_vec()).unwrap();
        let set = gan.generator.generate(&z0).unwrap();
        assert_eq!(set.weight.shape(), &[6, 4, 3, 3]);
        assert_eq!(set.weight.data(), &banks.data()[..6 * 4 * 9]);
        match &set.provenance {
            crate::cnn::Provenance::Generated { z } => assert_eq!(z.data(), z0.data()),
            other => panic!("wrong provenance {other:?}"),
        }
    }

    #[test]
    fn critic_trunk_adapts_kernels_to_extent_parity() {
        let (_, gan, _) = tiny_setup();
        // layer-2 activations are [6, 4, 4]: even extent 4 → k=4 → 2,
        // then even extent 2 → k=4 → 1
        assert_eq!(gan.critic.input_shape, vec![6, 4, 4]);
        assert_eq!(gan.critic.trunk[0].weight.value().shape(), &[4, 6, 4, 4]);
        assert_eq!(gan.critic.trunk[1].weight.value().shape(), &[8, 4, 4, 4]);
        assert_eq!(gan.critic.flat_dim, 8);

        // odd extents pick kernel 3: a 7x7 input stays exactly tileable
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let critic =
            DiscriminatorQ::<f32>::build(vec![6, 7, 7], &[4, 8], 5, 0.2, &mut rng).unwrap();
        assert_eq!(critic.trunk[0].weight.value().shape(), &[4, 6, 3, 3]);
        // 7 → 4 (even) → k=4 → 2
        assert_eq!(critic.trunk[1].weight.value().shape(), &[8, 4, 4, 4]);
        assert_eq!(critic.flat_dim, 8 * 2 * 2);
    }

    #[test]
    fn critic_heads_have_the_right_shapes() {
        let (model, gan, data) = tiny_setup();
        let (images, _) = minibatch(&gan, &data);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let act = model
            .forward_to_layer(&mut tape, x, 2, BnMode::Static, ParamReg::Frozen)
            .unwrap();
        let feat = gan.critic.features(&mut tape, act, ParamReg::Frozen).unwrap();
        assert_eq!(tape.shape(feat), &[4, 8]);
        let p = gan.critic.d_prob(&mut tape, feat, ParamReg::Frozen).unwrap();
        assert_eq!(tape.shape(p), &[4, 1]);
        assert!(tape.value(p).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let z_hat = gan.critic.q_recover(&mut tape, feat, ParamReg::Frozen).unwrap();
        assert_eq!(tape.shape(z_hat), &[4, 5]);
    }

    #[test]
    fn each_step_updates_exactly_its_own_parameters() {
        let (model, gan, data) = tiny_setup();
        let (images, z) = minibatch(&gan, &data);
        let mut opt_d = gan.d_optimizer();
        let mut opt_g = gan.g_optimizer();
        let mut opt_q = gan.q_optimizer();

        let cnn_before = model.state_fingerprint();
        let g_params = gan.generator.params();
        let trunk = gan.critic.trunk_params();
        let d_head = gan.critic.d_params();
        let q_head = gan.critic.q_params();

        let (g0, t0, d0, q0) = (
            fingerprint(&g_params),
            fingerprint(&trunk),
            fingerprint(&d_head),
            fingerprint(&q_head),
        );
        gan.discriminator_step(&model, &images, &z, &mut opt_d, 0).unwrap();
        assert_eq!(fingerprint(&g_params), g0, "D step touched the generator");
        assert_eq!(fingerprint(&q_head), q0, "D step touched the Q head");
        assert_ne!(fingerprint(&trunk), t0, "D step left the trunk untouched");
        assert_ne!(fingerprint(&d_head), d0, "D step left the D head untouched");

        let (t1, d1, q1) = (fingerprint(&trunk), fingerprint(&d_head), fingerprint(&q_head));
        gan.generator_step(&model, &images, &z, &mut opt_g, 0).unwrap();
        assert_ne!(fingerprint(&g_params), g0, "G step left the generator untouched");
        assert_eq!(fingerprint(&trunk), t1, "G step touched the trunk");
        assert_eq!(fingerprint(&d_head), d1, "G step touched the D head");
        assert_eq!(fingerprint(&q_head), q1, "G step touched the Q head");

        let g2 = fingerprint(&g_params);
        gan.q_step(&model, &images, &z, &mut opt_q, 0).unwrap();
        assert_eq!(fingerprint(&g_params), g2, "Q step touched the generator");
        assert_eq!(fingerprint(&d_head), d1, "Q step touched the D head");
        assert_ne!(fingerprint(&q_head), q1, "Q step left the Q head untouched");

        assert_eq!(model.state_fingerprint(), cnn_before, "the game mutated the CNN");
    }

    #[test]
    fn single_steps_descend_their_objectives_on_a_fixed_batch() {
        let (model, gan, data) = tiny_setup();
        let (images, z) = minibatch(&gan, &data);

        let mut opt_d = gan.d_optimizer();
        let before = gan.discriminator_step(&model, &images, &z, &mut opt_d, 0).unwrap();
        let after = gan.discriminator_step(&model, &images, &z, &mut opt_d, 1).unwrap();
        assert!(after < before, "D objective {before} -> {after}");

        let mut opt_q = gan.q_optimizer();
        let before = gan.q_step(&model, &images, &z, &mut opt_q, 0).unwrap();
        let after = gan.q_step(&model, &images, &z, &mut opt_q, 1).unwrap();
        assert!(after < before, "Q objective {before} -> {after}");
    }

    #[test]
    fn train_gan_logs_every_iteration_and_freezes_the_cnn() {
        let (model, gan, data) = tiny_setup();
        let before = model.state_fingerprint();
        let log = train_gan(&gan, &model, &data).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].iteration, 0);
        assert_eq!(log[2].iteration, 2);
        assert!(log.iter().all(|r| r.disc_objective.is_finite()
            && r.gen_objective.is_finite()
            && r.info_loss.is_finite()));
        assert_eq!(model.state_fingerprint(), before);

        let mse = q_heldout_mse(&gan, &model, &data, 2, 99).unwrap();
        assert!(mse.is_finite() && mse > 0.0);
    }

    #[test]
    fn mixed_parity_extents_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = DiscriminatorQ::<f32>::build(vec![4, 7, 8], &[4], 3, 0.2, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.ivf");
        let (model, gan, data) = tiny_setup();
        train_gan(&gan, &model, &data).unwrap(); // move off the init point

        gan.save(&path).unwrap();
        let loaded = FilterGan::<f32>::load(&path, &model).unwrap();

        assert_eq!(loaded.cfg.layer, gan.cfg.layer);
        assert_eq!(loaded.cfg.z_dim, gan.cfg.z_dim);
        assert_eq!(loaded.cfg.g_hidden, gan.cfg.g_hidden);
        assert_eq!(loaded.cfg.seed, gan.cfg.seed);
        assert_eq!(loaded.input_hw, gan.input_hw);

        let (a, b) = (gan.params(), loaded.params());
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.name(), q.name());
            assert_eq!(p.value().data(), q.value().data(), "{} differs", p.name());
        }

        // the rebuilt generator emits the same bank for the same code
        let z = Tensor::new(vec![gan.cfg.z_dim], vec![0.3; gan.cfg.z_dim]).unwrap();
        let x = gan.generator.generate(&z).unwrap().weight;
        let y = loaded.generator.generate(&z).unwrap().weight;
        assert_eq!(x.data(), y.data());
    }
}
