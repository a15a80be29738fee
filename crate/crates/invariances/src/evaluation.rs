//! Quantitative generator assessment: filter-averaged accuracy with tail
//! retraining, diversity metrics, and an MDS map of filter space.
//!
//! The averaging test asks whether the generator's *mean* filter bank is as
//! good as the real one: substitute layer ℓ with the average of several
//! generated banks, retrain everything after ℓ, and compare test accuracy.
//! The diversity report detects generator collapse (all codes mapping to
//! one bank), and the MDS embedding places every per-channel filter slice —
//! real and generated — in the plane for visual inspection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, RmsProp, RmsPropConfig, Scalar, Tape, Tensor};
use crate::cnn::{count_correct, BnMode, CnnModel, EpochRecord, ParamReg, WeightNode};
use crate::error::{Error, Result};
use crate::filtergan::Generator;
use crate::mds::{classical_mds, MdsEmbedding};
use crate::mnist::Dataset;
use crate::rng;

/// Layer-ℓ post-block activation where the conv output is the *arithmetic
/// mean* of the substituted convs over `filters` (bias added once; batch
/// norm, relu and pooling applied to the mean). With one bank this is
/// exactly the plain substituted forward. Prefix and block parameters stay
/// frozen; `mode` governs the block's batch norm.
pub fn averaged_substituted_activation<T: Scalar>(
    model: &CnnModel<T>,
    tape: &mut Tape<T>,
    x: NodeId,
    layer: usize,
    filters: &[Tensor<T>],
    mode: BnMode,
) -> Result<NodeId> {
    if filters.is_empty() {
        return Err(Error::invalid("averaged_substituted_activation", "need >= 1 filter bank"));
    }
    let expected = model.arch.filter_shape(layer);
    for f in filters {
        if f.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "averaged_substituted_activation",
                lhs: f.shape().to_vec(),
                rhs: expected,
            });
        }
    }
    let mut act = x;
    for i in 0..layer - 1 {
        act = model.block_forward(tape, i, act, WeightNode::Own, mode, ParamReg::Frozen)?;
    }
    // mean of (conv_i + b) = mean(conv_i) + b: the shared bias rides along
    let mut sum = None;
    for f in filters {
        let w = tape.constant(f.clone());
        let conv = model.block_conv(tape, layer - 1, act, WeightNode::Shared(w), ParamReg::Frozen)?;
        sum = Some(match sum {
            None => conv,
            Some(s) => tape.add(s, conv)?,
        });
    }
    let mean = tape.scale(sum.unwrap(), T::from_f64(1.0 / filters.len() as f64));
    model.block_tail(tape, layer - 1, mean, mode, ParamReg::Frozen)
}

/// The frozen prefix + averaged generated filters, with a freshly retrained
/// tail: the evaluation object for filter-averaged accuracy.
pub struct AveragedHead<T: Scalar> {
    /// Blocks `1..=layer` shared with the original model; blocks beyond,
    /// and the head, retrained.
    pub tail: CnnModel<T>,
    pub layer: usize,
    /// The fixed latent draws, one row each.
    pub z_draws: Tensor<T>,
    /// The generated banks `G(z_i)`, fixed for the head's lifetime.
    pub filters: Vec<Tensor<T>>,
}

impl<T: Scalar> AveragedHead<T> {
    /// Logits under the averaged substitution (frozen prefix, `reg`
    /// applying to the tail blocks and head only).
    pub fn forward(
        &self,
        model: &CnnModel<T>,
        tape: &mut Tape<T>,
        x: NodeId,
        tail_mode: BnMode,
        reg: ParamReg,
    ) -> Result<NodeId> {
        let avg =
            averaged_substituted_activation(model, tape, x, self.layer, &self.filters, BnMode::Eval)?;
        self.tail.forward_from_layer(tape, avg, self.layer, tail_mode, reg)
    }

    /// Argmax accuracy of the averaged pipeline, eval mode.
    pub fn evaluate(&self, model: &CnnModel<T>, data: &Dataset, batch: usize) -> Result<f64> {
        let n = data.len();
        if n == 0 {
            return Err(Error::invalid("AveragedHead::evaluate", "empty dataset"));
        }
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let (images, labels) = data.gather(&indices);
            let mut tape = Tape::new();
            let x = tape.constant(images.cast::<T>());
            let logits = self.forward(model, &mut tape, x, BnMode::Eval, ParamReg::Frozen)?;
            correct += count_correct(tape.value(logits), &labels);
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }
}

/// Tail-retraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Number of latent draws averaged over.
    pub draws: usize,
}

impl Default for TailConfig {
    fn default() -> Self {
        TailConfig {
            epochs: 3,
            batch: 128,
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            draws: 10,
        }
    }
}

/// Draw `cfg.draws` codes, fix the generated banks, re-initialize blocks
/// `layer+1..` plus the head, and train them on the averaged substituted
/// activations. The original model and generator are never modified.
pub fn retrain_tail<T: Scalar>(
    model: &CnnModel<T>,
    generator: &Generator<T>,
    layer: usize,
    data: &Dataset,
    cfg: &TailConfig,
) -> Result<(AveragedHead<T>, Vec<EpochRecord>)> {
    if cfg.draws == 0 {
        return Err(Error::invalid("retrain_tail", "need >= 1 draw"));
    }
    let mut zrng = rng::stream(cfg.seed, "averaging-z");
    let z_draws = Tensor::<T>::rand_normal(&mut zrng, vec![cfg.draws, generator.z_dim]);
    let filters: Vec<Tensor<T>> = (0..cfg.draws)
        .map(|i| {
            let row = Tensor::new(
                vec![generator.z_dim],
                z_draws.data()[i * generator.z_dim..(i + 1) * generator.z_dim].to_vec(),
            )?;
            Ok(generator.generate(&row)?.weight)
        })
        .collect::<Result<_>>()?;
    let head = AveragedHead {
        tail: model.reinitialized_tail(layer, cfg.seed)?,
        layer,
        z_draws,
        filters,
    };
    let log = train_averaged_tail(model, &head, data, cfg)?;
    Ok((head, log))
}

fn train_averaged_tail<T: Scalar>(
    model: &CnnModel<T>,
    head: &AveragedHead<T>,
    data: &Dataset,
    cfg: &TailConfig,
) -> Result<Vec<EpochRecord>> {
    let batch_seed = {
        use rand::Rng as _;
        rng::stream(cfg.seed, "tail-batches").gen::<u64>()
    };
    let mut stream = data.batches(cfg.batch, batch_seed)?;
    let mut opt = RmsProp::new(
        head.tail.tail_params(head.layer)?,
        RmsPropConfig {
            lr: cfg.lr,
            rho: cfg.rho,
            eps: cfg.eps,
        },
    );
    let per_epoch = stream.batches_per_epoch();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let batch = stream.next_batch();
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.cast::<T>());
            let logits = head.forward(model, &mut tape, x, BnMode::Train, ParamReg::Trainable)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            tape.value(loss).ensure_finite("tail retraining loss", step)?;
            loss_sum += tape.value(loss).item().as_f64();
            tape.backward(loss)?;
            opt.step()?;
            opt.zero_grads();
            step += 1;
        }
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            subset_accuracy: f64::NAN,
        });
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// diversity
// ---------------------------------------------------------------------------

/// Collapse diagnostics over freshly drawn generated banks.
///
/// Distances are Euclidean between whole flattened banks; the reference
/// scale `mean_real_filter_norm` is the mean L2 norm of the real bank's
/// per-output-channel slices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    pub draws: usize,
    pub mean_pairwise_generated: f64,
    pub mean_distance_to_real: f64,
    pub mean_real_filter_norm: f64,
    /// `mean_pairwise_generated / mean_real_filter_norm`; a healthy
    /// generator clears 0.1 easily, a collapsed one reads ~0.
    pub diversity_ratio: f64,
}

/// Sample `draws` codes from `(seed, "diversity-z")` and measure bank
/// spread. Deterministic given the seed.
pub fn diversity_report<T: Scalar>(
    generator: &Generator<T>,
    real: &Tensor<T>,
    draws: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if draws < 2 {
        return Err(Error::invalid("diversity_report", "need >= 2 draws"));
    }
    let mut zrng = rng::stream(seed, "diversity-z");
    let z = Tensor::<T>::rand_normal(&mut zrng, vec![draws, generator.z_dim]);
    let banks = generator.generate_batch(&z)?;
    let bank_len: usize = real.data().len();
    let bank = |i: usize| &banks.data()[i * bank_len..(i + 1) * bank_len];

    let dist = |a: &[T], b: &[T]| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };

    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..draws {
        for j in i + 1..draws {
            pair_sum += dist(bank(i), bank(j));
            pairs += 1;
        }
    }
    let real_sum: f64 = (0..draws).map(|i| dist(bank(i), real.data())).sum();

    let c_out = real.shape()[0];
    let slice_len = bank_len / c_out;
    let mean_real_filter_norm = (0..c_out)
        .map(|k| {
            real.data()[k * slice_len..(k + 1) * slice_len]
                .iter()
                .map(|&v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / c_out as f64;

    let mean_pairwise_generated = pair_sum / pairs as f64;
    Ok(DiversityReport {
        draws,
        mean_pairwise_generated,
        mean_distance_to_real: real_sum / draws as f64,
        mean_real_filter_norm,
        diversity_ratio: mean_pairwise_generated / mean_real_filter_norm,
    })
}

// ---------------------------------------------------------------------------
// filter-space embedding
// ---------------------------------------------------------------------------

/// Per-output-channel filter slices from the real bank (draw 0) and each
/// generated bank (draws 1..), flattened to f64 vectors with their labels.
pub struct FilterPoints {
    pub points: Vec<Vec<f64>>,
    /// Output-channel index of each point.
    pub channel: Vec<usize>,
    /// 0 for the real bank, 1.. for generated draws.
    pub draw: Vec<usize>,
}

/// Flatten banks into labelled per-channel points. All banks must share
/// the real bank's shape.
pub fn filter_points<T: Scalar>(real: &Tensor<T>, generated: &[Tensor<T>]) -> Result<FilterPoints> {
    let shape = real.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid("filter_points", "banks must be rank 4"));
    }
    for g in generated {
        if g.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "filter_points",
                lhs: g.shape().to_vec(),
                rhs: shape,
            });
        }
    }
    let c_out = shape[0];
    let slice_len: usize = shape[1..].iter().product();
    let mut points = Vec::with_capacity(c_out * (generated.len() + 1));
    let mut channel = Vec::with_capacity(points.capacity());
    let mut draw = Vec::with_capacity(points.capacity());
    for (d, bank) in std::iter::once(real).chain(generated.iter()).enumerate() {
        for k in 0..c_out {
            points.push(
                bank.data()[k * slice_len..(k + 1) * slice_len]
                    .iter()
                    .map(|&v| v.as_f64())
                    .collect(),
            );
            channel.push(k);
            draw.push(d);
        }
    }
    Ok(FilterPoints {
        points,
        channel,
        draw,
    })
}

/// Full symmetric Euclidean distance matrix (`n × n` row-major) between
/// points of equal dimension.
pub fn pairwise_distances(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("pairwise_distances", "need >= 2 points"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("pairwise_distances", "points differ in dimension"));
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    Ok(d)
}

/// A labelled 2-D MDS embedding of filter slices.
pub struct FilterEmbedding {
    pub embedding: MdsEmbedding,
    pub channel: Vec<usize>,
    pub draw: Vec<usize>,
}

/// Embed the real bank plus `generated` banks into the plane: one point
/// per (output channel, draw), real bank as draw 0.
pub fn embed_filters<T: Scalar>(
    real: &Tensor<T>,
    generated: &[Tensor<T>],
) -> Result<FilterEmbedding> {
    let pts = filter_points(real, generated)?;
    let d = pairwise_distances(&pts.points)?;
    let embedding = classical_mds(&d, pts.points.len(), 2)?;
    Ok(FilterEmbedding {
        embedding,
        channel: pts.channel,
        draw: pts.draw,
    })
}
