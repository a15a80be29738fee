//! Making invariances visible: activation profiles, latent grids, and
//! image inversion under a natural-image prior.
//!
//! For a reference image `x` and latent code `z`, the *activation profile*
//! is the layer-ℓ activation of `x` under the generated filters `G(z)`.
//! Moving `z` across a small lattice in two latent coordinates and, at each
//! lattice point `z_k`, searching for the image whose profile under `G(z_k)`
//! matches the reference profile, yields a grid of reconstructions. Reading
//! the grid shows the *transformation* the classifier is invariant to:
//! each cell is a different input the network cannot tell apart from `x`.
//!
//! The search is plain projected gradient descent on pixels (everything
//! else frozen, batch norm on running statistics), regularized by
//! `Ψ(x) = λ_α·Σ|x_p|^α + λ_TV·Σ((∇_h x)² + (∇_v x)²)^{β/2}` so minima
//! look like images rather than adversarial noise. Warm-starting at `x`
//! makes the center cell's activation term exactly zero before the first
//! step. Grids render as PGM/PNG montages with the untouched original in
//! the middle cell.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Op, Param, Scalar, Tape, Tensor};
use crate::cnn::{BnMode, CnnModel, FilterSet};
use crate::error::{Error, Result};
use crate::filtergan::Generator;

/// Weights and exponents of the natural-image prior Ψ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Exponent of the pixel-norm term (must be > 1).
    pub alpha: f64,
    /// Exponent applied to the squared gradient magnitude (β/2 power).
    pub beta: f64,
    pub lambda_alpha: f64,
    pub lambda_tv: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            alpha: 6.0,
            beta: 2.0,
            lambda_alpha: 1e-4,
            lambda_tv: 1e-2,
        }
    }
}

impl PriorConfig {
    fn validate(&self) -> Result<()> {
        if self.alpha <= 1.0 || self.beta < 1.0 || self.lambda_alpha < 0.0 || self.lambda_tv < 0.0
        {
            return Err(Error::invalid(
                "PriorConfig",
                "need alpha > 1, beta >= 1 and non-negative weights",
            ));
        }
        Ok(())
    }
}

/// Pixel-space gradient descent settings for profile inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub step_size: f64,
    pub prior: PriorConfig,
    /// Consecutive objective increases tolerated before declaring
    /// divergence and returning the best image seen.
    pub divergence_patience: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 200,
            step_size: 0.05,
            prior: PriorConfig::default(),
            divergence_patience: 50,
        }
    }
}

/// Latent lattice geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    /// Half-width ξ of the offset range along each chosen coordinate.
    pub xi: f64,
    /// Cells per side (odd).
    pub side: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { xi: 2.0, side: 5 }
    }
}

// ---------------------------------------------------------------------------
// natural-image prior as a differentiable op
// ---------------------------------------------------------------------------

/// Ψ value and its pixel gradient, computed in f64. `x` is `[n, c, h, w]`;
/// the prior sums over every image and channel. Horizontal/vertical forward
/// differences are taken where the neighbor exists.
fn prior_value_grad<T: Scalar>(x: &Tensor<T>, cfg: &PriorConfig) -> (f64, Tensor<T>) {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.data().len() / (h * w);
    let mut value = 0.0;
    let mut grad = vec![0.0f64; x.data().len()];

    for p in 0..planes {
        let base = p * h * w;
        let at = |r: usize, c: usize| x.data()[base + r * w + c].as_f64();
        for r in 0..h {
            for c in 0..w {
                let v = at(r, c);
                value += cfg.lambda_alpha * v.abs().powf(cfg.alpha);
                let sgn = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[base + r * w + c] +=
                    cfg.lambda_alpha * cfg.alpha * v.abs().powf(cfg.alpha - 1.0) * sgn;

                let gh = if c + 1 < w { at(r, c + 1) - v } else { 0.0 };
                let gv = if r + 1 < h { at(r + 1, c) - v } else { 0.0 };
                let e = gh * gh + gv * gv;
                if e > 0.0 {
                    value += cfg.lambda_tv * e.powf(cfg.beta / 2.0);
                    let factor = cfg.lambda_tv * cfg.beta * e.powf(cfg.beta / 2.0 - 1.0);
                    grad[base + r * w + c] -= factor * (gh + gv);
                    if c + 1 < w {
                        grad[base + r * w + c + 1] += factor * gh;
                    }
                    if r + 1 < h {
                        grad[base + (r + 1) * w + c] += factor * gv;
                    }
                }
            }
        }
    }
    let grad = Tensor::new(
        shape.to_vec(),
        grad.into_iter().map(T::from_f64).collect(),
    )
    .expect("gradient matches input shape");
    (value, grad)
}

struct PriorOp {
    cfg: PriorConfig,
}

impl<T: Scalar> Op<T> for PriorOp {
    fn name(&self) -> &'static str {
        "image_prior"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let upstream = grad.item();
        let (_, dx) = prior_value_grad(inputs[0], &self.cfg);
        Ok(vec![Some(dx.map(|g| g * upstream))])
    }
}

impl<T: Scalar> Tape<T> {
    /// Natural-image prior `Ψ(x)` as a scalar node. `x` must be at least
    /// rank 2 (trailing dimensions are height and width).
    pub fn image_prior(&mut self, x: NodeId, cfg: &PriorConfig) -> Result<NodeId> {
        cfg.validate()?;
        if self.shape(x).len() < 2 {
            return Err(Error::invalid("image_prior", "input must have spatial dims"));
        }
        let (value, _) = prior_value_grad(self.value(x), cfg);
        Ok(self.push_op(
            Tensor::scalar(T::from_f64(value)),
            vec![x],
            Box::new(PriorOp { cfg: cfg.clone() }),
        ))
    }
}

// ---------------------------------------------------------------------------
// activation profiles and latent grids
// ---------------------------------------------------------------------------

/// The layer-ℓ activation of one image under generated filters — the object
/// the inversion matches.
#[derive(Debug, Clone)]
pub struct ActivationProfile<T: Scalar> {
    pub a: Tensor<T>,
    /// The latent code the filters came from.
    pub z: Tensor<T>,
}

/// Profile of the single image `x` given code `z`: the post-block layer-ℓ
/// activation under `G(z)`, eval-mode batch norm. Deterministic: equal
/// `(x, z)` give bitwise-equal profiles.
pub fn activation_profile<T: Scalar>(
    model: &CnnModel<T>,
    generator: &Generator<T>,
    layer: usize,
    x: &Tensor<T>,
    z: &Tensor<T>,
) -> Result<ActivationProfile<T>> {
    if x.shape().len() != 4 || x.shape()[0] != 1 {
        return Err(Error::invalid(
            "activation_profile",
            format!("expected one image [1, c, h, w], got {:?}", x.shape()),
        ));
    }
    let filters = generator.generate(z)?;
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let act = model.forward_with_filters(&mut tape, xn, layer, &filters, BnMode::Eval)?;
    Ok(ActivationProfile {
        a: tape.value(act).clone(),
        z: z.clone(),
    })
}

/// An s×s lattice of latent codes: coordinates `dim_i`, `dim_j` offset by a
/// uniform grid over `[−ξ, ξ]²` around the center code, all other
/// coordinates untouched. Row-major; the middle entry *is* the center code.
#[derive(Debug, Clone)]
pub struct LatentGrid<T: Scalar> {
    pub center: Tensor<T>,
    pub dim_i: usize,
    pub dim_j: usize,
    pub xi: f64,
    pub side: usize,
    pub entries: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentGrid<T> {
    /// Row-major index of the center cell.
    pub fn center_index(&self) -> usize {
        (self.side * self.side) / 2
    }
}

/// Build the lattice. `side` must be odd so a center cell exists; offsets
/// are constructed symmetrically so the center offset is exactly zero and
/// the center entry equals `z` bit for bit.
pub fn build_latent_grid<T: Scalar>(
    z: &Tensor<T>,
    dim_i: usize,
    dim_j: usize,
    xi: f64,
    side: usize,
) -> Result<LatentGrid<T>> {
    let z_dim = z.data().len();
    if z.shape().len() != 1 {
        return Err(Error::invalid("build_latent_grid", "z must be rank 1"));
    }
    if dim_i == dim_j {
        return Err(Error::invalid("build_latent_grid", "grid dimensions must differ"));
    }
    if dim_i >= z_dim || dim_j >= z_dim {
        return Err(Error::invalid(
            "build_latent_grid",
            format!("dims ({dim_i}, {dim_j}) out of range for z_dim {z_dim}"),
        ));
    }
    if side == 0 || side % 2 == 0 {
        return Err(Error::invalid("build_latent_grid", "side must be odd"));
    }
    if xi <= 0.0 {
        return Err(Error::invalid("build_latent_grid", "xi must be positive"));
    }
    let mid = (side - 1) / 2;
    let offset = |t: usize| -> f64 {
        if side == 1 {
            0.0
        } else {
            (t as f64 - mid as f64) * (xi / mid as f64)
        }
    };
    let mut entries = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let mut e = z.clone();
            let (oi, oj) = (offset(r), offset(c));
            if oi != 0.0 {
                e.data_mut()[dim_i] = e.data()[dim_i] + T::from_f64(oi);
            }
            if oj != 0.0 {
                e.data_mut()[dim_j] = e.data()[dim_j] + T::from_f64(oj);
            }
            entries.push(e);
        }
    }
    Ok(LatentGrid {
        center: z.clone(),
        dim_i,
        dim_j,
        xi,
        side,
        entries,
    })
}

// ---------------------------------------------------------------------------
// inversion
// ---------------------------------------------------------------------------

/// One recorded step of an inversion, measured before that step's update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionStepRecord {
    pub step: usize,
    /// `‖a(x'|z_k) − target‖²`.
    pub activation_term: f64,
    /// `Ψ(x')`.
    pub prior_term: f64,
    pub objective: f64,
    /// Running minimum of the objective; non-increasing by construction.
    pub best_objective: f64,
}

/// Outcome of one cell's inversion. `activation_term` and `prior_term` are
/// measured at the returned image.
#[derive(Debug, Clone)]
pub struct InversionResult<T: Scalar> {
    pub image: Tensor<T>,
    pub activation_term: f64,
    pub prior_term: f64,
    /// The objective rose `divergence_patience` steps in a row (or left the
    /// reals); `image` is then the best iterate instead of the last.
    pub diverged: bool,
    pub trajectory: Vec<InversionStepRecord>,
}

fn clamp01<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else if v > T::one() {
        T::one()
    } else {
        v
    }
}

/// Activation and prior terms of `image` against `target` (no gradients).
fn measure_terms<T: Scalar>(
    model: &CnnModel<T>,
    layer: usize,
    filters: &FilterSet<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    prior: &PriorConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let xn = tape.constant(image.clone());
    let act = model.forward_with_filters(&mut tape, xn, layer, filters, BnMode::Eval)?;
    let tn = tape.constant(target.clone());
    let act_term = tape.mse(act, tn)?;
    let prior_term = tape.image_prior(xn, prior)?;
    Ok((
        tape.value(act_term).item().as_f64(),
        tape.value(prior_term).item().as_f64(),
    ))
}

/// Invert one cell: projected gradient descent on pixels, warm-started at
/// `x_init`, minimizing `‖a(x'|z_k) − target‖² + Ψ(x')` with every network
/// parameter frozen. Pixels are clamped to `[0, 1]` after each step.
pub fn invert_to_profile<T: Scalar>(
    model: &CnnModel<T>,
    generator: &Generator<T>,
    layer: usize,
    x_init: &Tensor<T>,
    target: &ActivationProfile<T>,
    z_k: &Tensor<T>,
    cfg: &InversionConfig,
) -> Result<InversionResult<T>> {
    let filters = generator.generate(z_k)?;
    invert_with_filters(model, layer, &filters, x_init, &target.a, cfg)
}

/// [`invert_to_profile`] with the filter bank already generated.
pub fn invert_with_filters<T: Scalar>(
    model: &CnnModel<T>,
    layer: usize,
    filters: &FilterSet<T>,
    x_init: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &InversionConfig,
) -> Result<InversionResult<T>> {
    cfg.prior.validate()?;
    let pixels = Param::new("pixels", x_init.clone());
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut best_objective = f64::INFINITY;
    let mut best_image = x_init.clone();
    let mut prev_objective = f64::INFINITY;
    let mut rising = 0usize;
    let mut diverged = false;
    let eta = T::from_f64(cfg.step_size);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let xn = tape.param(&pixels);
        let act = model.forward_with_filters(&mut tape, xn, layer, filters, BnMode::Eval)?;
        let tn = tape.constant(target.clone());
        let act_term = tape.mse(act, tn)?;
        let prior_term = tape.image_prior(xn, &cfg.prior)?;
        let objective = tape.add(act_term, prior_term)?;

        let a_v = tape.value(act_term).item().as_f64();
        let p_v = tape.value(prior_term).item().as_f64();
        let o_v = a_v + p_v;
        if !o_v.is_finite() {
            diverged = true;
            break;
        }
        if o_v < best_objective {
            best_objective = o_v;
            best_image = pixels.value();
        }
        trajectory.push(InversionStepRecord {
            step,
            activation_term: a_v,
            prior_term: p_v,
            objective: o_v,
            best_objective,
        });
        if o_v > prev_objective {
            rising += 1;
            if rising >= cfg.divergence_patience {
                diverged = true;
                break;
            }
        } else {
            rising = 0;
        }
        prev_objective = o_v;

        tape.backward(objective)?;
        pixels.update(|value, grad| {
            let grad = grad.expect("pixel leaf received no gradient");
            for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v = clamp01(*v - eta * *g);
            }
        });
        pixels.zero_grad();
    }

    let image = if diverged { best_image } else { pixels.value() };
    let (activation_term, prior_term) =
        measure_terms(model, layer, filters, &image, target, &cfg.prior)?;
    Ok(InversionResult {
        image,
        activation_term,
        prior_term,
        diverged,
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// grid traversal
// ---------------------------------------------------------------------------

/// A full traversal: the lattice, the reference image, and one inversion
/// per cell (row-major, center included).
pub struct GridTraversal<T: Scalar> {
    pub grid: LatentGrid<T>,
    pub original: Tensor<T>,
    pub cells: Vec<InversionResult<T>>,
}

impl<T: Scalar> GridTraversal<T> {
    /// Cell images for rendering, with the untouched original in the
    /// center cell.
    pub fn montage_images(&self) -> Vec<Tensor<T>> {
        let center = self.grid.center_index();
        self.cells
            .iter()
            .enumerate()
            .map(|(k, cell)| {
                if k == center {
                    self.original.clone()
                } else {
                    cell.image.clone()
                }
            })
            .collect()
    }
}

/// Build the grid around `z`, compute the reference profile of `x` given
/// `z`, and invert every cell against it.
pub fn traverse_grid<T: Scalar>(
    model: &CnnModel<T>,
    generator: &Generator<T>,
    layer: usize,
    x: &Tensor<T>,
    z: &Tensor<T>,
    dim_i: usize,
    dim_j: usize,
    grid_cfg: &GridConfig,
    inv_cfg: &InversionConfig,
) -> Result<GridTraversal<T>> {
    let target = activation_profile(model, generator, layer, x, z)?;
    let grid = build_latent_grid(z, dim_i, dim_j, grid_cfg.xi, grid_cfg.side)?;
    let cells = grid
        .entries
        .iter()
        .map(|z_k| invert_to_profile(model, generator, layer, x, &target, z_k, inv_cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridTraversal {
        grid,
        original: x.clone(),
        cells,
    })
}

/// Mean L2 distance between images in 4-adjacent cells vs all other
/// distinct pairs. A traversal that encodes a continuous transformation has
/// the first strictly below the second.
pub fn traversal_smoothness<T: Scalar>(images: &[Tensor<T>], side: usize) -> Result<(f64, f64)> {
    if images.len() != side * side || side < 2 {
        return Err(Error::invalid(
            "traversal_smoothness",
            "need side >= 2 and side^2 images",
        ));
    }
    let (mut adj_sum, mut adj_n) = (0.0, 0usize);
    let (mut far_sum, mut far_n) = (0.0, 0usize);
    for a in 0..images.len() {
        for b in a + 1..images.len() {
            let (ra, ca) = (a / side, a % side);
            let (rb, cb) = (b / side, b % side);
            let dist = images[a].sq_distance(&images[b]).sqrt();
            if ra.abs_diff(rb) + ca.abs_diff(cb) == 1 {
                adj_sum += dist;
                adj_n += 1;
            } else {
                far_sum += dist;
                far_n += 1;
            }
        }
    }
    Ok((adj_sum / adj_n as f64, far_sum / far_n as f64))
}

// ---------------------------------------------------------------------------
// montage rendering
// ---------------------------------------------------------------------------

/// Width of the white separator between montage cells, in pixels.
pub const SEPARATOR_PX: usize = 2;

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Assemble `side`×`side` single-channel images (row-major, identical
/// shapes, values in `[0, 1]`) into one grayscale byte grid with 2-pixel
/// white separators. Returns `(bytes, width, height)`.
pub fn montage_bytes<T: Scalar>(
    images: &[Tensor<T>],
    side: usize,
) -> Result<(Vec<u8>, usize, usize)> {
    if side == 0 || images.len() != side * side {
        return Err(Error::invalid(
            "montage_bytes",
            format!("expected {} images, got {}", side * side, images.len()),
        ));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() < 2 || shape.iter().rev().skip(2).any(|&d| d != 1) {
        return Err(Error::invalid(
            "montage_bytes",
            format!("images must be single-channel [.., h, w], got {shape:?}"),
        ));
    }
    if images.iter().any(|im| im.shape() != shape) {
        return Err(Error::invalid("montage_bytes", "images differ in shape"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let out_h = side * h + (side - 1) * SEPARATOR_PX;
    let out_w = side * w + (side - 1) * SEPARATOR_PX;
    let mut bytes = vec![255u8; out_h * out_w];
    for (k, image) in images.iter().enumerate() {
        let (gr, gc) = (k / side, k % side);
        let (top, left) = (gr * (h + SEPARATOR_PX), gc * (w + SEPARATOR_PX));
        for r in 0..h {
            for c in 0..w {
                bytes[(top + r) * out_w + left + c] = quantize(image.data()[r * w + c]);
            }
        }
    }
    Ok((bytes, out_w, out_h))
}

/// Write grayscale bytes as a binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, bytes: &[u8], width: usize, height: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write grayscale bytes as a PNG.
pub fn write_png(path: &Path, bytes: &[u8], width: usize, height: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::invalid("write_png", "byte count does not match dimensions"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::invalid("write_png", e.to_string()))?;
    Ok(())
}

/// Render a traversal's images to `pgm_path` (and `png_path` if given).
pub fn render_grid<T: Scalar>(
    images: &[Tensor<T>],
    side: usize,
    pgm_path: &Path,
    png_path: Option<&Path>,
) -> Result<()> {
    let (bytes, w, h) = montage_bytes(images, side)?;
    write_pgm(pgm_path, &bytes, w, h)?;
    if let Some(p) = png_path {
        write_png(p, &bytes, w, h)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::cnn::{ArchConfig, ParamReg};
    use crate::filtergan::{FilterGan, GanConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (CnnModel<f32>, Generator<f32>, usize) {
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
            g_hidden: vec![8, 12],
            d_channels: vec![4, 8],
            seed: 13,
            ..GanConfig::default()
        };
        let layer = cfg.layer;
        let gan = FilterGan::build(cfg, &model, (8, 8)).unwrap();
        (model, gan.generator, layer)
    }

    fn test_image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&mut rng, vec![1, 1, 8, 8], 0.0, 1.0)
    }

    fn test_z(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_normal(&mut rng, vec![5])
    }

    #[test]
    fn grid_offsets_are_symmetric_and_center_is_exact() {
        let z = test_z(3);
        let grid = build_latent_grid(&z, 1, 3, 1.0, 3).unwrap();
        assert_eq!(grid.entries.len(), 9);
        assert_eq!(grid.center_index(), 4);
        assert_eq!(grid.entries[4].data(), z.data(), "center cell must equal z");
        // s=3, xi=1 → offsets {-1, 0, 1} applied to dims 1 and 3
        let corner = &grid.entries[0];
        assert_eq!(corner.data()[1], z.data()[1] - 1.0);
        assert_eq!(corner.data()[3], z.data()[3] - 1.0);
        for (k, e) in grid.entries.iter().enumerate() {
            for d in [0, 2, 4] {
                assert_eq!(e.data()[d], z.data()[d], "cell {k} moved dim {d}");
            }
        }
        let single = build_latent_grid(&z, 0, 1, 2.0, 1).unwrap();
        assert_eq!(single.entries.len(), 1);
        assert_eq!(single.entries[0].data(), z.data());
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        let z = test_z(3);
        assert!(build_latent_grid(&z, 2, 2, 1.0, 3).is_err(), "i == j");
        assert!(build_latent_grid(&z, 0, 1, 1.0, 4).is_err(), "even side");
        assert!(build_latent_grid(&z, 0, 9, 1.0, 3).is_err(), "dim out of range");
        assert!(build_latent_grid(&z, 0, 1, 0.0, 3).is_err(), "xi = 0");
    }

    #[test]
    fn prior_matches_a_hand_computation() {
        // 2x2 image [[0,1],[2,4]], alpha=2, beta=2, lambda_alpha=0.5, lambda_tv=0.25:
        // alpha term = 0.5·(0+1+4+16) = 10.5
        // tv term    = 0.25·[((1-0)² + (2-0)²) + (4-1)² + (4-2)²] = 0.25·18 = 4.5
        let cfg = PriorConfig {
            alpha: 2.0,
            beta: 2.0,
            lambda_alpha: 0.5,
            lambda_tv: 0.25,
        };
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let v = tape.image_prior(xn, &cfg).unwrap();
        assert_eq!(tape.value(v).item(), 15.0);
    }

    #[test]
    fn prior_is_zero_at_zero_and_tv_free_on_constants() {
        let cfg = PriorConfig::default();
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let v = tape.image_prior(zero, &cfg).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);

        let constant = tape.constant(Tensor::full(vec![1, 1, 4, 4], 0.5));
        let v = tape.image_prior(constant, &cfg).unwrap();
        let expected = cfg.lambda_alpha * 16.0 * 0.5f64.powf(cfg.alpha);
        assert!((tape.value(v).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let cfg = PriorConfig::default();
        let x = Param::new(
            "x",
            Tensor::<f64>::new(
                vec![1, 1, 3, 3],
                vec![0.2, 0.9, 0.4, -0.3, 0.6, 0.1, 0.8, 0.05, 0.7],
            )
            .unwrap(),
        );
        check_gradients(
            |tape| {
                let xn = tape.param(&x);
                tape.image_prior(xn, &cfg).unwrap()
            },
            &[&x],
            1e-6,
            1e-5,
        )
        .unwrap();
    }

    #[test]
    fn warm_started_center_cell_has_zero_activation_term() {
        let (model, generator, layer) = tiny();
        let x = test_image(1);
        let z = test_z(2);
        let target = activation_profile(&model, &generator, layer, &x, &z).unwrap();
        let cfg = InversionConfig {
            steps: 3,
            step_size: 0.01,
            ..InversionConfig::default()
        };
        let res = invert_to_profile(&model, &generator, layer, &x, &target, &z, &cfg).unwrap();
        assert_eq!(
            res.trajectory[0].activation_term, 0.0,
            "warm start must reproduce the target exactly"
        );
        assert!(!res.diverged);
        assert!(res.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for pair in res.trajectory.windows(2) {
            assert!(pair[1].best_objective <= pair[0].best_objective);
        }
    }

    #[test]
    fn off_center_cells_reduce_their_activation_term() {
        let (model, generator, layer) = tiny();
        let x = test_image(1);
        let z = test_z(2);
        let target = activation_profile(&model, &generator, layer, &x, &z).unwrap();
        let mut z_k = z.clone();
        z_k.data_mut()[0] += 1.0;
        let cfg = InversionConfig {
            steps: 40,
            step_size: 0.05,
            ..InversionConfig::default()
        };
        let res = invert_to_profile(&model, &generator, layer, &x, &target, &z_k, &cfg).unwrap();
        assert!(res.trajectory[0].activation_term > 0.0);
        assert!(
            res.activation_term < res.trajectory[0].activation_term,
            "{} -> {}",
            res.trajectory[0].activation_term,
            res.activation_term
        );
        assert!(res.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn runaway_steps_trip_the_divergence_guard() {
        let (model, generator, layer) = tiny();
        let x = test_image(1);
        let z = test_z(2);
        let target = activation_profile(&model, &generator, layer, &x, &z).unwrap();
        let mut z_k = z.clone();
        z_k.data_mut()[0] += 1.0;
        let cfg = InversionConfig {
            steps: 60,
            step_size: 1e6,
            divergence_patience: 1,
            ..InversionConfig::default()
        };
        let res = invert_to_profile(&model, &generator, layer, &x, &target, &z_k, &cfg).unwrap();
        assert!(res.diverged);
        let best = res
            .trajectory
            .iter()
            .map(|r| r.objective)
            .fold(f64::INFINITY, f64::min);
        let returned = res.activation_term + res.prior_term;
        assert!(
            (returned - best).abs() <= 1e-9 * best.max(1.0),
            "diverged run must return the best iterate ({returned} vs {best})"
        );
    }

    #[test]
    fn traversal_produces_a_full_grid_with_the_original_centered() {
        let (model, generator, layer) = tiny();
        let x = test_image(1);
        let z = test_z(2);
        let cfg = InversionConfig {
            steps: 2,
            step_size: 0.02,
            ..InversionConfig::default()
        };
        let grid_cfg = GridConfig { xi: 1.0, side: 3 };
        let tr =
            traverse_grid(&model, &generator, layer, &x, &z, 0, 1, &grid_cfg, &cfg).unwrap();
        assert_eq!(tr.cells.len(), 9);
        let images = tr.montage_images();
        assert_eq!(images[4].data(), x.data(), "center must be the untouched original");
    }

    #[test]
    fn smoothness_separates_a_ramp_from_far_pairs() {
        let side = 3;
        let images: Vec<Tensor<f32>> = (0..9)
            .map(|k| {
                let v = ((k / 3) + (k % 3)) as f32 / 4.0;
                Tensor::full(vec![1, 1, 2, 2], v)
            })
            .collect();
        let (adj, far) = traversal_smoothness(&images, side).unwrap();
        assert!(adj < far, "adjacent {adj} vs non-adjacent {far}");
    }

    #[test]
    fn montage_layout_and_center_cell_are_exact() {
        let imgs: Vec<Tensor<f32>> = (0..9)
            .map(|k| Tensor::full(vec![1, 1, 4, 4], k as f32 / 10.0))
            .collect();
        let (bytes, w, h) = montage_bytes(&imgs, 3).unwrap();
        assert_eq!((w, h), (3 * 4 + 2 * 2, 3 * 4 + 2 * 2));
        assert_eq!(bytes.len(), w * h);
        // center cell occupies rows/cols 6..10; value 4/10 → 102
        for r in 6..10 {
            for c in 6..10 {
                assert_eq!(bytes[r * w + c], 102);
            }
        }
        // separator pixel is white
        assert_eq!(bytes[4 * w], 255);

        let single = montage_bytes(&imgs[..1], 1).unwrap();
        assert_eq!((single.1, single.2), (4, 4));
        assert_eq!(single.0, vec![0u8; 16]);

        assert!(montage_bytes(&imgs[..5], 3).is_err(), "count mismatch");
    }

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Tensor<f32>> =
            (0..4).map(|k| Tensor::full(vec![1, 1, 3, 3], k as f32 / 4.0)).collect();
        // even side is fine for rendering; only traversal needs odd grids
        let pgm = dir.path().join("m.pgm");
        let png = dir.path().join("m.png");
        render_grid(&imgs, 2, &pgm, Some(&png)).unwrap();

        let raw = std::fs::read(&pgm).unwrap();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&raw[..header.len()], header);
        assert_eq!(raw.len(), header.len() + 64);

        let decoded = image::open(&png).unwrap().to_luma8();
        assert_eq!((decoded.width(), decoded.height()), (8, 8));
        let (bytes, _, _) = montage_bytes(&imgs, 2).unwrap();
        assert_eq!(decoded.into_raw(), bytes);
    }

    #[test]
    fn profile_of_real_filters_equals_plain_forward() {
        let (model, _generator, layer) = tiny();
        let x = test_image(5);
        let filters = crate::cnn::FilterSet::real(model.blocks[layer - 1].weight.value());
        let mut t1 = Tape::new();
        let x1 = t1.constant(x.clone());
        let plain = model
            .forward_to_layer(&mut t1, x1, layer, BnMode::Eval, ParamReg::Frozen)
            .unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(x.clone());
        let subst = model
            .forward_with_filters(&mut t2, x2, layer, &filters, BnMode::Eval)
            .unwrap();
        assert_eq!(t1.value(plain).data(), t2.value(subst).data());
    }
}
