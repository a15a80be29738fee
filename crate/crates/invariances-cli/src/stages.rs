//! The four pipeline stages behind the subcommands.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;

use invariances::autodiff::Tensor;
use invariances::cnn::{ArchConfig, CnnModel, FitConfig};
use invariances::evaluation::{
    diversity_report, filter_points, pairwise_distances, retrain_tail, TailConfig,
};
use invariances::mds::classical_mds;
use invariances::filtergan::{train_gan as run_gan_training, FilterGan, GanConfig};
use invariances::inversion::{
    render_grid, traversal_smoothness, traverse_grid, write_pgm, GridConfig, InversionConfig,
    InversionStepRecord, PriorConfig,
};
use invariances::mnist::{Dataset, Split};
use invariances::rng;

use crate::config::{parse_dims, Config};
use crate::error::CliError;
use crate::manifest::{write_json, write_jsonl, Manifest, RunPaths};
use crate::scatter::scatter_bytes;

fn load_split(cfg: &Config, split: Split) -> Result<Dataset, CliError> {
    let dir = PathBuf::from(cfg.str("data.dir"));
    Dataset::load_dir(&dir, split).map_err(|e| {
        CliError::data(format!(
            "cannot load {:?} split from {}: {e} (set --data.dir or INVARIANCES_DATA)",
            split,
            dir.display()
        ))
    })
}

fn cnn_path(cfg: &Config, paths: &RunPaths) -> PathBuf {
    cfg.opt_str("cnn.checkpoint")
        .map(PathBuf::from)
        .unwrap_or_else(|| paths.file("cnn.ivf"))
}

fn gan_path(cfg: &Config, paths: &RunPaths) -> PathBuf {
    cfg.opt_str("gan.checkpoint")
        .map(PathBuf::from)
        .unwrap_or_else(|| paths.file("gan.ivf"))
}

fn require_checkpoints(cfg: &Config, paths: &RunPaths, need_gan: bool) -> Result<(), CliError> {
    let mut missing = Vec::new();
    if !cnn_path(cfg, paths).exists() {
        missing.push("classifier checkpoint (run `train-cnn` or pass --cnn.checkpoint)");
    }
    if need_gan && !gan_path(cfg, paths).exists() {
        missing.push("GAN checkpoint (run `train-gan` or pass --gan.checkpoint)");
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::dependency(format!("missing {}", missing.join(" and "))))
    }
}

fn load_model(cfg: &Config, paths: &RunPaths) -> Result<CnnModel<f32>, CliError> {
    require_checkpoints(cfg, paths, false)?;
    Ok(CnnModel::load(&cnn_path(cfg, paths))?)
}

fn load_gan(
    cfg: &Config,
    paths: &RunPaths,
    model: &CnnModel<f32>,
) -> Result<FilterGan<f32>, CliError> {
    Ok(FilterGan::load(&gan_path(cfg, paths), model)?)
}

// ---------------------------------------------------------------------------
// train-cnn
// ---------------------------------------------------------------------------

pub fn train_cnn(cfg: &Config, paths: &RunPaths, manifest: &mut Manifest) -> Result<(), CliError> {
    let start = Instant::now();
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;

    let model = CnnModel::<f32>::build(ArchConfig::default(), cfg.u64("seed"))?;
    let fit = FitConfig {
        epochs: cfg.usize("cnn.epochs"),
        batch: cfg.usize("cnn.batch"),
        lr: cfg.f64("cnn.lr"),
        rho: cfg.f64("cnn.rho"),
        eps: cfg.f64("cnn.eps"),
        seed: cfg.u64("seed"),
        eval_subset: cfg.usize("cnn.eval_subset"),
    };
    let log = invariances::cnn::train_classifier(&model, &train, &fit)?;
    write_jsonl(&paths.file("cnn_train.jsonl"), &log)?;

    let accuracy = model.evaluate(&test, cfg.usize("eval.batch"))?;
    model.save(&paths.file("cnn.ivf"))?;

    manifest.artifact("cnn_checkpoint", "cnn.ivf");
    manifest.artifact("cnn_train_log", "cnn_train.jsonl");
    manifest.metric("cnn.test_accuracy", accuracy);
    if let Some(last) = log.last() {
        manifest.metric("cnn.final_train_loss", last.mean_loss);
    }
    manifest.timing("train-cnn", start.elapsed().as_secs_f64());
    println!("train-cnn: test accuracy {accuracy:.4}");
    Ok(())
}

// ---------------------------------------------------------------------------
// train-gan
// ---------------------------------------------------------------------------

pub fn train_gan(cfg: &Config, paths: &RunPaths, manifest: &mut Manifest) -> Result<(), CliError> {
    let start = Instant::now();
    let model = load_model(cfg, paths)?;
    let train = load_split(cfg, Split::Train)?;

    let gcfg = GanConfig {
        layer: cfg.usize("layer"),
        z_dim: cfg.usize("gan.z_dim"),
        lambda_info: cfg.f64("gan.lambda"),
        batch: cfg.usize("gan.batch"),
        iters: cfg.usize("gan.iters"),
        lr: cfg.f64("gan.lr"),
        rho: cfg.f64("gan.rho"),
        eps: cfg.f64("gan.eps"),
        g_hidden: cfg.usize_list("gan.g_hidden"),
        d_channels: cfg.usize_list("gan.d_channels"),
        leaky_slope: cfg.f64("gan.leaky_slope"),
        seed: cfg.u64("seed"),
    };
    let gan = FilterGan::build(gcfg, &model, train.image_size())?;
    let log = run_gan_training(&gan, &model, &train)?;
    write_jsonl(&paths.file("gan_train.jsonl"), &log)?;
    gan.save(&paths.file("gan.ivf"))?;

    manifest.artifact("gan_checkpoint", "gan.ivf");
    manifest.artifact("gan_train_log", "gan_train.jsonl");
    if let Some(last) = log.last() {
        manifest.metric("gan.final_disc_objective", last.disc_objective);
        manifest.metric("gan.final_gen_objective", last.gen_objective);
        manifest.metric("gan.final_info_loss", last.info_loss);
        println!(
            "train-gan: iteration {} disc {:.4} gen {:.4} info {:.4}",
            last.iteration, last.disc_objective, last.gen_objective, last.info_loss
        );
    }
    manifest.timing("train-gan", start.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// visualize
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    grid: usize,
    cell: usize,
    #[serde(flatten)]
    record: &'a InversionStepRecord,
}

#[derive(Serialize)]
struct GridMetrics {
    grid: usize,
    image_index: usize,
    dim_i: usize,
    dim_j: usize,
    target_sq_norm: f64,
    center_warm_start_exact: bool,
    center_activation_term: f64,
    max_activation_term: f64,
    adjacent_mean: f64,
    non_adjacent_mean: f64,
    diverged_cells: usize,
}

#[derive(Serialize)]
struct VizMetrics {
    layer: usize,
    side: usize,
    xi: f64,
    steps: usize,
    grids: Vec<GridMetrics>,
    mean_adjacent: f64,
    mean_non_adjacent: f64,
    smooth_grids: usize,
    diverged_cells_total: usize,
}

pub fn visualize(cfg: &Config, paths: &RunPaths, manifest: &mut Manifest) -> Result<(), CliError> {
    let start = Instant::now();
    require_checkpoints(cfg, paths, true)?;
    let model = load_model(cfg, paths)?;
    let gan = load_gan(cfg, paths, &model)?;
    let test = load_split(cfg, Split::Test)?;

    let layer = gan.cfg.layer;
    let z_dim = gan.cfg.z_dim;
    if z_dim < 2 {
        return Err(CliError::runtime("latent grids need z_dim >= 2"));
    }
    let fixed_dims = match cfg.opt_str("viz.dims") {
        Some(text) => {
            let (i, j) = parse_dims(text)?;
            if i == j || i >= z_dim || j >= z_dim {
                return Err(CliError::config(format!(
                    "--viz.dims must name two distinct coordinates below the checkpoint's z_dim={z_dim}"
                )));
            }
            Some((i, j))
        }
        None => None,
    };
    let grid_cfg = GridConfig {
        xi: cfg.f64("viz.xi"),
        side: cfg.usize("viz.side"),
    };
    let inv_cfg = InversionConfig {
        steps: cfg.usize("viz.steps"),
        step_size: cfg.f64("viz.step_size"),
        prior: PriorConfig {
            alpha: cfg.f64("viz.alpha"),
            beta: cfg.f64("viz.beta"),
            lambda_alpha: cfg.f64("viz.lambda_alpha"),
            lambda_tv: cfg.f64("viz.lambda_tv"),
        },
        divergence_patience: cfg.usize("viz.patience"),
    };

    let seed = cfg.u64("seed");
    let mut img_rng = rng::stream(seed, "viz-images");
    let mut dim_rng = rng::stream(seed, "viz-dims");
    let mut z_rng = rng::stream(seed, "viz-z");

    let n_grids = cfg.usize("viz.grids");
    let png = cfg.bool("viz.png");
    let mut grids = Vec::with_capacity(n_grids);
    let (mut adj_sum, mut far_sum) = (0.0, 0.0);
    let mut smooth = 0usize;
    let mut diverged_total = 0usize;

    for g in 0..n_grids {
        let image_index = img_rng.gen_range(0..test.len());
        let x = test.image(image_index);
        let z = Tensor::<f32>::rand_normal(&mut z_rng, vec![z_dim]);
        let (dim_i, dim_j) = fixed_dims.unwrap_or_else(|| {
            let i = dim_rng.gen_range(0..z_dim);
            let mut j = dim_rng.gen_range(0..z_dim);
            while j == i {
                j = dim_rng.gen_range(0..z_dim);
            }
            (i, j)
        });

        let target =
            invariances::inversion::activation_profile(&model, &gan.generator, layer, &x, &z)?;
        let target_norm = target.a.norm();
        let traversal = traverse_grid(
            &model,
            &gan.generator,
            layer,
            &x,
            &z,
            dim_i,
            dim_j,
            &grid_cfg,
            &inv_cfg,
        )?;

        let montage = format!("montage_{g:02}.pgm");
        let montage_png = format!("montage_{g:02}.png");
        let images = traversal.montage_images();
        render_grid(
            &images,
            grid_cfg.side,
            &paths.file(&montage),
            png.then(|| paths.file(&montage_png)).as_deref(),
        )?;
        manifest.artifact(&format!("montage_{g:02}"), &montage);
        if png {
            manifest.artifact(&format!("montage_{g:02}_png"), &montage_png);
        }

        let lines: Vec<TrajectoryLine> = traversal
            .cells
            .iter()
            .enumerate()
            .flat_map(|(cell, res)| {
                res.trajectory
                    .iter()
                    .map(move |record| TrajectoryLine { grid: g, cell, record })
            })
            .collect();
        let traj = format!("trajectories_{g:02}.jsonl");
        write_jsonl(&paths.file(&traj), &lines)?;
        manifest.artifact(&format!("trajectories_{g:02}"), &traj);

        let center = traversal.grid.center_index();
        let center_cell = &traversal.cells[center];
        let (adjacent_mean, non_adjacent_mean) = if grid_cfg.side >= 2 {
            traversal_smoothness(&images, grid_cfg.side)?
        } else {
            (0.0, 0.0)
        };
        let diverged_cells = traversal.cells.iter().filter(|c| c.diverged).count();
        diverged_total += diverged_cells;
        adj_sum += adjacent_mean;
        far_sum += non_adjacent_mean;
        if adjacent_mean < non_adjacent_mean {
            smooth += 1;
        }
        grids.push(GridMetrics {
            grid: g,
            image_index,
            dim_i,
            dim_j,
            target_sq_norm: target_norm * target_norm,
            center_warm_start_exact: center_cell
                .trajectory
                .first()
                .map(|r| r.activation_term == 0.0)
                .unwrap_or(false),
            center_activation_term: center_cell.activation_term,
            max_activation_term: traversal
                .cells
                .iter()
                .map(|c| c.activation_term)
                .fold(0.0, f64::max),
            adjacent_mean,
            non_adjacent_mean,
            diverged_cells,
        });
    }

    let denom = n_grids.max(1) as f64;
    let viz = VizMetrics {
        layer,
        side: grid_cfg.side,
        xi: grid_cfg.xi,
        steps: inv_cfg.steps,
        grids,
        mean_adjacent: adj_sum / denom,
        mean_non_adjacent: far_sum / denom,
        smooth_grids: smooth,
        diverged_cells_total: diverged_total,
    };
    write_json(&paths.file("viz_metrics.json"), &viz)?;
    manifest.artifact("viz_metrics", "viz_metrics.json");
    manifest.metric("viz.mean_adjacent_distance", viz.mean_adjacent);
    manifest.metric("viz.mean_non_adjacent_distance", viz.mean_non_adjacent);
    manifest.metric("viz.smooth_grids", viz.smooth_grids as u64);
    manifest.metric("viz.diverged_cells", viz.diverged_cells_total as u64);
    manifest.timing("visualize", start.elapsed().as_secs_f64());
    println!(
        "visualize: {} grids, adjacent {:.4} vs non-adjacent {:.4}",
        n_grids, viz.mean_adjacent, viz.mean_non_adjacent
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalMetrics {
    layer: usize,
    baseline_test_accuracy: f64,
    averaged_test_accuracy: f64,
    accuracy_drop: f64,
    draws: usize,
    tail_epochs: usize,
    diversity: invariances::evaluation::DiversityReport,
    q_heldout_mse: f64,
    z_dim: usize,
    q_mse_per_dim: f64,
    mds_points: usize,
    mds_stress: f64,
    mds_centering_residual: f64,
    mds_eigenvalues: Vec<f64>,
}

pub fn evaluate(cfg: &Config, paths: &RunPaths, manifest: &mut Manifest) -> Result<(), CliError> {
    let start = Instant::now();
    require_checkpoints(cfg, paths, true)?;
    let model = load_model(cfg, paths)?;
    let gan = load_gan(cfg, paths, &model)?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;

    let layer = gan.cfg.layer;
    let seed = cfg.u64("seed");
    let eval_batch = cfg.usize("eval.batch");

    let baseline = model.evaluate(&test, eval_batch)?;

    let tail_cfg = TailConfig {
        epochs: cfg.usize("eval.tail_epochs"),
        batch: cfg.usize("eval.tail_batch"),
        lr: cfg.f64("eval.tail_lr"),
        rho: cfg.f64("eval.tail_rho"),
        eps: cfg.f64("eval.tail_eps"),
        seed,
        draws: cfg.usize("eval.draws"),
    };
    let (head, tail_log) = retrain_tail(&model, &gan.generator, layer, &train, &tail_cfg)?;
    write_jsonl(&paths.file("tail_train.jsonl"), &tail_log)?;
    manifest.artifact("tail_train_log", "tail_train.jsonl");
    let averaged = head.evaluate(&model, &test, eval_batch)?;

    let real = model.blocks[layer - 1].weight.value();
    let diversity = diversity_report(&gan.generator, &real, cfg.usize("eval.diversity_draws"), seed)?;
    let q_mse = invariances::filtergan::q_heldout_mse(
        &gan,
        &model,
        &test,
        cfg.usize("eval.q_batches"),
        seed,
    )?;

    let pts = filter_points(&real, &head.filters)?;
    let d = pairwise_distances(&pts.points)?;
    let embedding = classical_mds(&d, pts.points.len(), 2)?;
    let stress = invariances::mds::stress(&d, &embedding);

    let mut csv = String::from("x,y,channel,draw\n");
    for p in 0..embedding.n {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            embedding.coords[2 * p],
            embedding.coords[2 * p + 1],
            pts.channel[p],
            pts.draw[p]
        ));
    }
    std::fs::write(paths.file("mds.csv"), csv)?;
    manifest.artifact("mds_csv", "mds.csv");

    let (scatter, w, h) = scatter_bytes(
        &embedding.coords,
        embedding.n,
        &pts.channel,
        &pts.draw,
        480,
    )?;
    write_pgm(&paths.file("mds_scatter.pgm"), &scatter, w, h)?;
    manifest.artifact("mds_scatter", "mds_scatter.pgm");

    let metrics = EvalMetrics {
        layer,
        baseline_test_accuracy: baseline,
        averaged_test_accuracy: averaged,
        accuracy_drop: baseline - averaged,
        draws: tail_cfg.draws,
        tail_epochs: tail_cfg.epochs,
        diversity,
        q_heldout_mse: q_mse,
        z_dim: gan.cfg.z_dim,
        q_mse_per_dim: q_mse / gan.cfg.z_dim as f64,
        mds_points: embedding.n,
        mds_stress: stress,
        mds_centering_residual: embedding.centering_residual,
        mds_eigenvalues: embedding.eigenvalues.clone(),
    };
    write_json(&paths.file("eval_metrics.json"), &metrics)?;
    manifest.artifact("eval_metrics", "eval_metrics.json");
    manifest.metric("eval.baseline_test_accuracy", baseline);
    manifest.metric("eval.averaged_test_accuracy", averaged);
    manifest.metric("eval.diversity_ratio", metrics.diversity.diversity_ratio);
    manifest.metric("eval.q_heldout_mse", q_mse);
    manifest.metric("eval.mds_stress", stress);
    manifest.timing("evaluate", start.elapsed().as_secs_f64());
    println!(
        "evaluate: baseline {baseline:.4}, averaged {averaged:.4}, diversity ratio {:.4}, Q mse {q_mse:.4}",
        metrics.diversity.diversity_ratio
    );
    Ok(())
}
