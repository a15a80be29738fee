//! Shared fixtures for the CLI integration and acceptance tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn idx_images(n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(16 + n * h * w);
    bytes.extend(0x0000_0803u32.to_be_bytes());
    bytes.extend((n as u32).to_be_bytes());
    bytes.extend((h as u32).to_be_bytes());
    bytes.extend((w as u32).to_be_bytes());
    // blocky class-dependent patterns so even a single epoch learns a bit
    for i in 0..n {
        let class = (i % 10) as u8;
        for r in 0..h {
            for c in 0..w {
                let on = (r / 2 + (class as usize)) % 3 == (c / 2) % 3;
                let base: u8 = if on { 200 } else { 30 };
                bytes.push(base.saturating_add(rng.gen_range(0..40)));
            }
        }
    }
    bytes
}

fn idx_labels(n: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + n);
    bytes.extend(0x0000_0801u32.to_be_bytes());
    bytes.extend((n as u32).to_be_bytes());
    bytes.extend((0..n).map(|i| (i % 10) as u8));
    bytes
}

/// Write a deterministic four-file IDX dataset into `dir`.
pub fn write_idx_dataset(dir: &Path, n_train: usize, n_test: usize, h: usize, w: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("train-images-idx3-ubyte"), idx_images(n_train, h, w, &mut rng)).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), idx_labels(n_train)).unwrap();
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), idx_images(n_test, h, w, &mut rng)).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), idx_labels(n_test)).unwrap();
}

/// Flag set that makes a full `all` run finish in seconds on the synthetic
/// dataset, exercising every stage.
pub fn tiny_run_flags() -> Vec<(&'static str, &'static str)> {
    vec![
        ("layer", "2"),
        ("cnn.epochs", "1"),
        ("cnn.batch", "16"),
        ("cnn.eval_subset", "32"),
        ("eval.batch", "32"),
        ("gan.z_dim", "8"),
        ("gan.batch", "4"),
        ("gan.iters", "6"),
        ("gan.g_hidden", "8,12"),
        ("gan.d_channels", "4,8"),
        ("viz.grids", "2"),
        ("viz.side", "3"),
        ("viz.steps", "4"),
        ("eval.draws", "2"),
        ("eval.tail_epochs", "1"),
        ("eval.tail_batch", "16"),
        ("eval.diversity_draws", "3"),
        ("eval.q_batches", "2"),
    ]
}

/// Render the flag set as argv fragments.
pub fn flags_to_args(flags: &[(&str, &str)]) -> Vec<String> {
    flags
        .iter()
        .flat_map(|(k, v)| [format!("--{k}"), v.to_string()])
        .collect()
}
