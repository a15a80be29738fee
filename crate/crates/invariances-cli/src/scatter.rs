//! A grayscale scatter rendering of the 2-D filter embedding.

use crate::error::CliError;

/// Render `n` embedded points into a square grayscale canvas. Real-bank
/// points (draw 0) are drawn as 5×5 crosses, generated ones as 3×3 dots;
/// the gray level encodes the output-channel index so same-channel points
/// are visually grouped.
pub fn scatter_bytes(
    coords: &[f64],
    n: usize,
    channel: &[usize],
    draw: &[usize],
    size: usize,
) -> Result<(Vec<u8>, usize, usize), CliError> {
    if coords.len() != 2 * n || channel.len() != n || draw.len() != n || size < 16 {
        return Err(CliError::runtime("scatter: malformed inputs"));
    }
    let xs: Vec<f64> = (0..n).map(|i| coords[2 * i]).collect();
    let ys: Vec<f64> = (0..n).map(|i| coords[2 * i + 1]).collect();
    let bound = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            let margin = 0.05 * (hi - lo);
            (lo - margin, hi + margin)
        }
    };
    let (x_lo, x_hi) = bound(&xs);
    let (y_lo, y_hi) = bound(&ys);
    let max_channel = channel.iter().copied().max().unwrap_or(0).max(1);

    let mut canvas = vec![255u8; size * size];
    let to_px = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo)) * (size - 1) as f64).round() as i64;
    let mut put = |r: i64, c: i64, shade: u8| {
        if (0..size as i64).contains(&r) && (0..size as i64).contains(&c) {
            let idx = r as usize * size + c as usize;
            canvas[idx] = canvas[idx].min(shade);
        }
    };
    for p in 0..n {
        let c = to_px(xs[p], x_lo, x_hi);
        // image rows grow downward; flip y so larger coordinates sit higher
        let r = (size as i64 - 1) - to_px(ys[p], y_lo, y_hi);
        let shade = (200 * channel[p] / max_channel) as u8;
        if draw[p] == 0 {
            for d in -2i64..=2 {
                put(r + d, c, shade);
                put(r, c + d, shade);
            }
        } else {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    put(r + dr, c + dc, shade);
                }
            }
        }
    }
    Ok((canvas, size, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_deterministic_and_marks_every_point() {
        let coords = vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5];
        let channel = vec![0, 1, 2];
        let draw = vec![0, 1, 1];
        let (a, w, h) = scatter_bytes(&coords, 3, &channel, &draw, 64).unwrap();
        let (b, _, _) = scatter_bytes(&coords, 3, &channel, &draw, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!((w, h), (64, 64));
        assert!(a.iter().filter(|&&p| p < 255).count() >= 9 + 9 + 9);
    }

    #[test]
    fn degenerate_point_clouds_still_render() {
        let coords = vec![2.0, 2.0, 2.0, 2.0];
        let (bytes, _, _) = scatter_bytes(&coords, 2, &[0, 0], &[0, 1], 32).unwrap();
        assert!(bytes.iter().any(|&p| p < 255));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(scatter_bytes(&[0.0, 0.0], 2, &[0, 0], &[0, 0], 64).is_err());
        assert!(scatter_bytes(&[0.0; 4], 2, &[0], &[0, 0], 64).is_err());
        assert!(scatter_bytes(&[0.0; 4], 2, &[0, 0], &[0, 0], 4).is_err());
    }
}
