//! Minimal PNG emission for prototype trajectories: 2-D projections drawn as
//! polylines. Presentation artifacts only; nothing downstream reads these.

use std::path::Path;

use image::{Rgb, RgbImage};
use skillspace::dataset::TrajectoryPoint;

use crate::error::{data_err, CliError};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: f64 = 40.0;

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Draw one projection (channel `cx` vs channel `cy`) of several labeled
/// trajectories into a PNG.
pub fn plot_projection(
    path: &Path,
    series: &[(usize, &[TrajectoryPoint])],
    cx: usize,
    cy: usize,
) -> Result<(), CliError> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (_, pts) in series {
        for p in *pts {
            min_x = min_x.min(p.sm[cx]);
            max_x = max_x.max(p.sm[cx]);
            min_y = min_y.min(p.sm[cy]);
            max_y = max_y.max(p.sm[cy]);
        }
    }
    if !min_x.is_finite() || !min_y.is_finite() {
        return Err(data_err("nothing to plot"));
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-6);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut min_x, &mut max_x);
    pad(&mut min_y, &mut max_y);

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = MARGIN + (x - min_x) / (max_x - min_x) * (WIDTH as f64 - 2.0 * MARGIN);
        let py = HEIGHT as f64 - MARGIN - (y - min_y) / (max_y - min_y) * (HEIGHT as f64 - 2.0 * MARGIN);
        (px, py)
    };

    // Axes box.
    let box_color = Rgb([120, 120, 120]);
    let (x0, y0) = (MARGIN as u32, MARGIN as u32);
    let (x1, y1) = (WIDTH - MARGIN as u32, HEIGHT - MARGIN as u32);
    for x in x0..=x1 {
        img.put_pixel(x, y0, box_color);
        img.put_pixel(x, y1, box_color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, box_color);
        img.put_pixel(x1, y, box_color);
    }

    for (index, pts) in series {
        let color = Rgb(PALETTE[index % PALETTE.len()]);
        for w in pts.windows(2) {
            let (ax, ay) = to_px(w[0].sm[cx], w[0].sm[cy]);
            let (bx, by) = to_px(w[1].sm[cx], w[1].sm[cy]);
            draw_line(&mut img, ax, ay, bx, by, color);
        }
    }

    img.save(path).map_err(|e| data_err(format!("cannot write plot {path:?}: {e}")))
}

fn draw_line(img: &mut RgbImage, ax: f64, ay: f64, bx: f64, by: f64, color: Rgb<u8>) {
    let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = ax + (bx - ax) * t;
        let y = ay + (by - ay) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
