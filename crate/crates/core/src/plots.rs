//! Static raster figures. Labels live in the accompanying CSV and JSON files;
//! the images carry only the data, in a fixed layout.

use crate::error::Result;
use crate::image::Image;
use crate::metrics::ConfusionMatrix;
use crate::report::ArmReport;

const SPLIT_COLORS: [[f32; 3]; 3] = [[0.55, 0.55, 0.55], [0.20, 0.45, 0.80], [0.85, 0.35, 0.20]];

/// Row-normalized confusion matrix, white (0) to dark blue (1), `cell` pixels per entry.
pub fn confusion_heatmap(c: &ConfusionMatrix, cell: usize) -> Result<Image> {
    let n = c.counts.len();
    let side = n * cell;
    let rates: Vec<Vec<f32>> = c
        .counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter().map(|&v| if total == 0 { 0.0 } else { v as f32 / total as f32 }).collect()
        })
        .collect();
    Ok(Image::from_fn(side, side, 3, |y, x, ch| {
        // one-pixel grid lines between cells
        if cell > 2 && (y % cell == 0 || x % cell == 0) {
            return 0.8;
        }
        let v = rates[y / cell][x / cell];
        let dark = [0.05, 0.15, 0.45][ch];
        1.0 - v * (1.0 - dark)
    }))
}

/// Grouped bars: one group per arm, training / validation / test accuracy left to right.
pub fn accuracy_bars(arms: &[ArmReport]) -> Result<Image> {
    let (bar, gap, height) = (16usize, 12usize, 200usize);
    let width = gap + arms.len() * (3 * bar + gap);
    let mut img = Image::constant(height, width.max(1), 3, 1.0);
    let mut put = |y: usize, x: usize, rgb: [f32; 3]| {
        for (ch, &v) in rgb.iter().enumerate() {
            img.set(y, x, ch, v);
        }
    };
    for q in 1..4 {
        let y = height - 1 - q * (height - 1) / 4;
        for x in 0..width {
            put(y, x, [0.85; 3]);
        }
    }
    for (a, arm) in arms.iter().enumerate() {
        let values = [arm.accuracy.training, arm.accuracy.validation, arm.accuracy.test];
        for (s, &v) in values.iter().enumerate() {
            let x0 = gap + a * (3 * bar + gap) + s * bar;
            let top = height - (v.clamp(0.0, 1.0) * height as f64).round() as usize;
            for y in top..height {
                for x in x0 + 1..x0 + bar - 1 {
                    put(y, x, SPLIT_COLORS[s]);
                }
            }
        }
    }
    Ok(img)
}

/// One bar per value in `[0, 1]`, e.g. mean evidence overlap per arm.
pub fn value_bars(values: &[f64]) -> Result<Image> {
    let (bar, height) = (24usize, 200usize);
    let width = bar * values.len().max(1);
    Ok(Image::from_fn(height, width, 3, |y, x, ch| {
        let v = values.get(x / bar).copied().unwrap_or(0.0).clamp(0.0, 1.0);
        let filled = ((height - 1 - y) as f64) < (v * height as f64).round();
        let inner = x % bar > 2 && x % bar < bar - 3;
        if filled && inner {
            [0.25, 0.6, 0.3][ch]
        } else {
            1.0
        }
    }))
}
