//! Warp benchmark: dense per-pixel MLS vs the grid-approximated field on
//! identical inputs, median-of-k timing.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mls::{dense_warp_field, grid_warp_field, MlsConfig, NodePair};

/// One benchmark configuration's timings.
#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub nodes: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub raster_w: usize,
    pub raster_h: usize,
    pub dense_ms: f64,
    pub grid_ms: f64,
    pub speedup: f64,
}

/// Random node positions with a smooth sinusoidal displacement field, the
/// kind of field the grid approximation is built for.
pub fn smooth_node_field(
    n: usize,
    width: f64,
    height: f64,
    amplitude: f64,
    seed: u64,
) -> NodePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Array2::zeros((n, 2));
    let mut dst = Array2::zeros((n, 2));
    for i in 0..n {
        let x = rng.gen_range(0.0..width);
        let y = rng.gen_range(0.0..height);
        src[[i, 0]] = x;
        src[[i, 1]] = y;
        let (dx, dy) = sinusoidal_displacement(x, y, width, height, amplitude);
        dst[[i, 0]] = x + dx;
        dst[[i, 1]] = y + dy;
    }
    NodePair::new(src, dst).expect("generated nodes are valid")
}

/// Low-frequency displacement with one full period across the frame.
pub fn sinusoidal_displacement(
    x: f64,
    y: f64,
    width: f64,
    height: f64,
    amplitude: f64,
) -> (f64, f64) {
    let tx = std::f64::consts::TAU * x / width;
    let ty = std::f64::consts::TAU * y / height;
    (amplitude * tx.sin() * ty.cos(), amplitude * (tx + ty).cos())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Time dense vs grid warp-field generation over a raster for each node
/// count. The black-holed checksum keeps the optimizer honest.
pub fn bench_warp(
    raster_w: usize,
    raster_h: usize,
    node_counts: &[usize],
    grid_cols: usize,
    grid_rows: usize,
    reps: usize,
    seed: u64,
    cfg: &MlsConfig,
) -> Result<Vec<BenchRow>> {
    let reps = reps.max(1);
    let mut rows = Vec::with_capacity(node_counts.len());
    for &n in node_counts {
        let nodes = smooth_node_field(n, raster_w as f64, raster_h as f64, 6.0, seed);
        let mut dense_times = Vec::with_capacity(reps);
        let mut grid_times = Vec::with_capacity(reps);
        let mut sink = 0.0f64;
        for _ in 0..reps {
            let t0 = Instant::now();
            let field = dense_warp_field(raster_w, raster_h, &nodes, cfg)?;
            dense_times.push(t0.elapsed().as_secs_f64() * 1e3);
            sink += field[field.len() / 2][0];

            let t1 = Instant::now();
            let field = grid_warp_field(raster_w, raster_h, &nodes, grid_cols, grid_rows, cfg)?;
            grid_times.push(t1.elapsed().as_secs_f64() * 1e3);
            sink += field[field.len() / 2][0];
        }
        std::hint::black_box(sink);
        let dense_ms = median(dense_times);
        let grid_ms = median(grid_times);
        rows.push(BenchRow {
            nodes: n,
            grid_cols,
            grid_rows,
            raster_w,
            raster_h,
            dense_ms,
            grid_ms,
            speedup: dense_ms / grid_ms,
        });
    }
    Ok(rows)
}

/// CSV: `nodes,grid,raster,dense_ms,grid_ms,speedup`.
pub fn write_csv<W: Write>(rows: &[BenchRow], writer: &mut W) -> Result<()> {
    writeln!(writer, "nodes,grid,raster,dense_ms,grid_ms,speedup")?;
    for r in rows {
        writeln!(
            writer,
            "{},{}x{},{}x{},{:.3},{:.3},{:.1}",
            r.nodes, r.grid_cols, r.grid_rows, r.raster_w, r.raster_h, r.dense_ms, r.grid_ms, r.speedup
        )?;
    }
    Ok(())
}
