//! Image grids as 8-bit PGM with a JSON sidecar of cell captions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{quantize, write_pgm, Pgm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels of white gutter between and around cells.
pub const GUTTER: usize = 2;

#[derive(Clone, Debug)]
pub struct MontageCell {
    pub caption: String,
    /// `(1, h, w)` in [−1, 1]; every cell must share one size.
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub row: usize,
    pub col: usize,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MontageMeta {
    pub seed: u64,
    pub cols: usize,
    pub cell_height: usize,
    pub cell_width: usize,
    pub gutter: usize,
    pub cells: Vec<CellMeta>,
}

/// Writes `path` (PGM) and `path` with a `.json` extension (captions).
pub fn write_montage(path: &Path, cells: &[MontageCell], cols: usize, seed: u64) -> Result<MontageMeta> {
    let first = cells.first().ok_or_else(|| Error::config("montage", "no cells"))?;
    if cols == 0 {
        return Err(Error::config("montage.cols", "must be positive"));
    }
    let (ch, cw) = match first.image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::shape(&[1, 0, 0], s)),
    };
    if let Some(c) = cells.iter().find(|c| c.image.shape() != first.image.shape()) {
        return Err(Error::shape(first.image.shape(), c.image.shape()));
    }
    let rows = cells.len().div_ceil(cols);
    let width = cols * (cw + GUTTER) + GUTTER;
    let height = rows * (ch + GUTTER) + GUTTER;
    let mut pixels = vec![255u8; width * height];
    let mut meta = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let q = quantize(cell.image.data());
        let (y0, x0) = (GUTTER + r * (ch + GUTTER), GUTTER + c * (cw + GUTTER));
        for y in 0..ch {
            pixels[(y0 + y) * width + x0..(y0 + y) * width + x0 + cw].copy_from_slice(&q[y * cw..(y + 1) * cw]);
        }
        meta.push(CellMeta {
            row: r,
            col: c,
            caption: cell.caption.clone(),
        });
    }
    write_pgm(path, &Pgm { width, height, pixels }, &[format!("seed={seed}")])?;
    let meta = MontageMeta {
        seed,
        cols,
        cell_height: ch,
        cell_width: cw,
        gutter: GUTTER,
        cells: meta,
    };
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}
