//! Deterministic synthetic page layouts with text, title, list, table and
//! figure regions.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::evalkit::{BinaryMask, GtInstance};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
pub const TEXT: usize = 0;
pub const TITLE: usize = 1;
pub const LIST: usize = 2;
pub const TABLE: usize = 3;
pub const FIGURE: usize = 4;

/// Placement attempts per region before it is dropped.
pub const MAX_ATTEMPTS: usize = 200;
const MARGIN: usize = 4;
const GAP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_instances: 4,
            max_instances: 8,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 64 != 0 || self.width % 64 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 64",
                self.height, self.width
            )));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "need 1 <= min <= max instances, got {}..{}",
                self.min_instances, self.max_instances
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSample {
    /// `3×H×W`, every value a multiple of 1/255.
    pub image: Tensor,
    pub instances: Vec<GtInstance>,
    /// Seed the sample was drawn from.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

impl Rect {
    /// True when the two rectangles come closer than `GAP` pixels.
    fn near(&self, o: &Rect) -> bool {
        self.y0 < o.y1 + GAP && o.y0 < self.y1 + GAP && self.x0 < o.x1 + GAP && o.x0 < self.x1 + GAP
    }
}

/// Height and width ranges per class as fractions `(num, den)` of the page.
fn size_range(class: usize) -> [(usize, usize); 4] {
    match class {
        TEXT => [(1, 8), (1, 4), (1, 4), (1, 2)],
        TITLE => [(1, 12), (1, 8), (1, 4), (1, 2)],
        LIST => [(1, 6), (1, 3), (1, 5), (1, 3)],
        TABLE => [(1, 5), (1, 3), (1, 4), (1, 2)],
        _ => [(1, 5), (1, 3), (1, 5), (1, 3)],
    }
}

fn draw_rect(rng: &mut SplitMix64, class: usize, h: usize, w: usize) -> Option<Rect> {
    let [hl, hh, wl, wh] = size_range(class);
    let rh = rng.range_inclusive(h * hl.0 / hl.1, h * hh.0 / hh.1).max(1);
    let rw = rng.range_inclusive(w * wl.0 / wl.1, w * wh.0 / wh.1).max(1);
    if rh + 2 * MARGIN > h || rw + 2 * MARGIN > w {
        return None;
    }
    let y0 = rng.range_inclusive(MARGIN, h - MARGIN - rh);
    let x0 = rng.range_inclusive(MARGIN, w - MARGIN - rw);
    Some(Rect {
        y0,
        x0,
        y1: y0 + rh,
        x1: x0 + rw,
    })
}

/// Gray level (0–255) of pixel `(y, x)` inside region `r` of the given class.
fn texture(class: usize, r: &Rect, y: usize, x: usize) -> u8 {
    let (dy, dx) = (y - r.y0, x - r.x0);
    let (h, w) = (r.y1 - r.y0, r.x1 - r.x0);
    match class {
        TEXT => {
            if dy % 4 < 2 {
                40
            } else {
                255
            }
        }
        TITLE => {
            if dy >= h / 4 && dy < h - h / 4 {
                20
            } else {
                255
            }
        }
        LIST => {
            let on_row = (1..3).contains(&(dy % 6));
            if on_row && dx < 3 {
                0
            } else if on_row && dx >= 6 {
                90
            } else {
                255
            }
        }
        TABLE => {
            let edge = dy == 0 || dx == 0 || dy == h - 1 || dx == w - 1;
            if edge || dy % 8 == 0 || dx % 8 == 0 {
                60
            } else {
                255
            }
        }
        _ => {
            let border = dy < 2 || dx < 2 || dy + 2 >= h || dx + 2 >= w;
            if border {
                60
            } else {
                160
            }
        }
    }
}

/// Draws sample `index`; a pure function of `(cfg, index)`.
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<LayoutSample> {
    cfg.validate()?;
    let seed = cfg.seed ^ index;
    let mut rng = SplitMix64::new(seed);
    let (h, w) = (cfg.height, cfg.width);
    let k = rng.range_inclusive(cfg.min_instances, cfg.max_instances);
    let mut placed: Vec<(usize, Rect)> = Vec::with_capacity(k);
    for _ in 0..k {
        let class = rng.below(NUM_CLASSES as u64) as usize;
        let mut spot = None;
        for _ in 0..MAX_ATTEMPTS {
            if let Some(r) = draw_rect(&mut rng, class, h, w) {
                if placed.iter().all(|(_, p)| !p.near(&r)) {
                    spot = Some(r);
                    break;
                }
            }
        }
        match spot {
            Some(r) => placed.push((class, r)),
            None => log::debug!(
                "sample {index}: dropped a class-{class} region after {MAX_ATTEMPTS} attempts"
            ),
        }
    }

    let mut gray = alloc::vec![255u8; h * w];
    for (class, r) in &placed {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                gray[y * w + x] = texture(*class, r, y, x);
            }
        }
    }
    let plane = h * w;
    let image = Tensor::from_fn(&[3, h, w], |i| f64::from(gray[i % plane]) / 255.0);
    let instances = placed
        .iter()
        .map(|&(class_id, r)| GtInstance {
            class_id,
            mask: BinaryMask::rect(h, w, r.y0, r.x0, r.y1, r.x1),
        })
        .collect();
    Ok(LayoutSample {
        image,
        instances,
        seed,
    })
}
