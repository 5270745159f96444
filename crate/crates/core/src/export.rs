//! CSV dumps and binary graymap (PGM) images of gates, caches and attention.

use std::io::Write;

use crate::cache::KVCache;
use crate::error::Result;
use crate::gate::{build_mask, EvictionFlags};
use crate::tensor::Tensor;

/// Pixel values of an eviction grid.
pub const RETAINED: u8 = 255;
pub const EVICTED: u8 = 0;
/// Future cells, which no query can see anyway.
pub const FUTURE: u8 = 128;

/// A `width × height` 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM (`P5`).
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }
}

/// `(layer, head, token_index, soft, hard)` for every gated cell.
pub fn write_flags_csv(flags: &EvictionFlags, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "head", "token_index", "soft", "hard"])?;
    for (l, lf) in flags.layers.iter().enumerate() {
        let Some(lf) = lf else { continue };
        for t in 0..lf.len() {
            for h in 0..lf.heads() {
                out.write_record(&[
                    l.to_string(),
                    h.to_string(),
                    t.to_string(),
                    format!("{:.6}", lf.soft(t, h)),
                    u8::from(lf.hard(t, h)).to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// `(layer, head, position)` for every retained entry.
pub fn write_cache_csv(cache: &KVCache, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "head", "position"])?;
    for (l, heads) in cache.layers.iter().enumerate() {
        for (h, head) in heads.iter().enumerate() {
            for e in &head.entries {
                out.write_record(&[l.to_string(), h.to_string(), e.position.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Query-by-key grid of one head's mask: white where attended, black where
/// evicted, gray above the diagonal.
pub fn eviction_grid(
    flags: &EvictionFlags,
    layer: usize,
    head: usize,
    n: usize,
    heads: usize,
    recent_window: usize,
) -> Result<Gray> {
    let mask = build_mask(flags.layer(layer), n, heads, recent_window)?;
    let mut pixels = Vec::with_capacity(n * n);
    for j in 0..n {
        for t in 0..n {
            pixels.push(if t > j {
                FUTURE
            } else if mask.get(head, j, t) {
                RETAINED
            } else {
                EVICTED
            });
        }
    }
    Ok(Gray {
        width: n,
        height: n,
        pixels,
    })
}

/// Attention weights scaled so the largest entry is white.
pub fn attention_heatmap(attention: &Tensor) -> Gray {
    let max = attention.data().iter().copied().fold(0.0f64, f64::max);
    let pixels = attention
        .data()
        .iter()
        .map(|&a| if max > 0.0 { (a / max * 255.0).round() as u8 } else { 0 })
        .collect();
    Gray {
        width: attention.cols(),
        height: attention.rows(),
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::LayerFlags;

    #[test]
    fn open_gate_grid_is_white_below_diagonal() {
        let g = eviction_grid(&EvictionFlags::open(1), 0, 0, 4, 1, 0).unwrap();
        for j in 0..4 {
            for t in 0..4 {
                assert_eq!(g.get(t, j), if t <= j { RETAINED } else { FUTURE });
            }
        }
    }

    #[test]
    fn diagonal_only_has_one_white_pixel_per_row() {
        let f = EvictionFlags {
            layers: vec![Some(LayerFlags::from_hard(5, 1, vec![false; 5]).unwrap())],
        };
        let g = eviction_grid(&f, 0, 0, 5, 1, 0).unwrap();
        for j in 0..5 {
            let white: Vec<usize> = (0..5).filter(|&t| g.get(t, j) == RETAINED).collect();
            assert_eq!(white, vec![j]);
        }
    }

    #[test]
    fn pgm_header() {
        let g = Gray {
            width: 2,
            height: 1,
            pixels: vec![0, 255],
        };
        let mut buf = Vec::new();
        g.write_pgm(&mut buf).unwrap();
        assert_eq!(&buf[..], b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn flags_csv_rows() {
        let f = EvictionFlags {
            layers: vec![None, Some(LayerFlags::from_hard(2, 1, vec![true, false]).unwrap())],
        };
        let mut buf = Vec::new();
        write_flags_csv(&f, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "layer,head,token_index,soft,hard\n1,0,0,1.000000,1\n1,0,1,0.000000,0\n"
        );
    }
}
