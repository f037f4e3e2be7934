use super::project::ProjectedSplat;

pub const DEFAULT_TILE_SIZE: usize = 16;

/// Per-tile lists of indices into the projected splat slice, in slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn tile_count(&self) -> usize {
        self.lists.len()
    }

    /// Pixel ranges `(x0..x1, y0..y1)` covered by tile `tile`.
    pub fn pixel_range(
        &self,
        tile: usize,
        width: usize,
        height: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0..(x0 + self.tile_size).min(width),
            y0..(y0 + self.tile_size).min(height),
        )
    }
}

/// Assigns each splat to every tile its cutoff ellipse overlaps. Tiles cover
/// the pixel sample points `tile_size * k .. tile_size * (k + 1) - 1`.
pub fn tile_bin(splats: &[ProjectedSplat], width: usize, height: usize, tile_size: usize) -> TileBins {
    assert!(tile_size >= 4, "tile size must be at least 4");
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let ts = tile_size as f64;
    for (idx, s) in splats.iter().enumerate() {
        let lo = s.pixel_center - s.half_extent;
        let hi = s.pixel_center + s.half_extent;
        let tile_of = |v: f64, n: usize| -> Option<usize> {
            if v < 0.0 {
                Some(0)
            } else {
                let t = (v / ts).floor();
                if t >= n as f64 {
                    None
                } else {
                    Some(t as usize)
                }
            }
        };
        if hi.x < 0.0 || hi.y < 0.0 {
            continue;
        }
        let (Some(tx0), Some(ty0)) = (tile_of(lo.x, tiles_x), tile_of(lo.y, tiles_y)) else {
            continue;
        };
        let tx1 = tile_of(hi.x, tiles_x).unwrap_or(tiles_x - 1);
        let ty1 = tile_of(hi.y, tiles_y).unwrap_or(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let x0 = (tx * tile_size) as f64;
                let y0 = (ty * tile_size) as f64;
                let x1 = (((tx + 1) * tile_size).min(width) - 1) as f64;
                let y1 = (((ty + 1) * tile_size).min(height) - 1) as f64;
                if s.overlaps_box(x0, x1, y0, y1) {
                    lists[ty * tiles_x + tx].push(idx as u32);
                }
            }
        }
    }
    TileBins {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}
