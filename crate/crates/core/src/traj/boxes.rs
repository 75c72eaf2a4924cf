use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open rectangle `[x0, x1) × [y0, y1)` on a feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl GridBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::EmptyBox([x0, y0, x1, y1]));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn cells(&self) -> usize {
        self.width() * self.height()
    }

    /// Same extent moved by `(dx, dy)`; `None` if it leaves the positive quadrant.
    pub fn translated(&self, dx: isize, dy: isize) -> Option<Self> {
        let shift = |v: usize, d: isize| v.checked_add_signed(d);
        Some(Self {
            x0: shift(self.x0, dx)?,
            y0: shift(self.y0, dy)?,
            x1: shift(self.x1, dx)?,
            y1: shift(self.y1, dy)?,
        })
    }

    /// Center in grid units.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }
}

/// Pixel box `[x0, y0, x1, y1]` on an `image = (height, width)` image to a
/// `grid = (height, width)` feature grid: starts floor, ends ceil, clamped.
pub fn map_box_to_grid(pixel: [f64; 4], image: (usize, usize), grid: (usize, usize)) -> Result<GridBox> {
    let [x0, y0, x1, y1] = pixel;
    let (ih, iw) = (image.0 as f64, image.1 as f64);
    let inside = pixel.iter().all(|v| v.is_finite())
        && 0.0 <= x0
        && x0 < x1
        && x1 <= iw
        && 0.0 <= y0
        && y0 < y1
        && y1 <= ih;
    if !inside {
        return Err(Error::Trajectory(format!(
            "box {pixel:?} is not a nonempty box inside the {}x{} image",
            image.1, image.0
        )));
    }
    let (gh, gw) = grid;
    let (sx, sy) = (gw as f64 / iw, gh as f64 / ih);
    let lo = |v: f64, s: f64, n: usize| ((v * s).floor().max(0.0) as usize).min(n);
    let hi = |v: f64, s: f64, n: usize| ((v * s).ceil().max(0.0) as usize).min(n);
    let (gx0, gy0) = (lo(x0, sx, gw), lo(y0, sy, gh));
    let (gx1, gy1) = (hi(x1, sx, gw), hi(y1, sy, gh));
    GridBox::new(gx0, gy0, gx1, gy1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_floor_ceil() {
        let b = map_box_to_grid([0.0, 0.0, 64.0, 64.0], (256, 256), (32, 32)).unwrap();
        assert_eq!(b, GridBox::new(0, 0, 8, 8).unwrap());
        let b = map_box_to_grid([10.0, 10.0, 11.0, 11.0], (256, 256), (8, 8)).unwrap();
        assert_eq!(b, GridBox::new(0, 0, 1, 1).unwrap());
        assert!(map_box_to_grid([0.0, 0.0, 300.0, 10.0], (256, 256), (8, 8)).is_err());
    }
}
