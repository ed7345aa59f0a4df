/// Axis-aligned pixel rectangle covering `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Window {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        f64::from(self.w) * f64::from(self.h)
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn is_degenerate(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.right() as usize <= width && self.bottom() as usize <= height
    }

    pub fn intersection_area(&self, other: &Window) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0.0
        } else {
            f64::from(x1 - x0) * f64::from(y1 - y0)
        }
    }

    /// Sub-rectangle of cell `(col, row)` of an even `r x r` partition.
    /// Integer boundaries are `floor(i * w / r)`.
    pub fn cell(&self, r: usize, col: usize, row: usize) -> Window {
        let (r, col, row) = (r as u64, col as u64, row as u64);
        let bx = |i: u64| (i * u64::from(self.w) / r) as u32;
        let by = |i: u64| (i * u64::from(self.h) / r) as u32;
        Window::new(
            self.x + bx(col),
            self.y + by(row),
            (bx(col + 1) - bx(col)).max(1),
            (by(row + 1) - by(row)).max(1),
        )
    }
}

/// Intersection over union in pixel area. Degenerate pairs give 0.
pub fn iou(a: &Window, b: &Window) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let a = Window::new(3, 4, 10, 7);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_and_touching_is_zero() {
        let a = Window::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &Window::new(20, 20, 5, 5)), 0.0);
        assert_eq!(iou(&a, &Window::new(10, 0, 10, 10)), 0.0);
    }

    #[test]
    fn iou_half_shift_is_one_third() {
        let a = Window::new(0, 0, 10, 10);
        let b = Window::new(5, 0, 10, 10);
        // 50 / (100 + 100 - 50)
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
        assert_eq!(iou(&b, &a), 1.0 / 3.0);
    }

    #[test]
    fn cells_tile_the_window() {
        let w = Window::new(5, 7, 13, 10);
        let mut area = 0.0;
        for row in 0..4 {
            for col in 0..4 {
                area += w.cell(4, col, row).area();
            }
        }
        assert_eq!(area, w.area());
    }
}
