//! Binary morphology with disk structuring elements.

use crate::data::Grid;

/// Offsets of a digital disk of the given radius (radius 0 is a single pixel).
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn shifted(h: usize, w: usize, y: usize, x: usize, (dy, dx): (isize, isize)) -> Option<(usize, usize)> {
    let ny = y as isize + dy;
    let nx = x as isize + dx;
    (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| (ny as usize, nx as usize))
}

/// Pixels whose whole disk lies inside the set; outside the image counts as
/// background, so objects touching the border erode from it too.
pub fn erode(mask: &Grid<bool>, radius: usize) -> Grid<bool> {
    let (h, w) = mask.dims();
    let se = disk(radius);
    Grid::from_fn(h, w, |y, x| {
        se.iter()
            .all(|&o| shifted(h, w, y, x, o).is_some_and(|(ny, nx)| mask.get(ny, nx)))
    })
}

pub fn dilate(mask: &Grid<bool>, radius: usize) -> Grid<bool> {
    let (h, w) = mask.dims();
    let se = disk(radius);
    Grid::from_fn(h, w, |y, x| {
        se.iter()
            .any(|&o| shifted(h, w, y, x, o).is_some_and(|(ny, nx)| mask.get(ny, nx)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, lo: usize, hi: usize) -> Grid<bool> {
        Grid::from_fn(n, n, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
    }

    #[test]
    fn disk_sizes() {
        assert_eq!(disk(0).len(), 1);
        assert_eq!(disk(1).len(), 5);
        assert_eq!(disk(2).len(), 13);
    }

    #[test]
    fn square_erodes_and_dilates_by_one() {
        let sq = square(32, 11, 21);
        let e = erode(&sq, 1);
        assert_eq!(e, square(32, 12, 20));
        let d = dilate(&sq, 1);
        // a radius-1 disk is a plus sign, so the corners stay unset
        assert_eq!(d.data().iter().filter(|&&v| v).count(), 144 - 4);
        assert!(d.get(10, 15) && !d.get(10, 10));
    }

    #[test]
    fn radius_zero_is_identity() {
        let sq = square(9, 2, 6);
        assert_eq!(erode(&sq, 0), sq);
        assert_eq!(dilate(&sq, 0), sq);
    }
}
