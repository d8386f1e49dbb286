//! Zhang–Suen thinning.

use crate::data::Grid;

/// Neighbours P2..P9, clockwise from north; outside the image is unset.
fn neighbours(mask: &Grid<bool>, y: usize, x: usize) -> [bool; 8] {
    let (h, w) = mask.dims();
    let at = |dy: isize, dx: isize| {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask.get(ny as usize, nx as usize)
    };
    [
        at(-1, 0),
        at(-1, 1),
        at(0, 1),
        at(1, 1),
        at(1, 0),
        at(1, -1),
        at(0, -1),
        at(-1, -1),
    ]
}

/// One-pixel-wide skeleton of the set pixels.
pub fn skeletonize(mask: &Grid<bool>) -> Grid<bool> {
    let (h, w) = mask.dims();
    let mut current = mask.clone();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !current.get(y, x) {
                        continue;
                    }
                    let p = neighbours(&current, y, x);
                    let count = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&count) {
                        continue;
                    }
                    let transitions = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if transitions != 1 {
                        continue;
                    }
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wst)
                    } else {
                        !(n && e && wst) && !(n && s && wst)
                    };
                    if ok {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                current.set(y, x, false);
            }
        }
        if !changed {
            return current;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_line_is_its_own_skeleton() {
        let line = Grid::from_fn(9, 15, |y, x| y == 4 && (2..13).contains(&x));
        assert_eq!(skeletonize(&line), line);
    }

    #[test]
    fn thick_bar_thins_to_a_single_row() {
        let bar = Grid::from_fn(11, 21, |y, x| (3..8).contains(&y) && (2..19).contains(&x));
        let skel = skeletonize(&bar);
        let rows: std::collections::BTreeSet<usize> = (0..11)
            .filter(|&y| (0..21).any(|x| skel.get(y, x)))
            .collect();
        assert!(!rows.is_empty());
        for y in 0..11 {
            for x in 0..21 {
                if skel.get(y, x) {
                    assert!(bar.get(y, x));
                }
            }
        }
        // the middle of the bar collapses to one pixel per column
        for x in 6..15 {
            assert_eq!((0..11).filter(|&y| skel.get(y, x)).count(), 1, "column {x}");
        }
    }

    #[test]
    fn empty_stays_empty() {
        let e = Grid::filled(4, 4, false);
        assert_eq!(skeletonize(&e), e);
    }
}
