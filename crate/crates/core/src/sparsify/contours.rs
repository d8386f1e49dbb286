//! Marching squares iso-contours and their rasterisation onto the pixel grid.

use std::collections::{BTreeSet, HashMap};

use crate::data::Grid;

/// A cell edge: horizontal edges join `(r, c)`–`(r, c+1)`, vertical ones
/// join `(r, c)`–`(r+1, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Edge {
    Horizontal(usize, usize),
    Vertical(usize, usize),
}

impl Edge {
    fn endpoints(self) -> ((usize, usize), (usize, usize)) {
        match self {
            Edge::Horizontal(r, c) => ((r, c), (r, c + 1)),
            Edge::Vertical(r, c) => ((r, c), (r + 1, c)),
        }
    }

    fn point(self, field: &Grid<f64>, level: f64) -> (f64, f64) {
        let ((r0, c0), (r1, c1)) = self.endpoints();
        let (v0, v1) = (field.get(r0, c0), field.get(r1, c1));
        let t = if v1 == v0 { 0.5 } else { (level - v0) / (v1 - v0) };
        (
            r0 as f64 + t * (r1 as f64 - r0 as f64),
            c0 as f64 + t * (c1 as f64 - c0 as f64),
        )
    }
}

/// Iso-line segments of one 2×2 cell, as pairs of crossed edges.
fn cell_segments(field: &Grid<f64>, level: f64, r: usize, c: usize) -> Vec<(Edge, Edge)> {
    let ul = field.get(r, c) > level;
    let ur = field.get(r, c + 1) > level;
    let ll = field.get(r + 1, c) > level;
    let lr = field.get(r + 1, c + 1) > level;
    let top = Edge::Horizontal(r, c);
    let bottom = Edge::Horizontal(r + 1, c);
    let left = Edge::Vertical(r, c);
    let right = Edge::Vertical(r, c + 1);
    let case = (ul as u8) | (ur as u8) << 1 | (lr as u8) << 2 | (ll as u8) << 3;
    match case {
        0 | 15 => vec![],
        1 | 14 => vec![(top, left)],
        2 | 13 => vec![(top, right)],
        3 | 12 => vec![(left, right)],
        4 | 11 => vec![(right, bottom)],
        6 | 9 => vec![(top, bottom)],
        7 | 8 => vec![(left, bottom)],
        5 | 10 => {
            // saddle: resolve with the cell-centre average
            let centre = (field.get(r, c) + field.get(r, c + 1) + field.get(r + 1, c) + field.get(r + 1, c + 1)) / 4.0;
            let centre_high = centre > level;
            if (case == 5) == centre_high {
                vec![(top, right), (left, bottom)]
            } else {
                vec![(top, left), (right, bottom)]
            }
        }
        _ => unreachable!(),
    }
}

/// Iso-contours of `field` at `level`, each as an ordered polyline of
/// `(row, col)` points. Closed contours repeat their first point at the end.
pub fn find_contours(field: &Grid<f64>, level: f64) -> Vec<Vec<(f64, f64)>> {
    let (h, w) = field.dims();
    if h < 2 || w < 2 {
        return Vec::new();
    }
    let mut segments = Vec::new();
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            segments.extend(cell_segments(field, level, r, c));
        }
    }
    let mut incident: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (i, &(a, b)) in segments.iter().enumerate() {
        incident.entry(a).or_default().push(i);
        incident.entry(b).or_default().push(i);
    }

    let mut used = vec![false; segments.len()];
    let mut paths = Vec::new();
    // open contours start at an edge with a single segment (image border)
    let mut starts: Vec<Edge> = incident
        .iter()
        .filter(|(_, segs)| segs.len() == 1)
        .map(|(&e, _)| e)
        .collect();
    starts.sort();
    let closed_starts: Vec<Edge> = segments.iter().map(|&(a, _)| a).collect();
    for start in starts.into_iter().chain(closed_starts) {
        let Some(&first) = incident[&start].iter().find(|&&s| !used[s]) else {
            continue;
        };
        let mut path = vec![start];
        let mut current = start;
        let mut seg = first;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == current { b } else { a };
            path.push(next);
            current = next;
            match incident[&current].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => break,
            }
        }
        paths.push(path.into_iter().map(|e| e.point(field, level)).collect());
    }
    paths
}

/// Pixels of `mask` lying on its marching-squares contour at level 0.5.
///
/// Every contour vertex sits on the edge between one pixel inside and one
/// outside the set; the inside pixel is taken. The result is sorted.
pub fn boundary_pixels(mask: &Grid<bool>) -> Vec<(usize, usize)> {
    let field = mask.map(|v| if v { 1.0 } else { 0.0 });
    let mut out = BTreeSet::new();
    for path in find_contours(&field, 0.5) {
        for (r, c) in path {
            let candidates = [
                (r.floor() as usize, c.floor() as usize),
                (r.ceil() as usize, c.ceil() as usize),
            ];
            for (y, x) in candidates {
                if mask.get(y, x) {
                    out.insert((y, x));
                }
            }
        }
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, lo: usize, hi: usize) -> Grid<bool> {
        Grid::from_fn(n, n, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
    }

    /// Brute force: set pixels with a 4-neighbour outside the set (inside the image).
    fn four_boundary(mask: &Grid<bool>) -> Vec<(usize, usize)> {
        let (h, w) = mask.dims();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                if nbrs.iter().any(|&(ny, nx)| ny < h && nx < w && !mask.get(ny, nx)) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    #[test]
    fn square_contour_is_closed_loop() {
        let sq = square(10, 3, 7).map(|v| if v { 1.0 } else { 0.0 });
        let paths = find_contours(&sq, 0.5);
        assert_eq!(paths.len(), 1);
        let p = &paths[0];
        assert_eq!(p.first(), p.last());
        // 4×4 square: 16 crossed edges, one vertex each, plus the closing repeat
        assert_eq!(p.len(), 17);
        for &(r, c) in p {
            assert!((r.fract() - 0.5).abs() < 1e-12 || (c.fract() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_matches_brute_force() {
        let mut state = 12345u64;
        for _ in 0..20 {
            let mask = Grid::from_fn(12, 9, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 60) < 9
            });
            assert_eq!(boundary_pixels(&mask), four_boundary(&mask));
        }
    }

    #[test]
    fn empty_and_full_masks_have_no_contour() {
        assert!(boundary_pixels(&Grid::filled(5, 5, false)).is_empty());
        assert!(boundary_pixels(&Grid::filled(5, 5, true)).is_empty());
    }
}
