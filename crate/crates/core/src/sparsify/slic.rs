//! SLIC superpixels (simple linear iterative clustering).
//!
//! Colour distance is measured on band intensities scaled to `0..100`, the
//! range of CIELAB lightness, so compactness values carry their usual
//! meaning for images normalised to `[0, 1]`.

use std::collections::VecDeque;

use crate::data::{Grid, Image};

const INTENSITY_SCALE: f64 = 100.0;
const MAX_ITER: usize = 10;

#[derive(Clone, Debug)]
struct Center {
    y: f64,
    x: f64,
    color: Vec<f64>,
}

fn pixel(image: &Image, y: usize, x: usize) -> Vec<f64> {
    (0..image.bands())
        .map(|b| image.get(b, y, x) * INTENSITY_SCALE)
        .collect()
}

fn gradient(image: &Image, y: usize, x: usize) -> f64 {
    let (h, w) = (image.height(), image.width());
    if y == 0 || x == 0 || y + 1 >= h || x + 1 >= w {
        return f64::INFINITY;
    }
    (0..image.bands())
        .map(|b| {
            let dx = image.get(b, y, x + 1) - image.get(b, y, x - 1);
            let dy = image.get(b, y + 1, x) - image.get(b, y - 1, x);
            dx * dx + dy * dy
        })
        .sum()
}

/// Label map with ids `0..n`; every superpixel is 4-connected.
pub fn slic(image: &Image, n_segments: usize, compactness: f64) -> Grid<u32> {
    let (h, w) = (image.height(), image.width());
    let step = (((h * w) as f64 / n_segments.max(1) as f64).sqrt()).max(1.0);
    let s = step.round().max(1.0) as usize;

    let mut centers = Vec::new();
    let mut y = s / 2;
    while y < h {
        let mut x = s / 2;
        while x < w {
            // move the seed to the lowest gradient in its 3×3 neighbourhood
            let (mut by, mut bx, mut best) = (y, x, gradient(image, y, x));
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let g = gradient(image, ny, nx);
                    if g < best {
                        (by, bx, best) = (ny, nx, g);
                    }
                }
            }
            centers.push(Center {
                y: by as f64,
                x: bx as f64,
                color: pixel(image, by, bx),
            });
            x += s;
        }
        y += s;
    }

    let spatial_weight = (compactness / step).powi(2);
    let mut labels = Grid::filled(h, w, u32::MAX);
    let mut dist = Grid::filled(h, w, f64::INFINITY);
    for _ in 0..MAX_ITER {
        dist.data_mut().fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let y0 = (c.y - 2.0 * step).floor().max(0.0) as usize;
            let y1 = ((c.y + 2.0 * step).ceil() as usize).min(h - 1);
            let x0 = (c.x - 2.0 * step).floor().max(0.0) as usize;
            let x1 = ((c.x + 2.0 * step).ceil() as usize).min(w - 1);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let dc: f64 = (0..image.bands())
                        .map(|b| {
                            let d = image.get(b, py, px) * INTENSITY_SCALE - c.color[b];
                            d * d
                        })
                        .sum();
                    let ds = (py as f64 - c.y).powi(2) + (px as f64 - c.x).powi(2);
                    let d = dc + spatial_weight * ds;
                    if d < dist.get(py, px) {
                        dist.set(py, px, d);
                        labels.set(py, px, k as u32);
                    }
                }
            }
        }
        let bands = image.bands();
        let mut sums = vec![(0.0, 0.0, vec![0.0; bands], 0usize); centers.len()];
        for py in 0..h {
            for px in 0..w {
                let l = labels.get(py, px);
                if l == u32::MAX {
                    continue;
                }
                let e = &mut sums[l as usize];
                e.0 += py as f64;
                e.1 += px as f64;
                for b in 0..bands {
                    e.2[b] += image.get(b, py, px) * INTENSITY_SCALE;
                }
                e.3 += 1;
            }
        }
        for (c, (sy, sx, col, n)) in centers.iter_mut().zip(sums) {
            if n > 0 {
                let n = n as f64;
                c.y = sy / n;
                c.x = sx / n;
                c.color = col.into_iter().map(|v| v / n).collect();
            }
        }
    }
    enforce_connectivity(&labels, (s * s / 4).max(1))
}

/// Relabels 4-connected components; components smaller than `min_size`
/// are merged into the previously visited neighbouring component.
fn enforce_connectivity(labels: &Grid<u32>, min_size: usize) -> Grid<u32> {
    let (h, w) = labels.dims();
    let mut out = Grid::filled(h, w, u32::MAX);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let nbrs = |y: usize, x: usize| {
        let mut v = Vec::with_capacity(4);
        if y > 0 {
            v.push((y - 1, x));
        }
        if y + 1 < h {
            v.push((y + 1, x));
        }
        if x > 0 {
            v.push((y, x - 1));
        }
        if x + 1 < w {
            v.push((y, x + 1));
        }
        v
    };
    for sy in 0..h {
        for sx in 0..w {
            if out.get(sy, sx) != u32::MAX {
                continue;
            }
            let original = labels.get(sy, sx);
            let adjacent = nbrs(sy, sx)
                .into_iter()
                .map(|(y, x)| out.get(y, x))
                .find(|&l| l != u32::MAX);
            let mut component = vec![(sy, sx)];
            out.set(sy, sx, next);
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                for (ny, nx) in nbrs(y, x) {
                    if out.get(ny, nx) == u32::MAX && labels.get(ny, nx) == original {
                        out.set(ny, nx, next);
                        component.push((ny, nx));
                        queue.push_back((ny, nx));
                    }
                }
            }
            match adjacent {
                Some(target) if component.len() < min_size => {
                    for (y, x) in component {
                        out.set(y, x, target);
                    }
                }
                _ => next += 1,
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components_are_connected(labels: &Grid<u32>) -> bool {
        let (h, w) = labels.dims();
        let n = labels.data().iter().max().map_or(0, |&m| m + 1);
        for l in 0..n {
            let cells: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| labels.get(y, x) == l)
                .collect();
            if cells.is_empty() {
                continue;
            }
            let mut seen = std::collections::HashSet::from([cells[0]]);
            let mut stack = vec![cells[0]];
            while let Some((y, x)) = stack.pop() {
                for (ny, nx) in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
                    if ny < h && nx < w && labels.get(ny, nx) == l && seen.insert((ny, nx)) {
                        stack.push((ny, nx));
                    }
                }
            }
            if seen.len() != cells.len() {
                return false;
            }
        }
        true
    }

    #[test]
    fn two_tone_image_splits_along_the_edge() {
        let img = Image::new(1, 32, 32, (0..1024).map(|i| if i % 32 < 16 { 0.1 } else { 0.9 }).collect());
        let labels = slic(&img, 16, 10.0);
        assert!(components_are_connected(&labels));
        // no superpixel straddles the intensity edge
        for l in 0..=*labels.data().iter().max().unwrap() {
            let sides: std::collections::BTreeSet<bool> = (0..1024)
                .filter(|&i| labels.data()[i] == l)
                .map(|i| i % 32 < 16)
                .collect();
            assert!(sides.len() <= 1, "label {l} crosses the edge");
        }
    }

    #[test]
    fn segment_count_is_in_the_right_range() {
        let img = Image::new(
            1,
            64,
            64,
            (0..4096)
                .map(|i| {
                    let (y, x) = ((i / 64) as f64, (i % 64) as f64);
                    0.5 + 0.25 * (x / 5.0).sin() * (y / 7.0).cos()
                })
                .collect(),
        );
        let labels = slic(&img, 64, 10.0);
        let n = labels.data().iter().max().unwrap() + 1;
        assert!((20..=140).contains(&n), "{n} segments");
        assert!(components_are_connected(&labels));
    }
}
