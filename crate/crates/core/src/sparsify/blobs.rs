//! Random binary blob masks covering a chosen fraction of the image.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Grid;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(field: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let (h, w) = field.dims();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let rows = Grid::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * field.get(y, reflect(x as isize + i as isize - r, w)))
            .sum::<f64>()
    });
    Grid::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows.get(reflect(y as isize + i as isize - r, h), x))
            .sum()
    })
}

/// Smooth random blobs covering `round(fraction · h · w)` pixels.
///
/// Random impulses are blurred and the highest-valued pixels kept, so the
/// masks for different fractions under the same rng state are nested.
pub fn binary_blobs(
    h: usize,
    w: usize,
    blob_size_fraction: f64,
    fraction: f64,
    rng: &mut impl Rng,
) -> Grid<bool> {
    let length = h.max(w) as f64;
    let n_points = ((1.0 / blob_size_fraction) as usize).pow(2).max(1);
    let mut field = Grid::filled(h, w, 0.0);
    for _ in 0..n_points {
        let y = rng.gen_range(0..h);
        let x = rng.gen_range(0..w);
        field.set(y, x, 1.0);
    }
    let sigma = (0.25 * length * blob_size_fraction).max(0.5);
    let smooth = gaussian_blur(&field, sigma);

    // ties (e.g. far from every impulse) are broken by a random order
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(rng);
    let mut tiebreak = vec![0usize; h * w];
    for (rank, &i) in order.iter().enumerate() {
        tiebreak[i] = rank;
    }
    let mut ranked: Vec<usize> = (0..h * w).collect();
    ranked.sort_by(|&a, &b| {
        smooth.data()[b]
            .total_cmp(&smooth.data()[a])
            .then(tiebreak[a].cmp(&tiebreak[b]))
    });
    let keep = (fraction.clamp(0.0, 1.0) * (h * w) as f64).round() as usize;
    let mut out = Grid::filled(h, w, false);
    for &i in &ranked[..keep] {
        out.data_mut()[i] = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_matches_fraction() {
        for frac in [0.0, 0.1, 0.5, 1.0] {
            let b = binary_blobs(32, 40, 0.1, frac, &mut crate::rng(3));
            let on = b.data().iter().filter(|&&v| v).count();
            assert_eq!(on, (frac * 1280.0).round() as usize);
        }
    }

    #[test]
    fn blobs_are_nested_across_fractions() {
        let small = binary_blobs(32, 32, 0.1, 0.3, &mut crate::rng(8));
        let large = binary_blobs(32, 32, 0.1, 0.6, &mut crate::rng(8));
        assert!(small.data().iter().zip(large.data()).all(|(&s, &l)| !s || l));
    }

    #[test]
    fn blur_preserves_mass() {
        let mut f = Grid::filled(20, 20, 0.0);
        f.set(10, 10, 1.0);
        let s = gaussian_blur(&f, 1.5);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
