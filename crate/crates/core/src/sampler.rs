//! Affine sampling grids and differentiable bilinear sampling.
//!
//! A map is a `W x H` row-major array indexed `(w, h)`. Normalized
//! coordinates follow the spatial-transformer convention: `x` runs along
//! the `h` axis, `y` along the `w` axis, both in `[-1, 1]` with `-1` at the
//! center of the first pixel and `+1` at the center of the last one
//! (corner-aligned). Grids map each *target* pixel to a *source* coordinate,
//! so `[x_s, y_s] = theta * [x_t, y_t, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2x3 affine matrix `[a11, a12, a13, a21, a22, a23]`.
pub type Theta = [f64; 6];

pub const IDENTITY: Theta = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// How samples that fall outside the map are filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zeros,
    Border,
}

/// Per-map affine transforms, one `Theta` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub rows: Vec<Theta>,
}

impl AffineParams {
    pub fn identity(m: usize) -> Self {
        AffineParams { rows: vec![IDENTITY; m] }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Source coordinates for every target pixel of a `W x H` map.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub width: usize,
    pub height: usize,
    /// `(x, y)` per target pixel, row-major over `(w, h)`.
    pub coords: Vec<[f64; 2]>,
}

/// Normalized coordinate of pixel `i` on an axis of `n` pixels.
#[inline]
pub fn normalized(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Snap tolerance in pixel units. Keeps identity grids on exact pixel
/// centers despite rounding in the normalize/denormalize round trip.
const SNAP: f64 = 1e-10;

#[inline]
fn to_pixel(coord: f64, n: usize) -> f64 {
    let u = (coord + 1.0) * 0.5 * (n as f64 - 1.0);
    let r = u.round();
    if (u - r).abs() < SNAP {
        r
    } else {
        u
    }
}

pub fn affine_grid(theta: &Theta, width: usize, height: usize) -> Result<SamplingGrid> {
    if width == 0 || height == 0 {
        return Err(Error::Config("sampling grid needs positive dimensions".into()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite affine parameters {theta:?}")));
    }
    let mut coords = Vec::with_capacity(width * height);
    for w in 0..width {
        let yt = normalized(w, width);
        for h in 0..height {
            let xt = normalized(h, height);
            coords.push(apply(theta, xt, yt));
        }
    }
    Ok(SamplingGrid { width, height, coords })
}

#[inline]
fn apply(theta: &Theta, xt: f64, yt: f64) -> [f64; 2] {
    [
        theta[0] * xt + theta[1] * yt + theta[2],
        theta[3] * xt + theta[4] * yt + theta[5],
    ]
}

/// The four bilinear neighbours of one source coordinate.
///
/// `weight` interpolates values; `dx`/`dy` are the derivatives of those
/// weights with respect to the normalized source coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

impl Tap {
    pub fn new(x: f64, y: f64, width: usize, height: usize, padding: Padding) -> Self {
        // u along h (x), v along w (y)
        let mut u = to_pixel(x, height);
        let mut v = to_pixel(y, width);
        let mut du_dx = 0.5 * (height as f64 - 1.0);
        let mut dv_dy = 0.5 * (width as f64 - 1.0);
        if padding == Padding::Border {
            let (umax, vmax) = ((height - 1) as f64, (width - 1) as f64);
            if !(0.0..=umax).contains(&u) {
                u = u.clamp(0.0, umax);
                du_dx = 0.0;
            }
            if !(0.0..=vmax).contains(&v) {
                v = v.clamp(0.0, vmax);
                dv_dy = 0.0;
            }
        }
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = u - u0;
        let fv = v - v0;
        let (u0, v0) = (u0 as i64, v0 as i64);
        let index_of = |vv: i64, uu: i64| -> Option<usize> {
            let (vv, uu) = match padding {
                Padding::Zeros => (vv, uu),
                Padding::Border => (vv.clamp(0, width as i64 - 1), uu.clamp(0, height as i64 - 1)),
            };
            if vv < 0 || uu < 0 || vv >= width as i64 || uu >= height as i64 {
                None
            } else {
                Some(vv as usize * height + uu as usize)
            }
        };
        Tap {
            index: [
                index_of(v0, u0),
                index_of(v0, u0 + 1),
                index_of(v0 + 1, u0),
                index_of(v0 + 1, u0 + 1),
            ],
            weight: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
            dx: [
                -(1.0 - fv) * du_dx,
                (1.0 - fv) * du_dx,
                -fv * du_dx,
                fv * du_dx,
            ],
            dy: [
                -(1.0 - fu) * dv_dy,
                -fu * dv_dy,
                (1.0 - fu) * dv_dy,
                fu * dv_dy,
            ],
        }
    }

    #[inline]
    pub fn value(&self, map: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            if let Some(i) = self.index[k] {
                acc += self.weight[k] * map[i];
            }
        }
        acc
    }

    /// Derivatives of the sampled value with respect to `(x, y)`.
    #[inline]
    pub fn grad_xy(&self, map: &[f64]) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        for k in 0..4 {
            if let Some(i) = self.index[k] {
                gx += self.dx[k] * map[i];
                gy += self.dy[k] * map[i];
            }
        }
        (gx, gy)
    }

    /// Adds `upstream * d value / d map` into `dmap`.
    #[inline]
    pub fn scatter(&self, dmap: &mut [f64], upstream: f64) {
        for k in 0..4 {
            if let Some(i) = self.index[k] {
                dmap[i] += self.weight[k] * upstream;
            }
        }
    }
}

fn check_map(map: &[f64], width: usize, height: usize) -> Result<()> {
    if map.len() != width * height {
        return Err(Error::shape("map", &[width, height], &[map.len()]));
    }
    Ok(())
}

pub fn bilinear_sample(map: &[f64], grid: &SamplingGrid, padding: Padding) -> Result<Vec<f64>> {
    check_map(map, grid.width, grid.height)?;
    Ok(grid
        .coords
        .iter()
        .map(|&[x, y]| Tap::new(x, y, grid.width, grid.height, padding).value(map))
        .collect())
}

/// Gradients of `sum(dout * bilinear_sample(map, grid))` with respect to the
/// map values and the grid coordinates.
pub fn bilinear_sample_backward(
    map: &[f64],
    grid: &SamplingGrid,
    dout: &[f64],
    padding: Padding,
) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
    check_map(map, grid.width, grid.height)?;
    check_map(dout, grid.width, grid.height)?;
    let mut dmap = vec![0.0; map.len()];
    let mut dgrid = Vec::with_capacity(grid.coords.len());
    for (&[x, y], &g) in grid.coords.iter().zip(dout) {
        let tap = Tap::new(x, y, grid.width, grid.height, padding);
        tap.scatter(&mut dmap, g);
        let (gx, gy) = tap.grad_xy(map);
        dgrid.push([g * gx, g * gy]);
    }
    Ok((dmap, dgrid))
}

/// Warps one map by `theta` into `out` without materializing the grid.
pub fn transform_map(map: &[f64], width: usize, height: usize, theta: &Theta, padding: Padding, out: &mut [f64]) {
    if *theta == IDENTITY {
        out.copy_from_slice(map);
        return;
    }
    let mut p = 0;
    for w in 0..width {
        let yt = normalized(w, width);
        for h in 0..height {
            let xt = normalized(h, height);
            let [x, y] = apply(theta, xt, yt);
            out[p] = Tap::new(x, y, width, height, padding).value(map);
            p += 1;
        }
    }
}

/// Backward of [`transform_map`]: accumulates into `dmap` (when given) and
/// returns the gradient with respect to `theta`.
pub fn transform_map_backward(
    map: &[f64],
    width: usize,
    height: usize,
    theta: &Theta,
    padding: Padding,
    dout: &[f64],
    mut dmap: Option<&mut [f64]>,
) -> Theta {
    let mut dtheta = [0.0; 6];
    let mut p = 0;
    for w in 0..width {
        let yt = normalized(w, width);
        for h in 0..height {
            let g = dout[p];
            p += 1;
            if g == 0.0 {
                continue;
            }
            let xt = normalized(h, height);
            let [x, y] = apply(theta, xt, yt);
            let tap = Tap::new(x, y, width, height, padding);
            if let Some(dm) = dmap.as_deref_mut() {
                tap.scatter(dm, g);
            }
            let (gx, gy) = tap.grad_xy(map);
            let (gx, gy) = (g * gx, g * gy);
            dtheta[0] += gx * xt;
            dtheta[1] += gx * yt;
            dtheta[2] += gx;
            dtheta[3] += gy * xt;
            dtheta[4] += gy * yt;
            dtheta[5] += gy;
        }
    }
    dtheta
}

/// Applies a distinct affine transform to each of `M` maps (`M x W x H`).
pub fn batch_affine_transform(
    maps: &[f64],
    width: usize,
    height: usize,
    thetas: &AffineParams,
    padding: Padding,
) -> Result<Vec<f64>> {
    let plane = width * height;
    if plane == 0 || maps.len() != thetas.len() * plane {
        return Err(Error::shape(
            "maps vs affine rows",
            &[maps.len() / plane.max(1), width, height],
            &[thetas.len(), 6],
        ));
    }
    let mut out = vec![0.0; maps.len()];
    for ((map, o), theta) in maps.chunks_exact(plane).zip(out.chunks_exact_mut(plane)).zip(&thetas.rows) {
        transform_map(map, width, height, theta, padding, o);
    }
    Ok(out)
}

/// Backward of [`batch_affine_transform`]. Returns `(dmaps, dthetas)`;
/// `dmaps` is only computed when `want_maps` is set.
pub fn batch_affine_transform_backward(
    maps: &[f64],
    width: usize,
    height: usize,
    thetas: &AffineParams,
    padding: Padding,
    dout: &[f64],
    want_maps: bool,
) -> Result<(Option<Vec<f64>>, Vec<Theta>)> {
    let plane = width * height;
    if plane == 0 || maps.len() != thetas.len() * plane || dout.len() != maps.len() {
        return Err(Error::shape(
            "maps vs affine rows",
            &[maps.len() / plane.max(1), width, height],
            &[thetas.len(), 6],
        ));
    }
    let mut dmaps = want_maps.then(|| vec![0.0; maps.len()]);
    let mut dthetas = Vec::with_capacity(thetas.len());
    for (m, theta) in thetas.rows.iter().enumerate() {
        let range = m * plane..(m + 1) * plane;
        let dm = dmaps.as_mut().map(|d| &mut d[range.clone()]);
        dthetas.push(transform_map_backward(
            &maps[range.clone()],
            width,
            height,
            theta,
            padding,
            &dout[range],
            dm,
        ));
    }
    Ok((dmaps, dthetas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar reference: evaluates the bilinear formula directly from the
    /// four corner pixels, with zero padding.
    fn reference_sample(map: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
        let u = (x + 1.0) / 2.0 * (h as f64 - 1.0);
        let v = (y + 1.0) / 2.0 * (w as f64 - 1.0);
        let (u0, v0) = (u.floor(), v.floor());
        let pix = |vv: f64, uu: f64| {
            if vv < 0.0 || uu < 0.0 || vv > (w - 1) as f64 || uu > (h - 1) as f64 {
                0.0
            } else {
                map[vv as usize * h + uu as usize]
            }
        };
        let (a, b) = (u - u0, v - v0);
        pix(v0, u0) * (1.0 - a) * (1.0 - b)
            + pix(v0, u0 + 1.0) * a * (1.0 - b)
            + pix(v0 + 1.0, u0) * (1.0 - a) * b
            + pix(v0 + 1.0, u0 + 1.0) * a * b
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_grid_is_normalized_coords() {
        let g = affine_grid(&IDENTITY, 3, 4).unwrap();
        assert_eq!(g.coords[0], [-1.0, -1.0]);
        assert_eq!(g.coords[3], [1.0, -1.0]);
        assert_eq!(g.coords[4], [-1.0, 0.0]);
        assert_eq!(g.coords[11], [1.0, 1.0]);
    }

    #[test]
    fn translation_grid() {
        let g = affine_grid(&[1.0, 0.0, 0.5, 0.0, 1.0, 0.0], 3, 3).unwrap();
        let id = affine_grid(&IDENTITY, 3, 3).unwrap();
        for (a, b) in g.coords.iter().zip(&id.coords) {
            assert_eq!(a[0], b[0] + 0.5);
            assert_eq!(a[1], b[1]);
        }
    }

    #[test]
    fn scaled_corner_is_out_of_bounds() {
        let g = affine_grid(&[2.0, 0.0, 0.0, 0.0, 2.0, 0.0], 3, 3).unwrap();
        assert_eq!(g.coords[0], [-2.0, -2.0]);
    }

    #[test]
    fn non_finite_theta_rejected() {
        assert!(affine_grid(&[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 2).is_err());
    }

    #[test]
    fn identity_sampling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (w, h) in [(1, 1), (2, 5), (7, 7), (16, 9), (28, 28)] {
            let map = random_map(&mut rng, w * h);
            let g = affine_grid(&IDENTITY, w, h).unwrap();
            assert_eq!(bilinear_sample(&map, &g, Padding::Zeros).unwrap(), map);
            assert_eq!(bilinear_sample(&map, &g, Padding::Border).unwrap(), map);
        }
    }

    #[test]
    fn center_of_two_by_two() {
        let g = SamplingGrid { width: 2, height: 2, coords: vec![[0.0, 0.0]; 4] };
        let out = bilinear_sample(&[1.0, 2.0, 3.0, 4.0], &g, Padding::Zeros).unwrap();
        assert_eq!(out, vec![2.5; 4]);
    }

    #[test]
    fn far_outside_is_zero() {
        let g = SamplingGrid { width: 3, height: 3, coords: vec![[-5.0, -5.0]; 9] };
        let out = bilinear_sample(&[1.0; 9], &g, Padding::Zeros).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // border padding replicates the corner instead
        let out = bilinear_sample(&[7.0; 9], &g, Padding::Border).unwrap();
        assert!(out.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn one_pixel_shift_moves_columns() {
        // W = H = 4: pixel pitch is 2/3 in normalized units.
        let map: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let theta = AffineParams { rows: vec![[1.0, 0.0, 2.0 / 3.0, 0.0, 1.0, 0.0]] };
        let out = batch_affine_transform(&map, 4, 4, &theta, Padding::Zeros).unwrap();
        for w in 0..4 {
            for h in 0..4 {
                let expected = if h < 3 { map[w * 4 + h + 1] } else { 0.0 };
                assert!((out[w * 4 + h] - expected).abs() < 1e-12, "{w},{h}");
            }
        }
    }

    #[test]
    fn rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_map(&mut rng, 25);
        let b = random_map(&mut rng, 25);
        let ta = [0.9, 0.1, 0.2, -0.1, 1.1, 0.0];
        let tb = [1.2, 0.0, -0.3, 0.2, 0.8, 0.1];
        let ab = [a.clone(), b.clone()].concat();
        let ba = [b, a].concat();
        let o1 = batch_affine_transform(&ab, 5, 5, &AffineParams { rows: vec![ta, tb] }, Padding::Zeros).unwrap();
        let o2 = batch_affine_transform(&ba, 5, 5, &AffineParams { rows: vec![tb, ta] }, Padding::Zeros).unwrap();
        assert_eq!(&o1[..25], &o2[25..]);
        assert_eq!(&o1[25..], &o2[..25]);
        assert!(batch_affine_transform(&ab, 5, 5, &AffineParams::identity(3), Padding::Zeros).is_err());
    }

    #[test]
    fn matches_reference_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let map = random_map(&mut rng, 64);
            let coords: Vec<[f64; 2]> =
                (0..64).map(|_| [rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3)]).collect();
            let grid = SamplingGrid { width: 8, height: 8, coords: coords.clone() };
            let out = bilinear_sample(&map, &grid, Padding::Zeros).unwrap();
            for (o, [x, y]) in out.iter().zip(coords) {
                assert!((o - reference_sample(&map, 8, 8, x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_map_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_map(&mut rng, 36);
        let b = random_map(&mut rng, 36);
        let grid = affine_grid(&[0.8, 0.3, 0.1, -0.2, 1.1, -0.15], 6, 6).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let sa = bilinear_sample(&a, &grid, Padding::Zeros).unwrap();
        let sb = bilinear_sample(&b, &grid, Padding::Zeros).unwrap();
        let sm = bilinear_sample(&mix, &grid, Padding::Zeros).unwrap();
        for i in 0..36 {
            assert!((sm[i] - (2.0 * sa[i] - 0.5 * sb[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (6, 7);
        let map = random_map(&mut rng, w * h);
        let dout = random_map(&mut rng, w * h);
        // chosen so no sample sits on a pixel boundary, where bilinear sampling has a kink
        let theta = [0.9, 0.15, 0.12, -0.13, 1.05, -0.07];
        let objective = |m: &[f64], t: &Theta| {
            let mut o = vec![0.0; w * h];
            transform_map(m, w, h, t, Padding::Zeros, &mut o);
            o.iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dmap = vec![0.0; w * h];
        let dtheta = transform_map_backward(&map, w, h, &theta, Padding::Zeros, &dout, Some(&mut dmap));
        let eps = 1e-6;
        for k in 0..6 {
            let (mut p, mut m) = (theta, theta);
            p[k] += eps;
            m[k] -= eps;
            let fd = (objective(&map, &p) - objective(&map, &m)) / (2.0 * eps);
            assert!((fd - dtheta[k]).abs() / fd.abs().max(1e-8) < 1e-4, "theta[{k}]: {fd} vs {}", dtheta[k]);
        }
        // linear in the map, so differences are exact up to rounding
        for i in 0..w * h {
            let mut p = map.clone();
            p[i] += 1.0;
            let fd = objective(&p, &theta) - objective(&map, &theta);
            assert!((fd - dmap[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_backward_matches_tap_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = random_map(&mut rng, 25);
        let coords: Vec<[f64; 2]> =
            (0..25).map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]).collect();
        let grid = SamplingGrid { width: 5, height: 5, coords };
        let dout = vec![1.0; 25];
        let (_, dgrid) = bilinear_sample_backward(&map, &grid, &dout, Padding::Zeros).unwrap();
        let eps = 1e-7;
        for (p, &[x, y]) in grid.coords.iter().enumerate() {
            let f = |x: f64, y: f64| reference_sample(&map, 5, 5, x, y);
            let gx = (f(x + eps, y) - f(x - eps, y)) / (2.0 * eps);
            let gy = (f(x, y + eps) - f(x, y - eps)) / (2.0 * eps);
            assert!((gx - dgrid[p][0]).abs() < 1e-6);
            assert!((gy - dgrid[p][1]).abs() < 1e-6);
        }
    }
}
