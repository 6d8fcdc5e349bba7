//! Property tests over randomly sized inputs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelfit::eval::{affine_deviation, noise_ceiling, DeviationMode};
use voxelfit::readouts::factorized::factorized_forward;
use voxelfit::readouts::sst::sst_forward;
use voxelfit::readouts::{FactorizedDims, FactorizedReadout, SstConfig, SstReadout};
use voxelfit::sampler::{batch_affine_transform, transform_map};
use voxelfit::tensor_io::ResponseSet;
use voxelfit::training::{split_dataset, SplitSpec};
use voxelfit::{AffineParams, Padding, Readout, Tensor, IDENTITY};

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `y_n = sum_c F[n,c] sum_{w,h} E[c,w,h] S[n,w,h]`, written as plain loops.
fn reference_factorized(e: &[f64], s: &[f64], f: &[f64], n: usize, c: usize, w: usize, h: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for v in 0..n {
        for ch in 0..c {
            for i in 0..w {
                for j in 0..h {
                    y[v] += f[v * c + ch] * e[(ch * w + i) * h + j] * s[(v * w + i) * h + j];
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..5, 1..4), wide in any::<bool>(), seed in any::<u64>()) {
        let len: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = if wide {
            Tensor::from_f64(shape.clone(), uniform(&mut rng, len)).unwrap()
        } else {
            Tensor::from_f32(shape.clone(), (0..len).map(|_| rng.random::<f32>()).collect()).unwrap()
        };
        let bytes = t.to_bytes();
        let elem = if wide { 8 } else { 4 };
        prop_assert_eq!(bytes.len(), 6 + 8 * shape.len() + elem * len);
        let back = Tensor::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn identity_warp_is_exact(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = uniform(&mut rng, w * h);
        let mut out = vec![0.0; w * h];
        transform_map(&map, w, h, &IDENTITY, Padding::Zeros, &mut out);
        prop_assert_eq!(&out, &map);
        // the general path (not the identity shortcut) must agree too
        let almost = [1.0, 0.0, 0.0, 0.0, 1.0, 1e-300];
        transform_map(&map, w, h, &almost, Padding::Zeros, &mut out);
        prop_assert_eq!(&out, &map);
    }

    #[test]
    fn warp_is_linear_in_the_map(w in 2usize..10, h in 2usize..10, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m1 = uniform(&mut rng, w * h);
        let m2 = uniform(&mut rng, w * h);
        let theta: [f64; 6] = std::array::from_fn(|k| if k == 0 || k == 4 { 1.0 } else { 0.0 } + 0.3 * rng.random_range(-1.0..1.0));
        let mix: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect();
        let (mut o1, mut o2, mut om) = (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]);
        transform_map(&m1, w, h, &theta, Padding::Zeros, &mut o1);
        transform_map(&m2, w, h, &theta, Padding::Zeros, &mut o2);
        transform_map(&mix, w, h, &theta, Padding::Zeros, &mut om);
        for k in 0..w * h {
            prop_assert!((om[k] - (a * o1[k] + b * o2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn factorized_matches_loops(n in 1usize..6, c in 1usize..5, w in 1usize..7, h in 1usize..7, batch in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = FactorizedDims { voxels: n, channels: c, width: w, height: h };
        let s = uniform(&mut rng, n * w * h);
        let f = uniform(&mut rng, n * c);
        let e = uniform(&mut rng, batch * c * w * h);
        let model = FactorizedReadout::from_params(dims, s.clone(), f.clone(), None).unwrap();
        let y = factorized_forward(&e, batch, &model).unwrap();
        for b in 0..batch {
            let want = reference_factorized(&e[b * c * w * h..(b + 1) * c * w * h], &s, &f, n, c, w, h);
            for v in 0..n {
                prop_assert!((y[b * n + v] - want[v]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_init_sst_is_factorized(n in 1usize..6, c in 1usize..5, w in 2usize..9, h in 2usize..9, l in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = FactorizedDims { voxels: n, channels: c, width: w, height: h };
        let sst = SstReadout::init(dims, SstConfig { loc_dim: l, ..Default::default() }, &mut rng).unwrap();
        let fac = FactorizedReadout::from_params(
            dims,
            sst.params().value("spatial").to_vec(),
            sst.params().value("feature").to_vec(),
            None,
        ).unwrap();
        let e = uniform(&mut rng, 3 * c * w * h);
        let loc: Vec<f64> = (0..3 * l).map(|_| rng.random_range(-5.0..5.0)).collect();
        let a = sst_forward(&e, Some(&loc), 3, &sst).unwrap();
        let b = factorized_forward(&e, 3, &fac).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_warp_matches_per_map(m in 1usize..5, w in 2usize..7, h in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = uniform(&mut rng, m * w * h);
        let rows: Vec<[f64; 6]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let out = batch_affine_transform(&maps, w, h, &AffineParams { rows: rows.clone() }, Padding::Zeros).unwrap();
        let mut one = vec![0.0; w * h];
        for k in 0..m {
            transform_map(&maps[k * w * h..(k + 1) * w * h], w, h, &rows[k], Padding::Zeros, &mut one);
            prop_assert_eq!(&out[k * w * h..(k + 1) * w * h], &one[..]);
        }
    }

    #[test]
    fn fraction_splits_partition(stimuli in 1usize..300, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (train, rest) = (a, 1.0 - a);
        let (val, test) = (rest * b, rest - rest * b);
        let s = split_dataset(stimuli, &SplitSpec::Fractions { train, val, test }, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..stimuli).collect::<Vec<_>>());
        prop_assert_eq!(&s, &split_dataset(stimuli, &SplitSpec::Fractions { train, val, test }, seed).unwrap());
    }

    #[test]
    fn noise_ceiling_in_unit_interval(s in 2usize..30, r in 2usize..5, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = uniform(&mut rng, s * r * n);
        let nc = noise_ceiling(&ResponseSet::new(s, r, n, data).unwrap()).unwrap();
        for x in nc.nc {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn deviation_ignores_shared_offset(s in 2usize..10, u in 1usize..5, seed in any::<u64>(), stacked in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas: Vec<[f64; 6]> = (0..s * u).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let offset: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let shifted: Vec<[f64; 6]> = thetas.iter().map(|t| std::array::from_fn(|k| t[k] + offset[k])).collect();
        let mode = if stacked { DeviationMode::StackedNorm } else { DeviationMode::MeanNorm };
        let a = affine_deviation(&thetas, s, u, mode).unwrap();
        let b = affine_deviation(&shifted, s, u, mode).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(*x >= 0.0);
        }
    }
}
