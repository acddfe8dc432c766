mod common;

use nalgebra::DMatrix;
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wait_core::data_pipeline::TensorImage;
use wait_core::metrics::{
    extract_features, extractor_by_name, fid, flow_file_name, flow_warping_error, fwe_pair, parse_flo, temporal_mse,
    temporal_mse_raw, FeatureStats, StatsAccumulator, StylizedSequence, FLO_MAGIC,
};
use wait_core::warping_ops::{FlowField, OcclusionMask};
use wait_core::Error;

fn samples(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64, shift: f64) -> Vec<Vec<f64>> {
    let mix: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..dim)
                .map(|i| scale * (0..dim).map(|j| mix[i * dim + j] * z[j]).sum::<f64>() + shift + 0.1 * i as f64)
                .collect()
        })
        .collect()
}

/// Mean and unbiased covariance computed in two passes.
fn two_pass(xs: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (xs.len(), xs[0].len());
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    (mean, cov / (n - 1) as f64)
}

/// Principal square root by the Denman-Beavers iteration.
fn db_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible");
        let zi = z.clone().try_inverse().expect("invertible");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() < 1e-14 * ny.norm();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

fn fid_oracle(m1: &[f64], c1: &DMatrix<f64>, m2: &[f64], c2: &DMatrix<f64>) -> f64 {
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    dm + c1.trace() + c2.trace() - 2.0 * db_sqrt(&(c1 * c2)).trace()
}

fn stats_of(xs: &[Vec<f64>]) -> FeatureStats {
    FeatureStats::from_features(xs.iter().map(|x| x.as_slice())).unwrap()
}

#[test]
fn streaming_statistics_match_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = samples(&mut rng, 300, 6, 40.0, 1e4);
    let mut acc = StatsAccumulator::new(6);
    for x in &xs {
        acc.push(x).unwrap();
    }
    let s = acc.finish().unwrap();
    let (mean, cov) = two_pass(&xs);
    assert_eq!(s.sample_count, 300);
    for i in 0..6 {
        assert!((s.mean[i] - mean[i]).abs() < 1e-9 * mean[i].abs());
        for j in 0..6 {
            assert!((s.covariance[i * 6 + j] - cov[(i, j)]).abs() < 1e-8 * cov.amax());
        }
    }
}

#[test]
fn fid_matches_denman_beavers_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for dim in [2, 5, 12] {
        let a = samples(&mut rng, 100, dim, 1.0, 0.0);
        let b = samples(&mut rng, 80, dim, 1.7, 0.4);
        let (ma, ca) = two_pass(&a);
        let (mb, cb) = two_pass(&b);
        let want = fid_oracle(&ma, &ca, &mb, &cb);
        let got = fid(&stats_of(&a), &stats_of(&b)).unwrap();
        assert!((got - want).abs() < 1e-8 * want.max(1.0), "dim {dim}: {got} vs {want}");
    }
}

#[test]
fn fid_of_gaussians_with_diagonal_covariances() {
    // Closed form: |dm|^2 + sum (sqrt(a) - sqrt(b))^2.
    let a = FeatureStats::new(vec![0.0, 1.0], vec![4.0, 0.0, 0.0, 1.0], 10).unwrap();
    let b = FeatureStats::new(vec![3.0, 1.0], vec![1.0, 0.0, 0.0, 9.0], 10).unwrap();
    let want = 9.0 + (2.0f64 - 1.0).powi(2) + (1.0f64 - 3.0).powi(2);
    assert!((fid(&a, &b).unwrap() - want).abs() < 1e-10);
}

#[test]
fn fid_handles_rank_deficient_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Fewer samples than dimensions.
    let a = samples(&mut rng, 5, 10, 1.0, 0.0);
    let b = samples(&mut rng, 6, 10, 1.0, 0.2);
    let d = fid(&stats_of(&a), &stats_of(&b)).unwrap();
    assert!(d.is_finite() && d >= -1e-6);
}

#[test]
fn fid_rejects_mismatched_dimensions() {
    let a = FeatureStats::new(vec![0.0], vec![1.0], 3).unwrap();
    let b = FeatureStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 3).unwrap();
    assert!(fid(&a, &b).is_err());
    let asym = FeatureStats::new(vec![0.0, 0.0], vec![1.0, 2.0, 0.0, 1.0], 3).unwrap();
    assert!(matches!(fid(&asym, &asym), Err(Error::Numerical(_))));
    let indefinite = FeatureStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0], 3).unwrap();
    assert!(indefinite.validate().is_err());
    assert!(FeatureStats::new(vec![0.0], vec![1.0], 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fid_is_symmetric_and_nonnegative(seed in any::<u64>(), dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = stats_of(&samples(&mut rng, 40, dim, 1.0, 0.0));
        let b = stats_of(&samples(&mut rng, 40, dim, 2.0, 0.5));
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= -1e-8);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
    }

    #[test]
    fn fid_grows_with_mean_shift(seed in any::<u64>(), s in 0.1f64..3.0) {
        // Shifting every feature by s adds exactly dim * s^2.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = samples(&mut rng, 30, 4, 1.0, 0.0);
        let moved: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v + s).collect()).collect();
        let d = fid(&stats_of(&xs), &stats_of(&moved)).unwrap();
        prop_assert!((d - 4.0 * s * s).abs() < 1e-6);
    }

    #[test]
    fn temporal_mse_ignores_constant_offsets(seed in any::<u64>(), c in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Array3<f64>> = (0..4).map(|_| Array3::from_shape_simple_fn((3, 5, 5), || rng.random_range(0.0..255.0))).collect();
        let outs: Vec<Array3<f64>> = (0..4).map(|_| Array3::from_shape_simple_fn((3, 5, 5), || rng.random_range(0.0..255.0))).collect();
        let shifted: Vec<Array3<f64>> = outs.iter().map(|o| o + c).collect();
        let a = temporal_mse_raw(&frames, &outs).unwrap();
        let b = temporal_mse_raw(&frames, &shifted).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        prop_assert!(temporal_mse_raw(&frames, &frames).unwrap().abs() < 1e-10);
    }
}

#[test]
fn temporal_mse_hand_computed() {
    // One channel, one pixel, two frames: input step 10, output step 4.
    let x = vec![Array3::from_elem((1, 1, 1), 0.0), Array3::from_elem((1, 1, 1), 10.0)];
    let y = vec![Array3::from_elem((1, 1, 1), 5.0), Array3::from_elem((1, 1, 1), 9.0)];
    assert!((temporal_mse_raw(&x, &y).unwrap() - 36.0).abs() < 1e-12);
    assert!(temporal_mse_raw(&x, &y[..1]).is_err());
    let x = vec![Array3::from_elem((1, 1, 1), 0.0), Array3::from_elem((1, 1, 1), 2.0)];
    let y = vec![Array3::from_elem((1, 1, 1), 0.0), Array3::from_elem((1, 1, 1), 1.0)];
    assert_eq!(temporal_mse_raw(&x, &y).unwrap(), 1.0);
}

#[test]
fn temporal_mse_on_images_uses_the_8bit_scale() {
    let a = TensorImage::constant(4, -1.0).unwrap();
    let b = TensorImage::constant(4, 1.0).unwrap();
    // Input steps by 255 on 4x4x3 values, output stays constant; summed, not averaged.
    let v = temporal_mse(&[a.clone(), b.clone()], &[a.clone(), a]).unwrap();
    assert!((v - 48.0 * 255.0 * 255.0).abs() < 1e-6);
}

#[test]
fn fwe_pair_hand_computed_and_masking() {
    // Zero flow: error is the mean squared difference on the [0, 1] scale.
    let prev = TensorImage::constant(3, -1.0).unwrap().to_unit_scale();
    let curr = TensorImage::constant(3, 0.0).unwrap().to_unit_scale();
    let z = FlowField::zeros(3, 3);
    let e = fwe_pair(&prev, &curr, &z, &OcclusionMask::full(3, 3)).unwrap();
    assert!((e - 0.25).abs() < 1e-12);
    assert_eq!(fwe_pair(&prev, &curr, &z, &OcclusionMask::empty(3, 3)).unwrap(), 0.0);
}

#[test]
fn fwe_is_zero_for_content_moving_with_the_flow() {
    // Frame t is frame t-1 shifted right by one pixel; flow points back.
    let make = |shift: usize| {
        TensorImage::new(Array3::from_shape_fn((3, 6, 8), |(c, y, x)| {
            if x >= shift { (((x - shift) * 3 + y + c) % 5) as f64 / 5.0 - 0.5 } else { 0.0 }
        }))
        .unwrap()
    };
    let frames = vec![make(0), make(1), make(2)];
    let flow = FlowField::constant(6, 8, -1.0, 0.0);
    let mut mask = OcclusionMask::full(6, 8);
    for y in 0..6 {
        mask.data[[y, 0]] = 0;
    }
    let seq = StylizedSequence {
        frames,
        flows: vec![flow.clone(), flow],
        masks: vec![mask.clone(), mask],
    };
    assert!(flow_warping_error(&seq).unwrap().abs() < 1e-12);
}

#[test]
fn flo_parser_rejects_malformed_files() {
    let p = std::path::Path::new("x.flo");
    let mut ok = Vec::new();
    ok.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    ok.extend_from_slice(&2i32.to_le_bytes());
    ok.extend_from_slice(&1i32.to_le_bytes());
    ok.extend_from_slice(&[0u8; 16]);
    assert!(parse_flo(&ok, p).is_ok());
    let mut bad_magic = ok.clone();
    bad_magic[0] ^= 1;
    assert!(matches!(parse_flo(&bad_magic, p), Err(Error::FlowFormat { .. })));
    assert!(parse_flo(&ok[..ok.len() - 1], p).is_err());
    let mut trailing = ok.clone();
    trailing.push(0);
    assert!(parse_flo(&trailing, p).is_err());
    let mut zero = ok.clone();
    zero[4..8].copy_from_slice(&0i32.to_le_bytes());
    assert!(parse_flo(&zero, p).is_err());
    assert_eq!(flow_file_name("a_000001", "a_000002"), "a_000001__a_000002.flo");
}

#[test]
fn feature_extractor_registry() {
    assert!(matches!(extractor_by_name("inception"), Err(Error::MissingAsset(_))));
    assert!(matches!(extractor_by_name("nope"), Err(Error::Config(_))));
    let ex = extractor_by_name("pooled-pixels").unwrap();
    assert_eq!(ex.dim(), 192);
    let imgs: Vec<TensorImage> = (0..3).map(|i| TensorImage::constant(16, i as f64 * 0.3 - 0.3).unwrap()).collect();
    let stats = extract_features(imgs.iter(), ex.as_ref()).unwrap();
    assert_eq!(stats.dim(), 192);
    assert_eq!(stats.sample_count, 3);
    // Identical image sets are at distance zero.
    let d = fid(&stats, &stats).unwrap();
    assert!(d.abs() < 1e-6, "{d}");
}
