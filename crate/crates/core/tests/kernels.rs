mod common;

use ndarray::{Array3, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wait_core::warping_ops::{
    conv2d, deformable_conv, dilated_conv, flow_warp, occlusion_mask, ConvGeometry, FlowField,
};

use common::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_offsets_give_plain_convolution(seed in any::<u64>(), h in 2usize..9, w in 2usize..9, n in 1usize..3) {
        let mut r = rng(seed);
        let x = uniform(&mut r, (n, 2, h, w), -1.0, 1.0);
        let wt = uniform(&mut r, (3, 2, 3, 3), -1.0, 1.0);
        let off = Array4::zeros((n, 18, h, w));
        let bias = [0.1, -0.2, 0.3];
        let a = deformable_conv(&x, &off, &wt, Some(&bias)).unwrap();
        let b = conv2d(&x, &wt, Some(&bias), ConvGeometry::same(3)).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn integer_offsets_match_shifted_taps(seed in any::<u64>(), dx in -2i32..3, dy in -2i32..3) {
        // A uniform integer offset on every tap shifts the whole stencil.
        let mut r = rng(seed);
        let x = uniform(&mut r, (1, 1, 7, 7), -1.0, 1.0);
        let wt = uniform(&mut r, (1, 1, 3, 3), -1.0, 1.0);
        let off = Array4::from_shape_fn((1, 18, 7, 7), |(_, c, _, _)| if c % 2 == 0 { dx as f64 } else { dy as f64 });
        let got = deformable_conv(&x, &off, &wt, None).unwrap();
        let plain = conv(&x, &wt, None, 1, 1, 1);
        // Recompute with a zero-padded shifted input.
        let shifted = Array4::from_shape_fn((1, 1, 7, 7), |(_, _, y, xx)| {
            let (sy, sx) = (y as i32 + dy, xx as i32 + dx);
            if (0..7).contains(&sy) && (0..7).contains(&sx) { x[[0, 0, sy as usize, sx as usize]] } else { 0.0 }
        });
        let want = conv(&shifted, &wt, None, 1, 1, 1);
        // Borders differ because the shifted image drops pixels the original
        // stencil could still reach; compare the interior.
        for y in 2..5 {
            for xx in 2..5 {
                prop_assert!((got[[0, 0, y, xx]] - want[[0, 0, y, xx]]).abs() < 1e-12);
            }
        }
        if dx == 0 && dy == 0 {
            prop_assert!(max_abs_diff(&got, &plain) < 1e-12);
        }
    }

    #[test]
    fn warp_is_linear_in_the_image(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, (1, 3, 6, 5), -1.0, 1.0);
        let y = uniform(&mut r, (1, 3, 6, 5), -1.0, 1.0);
        let flow = uniform(&mut r, (1, 2, 6, 5), -3.0, 3.0);
        let mix = &x * a + &y * b;
        let lhs = flow_warp(&mix, &flow).unwrap();
        let rhs = flow_warp(&x, &flow).unwrap() * a + flow_warp(&y, &flow).unwrap() * b;
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn integer_flow_is_a_translation(seed in any::<u64>(), u in -3i32..4, v in -3i32..4) {
        let mut r = rng(seed);
        let x = uniform(&mut r, (1, 2, 6, 6), -1.0, 1.0);
        let flow = Array4::from_shape_fn((1, 2, 6, 6), |(_, c, _, _)| if c == 0 { u as f64 } else { v as f64 });
        let got = flow_warp(&x, &flow).unwrap();
        for ((_, c, y, xx), val) in got.indexed_iter() {
            let (sy, sx) = (y as i32 + v, xx as i32 + u);
            let want = if (0..6).contains(&sy) && (0..6).contains(&sx) { x[[0, c, sy as usize, sx as usize]] } else { 0.0 };
            prop_assert_eq!(*val, want);
        }
    }

    #[test]
    fn dilation_one_is_same_convolution(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, (2, 3, 5, 6), -1.0, 1.0);
        let wt = uniform(&mut r, (2, 3, 3, 3), -1.0, 1.0);
        let a = dilated_conv(&x, &wt, None, 1).unwrap();
        let b = conv2d(&x, &wt, None, ConvGeometry::same(3)).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }
}

#[test]
fn strided_and_padded_convolution_matches_oracle() {
    let mut r = rng(11);
    for (k, stride, pad) in [(3, 2, 1), (4, 2, 1), (7, 1, 0), (1, 1, 0)] {
        let x = uniform(&mut r, (2, 3, 9, 8), -1.0, 1.0);
        let wt = uniform(&mut r, (4, 3, k, k), -1.0, 1.0);
        let geom = ConvGeometry { kernel: k, stride, padding: pad, dilation: 1 };
        let got = conv2d(&x, &wt, Some(&[0.5, 0.0, -0.5, 1.0]), geom).unwrap();
        let want = conv(&x, &wt, Some(&[0.5, 0.0, -0.5, 1.0]), stride, pad, 1);
        assert!(max_abs_diff(&got, &want) < 1e-12, "k={k} stride={stride}");
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let x = Array4::zeros((1, 2, 4, 4));
    assert!(deformable_conv(&x, &Array4::zeros((1, 16, 4, 4)), &Array4::zeros((1, 2, 3, 3)), None).is_err());
    assert!(deformable_conv(&x, &Array4::zeros((1, 18, 4, 4)), &Array4::zeros((1, 3, 3, 3)), None).is_err());
    assert!(flow_warp(&x, &Array4::zeros((1, 2, 4, 5))).is_err());
    assert!(dilated_conv(&x, &Array4::zeros((1, 2, 3, 3)), None, 0).is_err());
}

#[test]
fn occlusion_of_still_scene_is_all_valid() {
    let z = FlowField::zeros(5, 7);
    let m = occlusion_mask(&z, &z).unwrap();
    assert_eq!(m.valid_count(), 35);
}

#[test]
fn occlusion_flags_inconsistent_flows() {
    // Forward and backward agree in direction: a round trip lands far away.
    let f = FlowField::constant(6, 6, 1.0, 0.0);
    let m = occlusion_mask(&f, &f).unwrap();
    assert_eq!(m.valid_count(), 0);
    let b = FlowField::constant(6, 6, -1.0, 0.0);
    let m = occlusion_mask(&f, &b).unwrap();
    // The last column maps outside the frame, where the backward flow reads 0.
    let want = occlusion(&f.to_batch(), &b.to_batch());
    assert_eq!(m.data, want);
    assert_eq!(m.valid_count(), 30);
}

#[test]
fn resizing_a_flow_keeps_constant_motion_in_pixels_of_the_new_grid() {
    let f = FlowField::new(Array3::from_shape_fn((4, 8, 2), |(_, _, c)| if c == 0 { 2.0 } else { -1.0 })).unwrap();
    let r = f.resized(8, 4);
    assert_eq!((r.height(), r.width()), (8, 4));
    for y in 0..8 {
        for x in 0..4 {
            let (u, v) = r.at(y, x);
            assert!((u - 1.0).abs() < 1e-6 && (v + 2.0).abs() < 1e-6);
        }
    }
    let same = f.resized(4, 8);
    assert_eq!(same.data, f.data);
}
