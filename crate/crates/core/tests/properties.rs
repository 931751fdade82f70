use bbcu_core::bbcu::{BbcuBlock, Pass, Position, ResidualInput, Variant};
use bbcu_core::binarize::{binarize_weights, sign_activations, ste_backward_x, ScaleScope, SignMode};
use bbcu_core::bitkernel::{xnor_popcount_conv, xnor_popcount_conv_direct, PackedBitPlane, PackedKernel};
use bbcu_core::metrics::{count_costs, psnr_from_mse};
use bbcu_core::net::{pixel_shuffle, pixel_unshuffle, NetworkSpec, Parts, RestorationNet, Task};
use bbcu_core::tensor::{add, conv2d_fp, repeat_channels, scale};
use bbcu_core::train::l1_loss;
use bbcu_core::{ConvSpec, Tensor};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn signs(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(256)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn conv_is_linear(cin in 1usize..4, cout in 1usize..4, h in 3usize..7, w in 3usize..7,
                      a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let spec = ConvSpec::same(cin, cout, 3);
        let x = uniform([1, cin, h, w], -1.0, 1.0, seed);
        let y = uniform([1, cin, h, w], -1.0, 1.0, seed ^ 1);
        let k = uniform(spec.weight_shape(), -1.0, 1.0, seed ^ 2);
        let lhs = conv2d_fp(&add(&scale(&x, a), &scale(&y, b)).unwrap(), &k, &spec).unwrap();
        let rhs = add(&scale(&conv2d_fp(&x, &k, &spec).unwrap(), a), &scale(&conv2d_fp(&y, &k, &spec).unwrap(), b)).unwrap();
        let norm = rhs.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5 * norm);
    }

    #[test]
    fn conv_of_signs_is_integral(cin in 1usize..6, h in 2usize..8, w in 2usize..8, seed in any::<u64>()) {
        let spec = ConvSpec::same(cin, 2, 3).with_pad_value(-1.0);
        let y = conv2d_fp(&signs([1, cin, h, w], seed), &signs(spec.weight_shape(), !seed), &spec).unwrap();
        prop_assert!(y.data().iter().all(|v| (v - v.round()).abs() < 1e-6));
    }

    #[test]
    fn repeat_once_is_identity(seed in any::<u64>()) {
        let x = uniform([2, 3, 4, 5], -1.0, 1.0, seed);
        prop_assert_eq!(repeat_channels(&x, 1).unwrap(), x);
    }

    #[test]
    fn sign_is_scale_invariant(k in prop::sample::select(vec![0.5, 2.0, 130.0]), seed in any::<u64>()) {
        let x = uniform([1, 3, 8, 8], -2.0, 2.0, seed);
        let alpha = [0.1, -0.3, 0.0];
        let ka: Vec<f64> = alpha.iter().map(|a| a * k).collect();
        prop_assert_eq!(sign_activations(&scale(&x, k), &ka).unwrap(), sign_activations(&x, &alpha).unwrap());
    }

    #[test]
    fn ste_is_local_and_bounded(seed in any::<u64>()) {
        let x = uniform([1, 2, 6, 6], -2.0, 2.0, seed);
        let g = uniform([1, 2, 6, 6], -5.0, 5.0, !seed);
        let alpha = [0.2, -0.4];
        let dx = ste_backward_x(&g, &x, &alpha).unwrap();
        for i in 0..x.len() {
            let c = (i / 36) % 2;
            let u = x.data()[i] - alpha[c];
            if u.abs() >= 1.0 {
                prop_assert_eq!(dx.data()[i], 0.0);
            }
            prop_assert!(dx.data()[i].abs() <= 2.0 * g.data()[i].abs());
        }
    }

    #[test]
    fn binarization_is_sign_equivariant(seed in any::<u64>(), filter in any::<bool>()) {
        let scope = if filter { ScaleScope::Filter } else { ScaleScope::Layer };
        let w = uniform([3, 2, 3, 3], 0.01, 1.0, seed);
        let mut r = ChaCha8Rng::seed_from_u64(!seed);
        let w = w.map(|v| if r.random_bool(0.5) { v } else { -v });
        let a = binarize_weights(&w, scope);
        let b = binarize_weights(&w.map(|v| -v), scope);
        prop_assert_eq!(a.signs.map(|v| -v), b.signs);
        prop_assert_eq!(a.scales, b.scales);
    }

    #[test]
    fn packed_kernel_matches_float_with_parity(cin in 1usize..9, cout in 1usize..4, h in 1usize..9,
                                               w in 1usize..140, seed in any::<u64>()) {
        let spec = ConvSpec::same(cin, cout, 3).with_pad_value(-1.0);
        let x = signs([1, cin, h, w], seed);
        let k = signs(spec.weight_shape(), !seed);
        let packed = PackedKernel::from_binarized(&binarize_weights(&k, ScaleScope::Layer)).unwrap();
        let plane = PackedBitPlane::pack_image(&x, 0).unwrap();
        let counts = xnor_popcount_conv(&plane, &packed, 1).unwrap();
        let direct = xnor_popcount_conv_direct(&plane, &packed, 1).unwrap();
        let float = conv2d_fp(&x, &k, &spec).unwrap();
        let n = (cin * 9) as i32;
        prop_assert_eq!(&counts.data, &direct.data);
        for (c, f) in counts.data.iter().zip(float.data()) {
            prop_assert_eq!(*c as f64, *f);
            prop_assert_eq!((c - n).rem_euclid(2), 0);
        }
    }

    #[test]
    fn minus_one_padding_equals_padding_below_threshold(cin in 1usize..4, h in 2usize..6, w in 2usize..6,
                                                        below in 0.0f64..3.0, seed in any::<u64>()) {
        let x = uniform([1, cin, h, w], -1.0, 1.0, seed);
        let alpha = vec![0.0; cin];
        let k = signs(ConvSpec::same(cin, 2, 3).weight_shape(), !seed);
        let same = ConvSpec::same(cin, 2, 3).with_pad_value(-1.0);
        let padded_bits = conv2d_fp(&sign_activations(&x, &alpha).unwrap(), &k, &same).unwrap();
        let px = Tensor::from_fn([1, cin, h + 2, w + 2], |[_, c, y, xx]| {
            if y == 0 || xx == 0 || y == h + 1 || xx == w + 1 { -below } else { x.get(0, c, y - 1, xx - 1) }
        });
        let valid = ConvSpec::valid(cin, 2, 3, 3);
        let padded_input = conv2d_fp(&sign_activations(&px, &alpha).unwrap(), &k, &valid).unwrap();
        prop_assert_eq!(padded_bits, padded_input);
    }

    #[test]
    fn v4_residual_enters_unmodified(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut block = BbcuBlock::new(Variant::V4, Position::Body, 3, 3, 3, &mut r);
        block.alpha.value.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = uniform([1, 3, 5, 5], -2.0, 2.0, !seed);
        let out = block.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        let (_, _, bc) = block.binary_conv(&x, SignMode::Exact).unwrap();
        let f = block.act.forward(&bc).unwrap();
        let expect: Vec<f64> = x.data().iter().zip(f.data()).map(|(a, b)| a + b).collect();
        prop_assert_eq!(out.data(), &expect[..]);
    }

    #[test]
    fn block_binary_conv_ignores_input_scale(k in 0.01f64..300.0, k2 in 0.01f64..300.0, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for v in [Variant::V3, Variant::V4] {
            let block = BbcuBlock::new(v, Position::Body, 4, 4, 3, &mut r);
            let x = uniform([1, 4, 5, 5], -1.0, 1.0, seed);
            let a = block.binary_conv(&scale(&x, k), SignMode::Exact).unwrap().2;
            let b = block.binary_conv(&scale(&x, k2), SignMode::Exact).unwrap().2;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn v1_collapses_to_v2_under_identity_norm(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v1 = BbcuBlock::new(Variant::V1, Position::Body, 3, 3, 3, &mut r);
        let mut v2 = v1.clone();
        v2.variant = Variant::V2;
        v2.bn = None;
        let bn = v1.bn.as_mut().unwrap();
        bn.running_var.fill(1.0 - bn.epsilon);
        let x = uniform([2, 3, 4, 4], -2.0, 2.0, !seed);
        let a = v1.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        let b = v2.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn channels_flow_between_parts(task in 0usize..3, scale_pow in 0usize..3, channels in 1usize..9,
                                   blocks in 1usize..5, parts in 0u8..16, variant in 0usize..4, seed in any::<u64>()) {
        let variant = Variant::ALL[variant];
        let task = [Task::SuperResolution, Task::Denoise, Task::Deblock][task];
        let scale = if task == Task::SuperResolution { 1 << scale_pow } else { 1 };
        let spec = NetworkSpec {
            task,
            scale,
            channels,
            body_blocks: blocks,
            binarize: Parts { head: parts & 1 != 0, body: parts & 2 != 0, upsampling: parts & 4 != 0, tail: parts & 8 != 0 },
            variant,
            k: if variant.uses_amplification() { 3.0 } else { 1.0 },
            convs_per_unit: Some(1),
            ..NetworkSpec::toy_denoiser()
        };
        let mut net = RestorationNet::build(&spec, seed).unwrap();
        let layers = net.layers();
        prop_assert_eq!(layers[0].conv_spec().in_channels, 3);
        prop_assert_eq!(layers.last().unwrap().conv_spec().out_channels, 3);
        for pair in layers.windows(2) {
            let out = pair[0].conv_spec().out_channels;
            let out = if out == 4 * channels && pair[1].conv_spec().in_channels == channels { channels } else { out };
            prop_assert_eq!(out, pair[1].conv_spec().in_channels);
        }
        let y = net.forward(&Tensor::full([1, 3, 6, 5], 0.4), Pass::INFER).unwrap();
        prop_assert_eq!(y.shape(), [1, 3, 6 * scale, 5 * scale]);
        let mut fp = spec.clone();
        fp.binarize = Parts::NONE;
        let y_fp = RestorationNet::build(&fp, seed).unwrap().forward(&Tensor::full([1, 3, 6, 5], 0.4), Pass::INFER).unwrap();
        prop_assert_eq!(y.shape(), y_fp.shape());
    }

    #[test]
    fn shuffle_round_trips(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = uniform([2, 4 * c, h, w], -1.0, 1.0, seed);
        prop_assert_eq!(pixel_unshuffle(&pixel_shuffle(&x, 2).unwrap(), 2).unwrap(), x);
    }

    #[test]
    fn l1_is_non_negative(seed in any::<u64>()) {
        let a = uniform([1, 2, 3, 3], -1.0, 1.0, seed);
        let b = uniform([1, 2, 3, 3], -1.0, 1.0, !seed);
        prop_assert!(l1_loss(&a, &b).unwrap().0 >= 0.0);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-8f64..1.0, growth in 1.0f64..1e3) {
        prop_assert!(psnr_from_mse(a, 1.0) >= psnr_from_mse(a * growth, 1.0));
    }

    #[test]
    fn costs_add_up_with_exact_ratios(channels in 1usize..128, blocks in 1usize..40, scale_pow in 0usize..3,
                                      w in 1usize..400, h in 1usize..400) {
        let spec = NetworkSpec { scale: 1 << scale_pow, channels, body_blocks: blocks, ..NetworkSpec::reference_sr() };
        let r = count_costs(&spec, w, h).unwrap();
        let total: Ratio<u128> = r.parts.iter().map(|p| p.ops_f()).sum();
        prop_assert_eq!(r.total_ops_f(), total);
        for p in &r.parts {
            prop_assert_eq!(p.ops_b() * 64, p.ops_f());
            prop_assert_eq!(p.params_b() * 32, p.params_f());
        }
    }
}
