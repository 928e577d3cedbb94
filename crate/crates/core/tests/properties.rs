use aspdnet::checkpoint::{read_tensors, write_tensors};
use aspdnet::data::{augment, hflip, resize_with_annotations, AnnotatedImage, AnnotationSet, PATCHES_PER_IMAGE};
use aspdnet::evaluation::{mae, rmse};
use aspdnet::groundtruth::{downsample_density, generate_density};
use aspdnet::ops::{conv2d_forward, ChannelAttentionParams, SpatialAttentionParams};
use aspdnet::tensor::pairwise_sum;
use aspdnet::{build_aspdnet, AttentionSpec, ConvSpec, GaussianSpec, Graph, Init, ModelConfig, Tensor};
use proptest::prelude::*;

fn gaussian(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Gaussian { mean: 0.0, std: 1.0, seed }).unwrap()
}

fn image(w: usize, h: usize, seed: u64, points: Vec<[f64; 2]>) -> AnnotatedImage {
    let px = Tensor::create(&[3, h, w], Init::Gaussian { mean: 0.5, std: 0.1, seed }).unwrap();
    AnnotatedImage::new("p", px, AnnotationSet::Points(points)).unwrap()
}

fn points_in(w: usize, h: usize, max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64).prop_map(|(x, y)| [x, y]), 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_follows_extent_formula(
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=3,
        dilation in 1usize..=3,
        padding in 0usize..=3,
        h in 1usize..=12,
        w in 1usize..=12,
        seed in any::<u64>(),
    ) {
        let spec = ConvSpec::new(k, 2, 3).with_stride(stride).with_dilation(dilation).with_padding(padding);
        let extent = |n: usize| (n + 2 * padding).checked_sub(dilation * (k - 1) + 1).map(|r| r / stride + 1);
        let x = gaussian(&[1, 2, h, w], seed);
        let out = conv2d_forward(&x, &gaussian(&spec.weight_shape(), seed ^ 1), &gaussian(&[3], seed ^ 2), &spec);
        match (extent(h), extent(w)) {
            (Some(ho), Some(wo)) => {
                let y = out.unwrap();
                prop_assert_eq!(y.shape(), &[1, 3, ho, wo]);
            }
            _ => prop_assert!(out.is_err()),
        }
    }

    #[test]
    fn pairwise_sum_is_reproducible_and_accurate(xs in prop::collection::vec(-1e3f64..1e3, 0..500)) {
        let a = pairwise_sum(&xs);
        prop_assert_eq!(a.to_bits(), pairwise_sum(&xs.clone()).to_bits());
        let naive: f64 = xs.iter().sum();
        prop_assert!((a - naive).abs() <= 1e-9 * xs.len().max(1) as f64);
        let t = Tensor::new(&[xs.len().max(1)], if xs.is_empty() { vec![0.0] } else { xs.clone() }).unwrap();
        prop_assert_eq!(t.sum_all().to_bits(), t.clone().sum_all().to_bits());
    }

    #[test]
    fn attention_gates_are_open_unit_and_shrink(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let spec = AttentionSpec { reduction_ratio: 2, spatial_kernel: 3 };
        let x = gaussian(&[1, 4, 5, 5], seed).map(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let cp = ChannelAttentionParams {
            fc1_weight: g.input(gaussian(&[2, 4, 1, 1], seed ^ 3).map(|v| v * scale)),
            fc1_bias: g.input(gaussian(&[2], seed ^ 4)),
            fc2_weight: g.input(gaussian(&[4, 2, 1, 1], seed ^ 5).map(|v| v * scale)),
            fc2_bias: g.input(gaussian(&[4], seed ^ 6)),
        };
        let sp = SpatialAttentionParams { weight: g.input(gaussian(&[1, 2, 3, 3], seed ^ 7)), bias: g.input(gaussian(&[1], seed ^ 8)) };
        let ca = g.channel_attention(xv, &cp, &spec).unwrap();
        let y = g.mul(xv, ca).unwrap();
        let sa = g.spatial_attention(y, &sp, &spec).unwrap();
        let z = g.mul(y, sa).unwrap();
        for gate in [ca, sa] {
            prop_assert!(g.value(gate).data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
        for (&xi, &zi) in x.data().iter().zip(g.value(z).data()) {
            prop_assert!(zi.abs() <= xi.abs());
        }
    }

    #[test]
    fn flip_is_an_involution_on_the_pixel_lattice_range(
        hw in 1usize..=16,
        hh in 1usize..=16,
        seed in any::<u64>(),
        raw in prop::collection::vec((0u32..=4096, 0u32..4096), 0..20),
    ) {
        let (w, h) = (2 * hw, 2 * hh);
        // Dyadic coordinates in [0, w−1] × [0, h): exact in binary.
        let pts: Vec<[f64; 2]> = raw
            .iter()
            .map(|&(a, b)| [a as f64 / 4096.0 * (w - 1) as f64, b as f64 / 4096.0 * h as f64])
            .map(|[x, y]| [(x * 256.0).floor() / 256.0, (y * 256.0).floor() / 256.0])
            .collect();
        let img = image(w, h, seed, pts);
        let twice = hflip(&hflip(&img).unwrap()).unwrap();
        prop_assert_eq!(&twice.pixels, &img.pixels);
        prop_assert_eq!(&twice.annotations, &img.annotations);
    }

    #[test]
    fn augmentation_emits_eighteen_sound_patches(
        hw in 1usize..=24,
        hh in 1usize..=24,
        seed in any::<u64>(),
        frac in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..30),
    ) {
        let (w, h) = (2 * hw, 2 * hh);
        let pts = frac.iter().map(|&(a, b)| [a * w as f64, b * h as f64]).collect();
        let img = image(w, h, seed, pts);
        let patches = augment(&img, seed).unwrap();
        prop_assert_eq!(patches.len(), PATCHES_PER_IMAGE);
        for p in &patches {
            prop_assert_eq!((p.width(), p.height()), (hw, hh));
            for [x, y] in p.annotations.centers().unwrap() {
                prop_assert!((0.0..hw as f64).contains(&x) && (0.0..hh as f64).contains(&y));
            }
        }
        let quadrant_count: usize = patches.iter().step_by(2).take(4).map(|p| p.count()).sum();
        prop_assert_eq!(quadrant_count, img.count());
    }

    #[test]
    fn density_conserves_count(
        pts in points_in(64, 48, 60),
        sigma in 0.5f64..15.0,
    ) {
        let spec = GaussianSpec { sigma, ..GaussianSpec::default() };
        let map = generate_density(&pts, 48, 64, &spec).unwrap();
        let n = pts.len() as f64;
        prop_assert!((map.sum() - n).abs() <= 1e-4 * n);
        prop_assert!(map.values.data().iter().all(|&v| v >= 0.0));
        for f in [1usize, 2, 4, 8, 16] {
            let d = downsample_density(&map, f).unwrap();
            prop_assert!((d.sum() - map.sum()).abs() <= 1e-9 * n.max(1.0));
        }
    }

    #[test]
    fn single_splat_is_symmetric_and_peaks_at_its_pixel(
        x in 20usize..44,
        y in 20usize..28,
        sigma in 0.5f64..4.0,
    ) {
        let map = generate_density(&[[x as f64, y as f64]], 48, 64, &GaussianSpec { sigma, ..GaussianSpec::default() }).unwrap();
        let v = |i: usize, j: usize| map.values.data()[j * 64 + i];
        for d in 1..=4 {
            prop_assert!((v(x - d, y) - v(x + d, y)).abs() <= 1e-12);
            prop_assert!((v(x, y - d) - v(x, y + d)).abs() <= 1e-12);
        }
        let argmax = map.values.data().iter().enumerate().fold((0, f64::MIN), |b, (i, &a)| if a > b.1 { (i, a) } else { b }).0;
        prop_assert_eq!(argmax, y * 64 + x);
    }

    #[test]
    fn metrics_match_brute_force(pairs in prop::collection::vec((0.0f64..500.0, 0u32..500), 1..200)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(a, b)| (a, b as f64)).unzip();
        let n = p.len() as f64;
        let mut abs = 0.0;
        let mut sq = 0.0;
        for i in 0..p.len() {
            abs += (p[i] - g[i]).abs();
            sq += (p[i] - g[i]) * (p[i] - g[i]);
        }
        let (m, r) = (mae(&p, &g).unwrap(), rmse(&p, &g).unwrap());
        prop_assert!((m - abs / n).abs() <= 1e-9 * (1.0 + abs / n));
        prop_assert!((r - (sq / n).sqrt()).abs() <= 1e-9 * (1.0 + r));
        prop_assert!(r >= m * (1.0 - 1e-12));
    }

    #[test]
    fn resize_keeps_count_and_inverts(
        w in 8usize..64,
        h in 8usize..64,
        tw in 8usize..64,
        th in 8usize..64,
        frac in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..20),
    ) {
        let pts: Vec<[f64; 2]> = frac.iter().map(|&(a, b)| [a * w as f64, b * h as f64]).collect();
        let img = image(w, h, 1, pts.clone());
        let there = resize_with_annotations(&img, tw, th).unwrap();
        prop_assert_eq!((there.width(), there.height()), (tw, th));
        prop_assert_eq!(there.count(), img.count());
        let back = resize_with_annotations(&there, w, h).unwrap();
        for (a, b) in pts.iter().zip(back.annotations.centers().unwrap()) {
            prop_assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9, "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn checkpoint_roundtrip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5),
        seed in any::<u64>(),
    ) {
        let named: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("layer{i}.weight"), gaussian(s, seed.wrapping_add(i as u64))))
            .collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, named.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back: Vec<(String, Tensor<f64>)> = read_tensors(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, named);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn network_output_is_nonnegative_and_one_eighth(hb in 1usize..=6, wb in 1usize..=6, seed in 0u64..1000) {
        let model = build_aspdnet::<f64>(&ModelConfig::tiny(), seed).unwrap();
        let x = Tensor::create(&[1, 3, 8 * hb, 8 * wb], Init::Gaussian { mean: 0.5, std: 0.3, seed }).unwrap();
        let y = model.predict(&x).unwrap();
        prop_assert_eq!(y.shape(), &[1, 1, hb, wb]);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }
}
