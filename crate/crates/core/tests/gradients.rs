use aspdnet::gradcheck::{check_graph, finite_diff_grad, max_rel_error};
use aspdnet::network::FrontendLayer::{Conv, Pool};
use aspdnet::ops::{ChannelAttentionParams, SpatialAttentionParams};
use aspdnet::rng;
use aspdnet::{build_aspdnet, AttentionSpec, ConvSpec, Graph, Init, ModelConfig, Tensor};
use rand::Rng;

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Gaussian { mean: 0.0, std: 1.0, seed }).unwrap()
}

fn assert_close(errs: &[f64], what: &str) {
    assert!(errs.iter().all(|&e| e <= TOL), "{what}: relative errors {errs:?}");
}

#[test]
fn dilated_conv_gradients() {
    let mut r = rng::seeded(1);
    for (i, d) in [1usize, 2, 4, 8, 12].into_iter().enumerate() {
        let (b, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(4..=9), r.random_range(4..=9));
        let spec = ConvSpec::same(3, c, o, d);
        let s = 10 * i as u64;
        let inputs = [normal(&[b, c, h, w], s), normal(&spec.weight_shape(), s + 1), normal(&[o], s + 2)];
        let errs = check_graph(|g, v| g.conv2d(v[0], v[1], v[2], &spec), &inputs, EPS, FLOOR, s + 3).unwrap();
        assert_close(&errs, &format!("conv dilation {d}"));
    }
}

#[test]
fn max_pool_gradient() {
    let mut r = rng::seeded(2);
    let n = 2 * 3 * 6 * 8;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(&[2, 3, 6, 8], vals).unwrap();
    let errs = check_graph(|g, v| g.max_pool2x2(v[0]), &[x], EPS, FLOOR, 5).unwrap();
    assert_close(&errs, "max pool");
}

#[test]
fn bilinear_gradients_off_lattice() {
    let f = normal(&[2, 5, 6], 3);
    for (k, (x, y)) in [(0.3, 0.7), (2.5, 1.2), (4.9, 3.1), (-0.6, 2.4), (5.5, 4.6)].into_iter().enumerate() {
        let c = Tensor::new(&[2], vec![x, y]).unwrap();
        let errs = check_graph(|g, v| g.bilinear_sample(v[0], v[1]), &[f.clone(), c], EPS, FLOOR, k as u64).unwrap();
        assert_close(&errs, &format!("bilinear at ({x}, {y})"));
    }
}

fn fractional_offsets(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    let v = (0..shape.iter().product())
        .map(|_| {
            let whole = r.random_range(-1i32..=1) as f64;
            let frac = r.random_range(0.1..0.9);
            whole + frac
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

#[test]
fn deformable_gradients() {
    let mut r = rng::seeded(4);
    for i in 0..4u64 {
        let (b, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(4..=8), r.random_range(4..=8));
        let spec = ConvSpec::same(3, c, o, 1);
        let s = 100 + 10 * i;
        let inputs = [
            normal(&[b, c, h, w], s),
            normal(&spec.weight_shape(), s + 1),
            normal(&[o], s + 2),
            fractional_offsets(&[b, 18, h, w], s + 3),
        ];
        let errs =
            check_graph(|g, v| g.deform_conv2d(v[0], v[1], v[2], v[3], &spec), &inputs, EPS, FLOOR, s + 4).unwrap();
        assert_close(&errs, "deformable convolution");
    }
}

#[test]
fn attention_gradients() {
    let spec = AttentionSpec { reduction_ratio: 2, spatial_kernel: 3 };
    for s in 0..3u64 {
        let x = normal(&[2, 4, 5, 6], 200 + s);
        let chan = [
            x.clone(),
            normal(&[2, 4, 1, 1], 210 + s),
            normal(&[2], 220 + s),
            normal(&[4, 2, 1, 1], 230 + s),
            normal(&[4], 240 + s),
        ];
        let errs = check_graph(
            |g, v| {
                let p = ChannelAttentionParams { fc1_weight: v[1], fc1_bias: v[2], fc2_weight: v[3], fc2_bias: v[4] };
                let a = g.channel_attention(v[0], &p, &spec)?;
                g.mul(v[0], a)
            },
            &chan,
            EPS,
            FLOOR,
            s,
        )
        .unwrap();
        assert_close(&errs, "channel attention");

        let spat = [x, normal(&[1, 2, 3, 3], 250 + s), normal(&[1], 260 + s)];
        let errs = check_graph(
            |g, v| {
                let p = SpatialAttentionParams { weight: v[1], bias: v[2] };
                let a = g.spatial_attention(v[0], &p, &spec)?;
                g.mul(v[0], a)
            },
            &spat,
            EPS,
            FLOOR,
            s,
        )
        .unwrap();
        assert_close(&errs, "spatial attention");
    }
}

#[test]
fn euclidean_loss_gradient() {
    let gt = normal(&[2, 1, 3, 4], 7);
    for scale in [0.5, 1.0] {
        let errs = check_graph(
            |g, v| {
                let t = g.input(gt.clone());
                g.euclidean_loss(v[0], t, scale)
            },
            &[normal(&[2, 1, 3, 4], 8)],
            EPS,
            FLOOR,
            9,
        )
        .unwrap();
        assert_close(&errs, "euclidean loss");
    }
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        frontend_channels: vec![Conv(4), Pool, Conv(8), Pool, Conv(8), Pool, Conv(8)],
        spm_rates: vec![2, 4],
        spm_branch_channels: 4,
        midend_channels: vec![4],
        backend_channels: vec![4],
        attention: AttentionSpec { reduction_ratio: 4, spatial_kernel: 3 },
        ..ModelConfig::tiny()
    }
}

#[test]
fn whole_network_gradient() {
    let mut model = build_aspdnet::<f64>(&micro_config(), 11).unwrap();
    // Move sampling points off the integer lattice, where bilinear
    // interpolation is not differentiable.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".offset.bias") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.37);
        } else if name.ends_with(".offset.weight") {
            let noise = normal(t.shape(), 12);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v = 0.01 * n);
        }
    }
    let image = Tensor::create(&[1, 3, 16, 16], Init::Gaussian { mean: 0.5, std: 0.3, seed: 13 }).unwrap();
    let target = normal(&[1, 1, 2, 2], 14).map(|v| v.abs() * 0.01);
    let loss_of = |m: &aspdnet::Model<f64>| -> (Graph<f64>, aspdnet::Var) {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let y = m.forward(&mut g, x).unwrap();
        let t = g.input(target.clone());
        let l = g.euclidean_loss(y, t, 0.5).unwrap();
        (g, l)
    };
    let (g, l) = loss_of(&model);
    let mut store = model.params.clone();
    store.zero_grads();
    g.backward_into(l, &mut store).unwrap();

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let analytic = store.get(&name).unwrap().grad().expect("every parameter receives a gradient").to_vec();
        let base = model.params.get(&name).unwrap().clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut m = model.clone();
                *m.params.get_mut(&name).unwrap() = t.clone();
                let (g, l) = loss_of(&m);
                g.value(l).data()[0]
            },
            &base,
            EPS,
        );
        let err = max_rel_error(&analytic, numeric.data(), 1e-6);
        assert!(err <= 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn every_parameter_gets_a_gradient() {
    let model = build_aspdnet::<f64>(&ModelConfig::tiny(), 3).unwrap();
    let image = Tensor::create(&[1, 3, 32, 32], Init::Gaussian { mean: 0.5, std: 0.2, seed: 1 }).unwrap();
    let mut g = Graph::new();
    let x = g.input(image);
    g.param("unused", &Tensor::scalar(0.0));
    let out = model.forward(&mut g, x).unwrap();
    let t = g.input(Tensor::create(&[1, 1, 4, 4], Init::Constant(0.05)).unwrap());
    let l = g.euclidean_loss(out, t, 0.5).unwrap();
    let mut store = model.params.clone();
    store.insert("unused", Tensor::scalar(0.0)).unwrap();
    let grads = g.backward_into(l, &mut store).unwrap();
    assert_eq!(grads.visits(), g.num_ops());
    for (name, t) in store.iter() {
        if name == "unused" {
            assert!(t.grad().is_none());
            continue;
        }
        let gr = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.iter().all(|v| v.is_finite()), "{name}");
        assert!(gr.iter().any(|&v| v != 0.0), "{name} gradient is identically zero");
    }
}
