use proptest::prelude::*;

use mscc::netbuilder::{build_mu_net, build_unet, count_parameters, BlockVariant, InputShape, LayerKind, Network, NetworkSpec};
use mscc::tensor::ops::{conv2d, sigmoid, softmax};
use mscc::tensor::{Adam, AdamConfig, Padding, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn conv_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, f64, f64)> {
    (1usize..3, 1usize..3, 1usize..3, 3usize..7, prop_oneof![Just(1usize), Just(3)]).prop_flat_map(|(n, c, f, s, k)| {
        (
            tensor(vec![n, c, s, s]),
            tensor(vec![n, c, s, s]),
            tensor(vec![f, c, k, k]),
            Just(Tensor::zeros(vec![f])),
            -2.0f64..2.0,
            -2.0f64..2.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input((x, y, k, b, a, c) in conv_case()) {
        let mix = Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + c * q).collect()).unwrap();
        let lhs = conv2d(&mix, &k, &b, 1, Padding::Same).unwrap();
        let cx = conv2d(&x, &k, &b, 1, Padding::Same).unwrap();
        let cy = conv2d(&y, &k, &b, 1, Padding::Same).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + c * q)).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..5, 2usize..6).prop_flat_map(|(n, k)| tensor(vec![n, k]))) {
        let k = x.shape()[1];
        let s = softmax(&x.map(|v| v * 20.0)).unwrap();
        for row in s.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_open_unit(x in tensor(vec![1, 1, 4, 4])) {
        let s = sigmoid(&x.map(|v| v * 10.0));
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn adam_leaves_params_on_zero_gradient(p in tensor(vec![2, 3]), steps in 1usize..5) {
        let mut params = vec![p.clone()];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..steps {
            adam.step(&mut params, &[vec![0.0; 6]], &["w".to_string()]).unwrap();
        }
        prop_assert_eq!(params[0].data(), p.data());
    }

    #[test]
    fn mu_net_variants_shrink(base in 4usize..9) {
        let w: Vec<usize> = (0..5).map(|i| base << i).collect();
        let count = |v| count_parameters(&build_mu_net(v, &w, InputShape::gray(32)).unwrap()).unwrap().total();
        let (b1, b2, b3) = (count(BlockVariant::BlockI), count(BlockVariant::BlockII), count(BlockVariant::BlockIII));
        prop_assert!(b3 < b2 && b2 < b1);
    }
}

fn check_structure(spec: &NetworkSpec) {
    let shapes = spec.infer_shapes().unwrap();
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.kind == LayerKind::Concat {
            let idx: Vec<usize> = layer
                .inputs
                .iter()
                .map(|n| spec.layers.iter().position(|l| &l.name == n).unwrap())
                .collect();
            let first = shapes[idx[0]];
            for &j in &idx {
                assert_eq!((shapes[j].height, shapes[j].width), (first.height, first.width), "{}", layer.name);
            }
        }
        if matches!(layer.kind, LayerKind::Conv | LayerKind::UpConv) {
            let consumers: Vec<_> = spec.layers[i + 1..].iter().filter(|l| l.inputs.contains(&layer.name)).collect();
            let head = consumers.iter().any(|l| l.kind == LayerKind::Sigmoid);
            assert!(
                head || consumers.iter().all(|l| l.kind == LayerKind::Bn),
                "{} is not followed by batch norm",
                layer.name
            );
        }
    }
}

#[test]
fn concat_operands_agree_and_convs_are_normalized() {
    let w = [4, 8, 16, 32, 64];
    check_structure(&build_unet(&w, InputShape::gray(32)).unwrap());
    for v in [BlockVariant::BlockI, BlockVariant::BlockII, BlockVariant::BlockIII] {
        check_structure(&build_mu_net(v, &w, InputShape::gray(32)).unwrap());
    }
}

#[test]
fn spec_text_round_trips() {
    for v in [BlockVariant::BlockI, BlockVariant::BlockII, BlockVariant::BlockIII] {
        let spec = build_mu_net(v, &[2, 4, 8, 16, 32], InputShape::gray(16)).unwrap();
        let back = NetworkSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back.layers, spec.layers);
        assert_eq!(
            count_parameters(&back).unwrap().total(),
            count_parameters(&spec).unwrap().total()
        );
    }
}

#[test]
fn same_seed_same_prediction() {
    let spec = build_mu_net(BlockVariant::BlockIII, &[2, 4, 8, 16, 32], InputShape::gray(16)).unwrap();
    let x = Tensor::from_fn(vec![1, 1, 16, 16], |i| (i % 7) as f64 / 7.0);
    let a = Network::<f64>::new(spec.clone(), 3).unwrap().predict(x.clone()).unwrap();
    let b = Network::<f64>::new(spec.clone(), 3).unwrap().predict(x.clone()).unwrap();
    let c = Network::<f64>::new(spec, 4).unwrap().predict(x).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}
