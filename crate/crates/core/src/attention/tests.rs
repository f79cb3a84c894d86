use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::grad_check;
use crate::nn::Builder;
use crate::tensor::{Graph, Mode, ParamStore, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
}

struct Single {
    store: ParamStore<f64>,
    proj: ProjectionSet,
    enc: RelPosEnc,
    gates: GateSet,
}

fn single(cin: usize, d: usize, axis_len: usize, seed: u64) -> Single {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, seed);
    let proj = ProjectionSet::new(&mut b, "proj", cin, d).unwrap();
    let enc = RelPosEnc::new(&mut b, "enc", axis_len, d).unwrap();
    let gates = GateSet::new(&mut b, "gates").unwrap();
    Single { store, proj, enc, gates }
}

fn run(s: &Single, x: &Tensor<f64>, enc: bool, gates: bool, axis: Axis) -> Tensor<f64> {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x.clone());
    let y = axial_attention(
        &mut g,
        &s.store,
        xi,
        &s.proj,
        enc.then_some(&s.enc),
        gates.then_some(&s.gates),
        axis,
    )
    .unwrap();
    g.value(y).clone()
}

#[test]
fn oracle_single_site_returns_values() {
    let s = single(3, 2, 1, 1);
    let x = rand_tensor(&[1, 3, 1, 1], 2);
    let y = full_self_attention_oracle(&x, &s.store, &s.proj).unwrap();
    let v = crate::tensor::conv2d(&x, s.store.value(s.proj.w_v), None, 1, 0).unwrap();
    assert!(y.max_abs_diff(&v) < 1e-15);
}

#[test]
fn oracle_uniform_input_gives_constant_output() {
    let s = single(2, 3, 1, 3);
    let x = Tensor::from_fn(vec![1, 2, 3, 4], |i| if i < 12 { 0.3 } else { -0.8 }).unwrap();
    let y = full_self_attention_oracle(&x, &s.store, &s.proj).unwrap();
    for c in 0..3 {
        let plane = &y.data()[c * 12..(c + 1) * 12];
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-14));
    }
}

#[test]
fn oracle_rejects_large_maps() {
    let s = single(1, 1, 1, 0);
    let x = Tensor::zeros(vec![1, 1, 16, 17]).unwrap();
    assert!(full_self_attention_oracle(&x, &s.store, &s.proj).is_err());
    let x = Tensor::zeros(vec![1, 1, 16, 16]).unwrap();
    assert!(full_self_attention_oracle(&x, &s.store, &s.proj).is_ok());
}

#[test]
fn single_column_is_value_projection() {
    let s = single(3, 4, 1, 4);
    let x = rand_tensor(&[2, 3, 5, 1], 5);
    let y = run(&s, &x, false, false, Axis::Width);
    let v = crate::tensor::conv2d(&x, s.store.value(s.proj.w_v), None, 1, 0).unwrap();
    assert_eq!(y, v);
}

#[test]
fn single_row_matches_global_oracle() {
    for seed in 0..5 {
        let s = single(3, 4, 9, seed);
        let x = rand_tensor(&[1, 3, 1, 9], 100 + seed);
        let y = run(&s, &x, false, false, Axis::Width);
        let want = full_self_attention_oracle(&x, &s.store, &s.proj).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-8);

        let xt = rand_tensor(&[1, 3, 9, 1], 200 + seed);
        let y = run(&s, &xt, false, false, Axis::Height);
        let want = full_self_attention_oracle(&xt, &s.store, &s.proj).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-8);
    }
}

#[test]
fn gates_reduce_exactly() {
    let mut s = single(3, 2, 6, 7);
    let x = rand_tensor(&[2, 3, 4, 6], 8);
    assert_eq!(run(&s, &x, true, true, Axis::Width), run(&s, &x, true, false, Axis::Width));
    s.gates.set_values(&mut s.store, [0.0, 0.0, 1.0, 0.0]);
    assert_eq!(run(&s, &x, true, true, Axis::Width), run(&s, &x, false, false, Axis::Width));
}

#[test]
fn positional_terms_change_output() {
    let s = single(3, 2, 6, 9);
    let x = rand_tensor(&[1, 3, 2, 6], 10);
    assert!(run(&s, &x, true, false, Axis::Width).max_abs_diff(&run(&s, &x, false, false, Axis::Width)) > 1e-3);
}

#[test]
fn encoding_length_and_gate_preconditions() {
    let s = single(3, 2, 5, 11);
    let x = rand_tensor(&[1, 3, 4, 6], 12);
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x);
    let err = axial_attention(&mut g, &s.store, xi, &s.proj, Some(&s.enc), None, Axis::Width).unwrap_err();
    assert!(err.to_string().contains("width axis has length 6"), "{err}");
    assert!(axial_attention(&mut g, &s.store, xi, &s.proj, None, Some(&s.gates), Axis::Width).is_err());
    // Height axis has length 4, also mismatched.
    assert!(axial_attention(&mut g, &s.store, xi, &s.proj, Some(&s.enc), None, Axis::Height).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let s = single(2, 3, 7, 13);
    let x = rand_tensor(&[2, 2, 3, 7], 14);
    let q = crate::tensor::conv2d(&x, s.store.value(s.proj.w_q), None, 1, 0).unwrap();
    let k = crate::tensor::conv2d(&x, s.store.value(s.proj.w_k), None, 1, 0).unwrap();
    let v = crate::tensor::conv2d(&x, s.store.value(s.proj.w_v), None, 1, 0).unwrap();
    let tables = [s.enc.r_q, s.enc.r_k, s.enc.r_v].map(|id| s.store.value(id));
    let (_, probs) = kernel::forward(&q, &k, &v, Some(tables), Some([0.5, 2.0, 1.0, 0.3])).unwrap();
    for row in probs.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}

#[test]
fn mac_count_matches_closed_form() {
    let count = |h: usize, w: usize, enc: bool| {
        let s = single(2, 3, w, 15);
        let x = rand_tensor(&[1, 2, h, w], 16);
        mac_counter::reset();
        run(&s, &x, enc, false, Axis::Width);
        mac_counter::get()
    };
    assert_eq!(count(4, 8, false), (4 * 8 * 8 * 3 * 2) as u64);
    assert_eq!(count(8, 16, false), 8 * count(4, 8, false));
    assert_eq!(count(4, 8, true), (4 * 8 * 8 * 3 * 5) as u64);
}

fn mha(heads: usize, gran: GateGranularity, flavor: AttnFlavor, axis: Axis, seed: u64) -> (ParamStore<f64>, MultiHeadAxial) {
    let mut store = ParamStore::new();
    let layer = MultiHeadAxial::new(
        &mut Builder::new(&mut store, seed),
        "mha",
        AttnLayerConfig {
            channels_in: 3,
            channels_out: 4,
            heads,
            gated: flavor.gated(),
            positional: flavor.positional(),
            axis,
            axis_len: 5,
            granularity: gran,
        },
    )
    .unwrap();
    (store, layer)
}

fn mha_forward(store: &ParamStore<f64>, layer: &MultiHeadAxial, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x.clone());
    let y = layer.forward(&mut g, store, xi).unwrap();
    g.value(y).clone()
}

#[test]
fn one_head_equals_single_axial_call() {
    let (store, layer) = mha(1, GateGranularity::PerLayer, AttnFlavor::Gated, Axis::Height, 17);
    let x = rand_tensor(&[2, 3, 5, 3], 18);
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x.clone());
    let y = axial_attention(
        &mut g,
        &store,
        xi,
        &layer.proj,
        layer.encodings.first(),
        layer.gates.first(),
        Axis::Height,
    )
    .unwrap();
    assert_eq!(&mha_forward(&store, &layer, &x), g.value(y));
}

#[test]
fn two_heads_equal_manual_slices() {
    for gran in [GateGranularity::PerLayer, GateGranularity::PerHead] {
        let (mut store, layer) = mha(2, gran, AttnFlavor::Gated, Axis::Width, 19);
        if let Some(last) = layer.gates.last() {
            last.set_values(&mut store, [0.3, 0.7, 1.1, 0.2]);
        }
        let x = rand_tensor(&[1, 3, 2, 5], 20);
        let y = mha_forward(&store, &layer, &x);
        let proj = |id| crate::tensor::conv2d(&x, store.value(id), None, 1, 0).unwrap();
        let (q, k, v) = (proj(layer.proj.w_q), proj(layer.proj.w_k), proj(layer.proj.w_v));
        let slice = |t: &Tensor<f64>, h: usize| {
            Tensor::new(vec![1, 2, 2, 5], t.data()[h * 20..(h + 1) * 20].to_vec()).unwrap()
        };
        let mut manual = Vec::new();
        for h in 0..2 {
            let e = &layer.encodings[h];
            let tables = [e.r_q, e.r_k, e.r_v].map(|id| store.value(id));
            let gates = layer.gates_for(h).unwrap().values(&store);
            let (yh, _) = kernel::forward(&slice(&q, h), &slice(&k, h), &slice(&v, h), Some(tables), Some(gates)).unwrap();
            manual.extend_from_slice(yh.data());
        }
        assert_eq!(y.data(), &manual[..]);
    }
}

#[test]
fn zeroed_value_rows_silence_their_head() {
    let (mut store, layer) = mha(2, GateGranularity::PerLayer, AttnFlavor::Gated, Axis::Width, 21);
    for v in &mut store.get_mut(layer.proj.w_v).value.data_mut()[..6] {
        *v = 0.0;
    }
    layer.gates[0].set_values(&mut store, [1.0, 1.0, 1.0, 0.0]);
    let y = mha_forward(&store, &layer, &rand_tensor(&[1, 3, 3, 5], 22));
    assert!(y.data()[..30].iter().all(|&v| v == 0.0));
    assert!(y.data()[30..].iter().any(|&v| v != 0.0));
}

#[test]
fn heads_must_divide_channels() {
    let mut store = ParamStore::<f64>::new();
    let cfg = AttnLayerConfig {
        channels_in: 3,
        channels_out: 6,
        heads: 4,
        gated: false,
        positional: false,
        axis: Axis::Width,
        axis_len: 3,
        granularity: GateGranularity::PerLayer,
    };
    assert!(MultiHeadAxial::new(&mut Builder::new(&mut store, 0), "m", cfg.clone()).is_err());
    let bad = AttnLayerConfig {
        heads: 2,
        gated: true,
        ..cfg
    };
    assert!(MultiHeadAxial::new(&mut Builder::new(&mut store, 0), "m", bad).is_err());
}

#[test]
fn extra_gate_params() {
    let (gs, g1) = mha(1, GateGranularity::PerLayer, AttnFlavor::Gated, Axis::Width, 0);
    let (us, u1) = mha(1, GateGranularity::PerLayer, AttnFlavor::Positional, Axis::Width, 0);
    assert_eq!(count_extra_gate_params((&g1, &gs), (&u1, &us)), 4);
    assert_eq!(count_extra_gate_params((&u1, &us), (&u1, &us)), 0);

    let layer = |heads, flavor, gran| {
        let mut store = ParamStore::<f64>::new();
        let l = GatedAxialLayer::new(
            &mut Builder::new(&mut store, 0),
            "layer",
            TransformerLayerConfig {
                channels_in: 8,
                channels_out: 16,
                heads,
                stride: 1,
                flavor,
                granularity: gran,
                height: 4,
                width: 4,
            },
        )
        .unwrap();
        (store, l)
    };
    let (us, u) = layer(8, AttnFlavor::Positional, GateGranularity::PerLayer);
    let (gs, g) = layer(8, AttnFlavor::Gated, GateGranularity::PerLayer);
    let (hs, h) = layer(8, AttnFlavor::Gated, GateGranularity::PerHead);
    assert_eq!(count_extra_gate_params((&g, &gs), (&u, &us)), 8);
    assert_eq!(count_extra_gate_params((&h, &hs), (&u, &us)), 64);
    assert_eq!(g.gate_sets().count(), 2);
}

fn transformer(flavor: AttnFlavor, cin: usize, cout: usize, stride: usize, seed: u64) -> (ParamStore<f64>, GatedAxialLayer) {
    let mut store = ParamStore::new();
    let layer = GatedAxialLayer::new(
        &mut Builder::new(&mut store, seed),
        "layer",
        TransformerLayerConfig {
            channels_in: cin,
            channels_out: cout,
            heads: 2,
            stride,
            flavor,
            granularity: GateGranularity::PerLayer,
            height: 4,
            width: 6,
        },
    )
    .unwrap();
    (store, layer)
}

#[test]
fn zero_output_projection_leaves_residual() {
    for (cin, cout, stride) in [(4, 4, 1), (2, 4, 2)] {
        let (mut store, layer) = transformer(AttnFlavor::Gated, cin, cout, stride, 23);
        store.get_mut(layer.out_proj.weight).value.fill(0.0);
        let x = rand_tensor(&[2, cin, 4, 6], 24);
        let mut g = Graph::new(Mode::Train);
        let xi = g.input(x.clone());
        let y = layer.forward(&mut g, &store, xi).unwrap();
        let want = match &layer.residual {
            None => x,
            Some(r) => crate::tensor::conv2d(&x, store.value(r.weight), None, stride, 0).unwrap(),
        };
        assert_eq!(g.value(y), &want);
        assert_eq!(g.value(y).shape(), &[2, cout, 4 / stride, 6 / stride]);
    }
}

#[test]
fn transformer_layer_gradients() {
    let mut store = ParamStore::new();
    let layer = GatedAxialLayer::new(
        &mut Builder::new(&mut store, 25),
        "layer",
        TransformerLayerConfig {
            channels_in: 4,
            channels_out: 4,
            heads: 2,
            stride: 1,
            flavor: AttnFlavor::Gated,
            granularity: GateGranularity::PerLayer,
            height: 4,
            width: 4,
        },
    )
    .unwrap();
    for (set, vals) in layer.gate_sets().zip([[0.9, 1.2, 0.8, 1.1], [1.3, 0.6, 1.0, 0.7]]) {
        set.set_values(&mut store, vals);
    }
    let x = rand_tensor(&[1, 4, 4, 4], 26);
    let c = rand_tensor(&[1, 4, 4, 4], 27);
    let report = grad_check(&mut store, 1e-5, |g, s| {
        let xi = g.input(x.clone());
        let y = layer.forward(g, s, xi)?;
        let ci = g.input(c.clone());
        let p = g.mul(y, ci)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{:?}", report.worst());
    let names: Vec<_> = report.params.iter().map(|p| p.name.as_str()).collect();
    for part in ["w_q", "r_k", "g_v2", "conv_in", "bn.gamma", "out_proj.bias"] {
        assert!(names.iter().any(|n| n.contains(part)), "{part} not checked");
    }
}

proptest! {
    #[test]
    fn relative_index_is_shift_invariant(len in 1usize..40, j in 0usize..40, w in 0usize..40, shift in 0usize..40) {
        let (j, w) = (j % len, w % len);
        let s = single(1, 1, len + shift, 0);
        let e = &s.enc;
        prop_assert!(e.index(j, w) <= 2 * e.axis_len - 2);
        prop_assert_eq!(e.index(j + shift, w + shift), e.index(j, w));
    }

    #[test]
    fn single_row_oracle_property(seed in 0u64..1000, w in 1usize..10, c in 1usize..4) {
        let s = single(c, 2, w, seed);
        let x = rand_tensor(&[1, c, 1, w], seed + 1);
        let y = run(&s, &x, false, false, Axis::Width);
        let want = full_self_attention_oracle(&x, &s.store, &s.proj).unwrap();
        prop_assert!(y.max_abs_diff(&want) < 1e-8);
    }

}
