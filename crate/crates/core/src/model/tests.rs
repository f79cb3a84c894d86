use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{count_params, Axis};
use crate::gradcheck::grad_check;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0)).unwrap()
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        img_size: 32,
        base_channels: 4,
        heads: 2,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        img_size: 16,
        base_channels: 2,
        heads: 2,
        patch_grid: 2,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn run(model: &Model<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut g = Graph::new(mode);
    let xi = g.input(x.clone());
    let y = model.forward(&mut g, xi).unwrap();
    g.value(y).clone()
}

#[test]
fn every_variant_outputs_probabilities() {
    let x = rand_tensor(&[2, 1, 32, 32], 1);
    for v in Variant::ALL {
        let m = Model::<f64>::new(&small(v)).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = run(&m, &x, mode);
            assert_eq!(y.shape(), &[2, 1, 32, 32], "{v}");
            assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0), "{v}");
        }
    }
}

#[test]
fn wrong_input_size_is_rejected() {
    let m = Model::<f64>::new(&small(Variant::GlobalOnly)).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(rand_tensor(&[1, 1, 16, 16], 0));
    assert!(matches!(m.forward(&mut g, x), Err(Error::InvalidShape { .. })));
}

#[test]
fn zero_fusion_gives_one_half() {
    let mut m = Model::<f64>::new(&small(Variant::Medt)).unwrap();
    m.params.get_mut(m.net.fusion.weight).value.fill(0.0);
    let y = run(&m, &rand_tensor(&[1, 1, 32, 32], 2), Mode::Train);
    assert!(y.data().iter().all(|&p| p == 0.5));
}

#[test]
fn silenced_local_branch_reduces_medt_to_global_only() {
    let mut medt = Model::<f64>::new(&small(Variant::Medt)).unwrap();
    let global = Model::<f64>::new(&small(Variant::GlobalOnly)).unwrap();
    let last = &medt.net.local.as_ref().unwrap().decoders[0].conv;
    let (w, b) = (last.weight, last.bias.unwrap());
    medt.params.get_mut(w).value.fill(0.0);
    medt.params.get_mut(b).value.fill(0.0);
    let x = rand_tensor(&[2, 1, 32, 32], 3);
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(run(&medt, &x, mode), run(&global, &x, mode));
    }
}

#[test]
fn gated_and_ungated_twins_differ_by_gate_scalars() {
    let cfg = small(Variant::Medt);
    let gated = Model::<f64>::new(&cfg).unwrap();
    let twin = Model::<f64>::new_ungated(&cfg).unwrap();
    assert_eq!(gated.count_parameters() - twin.count_parameters(), 2 * 2 * 4);
    assert_eq!(gated.net.gate_sets().len(), 4);

    let per_head = ModelConfig {
        gate_granularity: GateGranularity::PerHead,
        ..cfg.clone()
    };
    let ph = Model::<f64>::new(&per_head).unwrap();
    assert_eq!(ph.count_parameters() - twin.count_parameters(), 2 * 2 * 4 * cfg.heads);

    let again = Model::<f64>::new(&cfg).unwrap();
    assert_eq!(again.count_parameters(), gated.count_parameters());
}

#[test]
fn logo_differs_from_medt_by_gates_and_local_tables() {
    let medt = Model::<f64>::new(&small(Variant::Medt)).unwrap();
    let logo = Model::<f64>::new(&small(Variant::Logo)).unwrap();
    let local = logo.net.local.as_ref().unwrap();
    let tables: usize = local
        .encoders
        .iter()
        .flat_map(|e| [&e.height, &e.width])
        .flat_map(|m| &m.encodings)
        .map(|e| count_params(e, &logo.params))
        .sum();
    assert!(tables > 0);
    assert_eq!(logo.count_parameters() + 16, medt.count_parameters() + tables);
}

#[test]
fn default_parameter_count_fixture() {
    let m = Model::<f32>::new(&ModelConfig::default()).unwrap();
    assert_eq!(m.count_parameters(), 236_833);
}

#[test]
fn stage_plans_follow_stride_cap() {
    let p = StagePlan::new(16, 8, 5);
    assert_eq!(p.sizes, vec![16, 8, 4, 4, 4, 4]);
    assert_eq!(p.strides, vec![2, 2, 1, 1, 1]);
    assert_eq!(p.channels, vec![8, 16, 32, 64, 64, 64]);
    let g = ModelConfig::default().global_plan();
    assert_eq!(g.sizes, vec![64, 32, 16]);
}

#[test]
fn encoder_stride_and_decoder_restore_size() {
    let mut store = ParamStore::<f64>::new();
    let plan = StagePlan::new(16, 2, 5);
    let branch = Branch::new(
        &mut crate::nn::Builder::new(&mut store, 0),
        "b",
        plan,
        2,
        AttnFlavor::Plain,
        GateGranularity::PerLayer,
    )
    .unwrap();
    let mut g = Graph::new(Mode::Train);
    let x = g.input(rand_tensor(&[1, 2, 16, 16], 4));
    let e1 = branch.encoders[0].forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(e1).shape(), &[1, 4, 8, 8]);
    let y = branch.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 16, 16]);
}

#[test]
fn conv_block_contract() {
    let mut store = ParamStore::<f64>::new();
    let block = ConvBlock::new(&mut crate::nn::Builder::new(&mut store, 1), "stem", 1, 3).unwrap();
    let x = rand_tensor(&[2, 1, 8, 8], 5);
    let mut g = Graph::new(Mode::Train);
    let xi = g.input(x.clone());
    let y = block.forward(&mut g, &store, xi).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 8, 8]);

    let mut zeroed = store.clone();
    for (conv, _) in &block.stages {
        zeroed.get_mut(conv.weight).value.fill(0.0);
    }
    let mut g = Graph::new(Mode::Train);
    let xi = g.input(x.clone());
    let y = block.forward(&mut g, &zeroed, xi).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x1 = rand_tensor(&[1, 1, 8, 8], 6);
    let c = rand_tensor(&[1, 3, 8, 8], 7);
    let report = grad_check(&mut store, 1e-5, |g, s| {
        let xi = g.input(x1.clone());
        let y = block.forward(g, s, xi)?;
        let ci = g.input(c.clone());
        let p = g.mul(y, ci)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{:?}", report.worst());
}

#[test]
fn patch_roundtrip_and_layout() {
    let x = rand_tensor(&[2, 3, 16, 16], 8);
    for grid in [1, 2, 4] {
        let parts = extract_patches(&x, grid).unwrap();
        assert_eq!(parts.len(), grid * grid);
        assert_eq!(parts[0].shape(), &[2, 3, 16 / grid, 16 / grid]);
        assert_eq!(merge_patches(&parts, grid).unwrap(), x);
    }
    assert_eq!(extract_patches(&x, 1).unwrap()[0], x);
    let big = Tensor::<f64>::zeros(vec![1, 1, 64, 64]).unwrap();
    let parts = extract_patches(&big, 4).unwrap();
    assert_eq!(parts.len(), 16);
    assert!(parts.iter().all(|p| p.shape() == [1, 1, 16, 16]));
    assert!(extract_patches(&x, 3).is_err());

    let blocks: Vec<_> = (0..4)
        .map(|i| Tensor::full(vec![1, 1, 2, 3], i as f64).unwrap())
        .collect();
    let m = merge_patches(&blocks, 2).unwrap();
    assert_eq!(m.shape(), &[1, 1, 4, 6]);
    for (idx, &v) in m.data().iter().enumerate() {
        let (r, c) = (idx / 6, idx % 6);
        assert_eq!(v, ((r / 2) * 2 + c / 3) as f64);
    }
    assert!(merge_patches(&blocks[..3], 2).is_err());
}

#[test]
fn merge_routes_gradients_to_one_patch() {
    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..4)
        .map(|i| {
            store
                .insert(format!("p{i}"), rand_tensor(&[1, 1, 2, 2], 10 + i), crate::tensor::ParamKind::Weight)
                .unwrap()
        })
        .collect();
    for pixel in [5usize, 14] {
        let mut s = store.clone();
        let report = grad_check(&mut s, 1e-6, |g, s| {
            let parts: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
            let m = g.merge_patches(&parts, 2)?;
            let mask = g.input(Tensor::from_fn(vec![1, 1, 4, 4], |i| if i == pixel { 1.0 } else { 0.0 })?);
            let p = g.mul(m, mask)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.passes(1e-8));
        let (r, c) = (pixel / 4, pixel % 4);
        let owner = (r / 2) * 2 + c / 2;
        for (i, &id) in ids.iter().enumerate() {
            let grad = &s.get(id).grad;
            let hot: Vec<_> = grad.data().iter().enumerate().filter(|(_, &v)| v != 0.0).collect();
            if i == owner {
                assert_eq!(hot, vec![((r % 2) * 2 + c % 2, &1.0)]);
            } else {
                assert!(hot.is_empty());
            }
        }
    }
}

#[test]
fn local_branch_is_patch_permutation_equivariant() {
    let m = Model::<f64>::new(&small(Variant::LocalOnly)).unwrap();
    let local = m.net.local.as_ref().unwrap();
    let x = rand_tensor(&[1, 4, 32, 32], 11);
    let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
    let mut g = Graph::new(Mode::Train);
    let xi = g.input(x.clone());
    let base = m.net.local_forward(local, &mut g, &m.params, xi).unwrap();
    let parts = extract_patches(&x, 4).unwrap();
    let shuffled: Vec<_> = perm.iter().map(|&i| parts[i].clone()).collect();
    let xs = g.input(merge_patches(&shuffled, 4).unwrap());
    let ys = m.net.local_forward(local, &mut g, &m.params, xs).unwrap();
    let out = extract_patches(g.value(ys), 4).unwrap();
    let mut restored = vec![out[0].clone(); 16];
    for (slot, &src) in perm.iter().enumerate() {
        restored[src] = out[slot].clone();
    }
    assert_eq!(&merge_patches(&restored, 4).unwrap(), g.value(base));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = micro(Variant::Medt);
    let mut m = Model::<f64>::new(&cfg).unwrap();
    let net = m.net.clone();
    for batch in 0..5 {
        let x = rand_tensor(&[2, 1, 16, 16], 20 + batch);
        let target = rand_tensor(&[2, 1, 16, 16], 30 + batch).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let mut g = Graph::new(Mode::Train);
        let xi = g.input(x);
        let y = net.forward(&mut g, &m.params, xi).unwrap();
        let l = g.bce_loss(y, target).unwrap();
        g.backward(l, &mut m.params).unwrap();
    }
    for (_, p) in m.params.iter() {
        if p.trainable {
            assert!(p.grad.data().iter().any(|&v| v != 0.0), "{} has no gradient", p.name);
        }
    }
}

#[test]
fn config_validation() {
    let ok = ModelConfig::default();
    assert!(ok.validate().is_ok());
    let bad = [
        ModelConfig { img_size: 48, ..ok.clone() },
        ModelConfig { img_size: 8, ..ok.clone() },
        ModelConfig { patch_grid: 3, ..ok.clone() },
        ModelConfig { patch_grid: 16, ..ok.clone() },
        ModelConfig { heads: 3, ..ok.clone() },
        ModelConfig { global_depth: 0, ..ok.clone() },
        ModelConfig { base_channels: 0, ..ok.clone() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    // Depth of an unused branch does not matter.
    assert!(ModelConfig { global_depth: 0, ..ok.with_variant(Variant::LocalOnly) }.validate().is_ok());
}

#[test]
fn config_key_values_roundtrip() {
    let mut cfg = ModelConfig::default();
    for (k, v) in [("variant", "axial"), ("heads", "4"), ("gate_granularity", "per_head"), ("seed", "9")] {
        assert!(cfg.set(k, v).unwrap());
    }
    assert_eq!(cfg.variant, Variant::UnetLikeAxial);
    assert!(!cfg.set("epochs", "3").unwrap());
    assert!(cfg.set("heads", "four").is_err());
    assert!(cfg.set("variant", "transunet").is_err());
    let mut back = ModelConfig::default();
    for (k, v) in cfg.entries() {
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert_eq!(cfg.entries().iter().map(|e| e.0).collect::<Vec<_>>(), ModelConfig::KEYS);
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn height_layers_see_transposed_maps() {
    let m = Model::<f64>::new(&small(Variant::GlobalOnly)).unwrap();
    let enc = &m.net.global.as_ref().unwrap().encoders[0];
    assert_eq!(enc.height.config.axis, Axis::Height);
    assert_eq!(enc.width.config.axis, Axis::Width);
    assert_eq!(enc.height.config.axis_len, 16);
}
