mod common;

use c2e::encoder::{compression_step, subspace_project, CompressionMaps};
use c2e::info::{exact_entropy_gradient, gaussian_entropy};
use c2e::nn::{Graph, ParamStore};
use c2e::optim::AdamW;
use c2e::patch::{patchify, plan_mask, unpatchify};
use c2e::*;
use common::*;

#[test]
fn patchify_counts_and_round_trip() {
    let img = uniform(&[2, 32, 32, 3], 1, 0.0, 1.0);
    let pb = patchify(&img, 16).unwrap();
    assert_eq!(pb.num_patches(), 4);
    assert_eq!(unpatchify(&pb).unwrap(), img);
    let pb = patchify(&img, 8).unwrap();
    assert_eq!(pb.num_patches(), 16);
    assert_eq!(unpatchify(&pb).unwrap(), img);
    assert!(matches!(patchify(&img, 5), Err(C2eError::Shape(_))));
}

#[test]
fn mask_plan_contract() {
    let mut rng = Rng::new(3);
    let plan = plan_mask(196, 0.75, &mut rng).unwrap();
    assert_eq!((plan.masked.len(), plan.visible.len()), (147, 49));
    let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..196).collect::<Vec<_>>());
    assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));

    assert!(plan_mask(16, 0.0, &mut rng).unwrap().masked.is_empty());
    let a = plan_mask(16, 0.5, &mut Rng::new(9)).unwrap();
    let b = plan_mask(16, 0.5, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    for bad in [1.0, -0.1, f64::NAN] {
        assert!(matches!(plan_mask(16, bad, &mut rng), Err(C2eError::Config(_))));
    }
}

#[test]
fn identity_compression_contracts_by_one_minus_step() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zt = randn(&[6, 4], 2);
    let z = g.constant(zt.clone());
    let eye = || Tensor::eye(4);
    let (d, v, s) = (g.constant(eye()), g.constant(eye()), g.constant(eye()));
    let beta = g.constant(Tensor::scalar(0.1));
    let out = compression_step(&mut g, z, d, v, s, beta).unwrap();
    let out = g.value(out);
    assert!(out.max_abs_diff(&zt.scale(0.9)) < 1e-15);
    assert!((out.norm() - 0.9 * zt.norm()).abs() < 1e-12);

    let zero = g.constant(Tensor::scalar(0.0));
    let out = compression_step(&mut g, z, d, v, s, zero).unwrap();
    assert_eq!(g.value(out), &zt);
}

#[test]
fn subspace_projection_cases() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zt = randn(&[5, 6], 4);
    let z = g.tape.leaf(zt.clone());

    let p0 = g.constant(Tensor::zeros(&[4, 4]));
    let out = subspace_project(&mut g, z, 4, p0).unwrap();
    assert_eq!(g.value(out), &zt.select_cols(&[0, 1, 2, 3]));

    let pi = g.constant(Tensor::eye(6));
    let out = subspace_project(&mut g, z, 6, pi).unwrap();
    assert_eq!(g.value(out), &zt.scale(2.0));

    let p = g.constant(randn(&[4, 4], 5));
    let out = subspace_project(&mut g, z, 4, p).unwrap();
    let loss = weighted(&mut g.tape, out).unwrap();
    let grad = g.tape.backward(loss).get(z).unwrap();
    for r in 0..5 {
        assert!(grad.row(r)[..4].iter().all(|v| *v != 0.0));
        assert!(grad.row(r)[4..].iter().all(|v| *v == 0.0));
    }

    let p = g.constant(Tensor::zeros(&[7, 7]));
    assert!(matches!(subspace_project(&mut g, z, 7, p), Err(C2eError::Config(_))));
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Fits the three learned maps so that `z·D·V⁻¹·S` regresses the closed-form
/// entropy-descent direction `z(zᵀz)⁻¹` on `train`.
fn distill(train: &Tensor, steps: usize) -> (ParamStore, CompressionMaps) {
    let c = train.cols();
    let mut store = ParamStore::new();
    let maps = CompressionMaps::new(&mut store, "c", &mut Rng::new(1), c, 1.0);
    let target = exact_entropy_gradient(train, 0.0).unwrap().scale(-1.0);
    let cfg = c2e::config::OptimizerConfig {
        lr: 2e-2,
        weight_decay: 0.0,
        warmup_frac: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(&cfg, &store, steps as u64);
    for step in 0..steps {
        let grads = {
            let mut g = Graph::new(&store);
            let z = g.constant(train.clone());
            let (d, v, s) = (g.p(maps.d), g.p(maps.vinv), g.p(maps.s));
            let m = g.tape.matmul(z, d).unwrap();
            let m = g.tape.matmul(m, v).unwrap();
            let m = g.tape.matmul(m, s).unwrap();
            let t = g.constant(target.clone());
            let diff = g.tape.sub(m, t).unwrap();
            let sq = g.tape.square(diff);
            let loss = g.tape.mean(sq);
            let gr = g.tape.backward(loss);
            g.param_grads(&gr)
        };
        let lr = opt.lr_at(step as u64);
        opt.step(&mut store, &grads, lr);
    }
    (store, maps)
}

fn learned_direction(store: &ParamStore, maps: &CompressionMaps, z: &Tensor) -> Tensor {
    let d = store.get(maps.d);
    let v = store.get(maps.vinv);
    let s = store.get(maps.s);
    z.matmul(d).unwrap().matmul(v).unwrap().matmul(s).unwrap()
}

fn correlated_tokens(n: usize, seed: u64) -> Tensor {
    let mix = Tensor::from_rows(&[
        vec![1.0, 0.3, 0.0, 0.0, 0.1, 0.0],
        vec![0.0, 0.8, 0.2, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.2, 0.4, 0.0, 0.0],
        vec![0.2, 0.0, 0.0, 0.6, 0.0, 0.3],
        vec![0.0, 0.0, 0.0, 0.0, 0.9, 0.1],
        vec![0.0, 0.1, 0.0, 0.0, 0.0, 0.7],
    ])
    .unwrap();
    randn(&[n, 6], seed).matmul(&mix).unwrap()
}

#[test]
fn distilled_maps_follow_the_closed_form_step() {
    let train = correlated_tokens(48, 11);
    let (store, maps) = distill(&train, 200);
    let target = exact_entropy_gradient(&train, 0.0).unwrap().scale(-1.0);
    let cos = cosine(&learned_direction(&store, &maps, &train), &target);
    assert!(cos > 0.8, "cosine {cos}");
}

#[test]
fn distilled_steps_do_not_raise_entropy_on_held_out_tokens() {
    let (store, maps) = distill(&correlated_tokens(48, 11), 200);
    let beta = 2.0;
    for seed in 0..5 {
        let mut z = correlated_tokens(48, 100 + seed);
        let mut prev = gaussian_entropy(&z, 0.0).unwrap().entropy;
        for layer in 0..4 {
            let mut g = Graph::frozen(&store);
            let zv = g.constant(z.clone());
            let (d, v, s) = (g.p(maps.d), g.p(maps.vinv), g.p(maps.s));
            let b = g.constant(Tensor::scalar(beta));
            let out = compression_step(&mut g, zv, d, v, s, b).unwrap();
            z = g.value(out).clone();
            let h = gaussian_entropy(&z, 0.0).unwrap().entropy;
            assert!(h <= prev, "batch {seed} layer {layer}: {prev} -> {h}");
            prev = h;
        }
    }
}

#[test]
fn schedule_is_strictly_decreasing_by_constant_step() {
    let cfg = C2eConfig::default();
    let s = cfg.schedule().unwrap();
    assert_eq!(s.widths(), &[64, 56, 48, 40, 32]);
    assert!(s.widths().windows(2).all(|w| w[0] - w[1] == s.delta()));
    assert!(ChannelSchedule::new(16, 8, 2).is_err());
}

#[test]
fn encode_preserves_tokens_and_follows_schedule() {
    let cfg = C2eConfig::default();
    let model = C2eModel::new(&cfg).unwrap();
    let images = uniform(&[3, 32, 32, 3], 6, 0.0, 1.0);
    let pb = model.patchify(&images).unwrap();
    let mut rng = Rng::new(2);
    let plans: Vec<MaskPlan> = (0..3).map(|_| plan_mask(16, 0.75, &mut rng).unwrap()).collect();
    let mut g = Graph::frozen(&model.params);
    let enc = model.encoder.encode(&mut g, &pb, &plans).unwrap();
    assert_eq!(g.value(enc.z0).shape(), &[12, 32]);
    let widths: Vec<usize> = enc.layer_states.iter().map(|&v| g.value(v).cols()).collect();
    assert_eq!(widths, vec![56, 48, 40, 32]);
    let h = model.entropies(&g, &enc).unwrap();
    assert_eq!(h.len(), cfg.depth);
    assert!(h.iter().all(|r| r.entropy.is_finite()));
    assert_eq!(h.iter().map(|r| r.dim).collect::<Vec<_>>(), vec![32, 40, 48, 56]);
}

#[test]
fn encode_is_permutation_equivariant() {
    let model = C2eModel::new(&tiny_cfg()).unwrap();
    let tokens = randn(&[4, 192], 8);
    let perm = [2, 0, 3, 1];
    let run = |rows: &[usize]| {
        let mut g = Graph::frozen(&model.params);
        let t = g.constant(tokens.select_rows(rows));
        let enc = model.encoder.encode_tokens(&mut g, t, rows, 1).unwrap();
        g.value(enc.z0).clone()
    };
    let base = run(&[0, 1, 2, 3]);
    let permuted = run(&perm);
    assert!(permuted.max_abs_diff(&base.select_rows(&perm)) < 1e-12);
}

#[test]
fn class_token_variant_adds_one_row_per_image() {
    let cfg = C2eConfig {
        pooling: Pooling::Cls,
        ..tiny_cfg()
    };
    let model = C2eModel::new(&cfg).unwrap();
    let images = uniform(&[2, 16, 16, 3], 1, 0.0, 1.0);
    let z = model.encode_all(&images).unwrap();
    assert_eq!(z.tokens.shape(), &[2, 5, 8]);
    assert_eq!(model.features(&images).unwrap().shape(), &[2, 8]);
}
