mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tribe_gnn::autodiff::{ParamStore, Tape, Tensor};
use tribe_gnn::datagen::generate;
use tribe_gnn::graph::{Tribe, TribeStyleGraph};
use tribe_gnn::losses::{bce_loss, total_loss};
use tribe_gnn::model::{Ablation, Mode};
use tribe_gnn::training::{contrastive_term, TrainConfig};
use tribe_gnn::tse::{embed_nodes, encode_tribes, gin_forward, TribeBatch, TseConfig, TseParams, Views};
use tribe_gnn::Model64;

use common::*;

type Rows = Vec<Vec<f64>>;

fn rows_of(t: &Tensor<f64>) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols()).map(|j| b.get(0, j) + x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>()).collect()
}

/// Per-node GIN layers written with explicit neighbour loops.
fn gin_loops(tribes: &[Tribe], z: &Rows, layers: &[[Tensor<f64>; 5]]) -> Vec<Rows> {
    let mut offsets = vec![0];
    for t in tribes {
        offsets.push(offsets.last().unwrap() + t.len());
    }
    let mut h = z.clone();
    let mut out = Vec::new();
    for [eps, w1, b1, w2, b2] in layers {
        let mut next = Vec::with_capacity(h.len());
        for (ti, t) in tribes.iter().enumerate() {
            let view = t.undirected_view();
            for v in 0..t.len() {
                let mut agg: Vec<f64> = h[offsets[ti] + v].iter().map(|x| (1.0 + eps.item()) * x).collect();
                for &u in view.neighbors(v) {
                    for (a, x) in agg.iter_mut().zip(&h[offsets[ti] + u]) {
                        *a += x;
                    }
                }
                let a: Vec<f64> = affine(&agg, w1, b1).into_iter().map(|x| x.max(0.0)).collect();
                next.push(affine(&a, w2, b2));
            }
        }
        h = next;
        out.push(h.clone());
    }
    out
}

fn random_tribes(seed: u64, count: usize) -> Vec<Tribe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_tribe(&mut rng, 25)).collect()
}

fn perturb_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn gin_layers_match_neighbour_loops() {
    let tribes = random_tribes(1, 6);
    let cfg = TseConfig { d_e: 3, d_t: 5, layers: 3, ..TseConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let params = TseParams::init(&mut store, &cfg, &mut rng);
    perturb_params(&mut store, &mut rng);
    let batch = TribeBatch::<f64>::from_tribes(&tribes, &cfg).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, &store);
    let z = embed_nodes(&mut tape, &batch, &vars).unwrap();
    let hs = gin_forward::<f64, ChaCha8Rng>(&mut tape, &batch, z, &vars.layers, 0.5, None).unwrap();
    let layers: Vec<[Tensor<f64>; 5]> = vars
        .layers
        .iter()
        .map(|l| [l.eps, l.w1, l.b1, l.w2, l.b2].map(|v| tape.value(v).clone()))
        .collect();
    let oracle = gin_loops(&tribes, &rows_of(tape.value(z)), &layers);
    for (h, o) in hs.iter().zip(&oracle) {
        let got = rows_of(tape.value(*h));
        for (a, b) in got.iter().flatten().zip(o.iter().flatten()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn readout_matches_per_tribe_sums() {
    let tribes = random_tribes(3, 8);
    let cfg = TseConfig { d_e: 4, d_t: 6, layers: 2, ..TseConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let params = TseParams::init(&mut store, &cfg, &mut rng);
    perturb_params(&mut store, &mut rng);
    let batch = TribeBatch::<f64>::from_tribes(&tribes, &cfg).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, &store);
    let reps = encode_tribes(&mut tape, &batch, &vars, 0.0, Views::Eval).unwrap();
    let got = rows_of(tape.value(reps[0]));

    let z = embed_nodes(&mut tape, &batch, &vars).unwrap();
    let z = rows_of(tape.value(z));
    let (w0, b0) = (tape.value(vars.proj_w).clone(), tape.value(vars.proj_b).clone());
    let layers: Vec<[Tensor<f64>; 5]> = vars
        .layers
        .iter()
        .map(|l| [l.eps, l.w1, l.b1, l.w2, l.b2].map(|v| tape.value(v).clone()))
        .collect();
    let mut per_layer = vec![z.iter().map(|r| affine(r, &w0, &b0)).collect::<Rows>()];
    per_layer.extend(gin_loops(&tribes, &z, &layers));

    let mut offset = 0;
    for (ti, t) in tribes.iter().enumerate() {
        for c in 0..cfg.d_t {
            let mut total = 0.0;
            for h in &per_layer {
                total += (offset..offset + t.len()).map(|v| h[v][c]).sum::<f64>();
            }
            let want = total / per_layer.len() as f64;
            assert!((got[ti][c] - want).abs() < 1e-10, "tribe {ti} col {c}: {} vs {want}", got[ti][c]);
        }
        offset += t.len();
    }
}

fn small_graph(seed: u64, n: usize) -> TribeStyleGraph {
    let mut cfg = bench_small();
    cfg.n_tribes = n;
    cfg.tribe_size_risky = (3, 12);
    cfg.tribe_size_normal = (3, 15);
    cfg.p_same = 0.15;
    cfg.p_cross = 0.05;
    cfg.attr_dim = 6;
    cfg.seed = seed;
    generate(&cfg).unwrap()
}

#[test]
fn raising_the_head_bias_raises_every_probability() {
    let g = small_graph(5, 30);
    let cfg = TrainConfig { hidden: 8, ..TrainConfig::default() };
    let mut model = Model64::new(cfg.model_config(), &g, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = model.prepare(&g).unwrap();
    let before = model.predict_proba(&data).unwrap();
    let b = model.params().find("head.b").unwrap();
    model.params_mut().value_mut(b).data_mut()[0] += 0.5;
    let after = model.predict_proba(&data).unwrap();
    for (p, q) in before.iter().zip(&after) {
        assert!(*p > 0.0 && *p < 1.0);
        assert!(q > p);
    }
}

/// Finite-difference check of the full training loss on a sample of
/// coordinates, skipping probes that cross a ReLU or clamp boundary.
fn gradient_check(g: &TribeStyleGraph, ablation: Ablation, ggrl_linear: bool, seed: u64) {
    let mut tc = TrainConfig { hidden: 5, d_e: 3, cl_batch: 6, seed, ..TrainConfig::default() };
    tc.set_ablation(ablation);
    let mut mc = tc.model_config();
    mc.ggrl_linear = ggrl_linear;
    let mut model = Model64::new(mc, g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let data = model.prepare(g).unwrap();
    let mask = g.global().labeled_nodes();
    let y: Vec<bool> = mask.iter().map(|&i| g.global().labels()[i].unwrap()).collect();
    let lc = tc.loss_config();
    let eval = |m: &Model64, grads: bool| {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &data, Mode::Train { seed, epoch: 2 }).unwrap();
        let mut loss = bce_loss(&mut tape, out.probs, &mask, &y, lc.clamp_eps).unwrap();
        if out.views.len() == 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let cl = contrastive_term(&mut tape, out.views[0], out.views[1], tc.cl_batch, &lc, &mut rng).unwrap();
            loss = total_loss(&mut tape, loss, cl, &lc).unwrap();
        }
        let (v, sig) = (tape.value(loss).item(), tape.activation_signature());
        let store = grads.then(|| {
            let gr = tape.backward(loss).unwrap();
            let mut s = m.params().clone();
            s.zero_grad();
            gr.accumulate_into(&mut s);
            s
        });
        (v, sig, store)
    };
    let (_, sig0, grads) = eval(&model, true);
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = model.params().ids().collect();
    let h = 1e-5;
    for id in ids {
        let len = model.params().value(id).len();
        for _ in 0..len.min(6) {
            let k = rng.gen_range(0..len);
            let orig = model.params().value(id).data()[k];
            model.params_mut().value_mut(id).data_mut()[k] = orig + h;
            let (fp, sp, _) = eval(&model, false);
            model.params_mut().value_mut(id).data_mut()[k] = orig - h;
            let (fm, sm, _) = eval(&model, false);
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            if sp != sig0 || sm != sig0 {
                continue;
            }
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.grad(id).data()[k];
            let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-5, "{}[{k}] ({ablation:?}): analytic {ana} numeric {num}", model.params().name(id));
        }
    }
}

#[test]
fn every_variant_has_sound_gradients() {
    let g = small_graph(6, 24);
    let variants = [
        "", "tse", "ggrl", "cl", "fusion", "attrs", "emb", "tse,ggrl", "cl,fusion,emb",
    ];
    for (i, v) in variants.iter().enumerate() {
        let a = if v.is_empty() { Ablation::default() } else { Ablation::parse_list(v).unwrap() };
        gradient_check(&g, a, false, i as u64);
    }
    gradient_check(&g, Ablation::default(), true, 42);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_reload_to_identical_predictions(
        seed in any::<u64>(),
        no_tse in any::<bool>(),
        no_ggrl in any::<bool>(),
        no_fusion in any::<bool>(),
        no_emb in any::<bool>(),
    ) {
        let g = small_graph(seed % 1000, 20);
        let mut tc = TrainConfig { hidden: 6, d_e: 2, ..TrainConfig::default() };
        tc.set_ablation(Ablation { no_tse, no_ggrl, no_fusion, no_emb, ..Ablation::default() });
        let model = Model64::new(tc.model_config(), &g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut buf = Vec::new();
        model.save_checkpoint(&mut buf).unwrap();
        let back = Model64::load_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.config(), model.config());
        let (d1, d2) = (model.prepare(&g).unwrap(), back.prepare(&g).unwrap());
        prop_assert_eq!(model.predict_proba(&d1).unwrap(), back.predict_proba(&d2).unwrap());
        let mut again = Vec::new();
        back.save_checkpoint(&mut again).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn eval_predictions_ignore_tribe_relabelling(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let g = small_graph(seed % 1000, 16);
        let tc = TrainConfig { hidden: 6, d_e: 3, ..TrainConfig::default() };
        let model = Model64::new(tc.model_config(), &g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let tribes: Vec<Tribe> = g
            .tribes()
            .iter()
            .map(|t| {
                let mut perm: Vec<usize> = (0..t.len()).collect();
                perm.shuffle(&mut rng);
                t.permuted(&perm).unwrap()
            })
            .collect();
        let h = TribeStyleGraph::new(g.global().clone(), tribes).unwrap();
        let (p, q) = (
            model.predict_proba(&model.prepare(&g).unwrap()).unwrap(),
            model.predict_proba(&model.prepare(&h).unwrap()).unwrap(),
        );
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
