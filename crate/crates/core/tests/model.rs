mod common;

use common::*;
use proptest::prelude::*;
use slotgen_core::decoder::{ce_loss, Sampling};
use slotgen_core::dvae::{
    argmax_row, dvae_loss, hard_tokens, one_hot, sample_relaxed, stride_factors, temperature_at, TokenGrid, TokenMode,
};
use slotgen_core::image::batch_tensor;
use slotgen_core::mixture::{compose, Components, MixtureModel};
use slotgen_core::model::Slot2Seq;
use slotgen_core::nn::Fwd;
use slotgen_core::rng::RandomSource;
use slotgen_core::tensor::{gradcheck, no_grad, ParamId, Tensor};

fn random_tensor(shape: &[usize], scale: f64, rng: &mut RandomSource) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| scale * rng.normal()).collect(), shape)
}

fn tokens_of(rows: &[Vec<usize>]) -> Vec<TokenGrid> {
    rows.iter().cloned().map(TokenGrid).collect()
}

fn model(seed: u64) -> Slot2Seq {
    Slot2Seq::new(&tiny_run().slot2seq(), seed).unwrap()
}

#[test]
fn dvae_shapes_and_shape_errors() {
    let m = model(0);
    let v = m.store.bind_frozen();
    let x = batch_tensor(&random_images(16, 2, 1)).unwrap();
    let logits = m.dvae.encode_logits(&v, &x).unwrap();
    assert_eq!(logits.shape(), &[2, 16, 32]);
    let bad = batch_tensor(&random_images(12, 1, 1)).unwrap();
    assert!(m.dvae.encode_logits(&v, &bad).is_err());
    assert!(m.tokenize(&random_images(8, 1, 1)).is_err());
    let soft = sample_relaxed(&logits, 1.0, None).unwrap();
    let recon = m.dvae.decode_patches(&v, &soft).unwrap();
    assert_eq!(recon.shape(), &[2, 3, 16, 16]);
    assert!(recon.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(stride_factors(4), vec![2, 2]);
    assert_eq!(stride_factors(6), vec![2, 3]);
}

#[test]
fn relaxed_codes_reject_nonpositive_temperature() {
    let l = Tensor::zeros(&[1, 2, 3]);
    assert!(sample_relaxed(&l, 0.0, None).is_err());
    assert!(sample_relaxed(&l, -1.0, None).is_err());
}

#[test]
fn argmax_ties_take_lowest_index() {
    assert_eq!(argmax_row(&[1.0, 3.0, 3.0, 2.0]), 1);
    let l = Tensor::from_vec(vec![0.5, 0.5, 0.1, 0.0, 2.0, 2.0], &[1, 2, 3]);
    let t = hard_tokens(&l, TokenMode::Argmax, &mut RandomSource::seed(0));
    assert_eq!(t[0].0, vec![0, 1]);
}

#[test]
fn temperature_schedule_endpoints() {
    let s = tiny_run().train().temperature;
    assert_eq!(temperature_at(0, &s), s.start);
    assert_eq!(temperature_at(s.steps, &s), s.end);
    assert_eq!(temperature_at(s.steps * 10, &s), s.end);
    let mid = temperature_at(s.steps / 2, &s);
    assert!(mid < s.start && mid > s.end);
}

proptest! {
    #[test]
    fn softcode_rows_are_simplex(seed in any::<u64>(), tau in 0.05f64..5.0, noisy in any::<bool>()) {
        let mut rng = RandomSource::seed(seed);
        let l = random_tensor(&[2, 3, 7], 3.0, &mut rng);
        let s = sample_relaxed(&l, tau, if noisy { Some(&mut rng) } else { None }).unwrap();
        for row in s.data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_and_dvae_losses_match_loops(seed in any::<u64>(), b in 1usize..4, t in 1usize..5, v in 2usize..6) {
        let mut rng = RandomSource::seed(seed);
        let logits = random_tensor(&[b, t, v], 4.0, &mut rng);
        let targets: Vec<Vec<usize>> = (0..b).map(|_| (0..t).map(|_| rng.below(v)).collect()).collect();
        let got = ce_loss(&logits, &tokens_of(&targets)).unwrap().item();
        prop_assert!((got - ce_oracle(logits.data(), b, t, v, &targets)).abs() < 1e-9);
        let x = random_tensor(&[b, 3, 2, 2], 1.0, &mut rng);
        let r = random_tensor(&[b, 3, 2, 2], 1.0, &mut rng);
        let got = dvae_loss(&x, &r).unwrap().item();
        prop_assert!((got - sq_oracle(x.data(), r.data(), b)).abs() < 1e-9);
    }
}

#[test]
fn ce_loss_validates_targets() {
    let logits = Tensor::zeros(&[1, 2, 3]);
    assert!(ce_loss(&logits, &tokens_of(&[vec![0, 3]])).is_err());
    assert!(ce_loss(&logits, &tokens_of(&[vec![0]])).is_err());
    assert!(one_hot(&tokens_of(&[vec![5]]), 3).is_err());
}

#[test]
fn joint_attention_normalizes_over_slots_and_heads() {
    let mut run = tiny_run();
    run.num_slot_heads = 4;
    let m = Slot2Seq::new(&run.slot2seq(), 3).unwrap();
    let (_, set) = m.encode_images(&random_images(16, 3, 4), &mut RandomSource::seed(5)).unwrap();
    let s = set.attention.shape().to_vec();
    let (b, n, heads, t) = (s[0], s[1], s[2], s[3]);
    assert_eq!((n, heads, t), (3, 4, 16));
    let a = set.attention.data();
    for bi in 0..b {
        for ti in 0..t {
            let mut sum = 0.0;
            for ni in 0..n {
                for mi in 0..heads {
                    sum += a[((bi * n + ni) * heads + mi) * t + ti];
                }
            }
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn slots_ignore_cell_order_and_follow_slot_order() {
    let m = model(7);
    let v = m.store.bind_frozen();
    let mut rng = RandomSource::seed(1);
    let inputs = random_tensor(&[1, 16, 32], 1.0, &mut rng);
    let init = m.slot_attention.init_slots(&v, 1, &mut rng);
    let base = no_grad(|| m.slot_attention.encode_from(&v, &inputs, init.clone())).unwrap();
    let mut perm: Vec<usize> = (0..16).collect();
    rng.shuffle(&mut perm);
    let permuted = inputs.reshape(&[16, 32]).index_select_rows(&perm).reshape(&[1, 16, 32]);
    let p = no_grad(|| m.slot_attention.encode_from(&v, &permuted, init.clone())).unwrap();
    for (x, y) in base.slots.data().iter().zip(p.slots.data()) {
        assert!((x - y).abs() < 1e-9);
    }
    // permuting initial slots permutes the outputs
    let order = [2usize, 0, 1];
    let init_p = init.reshape(&[3, 32]).index_select_rows(&order).reshape(&[1, 3, 32]);
    let q = no_grad(|| m.slot_attention.encode_from(&v, &inputs, init_p)).unwrap();
    let (bv, qv) = (base.vectors(0), q.vectors(0));
    for (i, &o) in order.iter().enumerate() {
        for (x, y) in qv[i].iter().zip(&bv[o]) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

fn setup(m: &Slot2Seq, seed: u64) -> (Vec<TokenGrid>, Tensor) {
    let mut rng = RandomSource::seed(seed);
    let t = m.cfg.dvae.num_tokens();
    let v = m.cfg.dvae.vocab_size;
    let tokens: Vec<TokenGrid> = (0..2).map(|_| TokenGrid((0..t).map(|_| rng.below(v)).collect())).collect();
    let slots = random_tensor(&[2, m.num_slots(), m.slot_dim()], 1.0, &mut rng);
    (tokens, slots)
}

fn tf_logits(m: &Slot2Seq, tokens: &[TokenGrid], slots: &Tensor) -> Tensor {
    let v = m.store.bind_frozen();
    let mut rng = RandomSource::seed(0);
    let mut fwd = Fwd::eval(&mut rng);
    no_grad(|| {
        let u = m.embed.embed(&v, tokens, 0.0, &mut fwd).unwrap();
        m.decoder.teacher_forced_logits(&v, &u, slots, &mut fwd).unwrap()
    })
}

#[test]
fn decoder_is_causal() {
    let m = model(11);
    let (tokens, slots) = setup(&m, 2);
    let base = tf_logits(&m, &tokens, &slots);
    let (t, vsz) = (m.cfg.dvae.num_tokens(), m.cfg.dvae.vocab_size);
    for i in 0..t - 1 {
        let mut changed = tokens.clone();
        for g in &mut changed {
            for z in &mut g.0[i + 1..] {
                *z = (*z + 1) % vsz;
            }
        }
        let other = tf_logits(&m, &changed, &slots);
        for b in 0..2 {
            let off = b * t * vsz;
            assert_eq!(&base.data()[off..off + (i + 2) * vsz], &other.data()[off..off + (i + 2) * vsz]);
        }
    }
}

#[test]
fn decoder_ignores_slot_order() {
    let m = model(12);
    let (tokens, slots) = setup(&m, 3);
    let base = tf_logits(&m, &tokens, &slots);
    let (n, d) = (m.num_slots(), m.slot_dim());
    let perm: Vec<usize> = (0..2).flat_map(|b| [2, 0, 1].map(|i| b * n + i)).collect();
    let p = slots.reshape(&[2 * n, d]).index_select_rows(&perm).reshape(&[2, n, d]);
    let other = tf_logits(&m, &tokens, &p);
    for (x, y) in base.data().iter().zip(other.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn cached_generation_matches_teacher_forcing_bitwise() {
    for seed in 0..3 {
        let m = model(20 + seed);
        let (_, slots) = setup(&m, seed);
        let v = m.store.bind_frozen();
        for mode in [Sampling::Greedy, Sampling::Sample { temperature: 1.0 }] {
            let (gen, logits) = m
                .decoder
                .generate_with_logits(&v, &m.embed, &slots, mode, &mut RandomSource::seed(seed))
                .unwrap();
            let tf = tf_logits(&m, &gen, &slots);
            assert_eq!(logits.shape(), tf.shape());
            assert_eq!(logits.data(), tf.data());
            if mode == Sampling::Greedy {
                let vsz = m.cfg.dvae.vocab_size;
                for (b, g) in gen.iter().enumerate() {
                    for (i, &z) in g.0.iter().enumerate() {
                        let off = (b * g.len() + i) * vsz;
                        assert_eq!(argmax_row(&tf.data()[off..off + vsz]), z);
                    }
                }
            }
        }
    }
}

#[test]
fn rendering_checks_prompt_shape() {
    let m = model(5);
    let mut rng = RandomSource::seed(0);
    let prompt = vec![vec![0.1; m.slot_dim()]; m.num_slots()];
    let imgs = m.render(&[prompt.clone()], Sampling::Greedy, &mut rng).unwrap();
    assert_eq!((imgs[0].height(), imgs[0].width()), (16, 16));
    assert_eq!(imgs, m.render(&[prompt.clone()], Sampling::Greedy, &mut rng).unwrap());
    assert!(m.render(&[prompt[..2].to_vec()], Sampling::Greedy, &mut rng).is_err());
    assert!(m.render(&[vec![vec![0.0; 3]; 3]], Sampling::Greedy, &mut rng).is_err());
    assert!(m.generate(&Tensor::zeros(&[1, 3, 32]), Sampling::Sample { temperature: 0.0 }, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mixture_weights_are_simplex(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = RandomSource::seed(seed);
        let c = Components {
            rgb: random_tensor(&[2, n, 3, 3, 3], 1.0, &mut rng),
            mask_logits: random_tensor(&[2, n, 3, 3], 5.0, &mut rng),
        };
        let (_, w) = compose(&c).unwrap();
        for b in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..n).map(|k| w.data()[(b * n + k) * 9 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn mixture_forward_shapes() {
    let run = tiny_run();
    let m = MixtureModel::new(&run.mixture(), 0).unwrap();
    let imgs = random_images(16, 2, 0);
    let x = batch_tensor(&imgs).unwrap();
    let v = m.store.bind_frozen();
    let out = no_grad(|| m.forward(&v, &x, &mut RandomSource::seed(0))).unwrap();
    assert_eq!(out.recon.shape(), &[2, 3, 16, 16]);
    assert_eq!(out.weights.shape(), &[2, 3, 16, 16]);
    assert_eq!(out.slots.attention.shape(), &[2, 3, 1, 256]);
    assert!(m.features(&v, &batch_tensor(&random_images(8, 1, 0)).unwrap()).is_err());
    let bad = Components {
        rgb: Tensor::zeros(&[1, 2, 3, 4, 4]),
        mask_logits: Tensor::zeros(&[1, 3, 4, 4]),
    };
    assert!(compose(&bad).is_err());
}

fn all_params(n: usize) -> Vec<ParamId> {
    (0..n).map(ParamId).collect()
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let run = grad_run();
    let mut m = Slot2Seq::new(&run.slot2seq(), 4).unwrap();
    jitter_biases(&mut m.store, 1);
    let x = batch_tensor(&random_images(8, 2, 9)).unwrap();
    let report = gradcheck::check(&m.store, &all_params(m.store.len()), 4, 1e-5, 1e-6, |v| {
        let mut rng = RandomSource::seed(3);
        m.total_loss(v, &x, 0.7, 1.0, &mut Fwd::eval(&mut rng)).unwrap().total
    });
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn token_loss_sends_no_gradient_into_dvae() {
    let m = Slot2Seq::new(&grad_run().slot2seq(), 4).unwrap();
    let x = batch_tensor(&random_images(8, 2, 9)).unwrap();
    let v = m.store.bind();
    let mut rng = RandomSource::seed(3);
    let parts = m.total_loss(&v, &x, 1.0, 1.0, &mut Fwd::train(&mut rng)).unwrap();
    let g_st = v.grads(&parts.st.backward());
    let g_dvae = v.grads(&parts.dvae.backward());
    for (i, e) in m.store.entries().iter().enumerate() {
        let nonzero = |g: &Option<Vec<f64>>| g.as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0));
        if e.name.starts_with("dvae.") {
            assert!(!nonzero(&g_st[i]), "{} receives token-loss gradient", e.name);
            assert!(nonzero(&g_dvae[i]), "{} receives no reconstruction gradient", e.name);
        } else {
            assert!(!nonzero(&g_dvae[i]), "{} receives reconstruction gradient", e.name);
        }
    }
}

#[test]
fn mixture_loss_gradients_match_finite_differences() {
    let run = grad_run();
    let mut m = MixtureModel::new(&run.mixture(), 6).unwrap();
    jitter_biases(&mut m.store, 2);
    let x = batch_tensor(&random_images(8, 2, 2)).unwrap();
    let report = gradcheck::check(&m.store, &all_params(m.store.len()), 4, 1e-5, 1e-6, |v| {
        m.loss(v, &x, &mut RandomSource::seed(1)).unwrap().0
    });
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
