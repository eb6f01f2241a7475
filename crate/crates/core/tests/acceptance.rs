//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The desk end-to-end run is skipped unless `--ignored` or
//! `--include-ignored` is passed; bare arguments (`P1 P4`) select criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use slotgen_core::checkpoint::{store_hash, Checkpoint};
use slotgen_core::concept::{assign_by_iou, GridRegionLibrary};
use slotgen_core::config::{DecoderKind, PlateauPolicy, RunConfig};
use slotgen_core::data::sprites::{generate_shadow_sprites, SpriteParams};
use slotgen_core::decoder::{ce_loss, Sampling};
use slotgen_core::dvae::{argmax_row, dvae_loss, sample_relaxed, temperature_at, TokenGrid};
use slotgen_core::eval::{
    discriminator_probe, frechet_distance, mse_metric, ConvEmbedder, GaussianSummary, ProbeConfig,
};
use slotgen_core::experiments::{desk_scenes, head_ablation, run_desk, scene_images, DeskProtocol};
use slotgen_core::image::{batch_tensor, Image};
use slotgen_core::mixture::{compose, Components, MixtureModel};
use slotgen_core::model::Slot2Seq;
use slotgen_core::nn::Fwd;
use slotgen_core::rng::RandomSource;
use slotgen_core::tensor::{gradcheck, no_grad, ParamId, Tensor};
use slotgen_core::training::{lr_at, plateau_update, Group, MetricRecord, Trainer};

type Outcome = Result<String, String>;

const SIMPLEX_TOL: f64 = 1e-6;
const ATTENTION_TOL: f64 = 1e-5;
const INVARIANCE_TOL: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-9;
const FRECHET_TOL: f64 = 1e-4;
const PROBE_CHANCE_BAND: (f64, f64) = (0.4, 0.6);
const PROBE_SEPARABLE: f64 = 0.95;
const PROBE_STEPS: usize = 500;
const ABLATION_STEPS: u64 = 450;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut RandomSource) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| scale * rng.normal()).collect(), shape)
}

fn tiny_model(seed: u64, heads: usize) -> Slot2Seq {
    let mut run = tiny_run();
    run.num_slot_heads = heads;
    Slot2Seq::new(&run.slot2seq(), seed).unwrap()
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

fn random_tokens(m: &Slot2Seq, b: usize, rng: &mut RandomSource) -> Vec<TokenGrid> {
    let (t, v) = (m.cfg.dvae.num_tokens(), m.cfg.dvae.vocab_size);
    (0..b).map(|_| TokenGrid((0..t).map(|_| rng.below(v)).collect())).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn p1() -> Outcome {
    let mut rng = RandomSource::seed(1);
    let mut worst = [0.0f64; 3];
    for _ in 0..1000 {
        let v = 2 + rng.below(30);
        let l = random_tensor(&[1, 4, v], 5.0, &mut rng);
        let tau = 0.05 + 4.95 * rng.uniform();
        let noisy = rng.uniform() < 0.5;
        let mut noise = RandomSource::seed(rng.below(1 << 30) as u64);
        let s = sample_relaxed(&l, tau, if noisy { Some(&mut noise) } else { None }).unwrap();
        for row in s.data().chunks(v) {
            ensure(row.iter().all(|&p| p >= 0.0), || "negative SoftCode entry".into())?;
            worst[0] = worst[0].max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    for _ in 0..1000 {
        let n = 1 + rng.below(6);
        let c = Components {
            rgb: random_tensor(&[1, n, 3, 4, 4], 1.0, &mut rng),
            mask_logits: random_tensor(&[1, n, 4, 4], 8.0, &mut rng),
        };
        let (_, w) = compose(&c).unwrap();
        for p in 0..16 {
            let s: f64 = (0..n).map(|k| w.data()[k * 16 + p]).sum();
            worst[1] = worst[1].max((s - 1.0).abs());
        }
    }
    let mut done = 0;
    for model_seed in 0..20u64 {
        let m = tiny_model(model_seed, [1, 2, 4][model_seed as usize % 3]);
        let v = m.store.bind_frozen();
        let t = m.cfg.dvae.num_tokens();
        for _ in 0..50 {
            let inputs = random_tensor(&[1, t, m.cfg.slots.input_dim], 3.0, &mut rng);
            let set = no_grad(|| m.slot_attention.encode(&v, &inputs, &mut rng)).unwrap();
            let s = set.attention.shape().to_vec();
            let (n, heads) = (s[1], s[2]);
            let a = set.attention.data();
            for ti in 0..t {
                let sum: f64 = (0..n * heads).map(|k| a[k * t + ti]).sum();
                worst[2] = worst[2].max((sum - 1.0).abs());
            }
            done += 1;
        }
    }
    ensure(worst[0] <= SIMPLEX_TOL, || format!("SoftCode row error {:.2e}", worst[0]))?;
    ensure(worst[1] <= SIMPLEX_TOL, || format!("mixture weight error {:.2e}", worst[1]))?;
    ensure(worst[2] <= ATTENTION_TOL, || format!("attention error {:.2e}", worst[2]))?;
    Ok(format!(
        "1000/1000/{done} inputs; max errors {:.1e} {:.1e} {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn p2() -> Outcome {
    let (mut slot_err, mut cell_err) = (0.0f64, 0.0f64);
    let mut rng = RandomSource::seed(2);
    for seed in 0..10u64 {
        let m = tiny_model(100 + seed, [1, 2, 4][seed as usize % 3]);
        let (t, vsz, n, d) = (m.cfg.dvae.num_tokens(), m.cfg.dvae.vocab_size, m.num_slots(), m.slot_dim());
        let tokens = random_tokens(&m, 2, &mut rng);
        let slots = random_tensor(&[2, n, d], 1.0, &mut rng);
        let base = tf_logits(&m, &tokens, &slots);
        // logits at i predict token i and see tokens < i only
        for i in 0..t - 1 {
            let mut changed = tokens.clone();
            for g in &mut changed {
                for z in &mut g.0[i + 1..] {
                    *z = (*z + 1 + rng.below(vsz - 1)) % vsz;
                }
            }
            let other = tf_logits(&m, &changed, &slots);
            for b in 0..2 {
                let r = b * t * vsz..b * t * vsz + (i + 2) * vsz;
                ensure(base.data()[r.clone()] == other.data()[r], || {
                    format!("model {seed}: logits up to {} moved when tokens after {i} changed", i + 1)
                })?;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let rows: Vec<usize> = (0..2).flat_map(|b| order.iter().map(move |&i| b * n + i)).collect();
        let permuted = slots.reshape(&[2 * n, d]).index_select_rows(&rows).reshape(&[2, n, d]);
        slot_err = slot_err.max(max_abs_diff(base.data(), tf_logits(&m, &tokens, &permuted).data()));

        let v = m.store.bind_frozen();
        let dim = m.cfg.slots.input_dim;
        let inputs = random_tensor(&[1, t, dim], 1.0, &mut rng);
        let init = m.slot_attention.init_slots(&v, 1, &mut rng);
        let a = no_grad(|| m.slot_attention.encode_from(&v, &inputs, init.clone())).unwrap();
        let mut cells: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut cells);
        let shuffled = inputs.reshape(&[t, dim]).index_select_rows(&cells).reshape(&[1, t, dim]);
        let b = no_grad(|| m.slot_attention.encode_from(&v, &shuffled, init)).unwrap();
        cell_err = cell_err.max(max_abs_diff(a.slots.data(), b.slots.data()));
    }
    ensure(slot_err <= INVARIANCE_TOL, || format!("slot permutation moved logits by {slot_err:.2e}"))?;
    ensure(cell_err <= INVARIANCE_TOL, || format!("cell permutation moved slots by {cell_err:.2e}"))?;
    Ok(format!("10 models; causal exact; slot perm {slot_err:.1e}; cell perm {cell_err:.1e}"))
}

fn p3() -> Outcome {
    let run = grad_run();
    let mut s = Slot2Seq::new(&run.slot2seq(), 4).unwrap();
    jitter_biases(&mut s.store, 1);
    let x = batch_tensor(&random_images(8, 2, 9)).unwrap();
    let ids: Vec<ParamId> = (0..s.store.len()).map(ParamId).collect();
    let total = gradcheck::check(&s.store, &ids, 4, 1e-5, 1e-6, |v| {
        let mut rng = RandomSource::seed(3);
        s.total_loss(v, &x, 0.7, 1.0, &mut Fwd::eval(&mut rng)).unwrap().total
    });
    let mut mix = MixtureModel::new(&run.mixture(), 6).unwrap();
    jitter_biases(&mut mix.store, 2);
    let ids: Vec<ParamId> = (0..mix.store.len()).map(ParamId).collect();
    let mixture = gradcheck::check(&mix.store, &ids, 4, 1e-5, 1e-6, |v| {
        mix.loss(v, &x, &mut RandomSource::seed(1)).unwrap().0
    });
    ensure(total.max_rel_error < GRAD_REL_TOL, || format!("total loss {total:?}"))?;
    ensure(mixture.max_rel_error < GRAD_REL_TOL, || format!("mixture loss {mixture:?}"))?;
    Ok(format!(
        "max relative error total {:.1e}, mixture {:.1e}",
        total.max_rel_error, mixture.max_rel_error
    ))
}

fn summary(mean: Vec<f64>, cov: &Mat) -> GaussianSummary {
    GaussianSummary {
        mean,
        covariance: cov.iter().flatten().copied().collect(),
        count: 100,
    }
}

fn p4() -> Outcome {
    let mut rng = RandomSource::seed(4);
    for case in 0..200 {
        let (b, t, v) = (1 + rng.below(3), 1 + rng.below(6), 2 + rng.below(8));
        let logits = random_tensor(&[b, t, v], 4.0, &mut rng);
        let targets: Vec<Vec<usize>> = (0..b).map(|_| (0..t).map(|_| rng.below(v)).collect()).collect();
        let grids: Vec<TokenGrid> = targets.iter().cloned().map(TokenGrid).collect();
        let got = ce_loss(&logits, &grids).unwrap().item();
        let want = ce_oracle(logits.data(), b, t, v, &targets);
        ensure((got - want).abs() <= ORACLE_TOL, || format!("ce case {case}: {got} vs {want}"))?;
        let x = random_tensor(&[b, 3, 3, 3], 1.0, &mut rng);
        let r = random_tensor(&[b, 3, 3, 3], 1.0, &mut rng);
        let got = dvae_loss(&x, &r).unwrap().item();
        let want = sq_oracle(x.data(), r.data(), b);
        ensure((got - want).abs() <= ORACLE_TOL, || format!("dvae case {case}: {got} vs {want}"))?;
    }
    for case in 0..50u64 {
        let a = random_images(8, 1 + case as usize % 4, case);
        let b = random_images(8, a.len(), case + 1000);
        let (got, want) = (mse_metric(&a, &b).unwrap(), brute_mse(&a, &b));
        ensure((got - want).abs() <= ORACLE_TOL, || format!("mse case {case}: {got} vs {want}"))?;
    }
    for case in 0..500 {
        let side = 8;
        let g = 1 + rng.below(4);
        let sparse = rng.uniform();
        let raw: Vec<f64> = (0..side * side).map(|_| if rng.uniform() < sparse { 0.0 } else { rng.uniform() }).collect();
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        let att: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let lib = GridRegionLibrary::new(g, side, side).unwrap();
        let (got, want) = (assign_by_iou(&att, &lib), assign_oracle(&att, g, side, side));
        ensure(got == want, || format!("iou case {case}: {got:?} vs {want:?}"))?;
    }
    for case in 0..500 {
        let len = rng.below(60);
        let h: Vec<f64> = (0..len).map(|_| rng.below(6) as f64).collect();
        let patience = 1 + rng.below(5);
        let (got, want) = (
            plateau_update(&h, &PlateauPolicy { patience, factor: 0.5 }),
            plateau_oracle(&h, patience),
        );
        ensure(got == want, || format!("plateau case {case}: {got} vs {want}"))?;
    }
    let mut worst = 0.0f64;
    for (d, sa, sb) in [(0.0, 1.0, 1.0), (1.5, 0.3, 0.3), (-4.0, 2.0, 0.5), (0.7, 4.0, 1.0)] {
        let got = frechet_distance(&summary(vec![0.0], &vec![vec![sa]]), &summary(vec![d], &vec![vec![sb]])).unwrap();
        let want: f64 = d * d + (sa.sqrt() - sb.sqrt()).powi(2);
        worst = worst.max((got - want).abs());
    }
    for _ in 0..50 {
        let (ca, cb) = (random_spd(3, &mut rng), random_spd(3, &mut rng));
        let ma: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let mb: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let got = frechet_distance(&summary(ma.clone(), &ca), &summary(mb.clone(), &cb)).unwrap();
        worst = worst.max((got - frechet_oracle(&ma, &ca, &mb, &cb)).abs());
    }
    ensure(worst <= FRECHET_TOL, || format!("Fréchet error {worst:.2e}"))?;
    Ok(format!("losses/mse to {ORACLE_TOL:.0e}; iou and plateau exact; Fréchet max error {worst:.1e}"))
}

fn records(t: &mut Trainer, n: u64, train: &[Image], val: &[Image]) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    t.run_steps(n, train, val, |r| out.push(r.clone())).unwrap();
    out
}

fn p5() -> Outcome {
    let s = RunConfig::preset("desk").unwrap().train().temperature;
    let (t0, t1) = (temperature_at(0, &s), temperature_at(30000, &s));
    ensure(t0 == 1.0 && t1 == 0.1, || format!("temperature endpoints {t0} {t1}"))?;
    let c = tiny_run().train();
    let (l0, l1) = (lr_at(0, Group::A, &c, 0), lr_at(c.warmup_steps, Group::A, &c, 0));
    ensure(l0 == 0.0 && l1 == c.peak_lr, || format!("warmup endpoints {l0} {l1}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for kind in [DecoderKind::Slot2seq, DecoderKind::Mixture] {
        let mut run = tiny_run();
        run.decoder = kind;
        run.batch_size = 3;
        run.seed = 7;
        let imgs = sprite_images(16, 2, 9);
        let (train, val) = imgs.split_at(7);
        let mut full = Trainer::new(&run).unwrap();
        records(&mut full, 10, train, val);
        let expected = records(&mut full, 10, train, val);
        let mut part = Trainer::new(&run).unwrap();
        records(&mut part, 10, train, val);
        let path = dir.path().join(format!("{kind:?}.ckpt"));
        Checkpoint::of_trainer(&part).save(&path).unwrap();
        drop(part);
        let mut resumed = Checkpoint::load(&path).unwrap().trainer().unwrap();
        let got = records(&mut resumed, 10, train, val);
        ensure(got == expected, || format!("{kind:?}: resumed log differs"))?;
        ensure(store_hash(resumed.model.store()) == store_hash(full.model.store()), || {
            format!("{kind:?}: resumed parameters differ")
        })?;
    }
    Ok(format!("tau {t0} -> {t1} at 30000; lr 0 -> {}; 10-step resume exact for both decoders", c.peak_lr))
}

fn p6() -> Outcome {
    let imgs = sprite_images(16, 5, 8);
    let mut checked = 0;
    for i in 0..20u64 {
        let m = if i < 15 {
            tiny_model(200 + i, [1, 2, 4][i as usize % 3])
        } else {
            let mut run = tiny_run();
            run.seed = i;
            run.batch_size = 4;
            let mut t = Trainer::new(&run).unwrap();
            t.run_steps(10, &imgs, &[], |_| {}).unwrap();
            match t.model {
                slotgen_core::training::AnyModel::Slot2Seq(s) => s,
                _ => return Err("trainer built a mixture model".into()),
            }
        };
        let mut rng = RandomSource::seed(i);
        let (_, set) = m.encode_images(&imgs[..2], &mut rng).unwrap();
        let v = m.store.bind_frozen();
        let (gen, _) = m
            .decoder
            .generate_with_logits(&v, &m.embed, &set.slots, Sampling::Greedy, &mut rng)
            .unwrap();
        let tf = tf_logits(&m, &gen, &set.slots);
        let vsz = m.cfg.dvae.vocab_size;
        for (b, g) in gen.iter().enumerate() {
            for (j, &z) in g.0.iter().enumerate() {
                let off = (b * g.len() + j) * vsz;
                let best = argmax_row(&tf.data()[off..off + vsz]);
                ensure(best == z, || format!("model {i}: position {j} generated {z}, re-scored argmax {best}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("20 models (15 random, 5 trained); {checked} positions match"))
}

fn p7() -> Outcome {
    let p = DeskProtocol::full().map_err(|e| e.to_string())?;
    let report = run_desk(&p, &ConvEmbedder::new()).map_err(|e| e.to_string())?;
    let crit = report.criteria(&p);
    let detail = crit.iter().map(|(n, ok, d)| format!("{n} {} ({d})", if *ok { "ok" } else { "fail" })).collect::<Vec<_>>();
    ensure(crit.iter().all(|c| c.1), || detail.join("; "))?;
    Ok(detail.join("; "))
}

fn invert(im: &Image) -> Image {
    Image::new(im.height(), im.width(), im.pixels().iter().map(|v| 1.0 - v).collect()).unwrap()
}

fn p8() -> Outcome {
    let imgs: Vec<Image> = generate_shadow_sprites(&SpriteParams::new(64), 8, 800)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let (a, b) = imgs.split_at(400);
    let inverted: Vec<Image> = b.iter().map(invert).collect();
    let cfg = ProbeConfig {
        steps: PROBE_STEPS,
        ..ProbeConfig::default()
    };
    let same = discriminator_probe(a, b, &cfg, 0).map_err(|e| e.to_string())?;
    let (lo, hi) = same.curve.iter().fold((1.0f64, 0.0f64), |(l, h), p| (l.min(p.accuracy), h.max(p.accuracy)));
    ensure(lo >= PROBE_CHANCE_BAND.0 && hi <= PROBE_CHANCE_BAND.1, || {
        format!("real vs real accuracy range [{lo:.3}, {hi:.3}]")
    })?;
    let sep = discriminator_probe(a, &inverted, &cfg, 0).map_err(|e| e.to_string())?;
    let first = sep.curve.iter().find(|p| p.accuracy > PROBE_SEPARABLE).map(|p| p.step);
    let best = sep.curve.iter().map(|p| p.accuracy).fold(0.0, f64::max);
    ensure(first.is_some(), || format!("real vs inverted peaked at {best:.3}"))?;
    let again = discriminator_probe(a, &inverted, &cfg, 0).map_err(|e| e.to_string())?;
    ensure(again == sep, || "probe differs across identical seeds".into())?;
    Ok(format!(
        "real vs real in [{lo:.3}, {hi:.3}]; real vs inverted > {PROBE_SEPARABLE} at step {}; deterministic",
        first.unwrap()
    ))
}

fn p9() -> Outcome {
    let mut sprites = SpriteParams::new(32);
    sprites.textured_floor = true;
    sprites.textured_sprites = true;
    let data = desk_scenes(&sprites, 11, 400, 100, 0).map_err(|e| e.to_string())?;
    let (train, val) = (scene_images(&data.train), scene_images(&data.val));
    let mut r = RunConfig::preset("desk").unwrap();
    r.image_size = 32;
    r.hidden_dim = 64;
    r.slot_dim = 64;
    r.slot_mlp_hidden = 128;
    r.dvae_channels = 32;
    r.vocab_size = 128;
    r.num_layers = 2;
    r.batch_size = 8;
    r.warmup_steps = 100;
    r.tau_steps = 600;
    r.peak_lr = 1e-3;
    r.dropout = 0.0;
    r.validate().map_err(|e| e.to_string())?;
    let runs = head_ablation(&r, &train, &val, ABLATION_STEPS, &[0, 1, 2], &[4, 1]).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let st = |m: usize| runs.iter().find(|x| x.seed == seed && x.heads == m).map(|x| x.val_st).unwrap();
        let (four, one) = (st(4), st(1));
        wins += usize::from(four < one);
        detail.push(format!("seed {seed}: M=4 {four:.3} vs M=1 {one:.3}"));
    }
    ensure(wins >= 2, || format!("M=4 lower in {wins}/3; {}", detail.join(", ")))?;
    Ok(format!("M=4 lower in {wins}/3 at {ABLATION_STEPS} steps; {}", detail.join(", ")))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only: Vec<&String> = args[1..].iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome, bool); 9] = [
        ("P1", "simplex and normalization", p1, false),
        ("P2", "causality and invariance", p2, false),
        ("P3", "gradient checks", p3, false),
        ("P4", "oracle equivalence", p4, false),
        ("P5", "schedules and resume", p5, false),
        ("P6", "prefix consistency", p6, false),
        ("P7", "desk end-to-end", p7, true),
        ("P8", "discriminator probe sanity", p8, false),
        ("P9", "multi-head ablation direction", p9, false),
    ];
    let mut failed = 0;
    for (id, name, f, slow) in criteria {
        if !only.is_empty() && !only.iter().any(|a| a.eq_ignore_ascii_case(id)) {
            continue;
        }
        if slow && !ignored {
            println!("SKIP {id} {name}: run with --ignored");
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS {id} {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
