use std::collections::BTreeSet;

use proptest::prelude::*;
use slotgen_core::concept::{
    ConceptLibrary, Layout, LibraryContext, PromptSpec, SlotRecord,
};
use slotgen_core::config::DecoderKind;
use slotgen_core::data::sprites::{
    floor_at, generate_shadow_sprites, load_metadata, save_scenes, sprite_color_at, SpriteParams, PALETTE,
};
use slotgen_core::data::{
    assign_splits, load_dataset, make_ood_prompt_specs, rle, DatasetSpec, OodKind, OodParams, Split,
};
use slotgen_core::image::Image;
use slotgen_core::rng::RandomSource;

fn rule_oracle(c: [f64; 3]) -> f64 {
    let lum = c[0] * 0.299 + c[1] * 0.587 + c[2] * 0.114;
    0.15 + lum * 0.7
}

#[test]
fn sprites_regenerate_identically() {
    let p = SpriteParams::new(64);
    let a = generate_shadow_sprites(&p, 5, 1000).unwrap();
    let b = generate_shadow_sprites(&p, 5, 1000).unwrap();
    assert_eq!(a.len(), 1000);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.to_rgb8(), y.image.to_rgb8());
        assert_eq!(x, y);
    }
    let c = generate_shadow_sprites(&p, 6, 10).unwrap();
    assert_ne!(a[0].image, c[0].image);
}

#[test]
fn masks_carry_sprite_colors_and_do_not_overlap() {
    for textured in [false, true] {
        let mut p = SpriteParams::new(64);
        p.textured_floor = textured;
        p.textured_sprites = textured;
        for s in generate_shadow_sprites(&p, 11, 200).unwrap() {
            assert!((1..=4).contains(&s.sprites.len()));
            let n = 64;
            let mut owner = vec![usize::MAX; n * n];
            for (i, (a, m)) in s.sprites.iter().zip(&s.masks).enumerate() {
                assert!(m.iter().any(|&v| v), "empty sprite mask");
                for (px, _) in m.iter().enumerate().filter(|(_, &v)| v) {
                    assert_eq!(owner[px], usize::MAX, "overlapping masks");
                    owner[px] = i;
                    let got = s.image.get(px / n, px % n);
                    let want = sprite_color_at(&p, a, px / n, px % n);
                    for c in 0..3 {
                        assert!((got[c] - want[c]).abs() < 1e-12);
                    }
                }
                assert_eq!(a.color, PALETTE[a.color_index]);
            }
            // every other pixel is floor or shadow
            for px in 0..n * n {
                if owner[px] == usize::MAX && !s.shadow_masks.iter().any(|m| m[px]) {
                    let want = floor_at(&p, s.floor_seed, px / n, px % n);
                    let got = s.image.get(px / n, px % n);
                    for c in 0..3 {
                        assert!((got[c] - want[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn shadows_follow_rule_at_fixed_offset() {
    let mut p = SpriteParams::new(64);
    p.textured_floor = true;
    let (oy, ox) = p.shadow_offset;
    let n = 64;
    for s in generate_shadow_sprites(&p, 3, 300).unwrap() {
        for ((a, m), sh) in s.sprites.iter().zip(&s.masks).zip(&s.shadow_masks) {
            assert!(sh.iter().any(|&v| v), "sprite without visible shadow");
            let expected = rule_oracle(a.color);
            assert!((a.darkness - expected).abs() < 1e-12);
            for (px, _) in sh.iter().enumerate().filter(|(_, &v)| v) {
                let (y, x) = (px / n, px % n);
                assert!(y >= oy && x >= ox && m[(y - oy) * n + x - ox], "shadow not at offset");
                assert!(s.masks.iter().all(|mm| !mm[px]));
                let f = floor_at(&p, s.floor_seed, y, x);
                let got = s.image.get(y, x);
                for c in 0..3 {
                    assert!((got[c] / f[c] - (1.0 - expected)).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn infeasible_placement_is_an_error() {
    let mut p = SpriteParams::new(16);
    p.min_sprites = 4;
    p.max_sprites = 4;
    p.min_size = 6;
    p.max_size = 6;
    p.shadow_offset = (1, 1);
    assert!(generate_shadow_sprites(&p, 0, 1).is_err());
}

#[test]
fn saved_scenes_round_trip_masks() {
    let dir = tempfile::tempdir().unwrap();
    let p = SpriteParams::new(32);
    let scenes = generate_shadow_sprites(&p, 9, 12).unwrap();
    save_scenes(dir.path(), &p, &scenes).unwrap();
    let meta = load_metadata(dir.path()).unwrap();
    assert_eq!(meta.len(), scenes.len());
    for (rec, s) in meta.iter().zip(&scenes) {
        assert_eq!(rec.floor_seed, s.floor_seed);
        for ((sp, m), sh) in rec.sprites.iter().zip(&s.masks).zip(&s.shadow_masks) {
            assert_eq!(&rle::decode(&sp.mask_rle), m);
            assert_eq!(&rle::decode(&sp.shadow_rle), sh);
        }
        let im = Image::load(&dir.path().join(&rec.file), None).unwrap();
        assert_eq!(im.to_rgb8(), s.image.to_rgb8());
    }
    let spec = DatasetSpec {
        root: dir.path().to_path_buf(),
        image_size: 16,
        train_fraction: 0.5,
        val_fraction: 0.25,
        seed: 1,
        max_images: 0,
    };
    let a = load_dataset(&spec).unwrap();
    let b = load_dataset(&spec).unwrap();
    assert_eq!(a.items.len(), 12);
    let splits = |d: &slotgen_core::data::Dataset| d.items.iter().map(|i| (i.name.clone(), i.split)).collect::<Vec<_>>();
    assert_eq!(splits(&a), splits(&b));
    assert_eq!(a.count(Split::Train), 6);
    assert_eq!(a.count(Split::Val), 3);
    assert_eq!(a.count(Split::Test), 3);
    for it in &a.items {
        assert_eq!((it.image.height(), it.image.width()), (16, 16));
        assert!(it.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn empty_and_unreadable_datasets_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec {
        root: dir.path().to_path_buf(),
        image_size: 8,
        train_fraction: 0.8,
        val_fraction: 0.1,
        seed: 0,
        max_images: 0,
    };
    assert!(load_dataset(&spec).is_err());
    std::fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
    assert!(load_dataset(&spec).is_err());
    spec.root = dir.path().join("missing");
    assert!(load_dataset(&spec).is_err());
}

proptest! {
    #[test]
    fn rle_round_trips(mask in proptest::collection::vec(any::<bool>(), 0..300)) {
        let runs = rle::encode(&mask);
        prop_assert_eq!(runs.iter().sum::<usize>(), mask.len());
        prop_assert_eq!(rle::decode(&runs), mask);
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_sized(n in 1usize..200, seed in any::<u64>(), tf in 0.0f64..1.0) {
        let vf = (1.0 - tf) / 2.0;
        let names: Vec<String> = (0..n).map(|i| format!("img_{i}.png")).collect();
        let a = assign_splits(&names, tf, vf, seed, 0);
        prop_assert_eq!(&a, &assign_splits(&names, tf, vf, seed, 0));
        let idx: BTreeSet<usize> = a.iter().map(|(i, _)| *i).collect();
        prop_assert_eq!(idx.len(), n);
        let count = |s| a.iter().filter(|(_, x)| *x == s).count() as f64;
        prop_assert!((count(Split::Train) - n as f64 * tf).abs() <= 1.0);
        prop_assert!((count(Split::Val) - n as f64 * vf).abs() <= 1.0);
    }
}

fn ctx(cells: usize) -> LibraryContext {
    LibraryContext {
        slot_dim: 2,
        num_cells: cells,
        num_slots: 4,
        decoder: DecoderKind::Slot2seq,
        model_hash: "h".into(),
        sources: vec![],
    }
}

/// Records whose attention covers exactly one cell of a 4×4 grid, one per
/// cell, plus full-frame background records.
fn positional_records() -> Vec<SlotRecord> {
    let mut out = Vec::new();
    for cell in 0..16 {
        let mut att = vec![0.0; 16];
        att[cell] = 1.0;
        out.push(SlotRecord {
            id: out.len(),
            vector: vec![1.0, cell as f64],
            attention: att,
            source_image_id: cell,
            slot_index: 0,
        });
    }
    for img in 0..16 {
        for s in 1..4 {
            out.push(SlotRecord {
                id: out.len(),
                vector: vec![0.0, 1.0 + s as f64],
                attention: vec![1.0 / 16.0; 16],
                source_image_id: img,
                slot_index: s,
            });
        }
    }
    out
}

#[test]
fn count_shift_emits_counts_around_training_range() {
    let lib = ConceptLibrary::positional(&ctx(16), positional_records(), 4, 0.3).unwrap();
    let f = make_ood_prompt_specs(OodKind::CountShift, &lib, &OodParams::default()).unwrap();
    let counts: Vec<usize> = f
        .prompts
        .iter()
        .map(|p| match p {
            PromptSpec::Positional {
                layout: Layout::Clearance { n, .. },
            } => *n,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(counts, vec![1, 2, 7, 8]);
}

#[test]
fn two_towers_use_disjoint_columns() {
    let lib = ConceptLibrary::positional(&ctx(16), positional_records(), 4, 0.3).unwrap();
    let f = make_ood_prompt_specs(OodKind::TwoTowers, &lib, &OodParams::default()).unwrap();
    let mut rng = RandomSource::seed(2);
    for spec in &f.prompts {
        let PromptSpec::Positional { layout } = spec else { panic!() };
        for _ in 0..20 {
            let regions = lib.layout_regions(layout, &mut rng).unwrap();
            let (a, b) = regions.split_at(2);
            let cols = |r: &[usize]| r.iter().map(|x| x % 4).collect::<BTreeSet<_>>();
            assert_eq!(cols(a).len(), 1);
            assert_eq!(cols(b).len(), 1);
            assert!(cols(a).is_disjoint(&cols(b)));
        }
        lib.build_prompt(spec, &mut rng).unwrap();
    }
}

#[test]
fn attribute_swap_references_distinct_clusters() {
    let recs: Vec<SlotRecord> = (0..12)
        .map(|i| SlotRecord {
            id: i,
            vector: vec![(i % 3) as f64 + 0.1, 1.0 - (i % 3) as f64 * 0.5],
            attention: {
                let mut a = vec![0.0; 16];
                a[i % 16] = 1.0;
                a
            },
            source_image_id: i,
            slot_index: 0,
        })
        .collect();
    let lib = ConceptLibrary::categorical(&ctx(16), recs.clone(), 3, 20, Some(&[]), &mut RandomSource::seed(0)).unwrap();
    let f = make_ood_prompt_specs(OodKind::AttributeSwap, &lib, &OodParams::default()).unwrap();
    let PromptSpec::AttributeSwap { clusters } = &f.prompts[0] else { panic!() };
    assert_ne!(clusters[0], clusters[1]);
    // a library without two object clusters cannot serve the protocol
    let lib1 = ConceptLibrary::categorical(&ctx(16), recs, 1, 20, Some(&[]), &mut RandomSource::seed(0)).unwrap();
    assert!(make_ood_prompt_specs(OodKind::AttributeSwap, &lib1, &OodParams::default()).is_err());
    assert!(make_ood_prompt_specs(OodKind::TwoTowers, &lib1, &OodParams::default()).is_err());
}
