//! Desk experiments on ShadowSprites: overfit smoke, attention ARI,
//! compositional-prompt FID, shadow consistency under slot swaps and the
//! slot-head ablation.

use serde::{Deserialize, Serialize};

use crate::concept::{harvest, ConceptLibrary, LibraryContext, Padding};
use crate::config::{DecoderKind, RunConfig};
use crate::data::sprites::{floor_at, generate_shadow_sprites, shadow_darkness, Scene, SpriteParams};
use crate::error::{Error, Result};
use crate::eval::{attention_segmentation, fid, foreground_ari, label_map, FeatureExtractor, FidReport};
use crate::image::Image;
use crate::model::Slot2Seq;
use crate::rng::RandomSource;
use crate::training::{evaluation_st, AnyModel, Trainer};

pub struct DeskSplit {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Scenes `0..n_train` train, the next `n_val` validate, the rest test.
pub fn desk_scenes(p: &SpriteParams, seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<DeskSplit> {
    let mut all = generate_shadow_sprites(p, seed, n_train + n_val + n_test)?;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(DeskSplit { train: all, val, test })
}

pub fn scene_images(scenes: &[Scene]) -> Vec<Image> {
    scenes.iter().map(|s| s.image.clone()).collect()
}

/// Trains a fresh model from `run` for `steps` steps.
pub fn train_model(run: &RunConfig, train: &[Image], val: &[Image], steps: u64) -> Result<Trainer> {
    let mut t = Trainer::new(run)?;
    t.run_steps(steps, train, val, |_| {})?;
    Ok(t)
}

fn slot2seq(model: &AnyModel) -> Result<&Slot2Seq> {
    match model {
        AnyModel::Slot2Seq(m) => Ok(m),
        AnyModel::Mixture(_) => Err(Error::Invalid("this measurement needs the autoregressive decoder".into())),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverfitReport {
    pub initial: f64,
    pub last: f64,
    pub steps: u64,
}

impl OverfitReport {
    pub fn ratio(&self) -> f64 {
        self.last / self.initial
    }
}

/// Fits `images` as a single batch and reports evaluation-mode `L_ST`
/// before and after. Warmup is shortened to a tenth of the budget so the
/// learning rate actually ramps within it.
pub fn overfit_smoke(run: &RunConfig, images: &[Image], steps: u64) -> Result<OverfitReport> {
    let mut run = run.clone();
    run.decoder = DecoderKind::Slot2seq;
    run.batch_size = images.len();
    run.warmup_steps = run.warmup_steps.min((steps / 10).max(1));
    let mut t = Trainer::new(&run)?;
    let initial = evaluation_st(slot2seq(&t.model)?, images, images.len(), t.tau(), run.seed)?;
    t.run_steps(steps, images, &[], |_| {})?;
    let last = evaluation_st(slot2seq(&t.model)?, images, images.len(), t.tau(), run.seed)?;
    Ok(OverfitReport { initial, last, steps })
}

/// Mean foreground ARI between argmax slot attention and sprite masks.
pub fn attention_ari(model: &AnyModel, scenes: &[Scene], batch_size: usize, seed: u64) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Dataset("no scenes to score".into()));
    }
    let mut rng = RandomSource::stream(seed, 21);
    let mut total = 0.0;
    for chunk in scenes.chunks(batch_size.max(1)) {
        let set = model.encode(&scene_images(chunk), &mut rng)?;
        for (b, s) in chunk.iter().enumerate() {
            let maps = set.maps(b);
            let grid = (maps[0].len() as f64).sqrt().round() as usize;
            let size = s.image.height();
            let pred = attention_segmentation(&maps, grid, size)?;
            let truth = label_map(&s.masks, size * size)?;
            total += foreground_ari(&truth, &pred)?;
        }
    }
    Ok(total / scenes.len() as f64)
}

/// FID of images rendered from categorical prompts (one member per
/// cluster, background-padded) against `real`.
#[allow(clippy::too_many_arguments)]
pub fn compositional_fid(
    model: &AnyModel,
    model_hash: &str,
    library_images: &[Image],
    real: &[Image],
    k: usize,
    n_prompts: usize,
    seed: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<FidReport> {
    let records = harvest(model, library_images, 16, seed)?;
    let ctx = LibraryContext {
        slot_dim: model.slot_dim(),
        num_cells: records.first().map_or(0, |r| r.attention.len()),
        num_slots: model.num_slots(),
        decoder: model.kind(),
        model_hash: model_hash.to_string(),
        sources: (0..library_images.len()).map(|i| format!("{i}")).collect(),
    };
    let mut rng = RandomSource::stream(seed, 22);
    let lib = ConceptLibrary::categorical(&ctx, records, k, 100, None, &mut rng)?;
    let prompts = (0..n_prompts)
        .map(|_| lib.prompt_categorical(Padding::Background, &mut rng).map(|p| p.slots))
        .collect::<Result<Vec<_>>>()?;
    let mut generated = Vec::with_capacity(n_prompts);
    for chunk in prompts.chunks(16) {
        generated.extend(model.render(chunk, &mut rng)?);
    }
    fid(real, &generated, extractor)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub target_scene: usize,
    pub donor_scene: usize,
    pub expected_darkness: f64,
    pub measured_darkness: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwapReport {
    pub tolerance: f64,
    pub outcomes: Vec<SwapOutcome>,
}

impl SwapReport {
    pub fn matched(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| (o.measured_darkness - o.expected_darkness).abs() <= self.tolerance)
            .count()
    }

    pub fn fraction(&self) -> f64 {
        self.matched() as f64 / self.outcomes.len().max(1) as f64
    }
}

fn upsampled_mass(map: &[f64], grid: usize, size: usize, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / size, i % size);
        s += map[(y * grid / size) * grid + x * grid / size];
    }
    s
}

/// Slot holding the most attention mass over each sprite.
fn sprite_owners(maps: &[Vec<f64>], scene: &Scene) -> Vec<usize> {
    let grid = (maps[0].len() as f64).sqrt().round() as usize;
    let size = scene.image.height();
    scene
        .masks
        .iter()
        .map(|m| {
            let mass: Vec<f64> = maps.iter().map(|a| upsampled_mass(a, grid, size, m)).collect();
            (0..mass.len()).fold(0, |b, i| if mass[i] > mass[b] { i } else { b })
        })
        .collect()
}

/// Replaces the slot owning a sprite of one scene with the slot owning a
/// differently colored sprite of another, renders greedily, and measures
/// the darkness of the floor inside the donor sprite's shadow region
/// (`1 - <g,f>/<f,f>` against the target scene's floor). A swap matches
/// when the measured darkness is within `tolerance` of the generator rule
/// for the donor color.
pub fn shadow_swap_probe(
    model: &Slot2Seq,
    p: &SpriteParams,
    scenes: &[Scene],
    swaps: usize,
    tolerance: f64,
    seed: u64,
) -> Result<SwapReport> {
    let size = p.image_size;
    let mut rng = RandomSource::stream(seed, 23);
    let any = AnyModel::Slot2Seq(model.clone());
    let mut vectors = Vec::with_capacity(scenes.len());
    let mut owners = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(16) {
        let set = any.encode(&scene_images(chunk), &mut rng)?;
        for (b, s) in chunk.iter().enumerate() {
            vectors.push(set.vectors(b));
            owners.push(sprite_owners(&set.maps(b), s));
        }
    }
    struct Plan {
        target: usize,
        donor: usize,
        region: Vec<usize>,
        expected: f64,
        prompt: Vec<Vec<f64>>,
    }
    let mut plans = Vec::with_capacity(swaps);
    let mut tries = 0;
    while plans.len() < swaps {
        tries += 1;
        if tries > swaps * 200 || scenes.len() < 2 {
            return Err(Error::Infeasible(format!("found only {} valid swaps", plans.len())));
        }
        let (a, b) = (rng.below(scenes.len()), rng.below(scenes.len()));
        if a == b {
            continue;
        }
        let (sa, sb) = (&scenes[a], &scenes[b]);
        let (ia, ib) = (rng.below(sa.sprites.len()), rng.below(sb.sprites.len()));
        if sa.sprites[ia].color_index == sb.sprites[ib].color_index {
            continue;
        }
        let slot_a = owners[a][ia];
        if owners[a].iter().enumerate().any(|(j, &o)| j != ia && o == slot_a) {
            continue;
        }
        // the donor footprint must not touch the target's remaining sprites
        let others: Vec<bool> = (0..size * size)
            .map(|i| (0..sa.sprites.len()).any(|j| j != ia && (sa.masks[j][i] || sa.shadow_masks[j][i])))
            .collect();
        let footprint = |i: usize| sb.masks[ib][i] || sb.shadow_masks[ib][i];
        if (0..size * size).any(|i| footprint(i) && others[i]) {
            continue;
        }
        let region: Vec<usize> = (0..size * size).filter(|&i| sb.shadow_masks[ib][i]).collect();
        if region.len() < 4 {
            continue;
        }
        let mut prompt = vectors[a].clone();
        prompt[slot_a] = vectors[b][owners[b][ib]].clone();
        plans.push(Plan {
            target: a,
            donor: b,
            region,
            expected: shadow_darkness(sb.sprites[ib].color),
            prompt,
        });
    }
    let mut outcomes = Vec::with_capacity(swaps);
    for chunk in plans.chunks(16) {
        let prompts: Vec<Vec<Vec<f64>>> = chunk.iter().map(|q| q.prompt.clone()).collect();
        let images = any.render(&prompts, &mut rng)?;
        for (q, g) in chunk.iter().zip(&images) {
            let (mut gf, mut ff) = (0.0, 0.0);
            for &i in &q.region {
                let f = floor_at(p, scenes[q.target].floor_seed, i / size, i % size);
                let px = g.get(i / size, i % size);
                for c in 0..3 {
                    gf += px[c] * f[c];
                    ff += f[c] * f[c];
                }
            }
            outcomes.push(SwapOutcome {
                target_scene: q.target,
                donor_scene: q.donor,
                expected_darkness: q.expected,
                measured_darkness: 1.0 - gf / ff,
            });
        }
    }
    Ok(SwapReport { tolerance, outcomes })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub heads: usize,
    pub val_st: f64,
}

/// Trains one model per (seed, head count) for `steps` steps and scores
/// evaluation-mode `L_ST` on `val`.
pub fn head_ablation(
    base: &RunConfig,
    train: &[Image],
    val: &[Image],
    steps: u64,
    seeds: &[u64],
    heads: &[usize],
) -> Result<Vec<AblationRun>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &m in heads {
            let mut run = base.clone();
            run.decoder = DecoderKind::Slot2seq;
            run.seed = seed;
            run.num_slot_heads = m;
            let t = train_model(&run, train, &[], steps)?;
            let val_st = evaluation_st(slot2seq(&t.model)?, val, run.batch_size, t.tau(), seed)?;
            log::info!("ablation seed {seed} heads {m}: val L_ST {val_st:.4}");
            out.push(AblationRun { seed, heads: m, val_st });
        }
    }
    Ok(out)
}

/// Full desk protocol: data sizes, budgets and pass thresholds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskProtocol {
    pub run: RunConfig,
    pub sprites: SpriteParams,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub overfit_images: usize,
    pub overfit_steps: u64,
    pub overfit_ratio: f64,
    pub ari_threshold: f64,
    pub n_prompts: usize,
    pub swaps: usize,
    pub swap_tolerance: f64,
    pub swap_fraction: f64,
}

impl DeskProtocol {
    /// 64×64 ShadowSprites, ~10k images, 4 layers, 4 heads, D = 192,
    /// V = 512, N = 4, 50k steps, three seeds.
    pub fn full() -> Result<DeskProtocol> {
        let run = RunConfig::preset("desk")?;
        Ok(DeskProtocol {
            sprites: SpriteParams::new(run.image_size),
            steps: run.max_steps,
            run,
            data_seed: 7,
            n_train: 9000,
            n_val: 500,
            n_test: 500,
            seeds: vec![0, 1, 2],
            overfit_images: 4,
            overfit_steps: 2000,
            overfit_ratio: 0.1,
            ari_threshold: 0.5,
            n_prompts: 500,
            swaps: 100,
            swap_tolerance: 0.05,
            swap_fraction: 0.7,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskSeed {
    pub seed: u64,
    pub ari: f64,
    pub fid_slot2seq: f64,
    pub fid_mixture: f64,
    pub swap_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskReport {
    pub overfit: OverfitReport,
    pub seeds: Vec<DeskSeed>,
}

impl DeskReport {
    /// `(criterion, passed, detail)` for the four desk checks.
    pub fn criteria(&self, p: &DeskProtocol) -> Vec<(&'static str, bool, String)> {
        let majority = |f: &dyn Fn(&DeskSeed) -> bool| self.seeds.iter().filter(|s| f(s)).count() * 3 >= self.seeds.len() * 2;
        let detail = |f: &dyn Fn(&DeskSeed) -> String| self.seeds.iter().map(f).collect::<Vec<_>>().join(", ");
        vec![
            (
                "overfit",
                self.overfit.ratio() < p.overfit_ratio,
                format!("L_ST {:.4} -> {:.4}", self.overfit.initial, self.overfit.last),
            ),
            ("ari", majority(&|s| s.ari >= p.ari_threshold), detail(&|s| format!("{:.3}", s.ari))),
            (
                "fid",
                majority(&|s| s.fid_slot2seq < s.fid_mixture),
                detail(&|s| format!("{:.3} vs {:.3}", s.fid_slot2seq, s.fid_mixture)),
            ),
            (
                "shadow",
                majority(&|s| s.swap_fraction >= p.swap_fraction),
                detail(&|s| format!("{:.2}", s.swap_fraction)),
            ),
        ]
    }
}

/// Runs the whole desk protocol with both decoder families per seed.
pub fn run_desk(p: &DeskProtocol, extractor: &dyn FeatureExtractor) -> Result<DeskReport> {
    let data = desk_scenes(&p.sprites, p.data_seed, p.n_train, p.n_val, p.n_test)?;
    let (train, val, test) = (scene_images(&data.train), scene_images(&data.val), scene_images(&data.test));
    let overfit = overfit_smoke(&p.run, &train[..p.overfit_images.min(train.len())], p.overfit_steps)?;
    log::info!("overfit L_ST {:.4} -> {:.4}", overfit.initial, overfit.last);
    let mut seeds = Vec::new();
    for &seed in &p.seeds {
        let mut run = p.run.clone();
        run.seed = seed;
        run.decoder = DecoderKind::Slot2seq;
        let s2s = train_model(&run, &train, &val, p.steps)?;
        run.decoder = DecoderKind::Mixture;
        let mix = train_model(&run, &train, &val, p.steps)?;
        let ari = attention_ari(&s2s.model, &data.test, 16, seed)?;
        let k = run.num_slots;
        let hash = |t: &Trainer| crate::checkpoint::store_hash(t.model.store());
        let fid_s = compositional_fid(&s2s.model, &hash(&s2s), &train, &test, k, p.n_prompts, seed, extractor)?;
        let fid_m = compositional_fid(&mix.model, &hash(&mix), &train, &test, k, p.n_prompts, seed, extractor)?;
        let swap = shadow_swap_probe(slot2seq(&s2s.model)?, &p.sprites, &data.test, p.swaps, p.swap_tolerance, seed)?;
        let row = DeskSeed {
            seed,
            ari,
            fid_slot2seq: fid_s.value,
            fid_mixture: fid_m.value,
            swap_fraction: swap.fraction(),
        };
        log::info!("{row:?}");
        seeds.push(row);
    }
    Ok(DeskReport { overfit, seeds })
}
