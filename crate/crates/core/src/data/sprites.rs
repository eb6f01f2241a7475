//! ShadowSprites: flat-shaded sprites on a floor, each casting a shadow at
//! a fixed offset whose darkness is a fixed function of the sprite color.
//! Ground-truth sprite and shadow masks are kept per scene.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rle;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomSource;

pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.12, 0.10],
    [0.12, 0.75, 0.20],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.80],
    [0.10, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.92, 0.92, 0.92],
];

pub const FLOOR: [f64; 3] = [0.62, 0.58, 0.52];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub image_size: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    /// Number of palette colors in use (first entries of [`PALETTE`]).
    pub palette_size: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub textured_floor: bool,
    pub textured_sprites: bool,
    /// Shadow displacement (down, right) in pixels.
    pub shadow_offset: (usize, usize),
}

impl SpriteParams {
    pub fn new(image_size: usize) -> Self {
        SpriteParams {
            image_size,
            min_sprites: 1,
            max_sprites: 4,
            palette_size: PALETTE.len(),
            min_size: (image_size / 8).max(2),
            max_size: (image_size / 4).max(3),
            textured_floor: false,
            textured_sprites: false,
            shadow_offset: ((image_size / 16).max(1), (image_size / 32).max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_sprites >= 1
            && self.min_sprites <= self.max_sprites
            && (1..=PALETTE.len()).contains(&self.palette_size)
            && self.min_size >= 2
            && self.min_size <= self.max_size
            && self.max_size + self.shadow_offset.0.max(self.shadow_offset.1) < self.image_size;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("sprite parameters {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Diamond];

impl Shape {
    /// Whether cell (i, j) of an s×s box belongs to the shape.
    pub fn covers(self, i: usize, j: usize, s: usize) -> bool {
        let c = s as f64 / 2.0;
        let (y, x) = (i as f64 + 0.5 - c, j as f64 + 0.5 - c);
        match self {
            Shape::Square => true,
            Shape::Circle => y * y + x * x <= c * c,
            Shape::Triangle => x.abs() <= (i as f64 + 1.0) / 2.0,
            Shape::Diamond => y.abs() + x.abs() <= c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteAttr {
    pub shape: Shape,
    pub color_index: usize,
    pub color: [f64; 3],
    /// Top-left corner of the sprite box.
    pub y: usize,
    pub x: usize,
    pub size: usize,
    /// Fraction of floor brightness removed inside the shadow.
    pub darkness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub sprites: Vec<SpriteAttr>,
    /// Per-sprite pixel masks (`H*W`, raster order).
    pub masks: Vec<Vec<bool>>,
    /// Per-sprite shadow masks (floor pixels darkened by that sprite).
    pub shadow_masks: Vec<Vec<bool>>,
    pub floor_seed: u64,
}

pub fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// The shadow rule: brighter sprites cast darker shadows.
pub fn shadow_darkness(color: [f64; 3]) -> f64 {
    0.15 + 0.7 * luminance(color)
}

pub fn floor_at(p: &SpriteParams, floor_seed: u64, y: usize, x: usize) -> [f64; 3] {
    if !p.textured_floor {
        return FLOOR;
    }
    let cell = (p.image_size / 8).max(1);
    let checker = if ((y / cell) + (x / cell)) % 2 == 0 { 1.0 } else { -1.0 };
    let phase = (floor_seed % 1000) as f64 * 0.006_283;
    let wave = ((x as f64 * 0.9 + y as f64 * 0.4) * 0.7 + phase).sin();
    let f = 1.0 + 0.10 * checker + 0.05 * wave;
    [FLOOR[0] * f, FLOOR[1] * f, FLOOR[2] * f]
}

pub fn sprite_color_at(p: &SpriteParams, s: &SpriteAttr, y: usize, x: usize) -> [f64; 3] {
    if !p.textured_sprites {
        return s.color;
    }
    let stripe = ((y - s.y + x - s.x) / 2) % 2;
    let f = if stripe == 0 { 1.0 } else { 0.7 };
    [s.color[0] * f, s.color[1] * f, s.color[2] * f]
}

fn sprite_mask(p: &SpriteParams, s: &SpriteAttr, dy: usize, dx: usize) -> Vec<bool> {
    let n = p.image_size;
    let mut m = vec![false; n * n];
    for i in 0..s.size {
        for j in 0..s.size {
            let (y, x) = (s.y + i + dy, s.x + j + dx);
            if y < n && x < n && s.shape.covers(i, j, s.size) {
                m[y * n + x] = true;
            }
        }
    }
    m
}

const PLACEMENT_RETRIES: usize = 200;

pub fn generate_scene(p: &SpriteParams, rng: &mut RandomSource) -> Result<Scene> {
    p.validate()?;
    let n = p.image_size;
    let count = p.min_sprites + rng.below(p.max_sprites - p.min_sprites + 1);
    let (oy, ox) = p.shadow_offset;
    // occupied footprints (sprite box ∪ shadow box) with a one-pixel gap
    let mut boxes: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut sprites = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = p.min_size + rng.below(p.max_size - p.min_size + 1);
            let (h, w) = (size + oy, size + ox);
            let y = rng.below(n - h + 1);
            let x = rng.below(n - w + 1);
            let free = boxes
                .iter()
                .all(|&(by, bx, bh, bw)| y + h < by || by + bh < y || x + w < bx || bx + bw < x);
            if free {
                placed = Some((y, x, size, h, w));
                break;
            }
        }
        let Some((y, x, size, h, w)) = placed else {
            return Err(Error::Infeasible(format!("could not place {count} sprites in {n}x{n}")));
        };
        boxes.push((y, x, h, w));
        let color_index = rng.below(p.palette_size);
        let color = PALETTE[color_index];
        sprites.push(SpriteAttr {
            shape: SHAPES[rng.below(SHAPES.len())],
            color_index,
            color,
            y,
            x,
            size,
            darkness: shadow_darkness(color),
        });
    }
    let floor_seed = rng.next_u64();
    Ok(render(p, sprites, floor_seed))
}

/// Draws floor, shadows and sprites for given attributes.
pub fn render(p: &SpriteParams, sprites: Vec<SpriteAttr>, floor_seed: u64) -> Scene {
    let n = p.image_size;
    let mut image = Image::filled(n, n, [0.0; 3]);
    for y in 0..n {
        for x in 0..n {
            image.set(y, x, floor_at(p, floor_seed, y, x));
        }
    }
    let masks: Vec<Vec<bool>> = sprites.iter().map(|s| sprite_mask(p, s, 0, 0)).collect();
    let any_sprite: Vec<bool> = (0..n * n).map(|i| masks.iter().any(|m| m[i])).collect();
    let mut shadow_masks = Vec::with_capacity(sprites.len());
    for s in &sprites {
        let shifted = sprite_mask(p, s, p.shadow_offset.0, p.shadow_offset.1);
        let shadow: Vec<bool> = shifted.iter().zip(&any_sprite).map(|(&a, &b)| a && !b).collect();
        let keep = 1.0 - s.darkness;
        for (i, _) in shadow.iter().enumerate().filter(|(_, &v)| v) {
            let f = floor_at(p, floor_seed, i / n, i % n);
            image.set(i / n, i % n, [f[0] * keep, f[1] * keep, f[2] * keep]);
        }
        shadow_masks.push(shadow);
    }
    for (s, m) in sprites.iter().zip(&masks) {
        for (i, _) in m.iter().enumerate().filter(|(_, &v)| v) {
            image.set(i / n, i % n, sprite_color_at(p, s, i / n, i % n));
        }
    }
    Scene {
        image,
        sprites,
        masks,
        shadow_masks,
        floor_seed,
    }
}

/// `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_shadow_sprites(p: &SpriteParams, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(p, &mut RandomSource::stream(seed, i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteRecord {
    #[serde(flatten)]
    pub attr: SpriteAttr,
    pub mask_rle: Vec<usize>,
    pub shadow_rle: Vec<usize>,
}

/// One line of `metadata.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub file: String,
    pub floor_seed: u64,
    pub sprites: Vec<SpriteRecord>,
}

impl SceneRecord {
    pub fn of(file: String, s: &Scene) -> Self {
        SceneRecord {
            file,
            floor_seed: s.floor_seed,
            sprites: s
                .sprites
                .iter()
                .zip(&s.masks)
                .zip(&s.shadow_masks)
                .map(|((a, m), sh)| SpriteRecord {
                    attr: a.clone(),
                    mask_rle: rle::encode(m),
                    shadow_rle: rle::encode(sh),
                })
                .collect(),
        }
    }
}

/// Writes `scene_XXXXX.png` files, `metadata.jsonl` and `params.json`.
pub fn save_scenes(dir: &Path, p: &SpriteParams, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("metadata.jsonl");
    let mut meta = std::io::BufWriter::new(std::fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?);
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:05}.png");
        s.image.save_png(&dir.join(&file))?;
        let line = serde_json::to_string(&SceneRecord::of(file, s))?;
        writeln!(meta, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))?;
    let params_path = dir.join("params.json");
    std::fs::write(&params_path, serde_json::to_vec_pretty(p)?).map_err(|e| Error::io(&params_path, e))
}

pub fn load_metadata(dir: &Path) -> Result<Vec<SceneRecord>> {
    let path = dir.join("metadata.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
