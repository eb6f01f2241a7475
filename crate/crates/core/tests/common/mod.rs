//! Shared fixtures and scalar-loop oracles for the integration tests.
#![allow(dead_code)]

use slotgen_core::config::RunConfig;
use slotgen_core::data::sprites::{generate_shadow_sprites, SpriteParams};
use slotgen_core::image::Image;
use slotgen_core::rng::RandomSource;

/// Smallest configuration used for gradient checks: 8×8 images, 4×4
/// patches (T = 4), V = 8, N = 2 slots, M = 2 heads, D = 8, one layer.
pub fn grad_run() -> RunConfig {
    let mut r = RunConfig::preset("tiny").unwrap();
    r.image_size = 8;
    r.patch_size = 4;
    r.vocab_size = 8;
    r.dvae_channels = 4;
    r.num_slots = 2;
    r.num_slot_heads = 2;
    r.num_iterations = 2;
    r.slot_dim = 8;
    r.slot_mlp_hidden = 8;
    r.num_layers = 1;
    r.num_dec_heads = 2;
    r.hidden_dim = 8;
    r.dropout = 0.0;
    r.mixture_enc_channels = 4;
    r.mixture_dec_channels = 4;
    r.mixture_dec_layers = 2;
    r.validate().unwrap();
    r
}

pub fn tiny_run() -> RunConfig {
    RunConfig::preset("tiny").unwrap()
}

pub fn sprite_images(size: usize, seed: u64, n: usize) -> Vec<Image> {
    generate_shadow_sprites(&SpriteParams::new(size), seed, n)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
}

pub fn random_images(size: usize, n: usize, seed: u64) -> Vec<Image> {
    let mut rng = RandomSource::seed(seed);
    (0..n)
        .map(|_| Image::new(size, size, (0..size * size * 3).map(|_| rng.uniform()).collect()).unwrap())
        .collect()
}

/// `-Σ log softmax(logits)[target]` over all positions, divided by batch.
pub fn ce_oracle(logits: &[f64], b: usize, t: usize, v: usize, targets: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..t {
            let row = &logits[(i * t + j) * v..(i * t + j + 1) * v];
            let mut m = f64::NEG_INFINITY;
            for &x in row {
                if x > m {
                    m = x;
                }
            }
            let mut s = 0.0;
            for &x in row {
                s += (x - m).exp();
            }
            total += m + s.ln() - row[targets[i][j]];
        }
    }
    total / b as f64
}

/// Per-item sum of squared differences, averaged over `b` items.
pub fn sq_oracle(a: &[f64], r: &[f64], b: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..a.len() {
        let d = a[k] - r[k];
        total += d * d;
    }
    total / b as f64
}

/// Reductions made by a plateau policy: an epoch improves when it is
/// strictly below every earlier loss since the last improvement baseline;
/// after `patience` consecutive non-improving epochs the rate is cut and
/// the count restarts.
pub fn plateau_oracle(history: &[f64], patience: usize) -> u32 {
    let mut reductions = 0;
    let mut window_start = 0;
    let mut best = f64::INFINITY;
    for e in 0..history.len() {
        if history[e] < best {
            best = history[e];
            window_start = e + 1;
            continue;
        }
        if e + 1 - window_start == patience {
            reductions += 1;
            window_start = e + 1;
        }
    }
    reductions
}

/// Region index with maximal IOU against `attention > 1/T`, compared with
/// exact rational arithmetic, lowest index first; `None` for an empty
/// foreground.
pub fn assign_oracle(attention: &[f64], g: usize, rows: usize, cols: usize) -> Option<(usize, f64)> {
    let t = attention.len();
    let fg: Vec<bool> = attention.iter().map(|&a| a > 1.0 / t as f64).collect();
    if fg.iter().all(|&x| !x) {
        return None;
    }
    let mut best: Option<(usize, usize, usize)> = None;
    for region in 0..g * g {
        let (gr, gc) = (region / g, region % g);
        let (mut inter, mut union) = (0usize, 0usize);
        for r in 0..rows {
            for c in 0..cols {
                let inside = r * g / rows == gr && c * g / cols == gc;
                let f = fg[r * cols + c];
                inter += usize::from(inside && f);
                union += usize::from(inside || f);
            }
        }
        let better = match best {
            None => true,
            Some((_, bi, bu)) => inter * bu > bi * union,
        };
        if better {
            best = Some((region, inter, union));
        }
    }
    best.map(|(r, i, u)| (r, i as f64 / u as f64))
}

/// Moves zero-initialized biases to random values so that no ReLU input
/// sits exactly on its kink, where central differences are meaningless.
pub fn jitter_biases(store: &mut slotgen_core::tensor::ParamStore, seed: u64) {
    let mut rng = RandomSource::seed(seed);
    for i in 0..store.len() {
        let id = slotgen_core::tensor::ParamId(i);
        if store.entry(id).name.ends_with("bias") {
            store.data_mut(id).iter_mut().for_each(|b| *b += 0.1 * rng.normal());
        }
    }
}

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot = m[c].clone();
                m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Denman-Beavers iteration for the principal square root of a matrix with
/// positive real spectrum.
pub fn sqrtm_db(a: &Mat) -> Mat {
    let n = a.len();
    let mut y = a.clone();
    let mut z: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        y = ny;
        z = nz;
    }
    y
}

pub fn frechet_oracle(ma: &[f64], ca: &Mat, mb: &[f64], cb: &Mat) -> f64 {
    let n = ma.len();
    let root = sqrtm_db(&matmul(ca, cb));
    let d2: f64 = ma.iter().zip(mb).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 + (0..n).map(|i| ca[i][i] + cb[i][i] - 2.0 * root[i][i]).sum::<f64>()
}

pub fn random_spd(n: usize, rng: &mut RandomSource) -> Mat {
    let l: Mat = (0..n).map(|_| (0..n).map(|_| rng.normal()).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| l[i][k] * l[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Per-image sum of squared channel differences, averaged over images.
pub fn brute_mse(a: &[Image], b: &[Image]) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        for r in 0..x.height() {
            for c in 0..x.width() {
                let (p, q) = (x.get(r, c), y.get(r, c));
                for k in 0..3 {
                    total += (p[k] - q[k]).powi(2);
                }
            }
        }
    }
    total / a.len() as f64
}
