//! Concept libraries built from harvested slots, and slot prompts drawn
//! from them.
//!
//! A categorical library clusters slot vectors by cosine similarity. A
//! positional library groups slots by the grid cell whose mask best
//! overlaps the slot's attention. Both mark some clusters as background;
//! prompts are padded with background slots taken from a single source
//! image so that wall/floor content stays coherent.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use slotgen_tensor::no_grad;

use crate::config::DecoderKind;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::RandomSource;
use crate::training::AnyModel;

pub const LIBRARY_VERSION: u32 = 1;

/// One harvested slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    /// Position in the harvest order; stable identifier used by prompts.
    pub id: usize,
    pub vector: Vec<f64>,
    /// Head-summed attention over the T cells.
    pub attention: Vec<f64>,
    pub source_image_id: usize,
    pub slot_index: usize,
}

/// Harvests `N` records per image with the final-iteration attention maps.
/// Slot initialization uses a fixed stream of `seed`, so repeated harvests
/// are identical.
pub fn harvest(model: &AnyModel, images: &[Image], batch_size: usize, seed: u64) -> Result<Vec<SlotRecord>> {
    let mut rng = RandomSource::stream(seed, 11);
    let mut out = Vec::new();
    for (ci, chunk) in images.chunks(batch_size.max(1)).enumerate() {
        let set = no_grad(|| match model {
            AnyModel::Slot2Seq(m) => m.encode_images(chunk, &mut rng).map(|(_, s)| s),
            AnyModel::Mixture(m) => m.encode_images(chunk, &mut rng),
        })?;
        for b in 0..chunk.len() {
            let image_id = ci * batch_size.max(1) + b;
            for (slot_index, (vector, attention)) in set.vectors(b).into_iter().zip(set.maps(b)).enumerate() {
                out.push(SlotRecord {
                    id: out.len(),
                    vector,
                    attention,
                    source_image_id: image_id,
                    slot_index,
                });
            }
        }
    }
    Ok(out)
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return invalid("cannot normalize a zero or non-finite vector");
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Σ cosine(point, own centroid) after every assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

/// Index of the most similar centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(p, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// Objective of a given assignment with centroids set to normalized member
/// means.
pub fn cosine_objective(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Result<f64> {
    let units: Vec<Vec<f64>> = points.iter().map(|p| normalize(p)).collect::<Result<_>>()?;
    let d = units[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    for (p, &a) in units.iter().zip(assignment) {
        sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    // Σ_i cos(p_i, c_a) = Σ_clusters |sum of members|
    Ok(sums.iter().map(|s| s.iter().map(|x| x * x).sum::<f64>().sqrt()).sum())
}

/// Spherical k-means with k-means++ seeding on cosine distance.
pub fn kmeans_cosine(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut RandomSource) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return invalid(format!("k = {k} with {} records", points.len()));
    }
    let units: Vec<Vec<f64>> = points.iter().map(|p| normalize(p)).collect::<Result<_>>()?;
    let d = units[0].len();
    if units.iter().any(|u| u.len() != d) {
        return invalid("records of different widths");
    }
    let mut centroids = vec![units[rng.below(units.len())].clone()];
    while centroids.len() < k {
        let w: Vec<f64> = units.iter().map(|u| (1.0 - nearest(u, &centroids).1).max(0.0)).collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut idx = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if r < *wi {
                    idx = i;
                    break;
                }
                r -= wi;
            }
            idx
        } else {
            rng.below(units.len())
        };
        centroids.push(units[pick].clone());
    }
    let mut assignment = vec![usize::MAX; units.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut obj = 0.0;
        for (i, u) in units.iter().enumerate() {
            let (j, s) = nearest(u, &centroids);
            obj += s;
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        history.push(obj);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        for (u, &a) in units.iter().zip(&assignment) {
            sums[a].iter_mut().zip(u).for_each(|(s, x)| *s += x);
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            // an emptied cluster keeps its previous centroid
            if let Ok(n) = normalize(s) {
                *c = n;
            }
        }
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        objective_history: history,
        iterations,
    })
}

/// `g×g` partition of a `rows×cols` token grid into cell masks, listed in
/// raster order of the regions. Cells map to regions by nearest-cell
/// partition when `g` does not divide the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRegionLibrary {
    pub g: usize,
    pub rows: usize,
    pub cols: usize,
    pub masks: Vec<Vec<bool>>,
}

impl GridRegionLibrary {
    pub fn new(g: usize, rows: usize, cols: usize) -> Result<Self> {
        if g == 0 || g > rows || g > cols {
            return invalid(format!("region grid {g} for a {rows}x{cols} token grid"));
        }
        let mut masks = vec![vec![false; rows * cols]; g * g];
        for r in 0..rows {
            for c in 0..cols {
                let (gr, gc) = (r * g / rows, c * g / cols);
                masks[gr * g + gc][r * cols + c] = true;
            }
        }
        Ok(GridRegionLibrary { g, rows, cols, masks })
    }

    /// (row, column) of a region in the region grid.
    pub fn position(&self, region: usize) -> (usize, usize) {
        (region / self.g, region % self.g)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.position(a);
        let (rb, cb) = self.position(b);
        ((ra as f64 - rb as f64).powi(2) + (ca as f64 - cb as f64).powi(2)).sqrt()
    }
}

/// Foreground cells: weight above the uniform baseline 1/T.
pub fn binarize(attention: &[f64]) -> Vec<bool> {
    let thr = 1.0 / attention.len() as f64;
    attention.iter().map(|&a| a > thr).collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Region with the highest IOU against the binarized attention (lowest
/// index on ties), or `None` when the foreground is empty.
pub fn assign_by_iou(attention: &[f64], regions: &GridRegionLibrary) -> Option<(usize, f64)> {
    let fg = binarize(attention);
    if !fg.iter().any(|&x| x) {
        return None;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, m) in regions.masks.iter().enumerate() {
        let s = iou(&fg, m);
        if s > best.1 {
            best = (i, s);
        }
    }
    Some(best)
}

/// Fraction of cells in the binarized foreground.
pub fn foreground_fraction(attention: &[f64]) -> f64 {
    let fg = binarize(attention);
    fg.iter().filter(|&&x| x).count() as f64 / fg.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClusterLabel {
    Concept,
    Region { region: usize },
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub label: ClusterLabel,
    /// Unit-norm mean direction of the members.
    pub centroid: Vec<f64>,
    pub members: Vec<SlotRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryHeader {
    pub version: u32,
    pub k: usize,
    pub slot_dim: usize,
    pub num_cells: usize,
    pub num_slots: usize,
    pub decoder: DecoderKind,
    pub model_hash: String,
    /// Source images referenced by `source_image_id`.
    pub sources: Vec<String>,
    pub regions: Option<GridRegionLibrary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptLibrary {
    pub header: LibraryHeader,
    pub clusters: Vec<Cluster>,
}

/// Decoder-side facts a library must agree with.
#[derive(Clone, Debug)]
pub struct LibraryContext {
    pub slot_dim: usize,
    pub num_cells: usize,
    pub num_slots: usize,
    pub decoder: DecoderKind,
    pub model_hash: String,
    pub sources: Vec<String>,
}

fn mean_direction(members: &[SlotRecord], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d];
    for m in members {
        if let Ok(u) = normalize(&m.vector) {
            s.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
        }
    }
    normalize(&s).unwrap_or(s)
}

/// Default area threshold above which a cluster counts as background.
pub const BACKGROUND_AREA: f64 = 0.3;

impl ConceptLibrary {
    /// Categorical library by spherical k-means. `background` names the
    /// background clusters explicitly; otherwise clusters whose members'
    /// mean foreground fraction exceeds [`BACKGROUND_AREA`] are marked.
    pub fn categorical(
        ctx: &LibraryContext,
        records: Vec<SlotRecord>,
        k: usize,
        max_iters: usize,
        background: Option<&[usize]>,
        rng: &mut RandomSource,
    ) -> Result<ConceptLibrary> {
        let pts: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
        let km = kmeans_cosine(&pts, k, max_iters, rng)?;
        let mut groups: Vec<Vec<SlotRecord>> = vec![Vec::new(); k];
        for (r, &a) in records.into_iter().zip(&km.assignment) {
            groups[a].push(r);
        }
        let clusters = groups
            .into_iter()
            .zip(km.centroids)
            .enumerate()
            .map(|(j, (members, centroid))| {
                let is_bg = match background {
                    Some(list) => list.contains(&j),
                    None => mean_area(&members) > BACKGROUND_AREA,
                };
                Cluster {
                    label: if is_bg { ClusterLabel::Background } else { ClusterLabel::Concept },
                    centroid,
                    members,
                }
            })
            .collect();
        if let Some(list) = background {
            if let Some(&bad) = list.iter().find(|&&j| j >= k) {
                return invalid(format!("background cluster {bad} out of range for k = {k}"));
            }
        }
        Self::finish(ctx, clusters, None)
    }

    /// Positional library over a `g×g` region grid. Slots whose foreground
    /// exceeds `background_area` of the grid (or is empty) go to a single
    /// background cluster; the rest join their best-IOU region.
    pub fn positional(ctx: &LibraryContext, records: Vec<SlotRecord>, g: usize, background_area: f64) -> Result<ConceptLibrary> {
        let side = (ctx.num_cells as f64).sqrt().round() as usize;
        if side * side != ctx.num_cells {
            return invalid(format!("{} cells do not form a square grid", ctx.num_cells));
        }
        let regions = GridRegionLibrary::new(g, side, side)?;
        let mut groups: Vec<Vec<SlotRecord>> = vec![Vec::new(); g * g + 1];
        for r in records {
            let slot = match assign_by_iou(&r.attention, &regions) {
                Some((reg, _)) if foreground_fraction(&r.attention) <= background_area => reg,
                _ => g * g,
            };
            groups[slot].push(r);
        }
        let d = ctx.slot_dim;
        let clusters = groups
            .into_iter()
            .enumerate()
            .map(|(j, members)| Cluster {
                label: if j == g * g {
                    ClusterLabel::Background
                } else {
                    ClusterLabel::Region { region: j }
                },
                centroid: mean_direction(&members, d),
                members,
            })
            .collect();
        Self::finish(ctx, clusters, Some(regions))
    }

    fn finish(ctx: &LibraryContext, clusters: Vec<Cluster>, regions: Option<GridRegionLibrary>) -> Result<ConceptLibrary> {
        let lib = ConceptLibrary {
            header: LibraryHeader {
                version: LIBRARY_VERSION,
                k: clusters.len(),
                slot_dim: ctx.slot_dim,
                num_cells: ctx.num_cells,
                num_slots: ctx.num_slots,
                decoder: ctx.decoder,
                model_hash: ctx.model_hash.clone(),
                sources: ctx.sources.clone(),
                regions,
            },
            clusters,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.version != LIBRARY_VERSION {
            return Err(Error::Version {
                found: h.version,
                expected: LIBRARY_VERSION,
            });
        }
        if h.k != self.clusters.len() {
            return Err(Error::Corrupt(format!("header k = {} with {} clusters", h.k, self.clusters.len())));
        }
        let mut seen = BTreeSet::new();
        for c in &self.clusters {
            for m in &c.members {
                if m.vector.len() != h.slot_dim || m.attention.len() != h.num_cells {
                    return Err(Error::Corrupt(format!("record {} has the wrong width", m.id)));
                }
                if m.attention.iter().any(|&a| a < 0.0) {
                    return Err(Error::Corrupt(format!("record {} has negative attention", m.id)));
                }
                if !seen.insert(m.id) {
                    return Err(Error::Corrupt(format!("record {} appears twice", m.id)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ConceptLibrary> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let lib: ConceptLibrary = serde_json::from_slice(&bytes)?;
        lib.validate()?;
        Ok(lib)
    }

    /// `409`-style compatibility check against a loaded model.
    pub fn check_compatible(&self, model_hash: &str, slot_dim: usize, num_slots: usize) -> Result<()> {
        let h = &self.header;
        if h.model_hash != model_hash {
            return Err(Error::Mismatch(format!(
                "library was built from model {} but model {} is loaded",
                short(&h.model_hash),
                short(model_hash)
            )));
        }
        if h.slot_dim != slot_dim || h.num_slots != num_slots {
            return Err(Error::Mismatch("library slot shape differs from the model".into()));
        }
        Ok(())
    }

    pub fn background_clusters(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&j| self.clusters[j].label == ClusterLabel::Background)
            .collect()
    }

    pub fn object_clusters(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&j| self.clusters[j].label != ClusterLabel::Background)
            .collect()
    }

    pub fn record_index(&self) -> HashMap<usize, (usize, usize)> {
        let mut idx = HashMap::new();
        for (j, c) in self.clusters.iter().enumerate() {
            for (i, m) in c.members.iter().enumerate() {
                idx.insert(m.id, (j, i));
            }
        }
        idx
    }

    pub fn record(&self, id: usize) -> Option<&SlotRecord> {
        self.clusters.iter().flat_map(|c| &c.members).find(|m| m.id == id)
    }

    pub fn cluster_of(&self, id: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.members.iter().any(|m| m.id == id))
    }

    /// Cluster index holding the members of a region.
    pub fn region_cluster(&self, region: usize) -> Option<usize> {
        self.clusters
            .iter()
            .position(|c| c.label == ClusterLabel::Region { region })
    }

    pub fn source_path(&self, source_image_id: usize) -> Option<&str> {
        self.header.sources.get(source_image_id).map(|s| s.as_str())
    }
}

fn mean_area(members: &[SlotRecord]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    members.iter().map(|m| foreground_fraction(&m.attention)).sum::<f64>() / members.len() as f64
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Where a prompt slot came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptSource {
    Record { id: usize },
    Padding { id: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotPrompt {
    pub slots: Vec<Vec<f64>>,
    pub sources: Vec<PromptSource>,
}

impl SlotPrompt {
    pub fn record_ids(&self) -> Vec<usize> {
        self.sources
            .iter()
            .map(|s| match s {
                PromptSource::Record { id } | PromptSource::Padding { id } => *id,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Disabled,
    Background,
}

const MAX_RETRIES: usize = 1000;

impl ConceptLibrary {
    /// Slots from explicit record ids, padded to `num_slots` when allowed.
    pub fn prompt_from_ids(&self, ids: &[usize], padding: Padding, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let idx = self.record_index();
        let mut p = SlotPrompt {
            slots: Vec::new(),
            sources: Vec::new(),
        };
        for &id in ids {
            let &(j, i) = idx.get(&id).ok_or_else(|| Error::NotFound(format!("slot {id}")))?;
            p.slots.push(self.clusters[j].members[i].vector.clone());
            p.sources.push(PromptSource::Record { id });
        }
        self.pad(p, padding, rng)
    }

    /// Fills the prompt to `num_slots` with background slots of one random
    /// source image (in slot order).
    pub fn pad(&self, mut p: SlotPrompt, padding: Padding, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let n = self.header.num_slots;
        if p.slots.len() > n {
            return invalid(format!("prompt has {} slots, decoder takes {n}", p.slots.len()));
        }
        if p.slots.len() == n {
            return Ok(p);
        }
        if padding == Padding::Disabled {
            return invalid(format!("prompt has {} slots, decoder expects {n} and padding is disabled", p.slots.len()));
        }
        let mut by_image: HashMap<usize, Vec<&SlotRecord>> = HashMap::new();
        for j in self.background_clusters() {
            for m in &self.clusters[j].members {
                by_image.entry(m.source_image_id).or_default().push(m);
            }
        }
        if by_image.is_empty() {
            return Err(Error::Infeasible("library has no background slots to pad with".into()));
        }
        let mut images: Vec<usize> = by_image.keys().copied().collect();
        images.sort_unstable();
        let need = n - p.slots.len();
        // prefer an image with enough background slots; otherwise cycle the richest one
        let full: Vec<usize> = images.iter().copied().filter(|i| by_image[i].len() >= need).collect();
        let img = if full.is_empty() {
            let most = images.iter().map(|i| by_image[i].len()).max().unwrap_or(0);
            let richest: Vec<usize> = images.iter().copied().filter(|i| by_image[i].len() == most).collect();
            richest[rng.below(richest.len())]
        } else {
            full[rng.below(full.len())]
        };
        let mut cands = by_image[&img].clone();
        cands.sort_by_key(|m| m.slot_index);
        for m in cands.iter().cycle().take(need) {
            p.slots.push(m.vector.clone());
            p.sources.push(PromptSource::Padding { id: m.id });
        }
        Ok(p)
    }

    fn sample_member(&self, cluster: usize, rng: &mut RandomSource) -> Result<&SlotRecord> {
        let c = &self.clusters[cluster];
        if c.members.is_empty() {
            return Err(Error::Infeasible(format!("cluster {cluster} is empty")));
        }
        Ok(&c.members[rng.below(c.members.len())])
    }

    /// One uniformly drawn member per cluster, in cluster order, padded.
    pub fn prompt_categorical(&self, padding: Padding, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let n = self.header.num_slots;
        if self.clusters.len() > n {
            return invalid(format!("{} concepts exceed the {n} decoder slots", self.clusters.len()));
        }
        let mut p = SlotPrompt {
            slots: Vec::new(),
            sources: Vec::new(),
        };
        for j in 0..self.clusters.len() {
            let m = self.sample_member(j, rng)?;
            p.slots.push(m.vector.clone());
            p.sources.push(PromptSource::Record { id: m.id });
        }
        self.pad(p, padding, rng)
    }

    /// `n` object slots (uniform cluster, then uniform member), padded.
    pub fn prompt_objects(&self, n: usize, padding: Padding, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let objs: Vec<usize> = self
            .object_clusters()
            .into_iter()
            .filter(|&j| !self.clusters[j].members.is_empty())
            .collect();
        if objs.is_empty() {
            return Err(Error::Infeasible("library has no object clusters".into()));
        }
        let mut p = SlotPrompt {
            slots: Vec::new(),
            sources: Vec::new(),
        };
        for _ in 0..n {
            let m = self.sample_member(objs[rng.below(objs.len())], rng)?;
            p.slots.push(m.vector.clone());
            p.sources.push(PromptSource::Record { id: m.id });
        }
        self.pad(p, padding, rng)
    }

    /// Categorical prompt where clusters `a` and `b` take slots from two
    /// different source images.
    pub fn prompt_attribute_swap(&self, a: usize, b: usize, padding: Padding, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let k = self.clusters.len();
        if a == b || a >= k || b >= k {
            return Err(Error::Infeasible(format!("attribute swap needs two distinct clusters below {k}, got {a} and {b}")));
        }
        if k > self.header.num_slots {
            return invalid(format!("{k} concepts exceed the {} decoder slots", self.header.num_slots));
        }
        for _ in 0..MAX_RETRIES {
            let mut p = SlotPrompt {
                slots: Vec::new(),
                sources: Vec::new(),
            };
            let mut src = Vec::with_capacity(k);
            for j in 0..k {
                let m = self.sample_member(j, rng)?;
                p.slots.push(m.vector.clone());
                p.sources.push(PromptSource::Record { id: m.id });
                src.push(m.source_image_id);
            }
            if src[a] != src[b] {
                return self.pad(p, padding, rng);
            }
        }
        Err(Error::Infeasible("clusters never differ in source image".into()))
    }

    fn regions(&self) -> Result<&GridRegionLibrary> {
        self.header
            .regions
            .as_ref()
            .ok_or_else(|| Error::Infeasible("library has no position regions".into()))
    }

    /// Regions that have at least one member.
    pub fn populated_regions(&self) -> Result<Vec<usize>> {
        let regions = self.regions()?;
        Ok((0..regions.masks.len())
            .filter(|&r| self.region_cluster(r).is_some_and(|j| !self.clusters[j].members.is_empty()))
            .collect())
    }

    /// Picks regions for a layout (no slots yet).
    pub fn layout_regions(&self, layout: &Layout, rng: &mut RandomSource) -> Result<Vec<usize>> {
        let regions = self.regions()?;
        let populated = self.populated_regions()?;
        let has = |r: usize| populated.binary_search(&r).is_ok();
        let g = regions.g;
        for _ in 0..MAX_RETRIES {
            let pick = match layout {
                Layout::Clearance { n, d_min } => {
                    let mut chosen: Vec<usize> = Vec::new();
                    let mut pool = populated.clone();
                    rng.shuffle(&mut pool);
                    for r in pool {
                        if chosen.len() == *n {
                            break;
                        }
                        if chosen.iter().all(|&c| regions.distance(c, r) >= *d_min) {
                            chosen.push(r);
                        }
                    }
                    (chosen.len() == *n).then_some(chosen)
                }
                Layout::Tower { n } => tower(g, *n, &mut BTreeSet::new(), rng, &has),
                Layout::Towers { heights } => {
                    let mut used = BTreeSet::new();
                    let mut all = Vec::new();
                    let mut ok = true;
                    for &h in heights {
                        match tower(g, h, &mut used, rng, &has) {
                            Some(t) => all.extend(t),
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    ok.then_some(all)
                }
            };
            if let Some(p) = pick {
                return Ok(p);
            }
        }
        Err(Error::Infeasible(format!("layout {layout:?} could not be satisfied")))
    }

    /// Positional prompt: one member per region chosen by the layout,
    /// padded with one source image's background slots.
    pub fn prompt_positional(&self, layout: &Layout, padding: Padding, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let regions = self.layout_regions(layout, rng)?;
        let mut p = SlotPrompt {
            slots: Vec::new(),
            sources: Vec::new(),
        };
        for r in regions {
            let j = self.region_cluster(r).expect("populated region");
            let m = self.sample_member(j, rng)?;
            p.slots.push(m.vector.clone());
            p.sources.push(PromptSource::Record { id: m.id });
        }
        self.pad(p, padding, rng)
    }

    /// Prompt for one entry of a prompt-spec file.
    pub fn build_prompt(&self, spec: &PromptSpec, rng: &mut RandomSource) -> Result<SlotPrompt> {
        let pad = |b: bool| if b { Padding::Background } else { Padding::Disabled };
        match spec {
            PromptSpec::Slots { slots, pad: p } => self.prompt_from_ids(slots, pad(*p), rng),
            PromptSpec::Categorical => self.prompt_categorical(Padding::Background, rng),
            PromptSpec::Objects { n } => self.prompt_objects(*n, Padding::Background, rng),
            PromptSpec::Positional { layout } => self.prompt_positional(layout, Padding::Background, rng),
            PromptSpec::AttributeSwap { clusters } => {
                self.prompt_attribute_swap(clusters[0], clusters[1], Padding::Background, rng)
            }
        }
    }
}

/// A column of `n` vertically adjacent populated regions whose column is
/// not yet in `used`.
fn tower(
    g: usize,
    n: usize,
    used: &mut BTreeSet<usize>,
    rng: &mut RandomSource,
    has: &dyn Fn(usize) -> bool,
) -> Option<Vec<usize>> {
    if n == 0 || n > g {
        return None;
    }
    let mut options = Vec::new();
    for col in (0..g).filter(|c| !used.contains(c)) {
        for top in 0..=g - n {
            if (top..top + n).all(|r| has(r * g + col)) {
                options.push((col, top));
            }
        }
    }
    if options.is_empty() {
        return None;
    }
    let (col, top) = options[rng.below(options.len())];
    used.insert(col);
    Some((top..top + n).map(|r| r * g + col).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layout {
    /// `n` regions with pairwise center distance ≥ `d_min` (region units).
    Clearance { n: usize, d_min: f64 },
    /// `n` vertically adjacent regions in one column.
    Tower { n: usize },
    /// One tower per entry, each in its own column.
    Towers { heights: Vec<usize> },
}

/// One prompt request in a prompt-spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSpec {
    Slots {
        slots: Vec<usize>,
        #[serde(default)]
        pad: bool,
    },
    Categorical,
    Objects {
        n: usize,
    },
    Positional {
        layout: Layout,
    },
    AttributeSwap {
        clusters: [usize; 2],
    },
}

/// Prompt-spec file: a JSON object with a seed and a list of prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub description: String,
    pub prompts: Vec<PromptSpec>,
}

impl PromptFile {
    pub fn load(path: &Path) -> Result<PromptFile> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Source image scaled by the attention map upsampled from the cell grid
/// (nearest neighbour).
pub fn thumbnail(source: &Image, attention: &[f64]) -> Result<Image> {
    let t = attention.len();
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return invalid(format!("{t} attention cells do not form a square grid"));
    }
    let (h, w) = (source.height(), source.width());
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let a = attention[(y * g / h) * g + x * g / w].clamp(0.0, 1.0);
            let p = source.get(y, x);
            out.set(y, x, [p[0] * a, p[1] * a, p[2] * a]);
        }
    }
    Ok(out)
}

/// Grid of thumbnails, one row per cluster (up to `per_row` members).
pub fn thumbnail_sheet(lib: &ConceptLibrary, sources: &dyn Fn(usize) -> Option<Image>, per_row: usize, size: usize) -> Result<Image> {
    let rows = lib.clusters.len().max(1);
    let mut sheet = Image::filled(rows * size, per_row * size, [1.0; 3]);
    for (r, c) in lib.clusters.iter().enumerate() {
        for (i, m) in c.members.iter().take(per_row).enumerate() {
            let Some(src) = sources(m.source_image_id) else { continue };
            let th = thumbnail(&src, &m.attention)?.resize_nearest(size, size);
            for y in 0..size {
                for x in 0..size {
                    sheet.set(r * size + y, i * size + x, th.get(y, x));
                }
            }
        }
    }
    Ok(sheet)
}
