use serde::{Deserialize, Serialize};

use crate::concept::{ConceptLibrary, Layout, PromptFile, PromptSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    TwoTowers,
    CountShift,
    AttributeSwap,
}

impl std::str::FromStr for OodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_towers" => Ok(OodKind::TwoTowers),
            "count_shift" => Ok(OodKind::CountShift),
            "attribute_swap" => Ok(OodKind::AttributeSwap),
            _ => Err(Error::Invalid(format!("unknown OOD kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodParams {
    /// Object counts seen in training (inclusive range).
    pub train_counts: (usize, usize),
    /// How many counts to emit on each side of the training range.
    pub span: usize,
    /// Prompts emitted per configuration.
    pub repeats: usize,
    pub tower_heights: Vec<usize>,
    /// Minimum region distance for count-shift clearance layouts.
    pub d_min: f64,
    pub seed: u64,
}

impl Default for OodParams {
    fn default() -> Self {
        OodParams {
            train_counts: (3, 6),
            span: 2,
            repeats: 1,
            tower_heights: vec![2, 2],
            d_min: 1.0,
            seed: 0,
        }
    }
}

/// Counts just outside the training range: `span` below (down to 1) and
/// `span` above.
pub fn shifted_counts(train: (usize, usize), span: usize) -> Vec<usize> {
    let (lo, hi) = train;
    let below = (lo.saturating_sub(span).max(1)..lo).collect::<Vec<_>>();
    below.into_iter().chain(hi + 1..=hi + span).collect()
}

/// Prompt specifications for an out-of-distribution protocol, checked
/// against what the library can provide.
pub fn make_ood_prompt_specs(kind: OodKind, lib: &ConceptLibrary, p: &OodParams) -> Result<PromptFile> {
    let positional = lib.header.regions.is_some();
    let mut prompts = Vec::new();
    let description;
    match kind {
        OodKind::TwoTowers => {
            if !positional {
                return Err(Error::Infeasible("two_towers needs a positional library".into()));
            }
            let g = lib.header.regions.as_ref().map(|r| r.g).unwrap_or(0);
            if p.tower_heights.len() < 2 || p.tower_heights.len() > g || p.tower_heights.iter().any(|&h| h == 0 || h > g) {
                return Err(Error::Infeasible(format!("towers {:?} do not fit a {g}x{g} region grid", p.tower_heights)));
            }
            description = format!("towers of heights {:?} in separate columns", p.tower_heights);
            for _ in 0..p.repeats {
                prompts.push(PromptSpec::Positional {
                    layout: Layout::Towers {
                        heights: p.tower_heights.clone(),
                    },
                });
            }
        }
        OodKind::CountShift => {
            let counts = shifted_counts(p.train_counts, p.span);
            if lib.object_clusters().is_empty() {
                return Err(Error::Infeasible("count_shift needs object clusters".into()));
            }
            description = format!("object counts {counts:?} outside training range {:?}", p.train_counts);
            for &n in &counts {
                for _ in 0..p.repeats {
                    prompts.push(if positional {
                        PromptSpec::Positional {
                            layout: Layout::Clearance { n, d_min: p.d_min },
                        }
                    } else {
                        PromptSpec::Objects { n }
                    });
                }
            }
        }
        OodKind::AttributeSwap => {
            let objs = lib.object_clusters();
            if objs.len() < 2 {
                return Err(Error::Infeasible("attribute_swap needs two object clusters".into()));
            }
            description = format!("clusters {} and {} from different source images", objs[0], objs[1]);
            for _ in 0..p.repeats {
                prompts.push(PromptSpec::AttributeSwap {
                    clusters: [objs[0], objs[1]],
                });
            }
        }
    }
    Ok(PromptFile {
        seed: p.seed,
        description,
        prompts,
    })
}
