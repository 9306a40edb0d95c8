//! Random inputs shared by the integration suites.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regionedit::plan_format::ParseOptions;
use regionedit::region_grid::ImageGeometry;
use regionedit::{BBox, EditPlan, ImageSize, RegionHint, RuleSet, TokenLayout};

pub fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> BBox {
    let x1 = rng.gen_range(0..width);
    let y1 = rng.gen_range(0..height);
    BBox::new(x1, y1, rng.gen_range(x1 + 1..=width), rng.gen_range(y1 + 1..=height))
}

/// Layout with at most `max_tokens` tokens and at most 4 regions; boxes may
/// overlap and image sides need not be patch multiples.
pub fn random_layout(rng: &mut ChaCha8Rng, max_tokens: usize) -> TokenLayout {
    loop {
        let k = rng.gen_range(0..=4usize);
        let patch = rng.gen_range(1..=6u32);
        let rows = rng.gen_range(1..=5usize);
        let cols = rng.gen_range(1..=5usize);
        let text: Vec<usize> = (0..=k).map(|_| rng.gen_range(1..=3)).collect();
        if text.iter().sum::<usize>() + 2 * rows * cols > max_tokens {
            continue;
        }
        // Ragged last row/column in about half the cases.
        let width = cols as u32 * patch - if patch > 1 && rng.gen() { rng.gen_range(0..patch) } else { 0 };
        let height = rows as u32 * patch - if patch > 1 && rng.gen() { rng.gen_range(0..patch) } else { 0 };
        let geom = ImageGeometry::new(width, height, patch).expect("positive geometry");
        let boxes = (0..k).map(|_| random_box(rng, width, height)).collect();
        return TokenLayout::from_regions(geom, boxes, text).expect("valid random layout");
    }
}

pub fn all_rulesets(layout: &TokenLayout) -> Vec<RuleSet> {
    let mut out = vec![RuleSet::Standard, RuleSet::CutRegionBgImage, RuleSet::NoTextForBackground];
    out.extend((1..=layout.region_count()).map(|region| RuleSet::LatentRegionReference { region }));
    out
}

const WORDS: &[&str] = &[
    "the",
    "mug",
    "Keep",
    "keep",
    "KEEP",
    "left",
    "red",
    "\"quoted\"",
    "back\\slash",
    "tab\there",
    "naïve",
    "漢字",
    "emoji🙂",
    "{json}",
    "[1,2]",
    "a<b",
    "x>y",
    "<thinking>",
    "</regions",
    "&amp;",
    "line\nbreak",
    "50%",
    "it's",
];

pub fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(0..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str([" ", "  ", "\n", " \n "].choose(rng).expect("non-empty"));
        }
        out.push_str(WORDS.choose(rng).expect("non-empty"));
    }
    out.trim().to_string()
}

/// A plan that satisfies every invariant the canonical text relies on.
pub fn random_plan(rng: &mut ChaCha8Rng, size: ImageSize) -> EditPlan {
    let markers = ParseOptions::default().negative_markers;
    let regions = (0..rng.gen_range(0..=5))
        .map(|_| {
            let mut hint = random_text(rng, 8);
            if hint.is_empty() {
                hint = "edit".into();
            }
            let lexical = regionedit::plan_format::is_negative_hint(&hint, &markers);
            let negative = if rng.gen_bool(0.2) { !lexical } else { lexical };
            RegionHint { bbox: random_box(rng, size.width, size.height), hint, negative }
        })
        .collect();
    let plan = EditPlan { reasoning: random_text(rng, 40), global_hint: random_text(rng, 10), regions };
    plan.validate(size).expect("generator produces valid plans");
    plan
}
