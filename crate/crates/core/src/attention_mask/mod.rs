//! Binary attention permission matrix over the unified `text ‖ image ‖ latent`
//! sequence.
//!
//! [`build_mask`] groups tokens into maximal runs that share a permission
//! class (text group, or modality plus region membership) and tiles the
//! matrix with one rectangle per pair of merged runs. [`verify_mask`]
//! re-derives every entry from the per-pair rule predicate in [`oracle`].

mod bitmap;
pub mod oracle;
mod rules;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::region_grid::{LayoutError, RegionSet, SegmentOffsets, TokenLayout};

pub use bitmap::{BitMatrix, MaskFileError, FLAGS_UNSPECIFIED, HEADER_LEN, MAGIC, VERSION};
pub use rules::{ParseRuleSetError, RuleSet};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("rule-set references region {region} but the layout has {count} regions")]
    UnknownRegion { region: usize, count: usize },
}

/// Rectangle of the permission matrix with a uniform value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBlock {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub allow: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionMask {
    size: usize,
    rules: Option<RuleSet>,
    segments: Option<SegmentOffsets>,
    blocks: Option<Vec<MaskBlock>>,
    bitmap: OnceLock<BitMatrix>,
}

impl PartialEq for AttentionMask {
    fn eq(&self, other: &Self) -> bool {
        self.size == other.size && self.bitmap() == other.bitmap()
    }
}

impl AttentionMask {
    /// Every query sees every key.
    pub fn full(size: usize) -> Self {
        let blocks = if size == 0 { vec![] } else { vec![MaskBlock { queries: 0..size, keys: 0..size, allow: true }] };
        Self::from_blocks(size, blocks, None, None)
    }

    /// Each token sees only itself.
    pub fn identity(size: usize) -> Self {
        let mut b = BitMatrix::zeros(size);
        for u in 0..size {
            b.set(u, u, true);
        }
        Self::from_bitmap(b, None)
    }

    pub fn from_bitmap(bitmap: BitMatrix, rules: Option<RuleSet>) -> Self {
        Self { size: bitmap.size(), rules, segments: None, blocks: None, bitmap: OnceLock::from(bitmap) }
    }

    fn from_blocks(
        size: usize,
        blocks: Vec<MaskBlock>,
        rules: Option<RuleSet>,
        segments: Option<SegmentOffsets>,
    ) -> Self {
        Self { size, rules, segments, blocks: Some(blocks), bitmap: OnceLock::new() }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rules(&self) -> Option<RuleSet> {
        self.rules
    }

    pub fn segments(&self) -> Option<SegmentOffsets> {
        self.segments
    }

    /// Block tiling, if the mask was built from a layout and stayed compact.
    pub fn blocks(&self) -> Option<&[MaskBlock]> {
        self.blocks.as_deref()
    }

    pub fn bitmap(&self) -> &BitMatrix {
        self.bitmap.get_or_init(|| {
            let mut b = BitMatrix::zeros(self.size);
            for blk in self.blocks.iter().flatten().filter(|b| b.allow) {
                b.fill(blk.queries.clone(), blk.keys.clone());
            }
            b
        })
    }

    #[inline]
    pub fn get(&self, query: usize, key: usize) -> bool {
        self.bitmap().get(query, key)
    }

    /// Allowed keys of `query`, ascending.
    pub fn allowed_keys(&self, query: usize) -> Vec<usize> {
        let b = self.bitmap();
        (0..self.size).filter(|&k| b.get(query, k)).collect()
    }

    /// First query row with no allowed key.
    pub fn first_empty_row(&self) -> Option<usize> {
        let b = self.bitmap();
        (0..self.size).find(|&u| (0..self.size).all(|v| !b.get(u, v)))
    }

    pub fn flag_bits(&self) -> u16 {
        self.rules.map_or(FLAGS_UNSPECIFIED, |r| r.flag_bits())
    }

    pub fn encode(&self) -> Vec<u8> {
        self.bitmap().encode(self.flag_bits())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MaskFileError> {
        let (bitmap, flags) = BitMatrix::decode(bytes)?;
        Ok(Self::from_bitmap(bitmap, RuleSet::from_flag_bits(flags)))
    }
}

/// Permission class of a token; tokens in one class have identical rows and
/// identical columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Text(usize),
    Image(RegionSet),
    Latent(RegionSet),
}

impl Class {
    fn patch_set(self) -> Option<RegionSet> {
        match self {
            Class::Image(s) | Class::Latent(s) => Some(s),
            Class::Text(_) => None,
        }
    }
}

fn hint_visible(g: usize, set: RegionSet) -> bool {
    g == 0 || set.contains(g)
}

fn class_allows(rules: RuleSet, q: Class, k: Class) -> bool {
    match (q.patch_set(), k.patch_set()) {
        (None, None) => q == k,
        (Some(s), None) => {
            let Class::Text(g) = k else { unreachable!() };
            if rules == RuleSet::NoTextForBackground && s.is_empty() {
                return false;
            }
            hint_visible(g, s)
        }
        (None, Some(s)) => {
            let Class::Text(g) = q else { unreachable!() };
            hint_visible(g, s)
        }
        (Some(a), Some(b)) => match rules {
            RuleSet::Standard | RuleSet::NoTextForBackground => true,
            RuleSet::CutRegionBgImage => a == RegionSet::EMPTY && b == RegionSet::EMPTY || a.intersects(b),
            RuleSet::LatentRegionReference { region } => {
                let same = matches!((q, k), (Class::Image(_), Class::Image(_)) | (Class::Latent(_), Class::Latent(_)));
                same || b.contains(region)
            }
        },
    }
}

/// Maximal runs of consecutive tokens sharing a class.
fn class_runs(layout: &TokenLayout) -> Vec<(Range<usize>, Class)> {
    let mut runs: Vec<(Range<usize>, Class)> = Vec::new();
    let mut push = |range: Range<usize>, class: Class| match runs.last_mut() {
        Some((r, c)) if *c == class && r.end == range.start => r.end = range.end,
        _ => runs.push((range, class)),
    };
    for g in 0..layout.text_group_sizes().len() {
        push(layout.text_group(g), Class::Text(g));
    }
    for p in 0..layout.patch_count() {
        let t = layout.image_token(p);
        push(t..t + 1, Class::Image(layout.image_membership(p)));
    }
    for p in 0..layout.patch_count() {
        let t = layout.latent_token(p);
        push(t..t + 1, Class::Latent(layout.latent_membership(p)));
    }
    runs
}

pub fn build_mask(layout: &TokenLayout, rules: RuleSet) -> Result<AttentionMask, MaskError> {
    layout.check()?;
    if let RuleSet::LatentRegionReference { region } = rules {
        if region == 0 || region > layout.region_count() {
            return Err(MaskError::UnknownRegion { region, count: layout.region_count() });
        }
    }

    let runs = class_runs(layout);

    // One row of merged key segments per query run.
    let rows: Vec<Vec<(Range<usize>, bool)>> = runs
        .iter()
        .map(|&(_, qc)| {
            let mut segs: Vec<(Range<usize>, bool)> = Vec::new();
            for (kr, kc) in &runs {
                let allow = class_allows(rules, qc, *kc);
                match segs.last_mut() {
                    Some((r, a)) if *a == allow => r.end = kr.end,
                    _ => segs.push((kr.clone(), allow)),
                }
            }
            segs
        })
        .collect();

    let mut blocks = Vec::new();
    let mut i = 0;
    while i < runs.len() {
        let mut j = i + 1;
        while j < runs.len() && rows[j] == rows[i] {
            j += 1;
        }
        let queries = runs[i].0.start..runs[j - 1].0.end;
        for (keys, allow) in &rows[i] {
            blocks.push(MaskBlock { queries: queries.clone(), keys: keys.clone(), allow: *allow });
        }
        i = j;
    }

    let size = layout.len();
    let mask = if blocks.len() > size.max(1) {
        // Fragmented membership: a dense bitmap is smaller than the tiling.
        let mut b = BitMatrix::zeros(size);
        for blk in blocks.iter().filter(|b| b.allow) {
            b.fill(blk.queries.clone(), blk.keys.clone());
        }
        let mut m = AttentionMask::from_bitmap(b, Some(rules));
        m.segments = Some(layout.offsets());
        m
    } else {
        AttentionMask::from_blocks(size, blocks, Some(rules), Some(layout.offsets()))
    };
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub query: usize,
    pub key: usize,
    pub expected: bool,
    pub actual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub size: usize,
    pub checked_pairs: u64,
    pub mismatches: u64,
    pub first_mismatch: Option<Mismatch>,
    /// Set when the mask cannot be compared against the layout at all.
    pub error: Option<String>,
}

impl VerifyReport {
    pub fn is_exact(&self) -> bool {
        self.error.is_none() && self.mismatches == 0
    }
}

/// Compares every entry of `mask` against [`oracle::allowed`].
pub fn verify_mask(layout: &TokenLayout, mask: &AttentionMask, rules: RuleSet) -> VerifyReport {
    let n = layout.len();
    if mask.size() != n {
        return VerifyReport {
            size: mask.size(),
            checked_pairs: 0,
            mismatches: 0,
            first_mismatch: None,
            error: Some(format!("mask has {} tokens, layout has {n}", mask.size())),
        };
    }
    let bitmap = mask.bitmap();
    let per_row: Vec<(u64, Option<Mismatch>)> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut count = 0;
            let mut first = None;
            for v in 0..n {
                let expected = oracle::allowed(layout, rules, u, v);
                let actual = bitmap.get(u, v);
                if expected != actual {
                    count += 1;
                    first.get_or_insert(Mismatch { query: u, key: v, expected, actual });
                }
            }
            (count, first)
        })
        .collect();
    VerifyReport {
        size: n,
        checked_pairs: (n * n) as u64,
        mismatches: per_row.iter().map(|r| r.0).sum(),
        first_mismatch: per_row.iter().find_map(|r| r.1),
        error: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub size: usize,
    pub allowed: u64,
    pub density: f64,
    pub rules: Option<String>,
    pub block_count: Option<usize>,
    /// Allowed pairs per `query->key` segment, e.g. `"image->text"`.
    pub segment_counts: Option<BTreeMap<String, u64>>,
}

pub fn mask_stats(mask: &AttentionMask) -> MaskStats {
    let b = mask.bitmap();
    let n = mask.size();
    let allowed = b.count_ones();
    let density = if n == 0 { 0.0 } else { allowed as f64 / (n as f64 * n as f64) };
    let segment_counts = mask.segments().map(|o| {
        let segs = [("text", o.text..o.image), ("image", o.image..o.latent), ("latent", o.latent..o.total)];
        let mut out = BTreeMap::new();
        for (qn, qr) in &segs {
            for (kn, kr) in &segs {
                let c = qr.clone().map(|u| kr.clone().filter(|&v| b.get(u, v)).count() as u64).sum();
                out.insert(format!("{qn}->{kn}"), c);
            }
        }
        out
    });
    MaskStats {
        size: n,
        allowed,
        density,
        rules: mask.rules().map(|r| r.to_string()),
        block_count: mask.blocks().map(<[MaskBlock]>::len),
        segment_counts,
    }
}

/// Allowed text groups of a patch query under `mask`.
pub fn visible_text_groups(layout: &TokenLayout, mask: &AttentionMask, query: usize) -> Vec<usize> {
    (0..layout.text_group_sizes().len()).filter(|&g| layout.text_group(g).any(|t| mask.get(query, t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan_format::BBox;
    use crate::region_grid::{ImageGeometry, TokenKind};

    /// 3 one-token hints, 2x2 grid, region 1 = patch (0,0), region 2 = patch (1,1).
    fn example_layout() -> TokenLayout {
        let g = ImageGeometry::new(2, 2, 1).unwrap();
        TokenLayout::from_regions(g, vec![BBox::new(0, 0, 1, 1), BBox::new(1, 1, 2, 2)], vec![1, 1, 1]).unwrap()
    }

    #[test]
    fn example_entries() {
        let l = example_layout();
        let m = build_mask(&l, RuleSet::Standard).unwrap();
        let (h1, h2) = (1, 2);
        assert!(!m.get(h1, h2));
        assert!(m.get(l.image_token(0), h1));
        assert!(!m.get(l.image_token(1), h1));
        assert!(m.get(l.latent_token(3), h2));
        assert!(verify_mask(&l, &m, RuleSet::Standard).is_exact());
    }

    #[test]
    fn example_counts_match_enumeration() {
        // text->text 3, text->image 6, text->latent 6, image->text 6,
        // latent->text 6, image/latent square 64: 91 of 121.
        let l = example_layout();
        let m = build_mask(&l, RuleSet::Standard).unwrap();
        let mut brute = 0;
        for u in 0..l.len() {
            for v in 0..l.len() {
                brute += u64::from(oracle::allowed(&l, RuleSet::Standard, u, v));
            }
        }
        let s = mask_stats(&m);
        assert_eq!(brute, 91);
        assert_eq!(s.allowed, 91);
        assert!((s.density - 91.0 / 121.0).abs() < 1e-15);
        let seg = s.segment_counts.unwrap();
        assert_eq!(seg["text->text"], 3);
        assert_eq!(seg["text->image"], 6);
        assert_eq!(seg["latent->text"], 6);
        assert_eq!(seg["image->latent"], 16);
    }

    #[test]
    fn no_regions_means_open_patches() {
        let g = ImageGeometry::new(32, 32, 16).unwrap();
        let l = TokenLayout::from_regions(g, vec![], vec![2]).unwrap();
        let m = build_mask(&l, RuleSet::Standard).unwrap();
        for u in l.offsets().image..l.len() {
            for v in 0..l.len() {
                assert!(m.get(u, v));
            }
        }
        assert_eq!(m.blocks().unwrap().len(), 1);
    }

    #[test]
    fn no_text_for_background_diff() {
        let l = example_layout();
        let std = build_mask(&l, RuleSet::Standard).unwrap();
        let nt = build_mask(&l, RuleSet::NoTextForBackground).unwrap();
        assert!(!nt.get(l.image_token(1), 0));
        for u in 0..l.len() {
            for v in 0..l.len() {
                if std.get(u, v) != nt.get(u, v) {
                    let bg_patch = match l.classify(u) {
                        TokenKind::Image(p) | TokenKind::Latent(p) => l.image_membership(p).is_empty(),
                        TokenKind::Text(_) => false,
                    };
                    assert!(bg_patch && v == 0, "unexpected diff at ({u},{v})");
                }
            }
        }
    }

    #[test]
    fn flipped_bit_is_located() {
        let l = example_layout();
        let m = build_mask(&l, RuleSet::Standard).unwrap();
        let mut b = m.bitmap().clone();
        b.flip(4, 1);
        let tampered = AttentionMask::from_bitmap(b, Some(RuleSet::Standard));
        let r = verify_mask(&l, &tampered, RuleSet::Standard);
        assert_eq!(r.mismatches, 1);
        assert_eq!(r.first_mismatch.unwrap().query, 4);
        assert_eq!(r.first_mismatch.unwrap().key, 1);
    }

    #[test]
    fn size_mismatch_reported() {
        let l = example_layout();
        let r = verify_mask(&l, &AttentionMask::full(5), RuleSet::Standard);
        assert!(!r.is_exact());
        assert!(r.error.is_some());
    }

    #[test]
    fn unknown_reference_region() {
        let l = example_layout();
        let err = build_mask(&l, RuleSet::LatentRegionReference { region: 3 }).unwrap_err();
        assert_eq!(err, MaskError::UnknownRegion { region: 3, count: 2 });
        assert!(build_mask(&l, RuleSet::LatentRegionReference { region: 2 }).is_ok());
    }

    #[test]
    fn density_of_trivial_masks() {
        assert_eq!(mask_stats(&AttentionMask::full(4)).density, 1.0);
        assert_eq!(mask_stats(&AttentionMask::identity(4)).density, 0.25);
    }

    #[test]
    fn file_round_trip_keeps_rules() {
        let l = example_layout();
        for rules in [RuleSet::Standard, RuleSet::LatentRegionReference { region: 2 }] {
            let m = build_mask(&l, rules).unwrap();
            let back = AttentionMask::decode(&m.encode()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.rules(), Some(rules));
        }
    }

    #[test]
    fn ablations_verify() {
        let g = ImageGeometry::new(48, 32, 8).unwrap();
        let l = TokenLayout::from_regions(
            g,
            vec![BBox::new(0, 0, 20, 20), BBox::new(10, 10, 40, 30), BBox::new(30, 0, 48, 8)],
            vec![2, 1, 3, 1],
        )
        .unwrap();
        for rules in [
            RuleSet::Standard,
            RuleSet::CutRegionBgImage,
            RuleSet::LatentRegionReference { region: 2 },
            RuleSet::NoTextForBackground,
        ] {
            let m = build_mask(&l, rules).unwrap();
            let r = verify_mask(&l, &m, rules);
            assert!(r.is_exact(), "{rules}: {r:?}");
            assert_eq!(m.first_empty_row(), None);
        }
    }
}
