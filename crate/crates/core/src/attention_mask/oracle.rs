//! Per-pair reference predicate.
//!
//! Evaluates the attention rules one token pair at a time, straight from the
//! layout's pixel boxes: region membership of a patch is recomputed here by
//! intersecting its pixel rectangle with each box, without going through the
//! grouped membership tables that the block builder reads.

use crate::plan_format::BBox;
use crate::region_grid::{TokenKind, TokenLayout};

use super::RuleSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Modality {
    Text(usize),
    Image(usize),
    Latent(usize),
}

fn modality(layout: &TokenLayout, token: usize) -> Modality {
    match layout.classify(token) {
        TokenKind::Text(g) => Modality::Text(g),
        TokenKind::Image(p) => Modality::Image(p),
        TokenKind::Latent(p) => Modality::Latent(p),
    }
}

fn overlaps(a: BBox, b: BBox) -> bool {
    let w = i64::from(a.x2.min(b.x2)) - i64::from(a.x1.max(b.x1));
    let h = i64::from(a.y2.min(b.y2)) - i64::from(a.y1.max(b.y1));
    w > 0 && h > 0
}

/// Is patch `p` inside region `k` (1-based)?
fn in_region(layout: &TokenLayout, p: usize, k: usize) -> bool {
    let g = layout.geometry();
    let rect = g.patch_rect(p / g.cols(), p % g.cols());
    k >= 1 && k <= layout.region_count() && overlaps(rect, layout.regions()[k - 1])
}

fn in_background(layout: &TokenLayout, p: usize) -> bool {
    (1..=layout.region_count()).all(|k| !in_region(layout, p, k))
}

/// Standard rules for a patch token at `p` versus text group `g`.
/// Region patches see `G_0` and their own hints; background sees `G_0` only.
fn patch_text_rule(layout: &TokenLayout, p: usize, g: usize) -> bool {
    if g == 0 {
        return true;
    }
    in_region(layout, p, g)
}

pub fn allowed(layout: &TokenLayout, rules: RuleSet, query: usize, key: usize) -> bool {
    use Modality::*;
    let q = modality(layout, query);
    let k = modality(layout, key);

    match (q, k) {
        // Intra-group interaction and hint isolation.
        (Text(a), Text(b)) => a == b,

        // Image–latent full interaction, unless an ablation cuts it.
        (Image(p) | Latent(p), Image(r) | Latent(r)) => match rules {
            RuleSet::CutRegionBgImage => {
                let both_bg = in_background(layout, p) && in_background(layout, r);
                let shared = (1..=layout.region_count()).any(|k| in_region(layout, p, k) && in_region(layout, r, k));
                both_bg || shared
            }
            RuleSet::LatentRegionReference { region } => {
                let same_modality = matches!((q, k), (Image(_), Image(_)) | (Latent(_), Latent(_)));
                same_modality || in_region(layout, r, region)
            }
            RuleSet::Standard | RuleSet::NoTextForBackground => true,
        },

        // Region and background constraints, queries from patches.
        (Image(p) | Latent(p), Text(g)) => {
            if rules == RuleSet::NoTextForBackground && in_background(layout, p) {
                return false;
            }
            patch_text_rule(layout, p, g)
        }

        // Text queries mirror the patch-side constraints.
        (Text(g), Image(p) | Latent(p)) => patch_text_rule(layout, p, g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region_grid::ImageGeometry;

    #[test]
    fn tiny_layout_spot_checks() {
        let g = ImageGeometry::new(2, 2, 1).unwrap();
        let layout =
            TokenLayout::from_regions(g, vec![BBox::new(0, 0, 1, 1), BBox::new(1, 1, 2, 2)], vec![1, 1, 1]).unwrap();
        let (h0, h1, h2) = (0, 1, 2);
        let img = |p| layout.image_token(p);
        let lat = |p| layout.latent_token(p);
        let s = RuleSet::Standard;
        assert!(!allowed(&layout, s, h1, h2));
        assert!(allowed(&layout, s, img(0), h1));
        assert!(!allowed(&layout, s, img(1), h1));
        assert!(allowed(&layout, s, lat(3), h2));
        assert!(allowed(&layout, s, img(1), h0));
        assert!(!allowed(&layout, RuleSet::NoTextForBackground, img(1), h0));
        assert!(allowed(&layout, RuleSet::NoTextForBackground, h0, img(1)));
        assert!(!allowed(&layout, RuleSet::CutRegionBgImage, img(0), lat(1)));
        assert!(allowed(&layout, RuleSet::CutRegionBgImage, img(1), lat(2)));
        let lr = RuleSet::LatentRegionReference { region: 1 };
        assert!(allowed(&layout, lr, img(3), lat(0)));
        assert!(!allowed(&layout, lr, img(0), lat(3)));
        assert!(allowed(&layout, lr, img(0), img(3)));
    }
}
