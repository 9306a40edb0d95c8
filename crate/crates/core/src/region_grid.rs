//! Pixel boxes to patch-grid token groups.
//!
//! The unified sequence is laid out as `text ‖ image ‖ latent`. Text is split
//! into one contiguous group per hint (`h0` first). Image and latent segments
//! both hold one token per grid patch in row-major order and share the same
//! per-patch region membership.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::plan_format::{BBox, EditPlan, ImageSize};

/// Region ids are stored as bits of a `u64`, so a layout carries at most this
/// many regions.
pub const MAX_REGIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("patch size must be at least 1")]
    ZeroPatch,
    #[error("image size must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("bbox {bbox} is degenerate or exceeds the {width}x{height} image")]
    BboxOutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("perturbed bbox collapsed to zero area: {0}")]
    DegenerateBox(BBox),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("expected {expected} text group sizes (one per hint), got {actual}")]
    TextGroupCount { expected: usize, actual: usize },
    #[error("text group {0} has zero tokens")]
    EmptyTextGroup(usize),
    #[error("{0} regions exceed the supported maximum of {MAX_REGIONS}")]
    TooManyRegions(usize),
    #[error("segment offsets {actual:?} do not match layout {expected:?}")]
    Offsets { expected: SegmentOffsets, actual: SegmentOffsets },
    #[error("membership does not match the region boxes at patch {0}")]
    Membership(usize),
    #[error("malformed layout document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
}

impl ImageGeometry {
    pub fn new(width: u32, height: u32, patch_size: u32) -> Result<Self, GeometryError> {
        let g = Self { width, height, patch_size };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<(), GeometryError> {
        if self.patch_size == 0 {
            return Err(GeometryError::ZeroPatch);
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::EmptyImage { width: self.width, height: self.height });
        }
        Ok(())
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }

    /// Grid rows `M`.
    pub fn rows(&self) -> usize {
        self.height.div_ceil(self.patch_size) as usize
    }

    /// Grid columns `N`.
    pub fn cols(&self) -> usize {
        self.width.div_ceil(self.patch_size) as usize
    }

    pub fn patch_count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Pixel rectangle covered by patch `(row, col)`; edge patches are cropped
    /// to the image.
    pub fn patch_rect(&self, row: usize, col: usize) -> BBox {
        let p = self.patch_size;
        let (r, c) = (row as u32, col as u32);
        BBox::new(c * p, r * p, ((c + 1) * p).min(self.width), ((r + 1) * p).min(self.height))
    }
}

/// Set of region ids `1..=64` a patch belongs to. Empty means background.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionSet(u64);

impl RegionSet {
    pub const EMPTY: RegionSet = RegionSet(0);

    pub fn from_bits(bits: u64) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    /// Panics when `id` is outside `1..=MAX_REGIONS`.
    pub fn insert(&mut self, id: usize) {
        assert!((1..=MAX_REGIONS).contains(&id), "region id {id} out of range");
        self.0 |= 1 << (id - 1);
    }

    pub fn contains(self, id: usize) -> bool {
        (1..=MAX_REGIONS).contains(&id) && self.0 & (1 << (id - 1)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn intersects(self, other: RegionSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (1..=MAX_REGIONS).filter(move |&k| self.contains(k))
    }
}

impl FromIterator<usize> for RegionSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = RegionSet::EMPTY;
        for k in iter {
            s.insert(k);
        }
        s
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.iter().map(|k| k.to_string()).collect();
        write!(f, "{{{}}}", ids.join(","))
    }
}

/// Start indices of the three segments of the unified sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOffsets {
    pub text: usize,
    pub image: usize,
    pub latent: usize,
    pub total: usize,
}

/// Role of a single token in the unified sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Token of text group `g` (`0` is the global hint).
    Text(usize),
    /// Image token at row-major patch index.
    Image(usize),
    /// Latent token at row-major patch index.
    Latent(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    geometry: ImageGeometry,
    regions: Vec<BBox>,
    text_group_sizes: Vec<usize>,
    membership: Vec<RegionSet>,
    offsets: SegmentOffsets,
}

/// Every patch whose pixel rectangle overlaps `bbox` with positive area.
pub fn map_bbox_to_patches(bbox: BBox, geom: &ImageGeometry) -> Result<BTreeSet<(usize, usize)>, GeometryError> {
    geom.check()?;
    if !bbox.fits(geom.size()) {
        return Err(GeometryError::BboxOutOfBounds { bbox, width: geom.width, height: geom.height });
    }
    let p = geom.patch_size;
    // Half-open box: the last covered pixel is x2 - 1.
    let rows = (bbox.y1 / p) as usize..=((bbox.y2 - 1) / p) as usize;
    let cols = (bbox.x1 / p) as usize..=((bbox.x2 - 1) / p) as usize;
    Ok(rows.flat_map(|i| cols.clone().map(move |j| (i, j))).collect())
}

pub fn build_layout(
    plan: &EditPlan,
    geom: ImageGeometry,
    text_group_sizes: &[usize],
) -> Result<TokenLayout, LayoutError> {
    let boxes: Vec<BBox> = plan.regions.iter().map(|r| r.bbox).collect();
    TokenLayout::from_regions(geom, boxes, text_group_sizes.to_vec())
}

impl TokenLayout {
    pub fn from_regions(
        geometry: ImageGeometry,
        regions: Vec<BBox>,
        text_group_sizes: Vec<usize>,
    ) -> Result<Self, LayoutError> {
        geometry.check()?;
        if regions.len() > MAX_REGIONS {
            return Err(LayoutError::TooManyRegions(regions.len()));
        }
        if text_group_sizes.len() != regions.len() + 1 {
            return Err(LayoutError::TextGroupCount { expected: regions.len() + 1, actual: text_group_sizes.len() });
        }
        if let Some(g) = text_group_sizes.iter().position(|&n| n == 0) {
            return Err(LayoutError::EmptyTextGroup(g));
        }

        let cols = geometry.cols();
        let mut membership = vec![RegionSet::EMPTY; geometry.patch_count()];
        for (k, bbox) in regions.iter().enumerate() {
            for (i, j) in map_bbox_to_patches(*bbox, &geometry)? {
                membership[i * cols + j].insert(k + 1);
            }
        }

        let text_len: usize = text_group_sizes.iter().sum();
        let patches = geometry.patch_count();
        let offsets =
            SegmentOffsets { text: 0, image: text_len, latent: text_len + patches, total: text_len + 2 * patches };
        Ok(Self { geometry, regions, text_group_sizes, membership, offsets })
    }

    pub fn geometry(&self) -> &ImageGeometry {
        &self.geometry
    }

    pub fn regions(&self) -> &[BBox] {
        &self.regions
    }

    /// Number of regions `K`.
    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn text_group_sizes(&self) -> &[usize] {
        &self.text_group_sizes
    }

    pub fn offsets(&self) -> SegmentOffsets {
        self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.total
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.total == 0
    }

    pub fn patch_count(&self) -> usize {
        self.membership.len()
    }

    /// Index range of text group `g` in the unified sequence.
    pub fn text_group(&self, g: usize) -> Range<usize> {
        let start = self.offsets.text + self.text_group_sizes[..g].iter().sum::<usize>();
        start..start + self.text_group_sizes[g]
    }

    pub fn image_token(&self, patch: usize) -> usize {
        self.offsets.image + patch
    }

    pub fn latent_token(&self, patch: usize) -> usize {
        self.offsets.latent + patch
    }

    pub fn patch_index(&self, row: usize, col: usize) -> usize {
        row * self.geometry.cols() + col
    }

    /// Region membership of an image patch (row-major index).
    pub fn image_membership(&self, patch: usize) -> RegionSet {
        self.membership[patch]
    }

    /// Region membership of a latent patch. Latent tokens share the image grid.
    pub fn latent_membership(&self, patch: usize) -> RegionSet {
        self.membership[patch]
    }

    pub fn memberships(&self) -> &[RegionSet] {
        &self.membership
    }

    /// Patches covered by region `k` (1-based), `G^img_k`.
    pub fn region_patches(&self, k: usize) -> Vec<usize> {
        (0..self.membership.len()).filter(|&p| self.membership[p].contains(k)).collect()
    }

    /// Patches covered by no region, `G^img_bg`.
    pub fn background(&self) -> Vec<usize> {
        (0..self.membership.len()).filter(|&p| self.membership[p].is_empty()).collect()
    }

    pub fn classify(&self, token: usize) -> TokenKind {
        let o = self.offsets;
        assert!(token < o.total, "token {token} out of range for layout of {}", o.total);
        if token >= o.latent {
            TokenKind::Latent(token - o.latent)
        } else if token >= o.image {
            TokenKind::Image(token - o.image)
        } else {
            let mut end = o.text;
            for (g, &n) in self.text_group_sizes.iter().enumerate() {
                end += n;
                if token < end {
                    return TokenKind::Text(g);
                }
            }
            unreachable!("text offsets cover the text segment")
        }
    }

    /// Checks segment arithmetic and that membership agrees with the boxes.
    pub fn check(&self) -> Result<(), LayoutError> {
        let rebuilt = Self::from_regions(self.geometry, self.regions.clone(), self.text_group_sizes.clone())?;
        if rebuilt.offsets != self.offsets {
            return Err(LayoutError::Offsets { expected: rebuilt.offsets, actual: self.offsets });
        }
        if let Some(p) = (0..self.membership.len()).find(|&p| rebuilt.membership.get(p) != self.membership.get(p)) {
            return Err(LayoutError::Membership(p));
        }
        if rebuilt.membership.len() != self.membership.len() {
            return Err(LayoutError::Membership(self.membership.len().min(rebuilt.membership.len())));
        }
        Ok(())
    }

    /// JSON document form: geometry, region boxes, text group sizes,
    /// run-length encoded membership rows and segment offsets.
    pub fn to_document(&self) -> LayoutDocument {
        let cols = self.geometry.cols();
        let membership_rows = self
            .membership
            .chunks(cols)
            .map(|row| {
                let mut runs: Vec<MembershipRun> = Vec::new();
                for &set in row {
                    match runs.last_mut() {
                        Some(run) if run.regions == set.iter().collect::<Vec<_>>() => run.count += 1,
                        _ => runs.push(MembershipRun { count: 1, regions: set.iter().collect() }),
                    }
                }
                runs
            })
            .collect();
        LayoutDocument {
            geometry: self.geometry,
            regions: self.regions.clone(),
            text_group_sizes: self.text_group_sizes.clone(),
            membership_rows,
            offsets: self.offsets,
        }
    }

    pub fn from_document(doc: LayoutDocument) -> Result<Self, LayoutError> {
        let geometry = doc.geometry;
        geometry.check()?;
        if doc.membership_rows.len() != geometry.rows() {
            return Err(LayoutError::Document(format!(
                "{} membership rows for a grid of {} rows",
                doc.membership_rows.len(),
                geometry.rows()
            )));
        }
        let mut membership = Vec::with_capacity(geometry.patch_count());
        for (i, row) in doc.membership_rows.iter().enumerate() {
            let mut n = 0;
            for run in row {
                if run.regions.iter().any(|&k| k == 0 || k > MAX_REGIONS) {
                    return Err(LayoutError::Document(format!("row {i}: region id out of range")));
                }
                let set: RegionSet = run.regions.iter().copied().collect();
                membership.extend(std::iter::repeat_n(set, run.count));
                n += run.count;
            }
            if n != geometry.cols() {
                return Err(LayoutError::Document(format!("row {i} covers {n} of {} columns", geometry.cols())));
            }
        }
        let layout = Self {
            geometry,
            regions: doc.regions,
            text_group_sizes: doc.text_group_sizes,
            membership,
            offsets: doc.offsets,
        };
        layout.check()?;
        Ok(layout)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("layout document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        let doc: LayoutDocument = serde_json::from_str(text).map_err(|e| LayoutError::Document(e.to_string()))?;
        Self::from_document(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipRun {
    pub count: usize,
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub geometry: ImageGeometry,
    pub regions: Vec<BBox>,
    pub text_group_sizes: Vec<usize>,
    pub membership_rows: Vec<Vec<MembershipRun>>,
    pub offsets: SegmentOffsets,
}

/// Shifts every corner coordinate by `ratio` times the box width (x) or
/// height (y) in an independently drawn direction, then reorders corners and
/// clamps to the image. Offsets are truncated toward zero so no coordinate
/// moves further than the stated bound.
pub fn perturb_bbox(bbox: BBox, ratio: f64, geom: &ImageGeometry, seed: u64) -> Result<BBox, GeometryError> {
    assert!(ratio >= 0.0 && ratio.is_finite(), "perturbation ratio must be finite and non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = ratio * f64::from(bbox.width());
    let dy = ratio * f64::from(bbox.height());
    let mut shift = |v: u32, mag: f64| -> i64 {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        i64::from(v) + (sign * mag).trunc() as i64
    };
    let x1 = shift(bbox.x1, dx);
    let y1 = shift(bbox.y1, dy);
    let x2 = shift(bbox.x2, dx);
    let y2 = shift(bbox.y2, dy);

    let clamp = |v: i64, max: u32| v.clamp(0, i64::from(max)) as u32;
    let out = BBox::new(
        clamp(x1.min(x2), geom.width),
        clamp(y1.min(y2), geom.height),
        clamp(x1.max(x2), geom.width),
        clamp(y1.max(y2), geom.height),
    );
    if out.is_degenerate() {
        return Err(GeometryError::DegenerateBox(out));
    }
    Ok(out)
}
