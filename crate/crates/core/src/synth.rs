//! Procedural fashion world for desk-scale training and end-to-end checks.
//!
//! A figure is a 128x64 stick person wearing three textured garments
//! (topwear, bottomwear, shoes). Each article type has five colour families
//! (shared palette and stripe period) of four pattern variants, 20 products.
//! The pose label is painted as a colour badge in the top-left corner.

use std::collections::BTreeSet;

use image::{imageops, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{BoundingBox, GroundTruth};
use crate::embed::{build_triplets, EmbedDataset, Pair, Triplet};
use crate::keypoints::KeypointSample;
use crate::nn::seeded_rng;
use crate::pose::PoseLabel;

pub const FIGURE_WIDTH: u32 = 64;
pub const FIGURE_HEIGHT: u32 = 128;

/// (article type, broad category, product id prefix).
pub const ARTICLE_TYPES: [(&str, &str, &str); 3] = [
    ("T-shirts", "Topwear", "tee"),
    ("Jeans", "BottomWear", "jeans"),
    ("Casual shoes", "Footwear", "shoes"),
];

pub const FAMILIES: [&str; 5] = ["coral", "mint", "amber", "sky", "plum"];
pub const PATTERNS: [&str; 4] = ["hstripe", "vstripe", "check", "diagonal"];

/// Garment rectangles of an unshifted figure, `[x0, y0, x1, y1)`.
const GARMENT_RECTS: [[i32; 4]; 3] = [[18, 24, 46, 62], [20, 62, 44, 106], [19, 106, 45, 122]];

/// COCO-ordered joints of an unshifted front-facing figure. The person's
/// left side is on the image's right.
const JOINTS: [(i32, i32); 17] = [
    (32, 14),
    (35, 10),
    (29, 10),
    (40, 12),
    (24, 12),
    (42, 28),
    (22, 28),
    (47, 44),
    (17, 44),
    (49, 60),
    (15, 60),
    (37, 62),
    (27, 62),
    (37, 86),
    (27, 86),
    (37, 112),
    (27, 112),
];

const HEAD_JOINTS: std::ops::Range<usize> = 0..5;
const ANKLE_JOINTS: [usize; 2] = [15, 16];

const TYPE_COLORS: [[u8; 3]; 3] = [[196, 58, 64], [46, 68, 150], [112, 72, 38]];
const FAMILY_ACCENTS: [[u8; 3]; 5] = [[250, 150, 130], [170, 240, 170], [250, 210, 90], [185, 215, 255], [210, 150, 235]];
/// Per-family shift of the article type's base colour.
const FAMILY_TINTS: [[i32; 3]; 5] = [[30, -10, -10], [-20, 30, 0], [30, 25, -30], [-20, 0, 40], [10, -20, 30]];
const FAMILY_PERIODS: [i32; 5] = [4, 5, 6, 7, 8];
const POSE_BADGES: [[u8; 3]; 5] = [[0, 200, 0], [200, 0, 200], [0, 120, 255], [255, 140, 0], [20, 20, 20]];
const SKIN: [u8; 3] = [224, 172, 120];
const HAIR: [u8; 3] = [60, 40, 30];
const BADGE: u32 = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Garment {
    pub product_id: String,
    pub article_type: String,
    pub broad_category: String,
    /// Index into [`FAMILIES`].
    pub family: usize,
    /// Index into [`PATTERNS`].
    pub pattern: usize,
}

impl Garment {
    fn type_index(&self) -> usize {
        ARTICLE_TYPES.iter().position(|t| t.0 == self.article_type).unwrap_or(0)
    }

    fn rect(&self) -> [i32; 4] {
        GARMENT_RECTS[self.type_index()]
    }

    /// Texture colour at garment-local pixel `(u, v)`.
    pub fn texel(&self, u: i32, v: i32) -> Rgb<u8> {
        let f = self.family % FAMILIES.len();
        let p = FAMILY_PERIODS[f];
        let on = match self.pattern {
            0 => v.rem_euclid(2 * p) < p,
            1 => u.rem_euclid(2 * p) < p,
            2 => (u.div_euclid(p) + v.div_euclid(p)) % 2 == 0,
            _ => (u + v).rem_euclid(2 * p) < p,
        };
        let tc = TYPE_COLORS[self.type_index()];
        let base = [0, 1, 2].map(|c| (tc[c] as i32 + FAMILY_TINTS[f][c]).clamp(0, 255) as u8);
        Rgb(if on { FAMILY_ACCENTS[f] } else { base })
    }
}

/// The 60-product synthetic catalog, grouped by article type, family, pattern.
pub fn catalog_garments() -> Vec<Garment> {
    let mut out = Vec::with_capacity(60);
    for (t, broad, prefix) in ARTICLE_TYPES {
        for (f, fam) in FAMILIES.iter().enumerate() {
            for (p, pat) in PATTERNS.iter().enumerate() {
                out.push(Garment {
                    product_id: format!("{prefix}-{fam}-{pat}"),
                    article_type: t.to_string(),
                    broad_category: broad.to_string(),
                    family: f,
                    pattern: p,
                });
            }
        }
    }
    out
}

/// Products sharing the garment's article type and colour family.
pub fn relevance_set(garments: &[Garment], product_id: &str) -> BTreeSet<String> {
    let Some(g) = garments.iter().find(|g| g.product_id == product_id) else {
        return BTreeSet::new();
    };
    garments
        .iter()
        .filter(|o| o.article_type == g.article_type && o.family == g.family)
        .map(|o| o.product_id.clone())
        .collect()
}

/// Catalog (shop) view: the garment texture filling its own rectangle.
pub fn catalog_image(g: &Garment) -> RgbImage {
    let [x0, y0, x1, y1] = g.rect();
    RgbImage::from_fn((x1 - x0) as u32, (y1 - y0) as u32, |u, v| g.texel(u as i32, v as i32))
}

/// How the camera frames the figure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framing {
    Full,
    /// Shifted up until every head joint leaves the frame.
    HeadCut,
    /// Shifted down until both ankles leave the frame.
    AnklesCut,
    /// Close-up of the topwear.
    Detail,
}

#[derive(Clone, Debug)]
pub struct Figure {
    pub image: RgbImage,
    /// `[x, y, visible]` per COCO joint, in image pixels.
    pub keypoints: Vec<[f32; 3]>,
    pub boxes: Vec<GroundTruth>,
    pub pose: PoseLabel,
    pub framing: Framing,
    /// Some head joint and both ankles lie inside the frame.
    pub full_shot: bool,
}

impl Figure {
    pub fn keypoint_sample(&self) -> KeypointSample {
        KeypointSample {
            image: self.image.clone(),
            keypoints: self.keypoints.clone(),
        }
    }
}

fn put(img: &mut RgbImage, x: i32, y: i32, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn limb(img: &mut RgbImage, a: (i32, i32), b: (i32, i32), c: Rgb<u8>) {
    let steps = (a.0 - b.0).abs().max((a.1 - b.1).abs()).max(1);
    for s in 0..=steps {
        let x = a.0 + (b.0 - a.0) * s / steps;
        let y = a.1 + (b.1 - a.1) * s / steps;
        for dy in -1..=1 {
            for dx in -1..=1 {
                put(img, x + dx, y + dy, c);
            }
        }
    }
}

/// Draws the figure shifted by `(dx, dy)` onto a fresh canvas.
pub fn render_figure(outfit: [&Garment; 3], pose: PoseLabel, dx: i32, dy: i32, rng: &mut ChaCha8Rng) -> Figure {
    let (w, h) = (FIGURE_WIDTH, FIGURE_HEIGHT);
    let bg_shade: i32 = rng.random_range(-12..=12);
    let mut img = RgbImage::from_fn(w, h, |_, _| {
        let n: i32 = rng.random_range(-6..=6);
        Rgb([226, 228, 222].map(|c: i32| (c + bg_shade + n).clamp(0, 255) as u8))
    });
    let j = |i: usize| (JOINTS[i].0 + dx, JOINTS[i].1 + dy);
    let skin = Rgb(SKIN);
    for (a, b) in [(5, 7), (7, 9), (6, 8), (8, 10)] {
        limb(&mut img, j(a), j(b), skin);
    }
    // Neck.
    limb(&mut img, (32 + dx, 20 + dy), (32 + dx, 26 + dy), skin);
    let (hx, hy) = (32 + dx, 12 + dy);
    for y in -9..=9 {
        for x in -8..=8 {
            if x * x * 81 + y * y * 64 <= 81 * 64 {
                let hair = match pose {
                    PoseLabel::Back => true,
                    PoseLabel::Left => x < -2 || y < -5,
                    PoseLabel::Right => x > 2 || y < -5,
                    _ => y < -5,
                };
                put(&mut img, hx + x, hy + y, Rgb(if hair { HAIR } else { SKIN }));
            }
        }
    }
    let eyes: &[usize] = match pose {
        PoseLabel::Back => &[],
        PoseLabel::Left => &[1],
        PoseLabel::Right => &[2],
        _ => &[1, 2],
    };
    for &e in eyes {
        let (ex, ey) = j(e);
        put(&mut img, ex, ey, Rgb([20, 20, 30]));
        put(&mut img, ex, ey + 1, Rgb([20, 20, 30]));
    }
    let mut boxes = Vec::with_capacity(3);
    for g in outfit {
        let [x0, y0, x1, y1] = g.rect();
        for y in y0..y1 {
            for x in x0..x1 {
                put(&mut img, x + dx, y + dy, g.texel(x - x0, y - y0));
            }
        }
        let clipped = BoundingBox {
            x_min: (x0 + dx) as f64,
            y_min: (y0 + dy) as f64,
            x_max: (x1 + dx) as f64,
            y_max: (y1 + dy) as f64,
        }
        .clamp_to(w as f64, h as f64);
        if let Some(b) = clipped {
            // Keep boxes that are mostly inside the frame.
            if b.area() >= 0.5 * ((x1 - x0) * (y1 - y0)) as f64 {
                boxes.push(GroundTruth::new(b, g.article_type.clone()));
            }
        }
    }
    let badge = Rgb(POSE_BADGES[pose.index()]);
    for y in 0..BADGE {
        for x in 0..BADGE {
            img.put_pixel(x, y, badge);
        }
    }
    let keypoints: Vec<[f32; 3]> = (0..17)
        .map(|i| {
            let (x, y) = j(i);
            let vis = x >= 0 && y >= 0 && x < w as i32 && y < h as i32;
            [x as f32, y as f32, if vis { 1.0 } else { 0.0 }]
        })
        .collect();
    let head = HEAD_JOINTS.clone().any(|i| keypoints[i][2] > 0.0);
    let ankles = ANKLE_JOINTS.iter().all(|&i| keypoints[i][2] > 0.0);
    Figure {
        image: img,
        keypoints,
        boxes,
        pose,
        framing: Framing::Full,
        full_shot: head && ankles,
    }
}

/// Topwear close-up: the torso region scaled up to fill the frame.
fn detail_shot(outfit: [&Garment; 3], rng: &mut ChaCha8Rng) -> Figure {
    let base = render_figure(outfit, PoseLabel::Detailed, 0, 0, rng);
    let (cx0, cy0, cw, ch) = (14u32, 20u32, 36u32, 72u32);
    let crop = imageops::crop_imm(&base.image, cx0, cy0, cw, ch).to_image();
    let mut image = imageops::resize(&crop, FIGURE_WIDTH, FIGURE_HEIGHT, imageops::FilterType::Nearest);
    let badge = Rgb(POSE_BADGES[PoseLabel::Detailed.index()]);
    for y in 0..BADGE {
        for x in 0..BADGE {
            image.put_pixel(x, y, badge);
        }
    }
    let (sx, sy) = (FIGURE_WIDTH as f32 / cw as f32, FIGURE_HEIGHT as f32 / ch as f32);
    let keypoints = base
        .keypoints
        .iter()
        .map(|k| {
            let (x, y) = ((k[0] - cx0 as f32) * sx, (k[1] - cy0 as f32) * sy);
            let vis = x >= 0.0 && y >= 0.0 && x < FIGURE_WIDTH as f32 && y < FIGURE_HEIGHT as f32;
            [x, y, if vis { 1.0 } else { 0.0 }]
        })
        .collect();
    let boxes = base
        .boxes
        .iter()
        .filter_map(|g| {
            let b = BoundingBox {
                x_min: (g.bbox.x_min - cx0 as f64) * sx as f64,
                y_min: (g.bbox.y_min - cy0 as f64) * sy as f64,
                x_max: (g.bbox.x_max - cx0 as f64) * sx as f64,
                y_max: (g.bbox.y_max - cy0 as f64) * sy as f64,
            };
            let full = b.area();
            let c = b.clamp_to(FIGURE_WIDTH as f64, FIGURE_HEIGHT as f64)?;
            (c.area() >= 0.5 * full).then(|| GroundTruth::new(c, g.article_type.clone()))
        })
        .collect();
    Figure {
        image,
        keypoints,
        boxes,
        pose: PoseLabel::Detailed,
        framing: Framing::Detail,
        full_shot: false,
    }
}

/// Renders `outfit` with the given framing and a small random offset.
pub fn framed_figure(outfit: [&Garment; 3], pose: PoseLabel, framing: Framing, rng: &mut ChaCha8Rng) -> Figure {
    if framing == Framing::Detail {
        return detail_shot(outfit, rng);
    }
    let dx = rng.random_range(-4..=4);
    // Offsets keep every decisive joint at least a few pixels from the border.
    let dy = match framing {
        Framing::Full => rng.random_range(-6..=6),
        Framing::HeadCut => rng.random_range(-34..=-26),
        _ => rng.random_range(22..=30),
    };
    let mut f = render_figure(outfit, pose, dx, dy, rng);
    f.framing = framing;
    f
}

pub fn random_outfit<'a>(garments: &'a [Garment], rng: &mut ChaCha8Rng) -> [&'a Garment; 3] {
    let pick = |t: &str, rng: &mut ChaCha8Rng| {
        let of: Vec<&Garment> = garments.iter().filter(|g| g.article_type == t).collect();
        of[rng.random_range(0..of.len())]
    };
    [pick(ARTICLE_TYPES[0].0, rng), pick(ARTICLE_TYPES[1].0, rng), pick(ARTICLE_TYPES[2].0, rng)]
}

fn random_pose(rng: &mut ChaCha8Rng) -> PoseLabel {
    PoseLabel::from_index(rng.random_range(0..4)).unwrap_or(PoseLabel::Front)
}

/// Keypoint training and evaluation figures: half full shots, a quarter
/// each with the head or the ankles out of frame.
pub fn stick_figures(n: usize, seed: u64) -> Vec<Figure> {
    let garments = catalog_garments();
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let framing = match i % 4 {
                0 | 1 => Framing::Full,
                2 => Framing::HeadCut,
                _ => Framing::AnklesCut,
            };
            let outfit = random_outfit(&garments, &mut rng);
            let pose = random_pose(&mut rng);
            framed_figure(outfit, pose, framing, &mut rng)
        })
        .collect()
}

/// Pose classification data, balanced over the five labels.
pub fn pose_dataset(n: usize, seed: u64) -> Vec<(RgbImage, PoseLabel)> {
    let garments = catalog_garments();
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let outfit = random_outfit(&garments, &mut rng);
            let pose = PoseLabel::from_index(i % 5).unwrap_or(PoseLabel::Front);
            let framing = if pose == PoseLabel::Detailed { Framing::Detail } else { Framing::Full };
            (framed_figure(outfit, pose, framing, &mut rng).image, pose)
        })
        .collect()
}

/// Detector training data: full-shot figures in random poses.
pub fn detector_dataset(n: usize, seed: u64) -> Vec<(RgbImage, Vec<GroundTruth>)> {
    let garments = catalog_garments();
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let outfit = random_outfit(&garments, &mut rng);
            let pose = random_pose(&mut rng);
            let f = framed_figure(outfit, pose, Framing::Full, &mut rng);
            (f.image, f.boxes)
        })
        .collect()
}

/// A street-style view of `g`: the garment cut from a random full-shot
/// figure with box jitter and a brightness change.
pub fn wild_view(g: &Garment, garments: &[Garment], rng: &mut ChaCha8Rng) -> RgbImage {
    let mut outfit = random_outfit(garments, rng);
    outfit[g.type_index()] = g;
    let f = framed_figure(outfit, random_pose(rng), Framing::Full, rng);
    let b = f
        .boxes
        .iter()
        .find(|b| b.article_type == g.article_type)
        .map(|b| b.bbox)
        .unwrap_or(BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 });
    // Roughly the localisation error of the desk detector: 8% of the side.
    let (jx, jy) = ((0.08 * b.width()).max(1.0), (0.08 * b.height()).max(1.0));
    let mut j = |v: f64, r: f64| v + rng.random_range(-r..=r);
    let jittered = BoundingBox {
        x_min: j(b.x_min, jx),
        y_min: j(b.y_min, jy),
        x_max: j(b.x_max, jx),
        y_max: j(b.y_max, jy),
    };
    let c = jittered
        .clamp_to(f.image.width() as f64, f.image.height() as f64)
        .filter(|c| c.width() >= 4.0 && c.height() >= 4.0)
        .unwrap_or(b);
    let (x0, y0) = (c.x_min.floor() as u32, c.y_min.floor() as u32);
    let (x1, y1) = (c.x_max.ceil() as u32, c.y_max.ceil() as u32);
    let mut crop = imageops::crop_imm(&f.image, x0, y0, x1 - x0, y1 - y0).to_image();
    let gain: f32 = rng.random_range(0.92..1.08);
    for p in crop.pixels_mut() {
        for ch in p.0.iter_mut() {
            *ch = (*ch as f32 * gain).clamp(0.0, 255.0) as u8;
        }
    }
    crop
}

/// Cross-domain training data for one article type: every garment gets one
/// catalog view and `views_per_item` wild views, paired into triplets.
pub fn embed_dataset(article_type: &str, views_per_item: usize, seed: u64) -> EmbedDataset {
    let garments = catalog_garments();
    let mut rng = seeded_rng(seed);
    let mut images = Vec::new();
    let mut pairs = Vec::new();
    for g in garments.iter().filter(|g| g.article_type == article_type) {
        let catalog = images.len();
        images.push(catalog_image(g));
        for _ in 0..views_per_item {
            let wild = images.len();
            images.push(wild_view(g, &garments, &mut rng));
            pairs.push(Pair {
                wild,
                catalog,
                garment_id: g.product_id.clone(),
                article_type: g.article_type.clone(),
            });
        }
    }
    let triplets: Vec<Triplet<usize>> = build_triplets(&pairs, seed ^ 0x7219);
    EmbedDataset { images, triplets }
}

/// One product display page: several views of a model wearing `outfit`,
/// exactly one of which is a front-facing full shot.
#[derive(Clone, Debug)]
pub struct PdpFixture {
    pub request_id: String,
    pub views: Vec<RgbImage>,
    pub framings: Vec<Framing>,
    pub poses: Vec<PoseLabel>,
    /// Index of the front full shot in `views`.
    pub front_full: usize,
    /// Product ids of the worn topwear, bottomwear and shoes.
    pub outfit: [String; 3],
    /// The product the page sells.
    pub primary: String,
}

pub fn pdp_fixtures(n: usize, seed: u64) -> Vec<PdpFixture> {
    let garments = catalog_garments();
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let outfit = random_outfit(&garments, &mut rng);
            let side = if rng.random_bool(0.5) { PoseLabel::Left } else { PoseLabel::Right };
            let mut shots = vec![
                (PoseLabel::Front, Framing::Full),
                (PoseLabel::Back, Framing::Full),
                (side, Framing::Full),
                (PoseLabel::Detailed, Framing::Detail),
                (PoseLabel::Front, Framing::HeadCut),
            ];
            shots.shuffle(&mut rng);
            let figures: Vec<Figure> = shots.iter().map(|&(p, f)| framed_figure(outfit, p, f, &mut rng)).collect();
            PdpFixture {
                request_id: format!("pdp-{i:03}"),
                front_full: shots.iter().position(|s| *s == (PoseLabel::Front, Framing::Full)).unwrap_or(0),
                framings: shots.iter().map(|s| s.1).collect(),
                poses: shots.iter().map(|s| s.0).collect(),
                views: figures.into_iter().map(|f| f.image).collect(),
                outfit: outfit.map(|g| g.product_id.clone()),
                primary: outfit[i % 3].product_id.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_sixty_distinct_products() {
        let g = catalog_garments();
        assert_eq!(g.len(), 60);
        let ids: BTreeSet<_> = g.iter().map(|g| g.product_id.clone()).collect();
        assert_eq!(ids.len(), 60);
        for (t, ..) in ARTICLE_TYPES {
            assert_eq!(g.iter().filter(|x| x.article_type == t).count(), 20);
        }
        let images: BTreeSet<Vec<u8>> = g.iter().map(|g| catalog_image(g).into_raw()).collect();
        assert_eq!(images.len(), 60);
        assert_eq!(relevance_set(&g, "jeans-sky-check").len(), 4);
    }

    #[test]
    fn framing_controls_full_shot_flag() {
        let figs = stick_figures(40, 3);
        for f in &figs {
            assert_eq!(f.full_shot, f.framing == Framing::Full, "{:?}", f.framing);
            assert_eq!(f.image.dimensions(), (FIGURE_WIDTH, FIGURE_HEIGHT));
        }
        let full = figs.iter().find(|f| f.framing == Framing::Full).unwrap();
        assert_eq!(full.boxes.len(), 3);
    }

    #[test]
    fn planted_garment_pixels_match_catalog() {
        let g = catalog_garments();
        let mut rng = seeded_rng(1);
        let outfit = [&g[7], &g[25], &g[44]];
        let f = render_figure(outfit, PoseLabel::Front, 2, -3, &mut rng);
        let b = f.boxes[0].bbox;
        let crop = imageops::crop_imm(&f.image, b.x_min as u32, b.y_min as u32, b.width() as u32, b.height() as u32);
        let cat = catalog_image(&g[7]);
        assert_eq!(crop.to_image(), cat);
    }

    #[test]
    fn pdp_has_one_front_full_shot() {
        for p in pdp_fixtures(6, 9) {
            let hits = p
                .framings
                .iter()
                .zip(&p.poses)
                .filter(|(f, q)| **f == Framing::Full && **q == PoseLabel::Front)
                .count();
            assert_eq!(hits, 1);
            assert_eq!(p.framings[p.front_full], Framing::Full);
            assert!(p.outfit.contains(&p.primary));
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = pose_dataset(5, 4);
        let b = pose_dataset(5, 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1));
        let e = embed_dataset("Jeans", 2, 5);
        assert_eq!(e.images.len(), 60);
        assert_eq!(e.triplets.len(), 40);
    }
}
