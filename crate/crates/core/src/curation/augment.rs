use image::{imageops, DynamicImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CurationError;
use crate::bbox::BoundingBox;
use crate::pipeline::TruthBox;

/// Clamped boxes narrower or shorter than this are dropped.
pub const MIN_CLAMPED_SIDE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Clockwise degrees, each one of 0, 90, 180, 270. Empty means `[0]`.
    #[serde(default)]
    pub rotations: Vec<u16>,
    /// Pixel offsets applied after rotation. Empty means `[(0, 0)]`.
    #[serde(default)]
    pub translations: Vec<(i64, i64)>,
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub seed: u64,
    /// Keep a seeded subset of at most this many variants.
    #[serde(default)]
    pub max_variants: Option<usize>,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            rotations: vec![0],
            translations: Vec::new(),
            horizontal_flip: false,
            seed: 0,
            max_variants: None,
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if let Some(r) = self.rotations.iter().find(|r| ![0, 90, 180, 270].contains(*r)) {
            return Err(CurationError::Validation(format!(
                "rotation {r} is not a multiple of 90 in [0, 270]"
            )));
        }
        if self.max_variants == Some(0) {
            return Err(CurationError::Validation("max_variants must be positive".into()));
        }
        Ok(())
    }

    /// Every flip × rotation × translation combination, in that nesting
    /// order, then subset by `max_variants`.
    pub fn transforms(&self) -> Result<Vec<Transform>, CurationError> {
        self.validate()?;
        let flips: &[bool] = if self.horizontal_flip { &[false, true] } else { &[false] };
        let rots = if self.rotations.is_empty() { vec![0] } else { self.rotations.clone() };
        let shifts = if self.translations.is_empty() {
            vec![(0, 0)]
        } else {
            self.translations.clone()
        };
        let mut out = Vec::new();
        for &flip in flips {
            for &r in &rots {
                for &(dx, dy) in &shifts {
                    out.push(Transform {
                        flip,
                        quarter_turns: (r / 90) as u8,
                        dx,
                        dy,
                    });
                }
            }
        }
        if let Some(n) = self.max_variants {
            if n < out.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx: Vec<usize> = (0..out.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(n);
                idx.sort_unstable();
                out = idx.into_iter().map(|i| out[i]).collect();
            }
        }
        Ok(out)
    }
}

/// Horizontal flip, then clockwise quarter turns, then a shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub flip: bool,
    pub quarter_turns: u8,
    pub dx: i64,
    pub dy: i64,
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.quarter_turns.is_multiple_of(4) && self.dx == 0 && self.dy == 0
    }

    /// Short stable name, e.g. `f1_r90_dx10_dy-5`.
    pub fn tag(&self) -> String {
        format!(
            "f{}_r{}_dx{}_dy{}",
            self.flip as u8,
            (self.quarter_turns % 4) as u16 * 90,
            self.dx,
            self.dy
        )
    }

    pub fn apply_image(&self, img: &DynamicImage) -> DynamicImage {
        if self.is_identity() {
            return img.clone();
        }
        let mut out = if self.flip { img.fliph() } else { img.clone() };
        out = match self.quarter_turns % 4 {
            1 => out.rotate90(),
            2 => out.rotate180(),
            3 => out.rotate270(),
            _ => out,
        };
        if self.dx != 0 || self.dy != 0 {
            let mut canvas = DynamicImage::new(out.width(), out.height(), out.color());
            imageops::replace(&mut canvas, &out, self.dx, self.dy);
            out = canvas;
        }
        out
    }

    /// Maps a box on a `width × height` image. Returns `None` when the box
    /// leaves the frame or is clamped below the minimum side.
    pub fn apply_box(&self, b: &BoundingBox, width: u32, height: u32) -> Option<BoundingBox> {
        let (mut w, mut h) = (width as f64, height as f64);
        let mut b = *b;
        if self.flip {
            b = BoundingBox::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max).ok()?;
        }
        for _ in 0..self.quarter_turns % 4 {
            // Clockwise: (x, y) -> (H - y, x), and the frame becomes H × W.
            b = BoundingBox::new(h - b.y_max, b.x_min, h - b.y_min, b.x_max).ok()?;
            std::mem::swap(&mut w, &mut h);
        }
        if self.dx == 0 && self.dy == 0 {
            return Some(b);
        }
        let moved = b.translated(self.dx as f64, self.dy as f64);
        let c = moved.clamped(w, h)?;
        if c != moved && (c.width() < MIN_CLAMPED_SIDE || c.height() < MIN_CLAMPED_SIDE) {
            return None;
        }
        Some(c)
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub transform: Transform,
    pub image: DynamicImage,
    pub boxes: Vec<TruthBox>,
}

/// Produces one variant per transform in `spec`, with boxes moved to match
/// the pixels.
pub fn augment(
    image: &DynamicImage,
    boxes: &[TruthBox],
    spec: &AugmentSpec,
) -> Result<Vec<Variant>, CurationError> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    if let Some(b) = boxes
        .iter()
        .find(|b| b.bbox.x_min < 0.0 || b.bbox.y_min < 0.0 || b.bbox.x_max > w || b.bbox.y_max > h)
    {
        return Err(CurationError::Validation(format!(
            "{} box {:?} lies outside the {}x{} image",
            b.label,
            b.bbox,
            image.width(),
            image.height()
        )));
    }
    Ok(spec
        .transforms()?
        .into_iter()
        .map(|t| Variant {
            transform: t,
            image: t.apply_image(image),
            boxes: boxes
                .iter()
                .filter_map(|b| {
                    t.apply_box(&b.bbox, image.width(), image.height())
                        .map(|bbox| TruthBox {
                            label: b.label.clone(),
                            bbox,
                        })
                })
                .collect(),
        })
        .collect())
}
