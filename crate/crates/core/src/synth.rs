//! Seeded synthetic camera-trap frames with known box geometry.

use std::io::Cursor;

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;

use crate::bbox::BoundingBox;
use crate::ingest::Modality;
use crate::pipeline::TruthBox;

fn label_color(label: &str) -> [u8; 3] {
    let h = crate::ingest::sha256_hex(label.as_bytes());
    let b = hex::decode(&h[..6]).expect("hex digest");
    // Keep markers bright so they stand out from the dim background.
    [b[0] | 0x80, b[1] | 0x80, b[2] | 0x80]
}

/// Places up to `count` square boxes of side `side` in distinct grid cells so
/// that no two boxes overlap. Labels are drawn from `labels`.
pub fn scatter_boxes<R: Rng>(
    rng: &mut R,
    width: u32,
    height: u32,
    side: f64,
    count: usize,
    labels: &[String],
) -> Vec<TruthBox> {
    let cell = (side * 1.5).ceil() as u32;
    let (cols, rows) = (width / cell.max(1), height / cell.max(1));
    let mut cells: Vec<(u32, u32)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (c, r))).collect();
    let mut out = Vec::new();
    for _ in 0..count.min(cells.len()) {
        let (c, r) = cells.swap_remove(rng.gen_range(0..cells.len()));
        let slack = cell as f64 - side;
        let x = (c * cell) as f64 + rng.gen_range(0.0..=slack).floor();
        let y = (r * cell) as f64 + rng.gen_range(0.0..=slack).floor();
        out.push(TruthBox {
            label: labels[rng.gen_range(0..labels.len())].clone(),
            bbox: BoundingBox::new(x, y, x + side, y + side).expect("positive side"),
        });
    }
    out
}

/// Renders a frame with each truth box filled in a label-specific colour.
/// `salt` is written into the first row so distinct salts give distinct bytes.
pub fn render_scene(
    width: u32,
    height: u32,
    boxes: &[TruthBox],
    modality: Modality,
    salt: u64,
) -> DynamicImage {
    let tint = (salt % 31) as u8;
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        Rgb([
            (x * 64 / width.max(1)) as u8 + tint,
            (y * 64 / height.max(1)) as u8,
            32 + tint,
        ])
    });
    for t in boxes {
        let c = label_color(&t.label);
        let b = &t.bbox;
        for y in b.y_min.max(0.0) as u32..(b.y_max.min(height as f64)) as u32 {
            for x in b.x_min.max(0.0) as u32..(b.x_max.min(width as f64)) as u32 {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
    for (i, byte) in salt.to_le_bytes().iter().enumerate() {
        if (i as u32) < width {
            img.put_pixel(i as u32, 0, Rgb([*byte, *byte, *byte]));
        }
    }
    match modality {
        Modality::Visual => DynamicImage::ImageRgb8(img),
        Modality::Thermal => {
            let gray = GrayImage::from_fn(width, height, |x, y| {
                let p = img.get_pixel(x, y).0;
                Luma([((p[0] as u16 + p[1] as u16 + p[2] as u16) / 3) as u8])
            });
            DynamicImage::ImageLuma8(gray)
        }
    }
}

pub fn encode_png(img: &DynamicImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encoding to memory");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scattered_boxes_are_disjoint_and_inside() {
        let labels = vec!["a".to_string(), "b".to_string()];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes = scatter_boxes(&mut rng, 640, 480, 100.0, 5, &labels);
            assert_eq!(boxes.len(), 5);
            for (i, a) in boxes.iter().enumerate() {
                assert!(a.bbox.x_max <= 640.0 && a.bbox.y_max <= 480.0);
                for b in &boxes[i + 1..] {
                    assert_eq!(a.bbox.intersection_area(&b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn salts_change_bytes() {
        let a = encode_png(&render_scene(32, 16, &[], Modality::Visual, 1));
        let b = encode_png(&render_scene(32, 16, &[], Modality::Visual, 2));
        assert_ne!(a, b);
        let t = render_scene(32, 16, &[], Modality::Thermal, 1);
        assert_eq!(t.color().channel_count(), 1);
    }
}
