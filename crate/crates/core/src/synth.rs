//! Deterministic synthetic-shapes segmentation corpus.
//!
//! Each foreground class is one shape family (circle, rectangle, triangle)
//! with a class-specific colour band; backgrounds are textured with a
//! low-frequency wave plus pixel noise. Pixel values are quantised to 8 bits
//! so a corpus written to disk reloads bit-identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, MultiClassMask, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 3] = [[0.85, 0.30, 0.25], [0.30, 0.75, 0.35], [0.30, 0.40, 0.85]];
/// Source-domain colours, disjoint from [`PALETTE`].
const SOURCE_PALETTE: [[f32; 3]; 3] = [[0.90, 0.85, 0.25], [0.25, 0.80, 0.85], [0.80, 0.30, 0.80]];
/// Source class `k` is drawn with the shape family of target class `SOURCE_SHAPES[k - 1]`.
const SOURCE_SHAPES: [u8; 3] = [3, 1, 2];

#[derive(Debug, Clone, Copy)]
enum Domain {
    Target,
    Source,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Triangle { v: [(f32, f32); 3] },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { v } => {
                let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }

    fn random(class_id: u8, size: f32, rng: &mut ChaCha8Rng) -> Self {
        let s = size / 64.0;
        match class_id {
            1 => {
                let r = rng.gen_range(6.0..12.0) * s;
                Shape::Circle { cx: rng.gen_range(r..size - r), cy: rng.gen_range(r..size - r), r }
            }
            2 => {
                let hw = rng.gen_range(5.0..12.0) * s;
                let hh = rng.gen_range(5.0..12.0) * s;
                let cx = rng.gen_range(hw..size - hw);
                let cy = rng.gen_range(hh..size - hh);
                Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
            }
            _ => {
                let r = rng.gen_range(8.0..14.0) * s;
                let cx = rng.gen_range(r..size - r);
                let cy = rng.gen_range(r..size - r);
                let rot: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                let v = [0.0f32, 1.0, 2.0].map(|k| {
                    let a = rot + k * std::f32::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Triangle { v }
            }
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(size: usize, num_classes: u8, domain: Domain, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let plane = size * size;
    let mut img = vec![0f32; 3 * plane];
    let mut mask = vec![0u8; plane];

    let gray: f32 = rng.gen_range(0.25..0.65);
    let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let amp: f32 = rng.gen_range(0.02..0.06);
    let (fx, fy): (f32, f32) = (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25));
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let wave = amp * (fx * x as f32 + fy * y as f32 + phase).sin();
            for c in 0..3 {
                img[c * plane + y * size + x] = gray + tint[c] + wave + rng.gen_range(-0.05..0.05);
            }
        }
    }

    let count = rng.gen_range(1..=3);
    for _ in 0..count {
        let class_id = rng.gen_range(1..=num_classes);
        let k = (class_id - 1) as usize;
        let (family, base) = match domain {
            Domain::Target => (class_id, PALETTE[k]),
            Domain::Source => (SOURCE_SHAPES[k], SOURCE_PALETTE[k]),
        };
        let shape = Shape::random(family, size as f32, rng);
        let color: [f32; 3] = std::array::from_fn(|c| base[c] + rng.gen_range(-0.12..0.12));
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    mask[y * size + x] = class_id;
                    for c in 0..3 {
                        img[c * plane + y * size + x] = color[c] + rng.gen_range(-0.04..0.04);
                    }
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = quantize(*v));
    (img, mask)
}

/// Training split of the synthetic corpus.
pub fn synth_shapes(num_items: usize, image_size: usize, num_classes: u8, seed: u64) -> Result<Dataset> {
    synth_split(num_items, image_size, num_classes, seed, Split::Train)
}

/// One split of the synthetic corpus. Splits use disjoint random streams of the same seed.
pub fn synth_split(num_items: usize, image_size: usize, num_classes: u8, seed: u64, split: Split) -> Result<Dataset> {
    generate(num_items, image_size, num_classes, seed, split, Domain::Target)
}

/// Source-domain corpus for base training: three classes whose colours and
/// class-to-shape assignment differ from the target corpus.
pub fn synth_source(num_items: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    generate(num_items, image_size, 3, seed, Split::Train, Domain::Source)
}

fn generate(
    num_items: usize,
    image_size: usize,
    num_classes: u8,
    seed: u64,
    split: Split,
    domain: Domain,
) -> Result<Dataset> {
    if !(1..=3).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!("synthetic corpus supports 1 to 3 classes, got {num_classes}")));
    }
    if image_size < 32 {
        return Err(Error::InvalidArgument(format!("image size {image_size} below minimum 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let items = (0..num_items)
        .map(|i| {
            let (img, mask) = render(image_size, num_classes, domain, &mut rng);
            Ok(Sample {
                name: match domain {
                    Domain::Target => format!("{}_{i:04}", split.as_str()),
                    Domain::Source => format!("source_{i:04}"),
                },
                image: Tensor::from_vec(&[3, image_size, image_size], img)?,
                mask: MultiClassMask::new(image_size, image_size, num_classes, mask)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { split, items, num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_contract() {
        let ds = synth_shapes(40, 64, 2, 1).unwrap();
        assert_eq!(ds.len(), 40);
        let mut values: Vec<u8> = ds.items.iter().flat_map(|s| s.mask.data().to_vec()).collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values, vec![0, 1, 2]);
    }

    #[test]
    fn deterministic() {
        let a = synth_shapes(6, 64, 3, 9).unwrap();
        let b = synth_shapes(6, 64, 3, 9).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn splits_differ() {
        let a = synth_split(3, 64, 2, 4, Split::Train).unwrap();
        let b = synth_split(3, 64, 2, 4, Split::Test).unwrap();
        assert_ne!(a.items[0].image, b.items[0].image);
    }

    #[test]
    fn foreground_fraction_in_band() {
        for n in 1..=3u8 {
            let ds = synth_shapes(60, 64, n, 3).unwrap();
            for c in 1..=n {
                let frac: f64 = ds
                    .items
                    .iter()
                    .map(|s| s.mask.count(c) as f64 / (64.0 * 64.0))
                    .sum::<f64>()
                    / ds.len() as f64;
                assert!((0.02..=0.5).contains(&frac), "classes {n}, class {c}: {frac}");
            }
        }
    }

    #[test]
    fn preconditions() {
        assert!(synth_shapes(4, 16, 1, 0).is_err());
        assert!(synth_shapes(4, 64, 4, 0).is_err());
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let ds = synth_shapes(3, 64, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = crate::data::load_dataset(dir.path(), 2).unwrap();
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image, b.image);
        }
    }
}
