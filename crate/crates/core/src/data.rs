//! Images, multiclass masks, support sets and dataset I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image, `3 x H x W`, values in `[0, 1]`.
pub type Image = Tensor<f32>;

/// Per-pixel class indices; `0` is background, `1..=num_classes` are foreground classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiClassMask {
    height: usize,
    width: usize,
    num_classes: u8,
    data: Vec<u8>,
}

impl MultiClassMask {
    pub fn new(height: usize, width: usize, num_classes: u8, data: Vec<u8>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("mask needs at least one class".into()));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask {}x{} with {} cells", height, width, data.len())));
        }
        if let Some(&v) = data.iter().find(|&&v| v > num_classes) {
            return Err(Error::InvalidArgument(format!("mask value {v} exceeds {num_classes} classes")));
        }
        Ok(Self { height, width, num_classes, data })
    }

    pub fn background(height: usize, width: usize, num_classes: u8) -> Self {
        Self { height, width, num_classes, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Foreground classes present in the mask, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.data.iter().for_each(|&v| seen[v as usize] = true);
        (1..=self.num_classes).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }
}

/// One-vs-all mask: 1 on pixels of a single class, 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor<T: crate::tensor::Real>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.height, self.width], self.data.iter().map(|&v| T::c(v as f64)).collect())
            .expect("sized")
    }
}

/// Indicator of `class_id` in `mask`.
pub fn binarize_mask(mask: &MultiClassMask, class_id: u8) -> Result<BinaryMask> {
    if class_id == 0 || class_id > mask.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} outside 1..={}",
            mask.num_classes
        )));
    }
    Ok(BinaryMask {
        height: mask.height,
        width: mask.width,
        data: mask.data.iter().map(|&v| (v == class_id) as u8).collect(),
    })
}

fn check_pair(image: &Image, mask: &MultiClassMask) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::Shape(format!(
            "image {:?} paired with {}x{} mask",
            s, mask.height, mask.width
        )));
    }
    Ok(())
}

/// The labelled adaptation corpus: `M` images with multiclass masks.
#[derive(Debug, Clone)]
pub struct SupportSet {
    entries: Vec<(Image, MultiClassMask)>,
    num_classes: u8,
}

impl SupportSet {
    pub fn new(entries: Vec<(Image, MultiClassMask)>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::InvalidArgument("empty support set".into()))?;
        let num_classes = first.1.num_classes;
        let mut covered = BTreeSet::new();
        for (img, mask) in &entries {
            if mask.num_classes != num_classes {
                return Err(Error::InvalidArgument(format!(
                    "support masks disagree on class count: {} vs {}",
                    num_classes, mask.num_classes
                )));
            }
            check_pair(img, mask)?;
            covered.extend(mask.classes_present());
        }
        let missing: Vec<u8> = (1..=num_classes).filter(|c| !covered.contains(c)).collect();
        if !missing.is_empty() {
            return Err(Error::Coverage(missing));
        }
        Ok(Self { entries, num_classes })
    }

    pub fn entries(&self) -> &[(Image, MultiClassMask)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }
}

/// A query paired with the support set it is segmented against.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub query_image: &'a Image,
    pub query_mask: Option<&'a MultiClassMask>,
    pub support: &'a SupportSet,
}

impl<'a> Episode<'a> {
    pub fn new(query_image: &'a Image, query_mask: Option<&'a MultiClassMask>, support: &'a SupportSet) -> Result<Self> {
        if let Some(m) = query_mask {
            if m.num_classes != support.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "query mask has {} classes, support {}",
                    m.num_classes, support.num_classes
                )));
            }
            check_pair(query_image, m)?;
        }
        Ok(Self { query_image, query_mask, support })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub mask: MultiClassMask,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub items: Vec<Sample>,
    pub num_classes: u8,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Writes `images/<name>.png` (RGB) and `masks/<name>.png` (8-bit index) under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("masks"))?;
        for s in &self.items {
            let (h, w) = (s.mask.height, s.mask.width);
            let plane = h * w;
            let px = s.image.data();
            let rgb: Vec<u8> = (0..plane)
                .flat_map(|i| (0..3).map(move |c| (px[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
                .collect();
            image::RgbImage::from_raw(w as u32, h as u32, rgb)
                .expect("sized")
                .save(root.join("images").join(format!("{}.png", s.name)))?;
            image::GrayImage::from_raw(w as u32, h as u32, s.mask.data.clone())
                .expect("sized")
                .save(root.join("masks").join(format!("{}.png", s.name)))?;
        }
        Ok(())
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads `root/images/*` with filename-matched `root/masks/*` index images.
pub fn load_dataset(root: &Path, num_classes: u8) -> Result<Dataset> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    if let Some((_, p)) = images.iter().find(|(k, _)| !masks.contains_key(*k)) {
        return Err(Error::MissingMask(p.clone()));
    }
    if let Some((_, p)) = masks.iter().find(|(k, _)| !images.contains_key(*k)) {
        return Err(Error::MissingImage(p.clone()));
    }
    let mut items = Vec::with_capacity(images.len());
    for (name, ipath) in &images {
        let mpath = &masks[name];
        let rgb = image::open(ipath)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p.0[c] as f32 / 255.0;
            }
        }
        let gray = image::open(mpath)?.to_luma8();
        if (gray.width() as usize, gray.height() as usize) != (w, h) {
            return Err(Error::Shape(format!(
                "{}: mask {}x{} but image {}x{}",
                mpath.display(),
                gray.height(),
                gray.width(),
                h,
                w
            )));
        }
        let raw = gray.into_raw();
        if let Some(&v) = raw.iter().find(|&&v| v > num_classes) {
            return Err(Error::MaskValue { path: mpath.clone(), value: v, num_classes });
        }
        items.push(Sample {
            name: name.clone(),
            image: Tensor::from_vec(&[3, h, w], data)?,
            mask: MultiClassMask { height: h, width: w, num_classes, data: raw },
        });
    }
    let split = if root.file_name().and_then(|s| s.to_str()) == Some("test") { Split::Test } else { Split::Train };
    Ok(Dataset { split, items, num_classes })
}

/// The seed-determined ordering from which every support-set size takes a prefix.
///
/// Items are shuffled once; then a greedy class cover (walking the shuffled
/// order) is moved to the front so small prefixes reach full coverage as
/// early as possible.
pub fn support_order(dataset: &Dataset, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut uncovered: BTreeSet<u8> = (1..=dataset.num_classes).collect();
    let mut front = Vec::new();
    for &i in &order {
        if uncovered.is_empty() {
            break;
        }
        let present = dataset.items[i].mask.classes_present();
        if present.iter().any(|c| uncovered.contains(c)) {
            present.iter().for_each(|c| {
                uncovered.remove(c);
            });
            front.push(i);
        }
    }
    let rest = order.iter().copied().filter(|i| !front.contains(i));
    front.iter().copied().chain(rest).collect()
}

/// Seeded selection of `m` items covering every class. Larger `m` with the
/// same seed always extends the smaller selection.
pub fn build_support_set(dataset: &Dataset, m: usize, seed: u64) -> Result<SupportSet> {
    if m == 0 || m > dataset.len() {
        return Err(Error::InvalidArgument(format!("support size {m} for a dataset of {}", dataset.len())));
    }
    let order = support_order(dataset, seed);
    let entries = order[..m]
        .iter()
        .map(|&i| (dataset.items[i].image.clone(), dataset.items[i].mask.clone()))
        .collect();
    SupportSet::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(name: &str, classes: &[u8], n: u8) -> Sample {
        let mut data = vec![0u8; 16];
        for (i, &c) in classes.iter().enumerate() {
            data[i] = c;
        }
        Sample {
            name: name.into(),
            image: Tensor::full(&[3, 4, 4], name.parse::<f32>().unwrap_or(-1.0)),
            mask: MultiClassMask::new(4, 4, n, data).unwrap(),
        }
    }

    #[test]
    fn binarize_edge_cases() {
        let bg = MultiClassMask::background(3, 3, 2);
        assert_eq!(binarize_mask(&bg, 1).unwrap().ones(), 0);
        let full = MultiClassMask::new(2, 2, 2, vec![2; 4]).unwrap();
        assert_eq!(binarize_mask(&full, 2).unwrap().data, vec![1; 4]);
        let mixed = MultiClassMask::new(2, 3, 2, vec![0, 1, 2, 2, 1, 2]).unwrap();
        let b = binarize_mask(&mixed, 2).unwrap();
        assert_eq!(b.data, vec![0, 0, 1, 1, 0, 1]);
        assert_eq!(b.ones(), mixed.count(2));
        assert!(binarize_mask(&mixed, 3).is_err());
        assert!(binarize_mask(&mixed, 0).is_err());
    }

    #[test]
    fn support_set_requires_coverage() {
        let a = sample("a", &[1], 3);
        let b = sample("b", &[2], 3);
        let err = SupportSet::new(vec![(a.image, a.mask), (b.image, b.mask)]).unwrap_err();
        assert!(matches!(err, Error::Coverage(ref v) if v == &vec![3]));
    }

    #[test]
    fn support_selection_is_deterministic_and_nested() {
        let items = (0..20).map(|i| sample(&format!("{i:02}"), &[1], 1)).collect();
        let ds = Dataset { split: Split::Train, items, num_classes: 1 };
        let a = build_support_set(&ds, 5, 7).unwrap();
        let b = build_support_set(&ds, 5, 7).unwrap();
        let ids = |s: &SupportSet| s.entries().iter().map(|e| e.0.data()[0]).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let ten = build_support_set(&ds, 10, 7).unwrap();
        assert_eq!(ids(&a), ids(&ten)[..5]);
    }

    #[test]
    fn support_selection_reports_uncoverable_classes() {
        let items = vec![sample("a", &[1], 3), sample("b", &[2], 3), sample("c", &[3], 3)];
        let ds = Dataset { split: Split::Train, items, num_classes: 3 };
        match build_support_set(&ds, 2, 0) {
            Err(Error::Coverage(missing)) => assert_eq!(missing.len(), 1),
            other => panic!("expected coverage error, got {other:?}"),
        }
        assert!(build_support_set(&ds, 3, 0).is_ok());
    }

    proptest! {
        #[test]
        fn binarize_then_recombine_is_identity(cells in proptest::collection::vec(0u8..4, 36)) {
            let mask = MultiClassMask::new(6, 6, 3, cells.clone()).unwrap();
            let mut rebuilt = vec![0u8; 36];
            for c in 1..=3 {
                let b = binarize_mask(&mask, c).unwrap();
                for (r, &v) in rebuilt.iter_mut().zip(&b.data) {
                    if v == 1 { *r = c; }
                }
            }
            prop_assert_eq!(rebuilt, cells);
        }

        #[test]
        fn support_prefixes_nest(seed in 0u64..1000, small in 1usize..6, extra in 0usize..6) {
            let items = (0..12).map(|i| sample(&format!("{i}"), &[1 + (i % 2) as u8], 2)).collect();
            let ds = Dataset { split: Split::Train, items, num_classes: 2 };
            let lo = build_support_set(&ds, small.max(2), seed).unwrap();
            let hi = build_support_set(&ds, small.max(2) + extra, seed).unwrap();
            for (a, b) in lo.entries().iter().zip(hi.entries()) {
                prop_assert_eq!(a.0.data()[0], b.0.data()[0]);
            }
        }
    }
}
