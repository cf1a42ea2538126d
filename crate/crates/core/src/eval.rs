//! Metrics, fixed-support evaluation, and the inference benchmark harness.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plotters::prelude::*;

use crate::data::{Dataset, Image, MultiClassMask, Split, SupportSet};
use crate::error::{Error, Result};
use crate::flops;
use crate::memory;
use crate::stats::median;
use crate::student::Student;
use crate::synth::synth_split;
use crate::teacher::Teacher;

/// Pixel counts per class and the derived IoU values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    classes: Vec<u8>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Metrics {
    pub fn new(classes: &[u8]) -> Self {
        let n = classes.len();
        Self { classes: classes.to_vec(), tp: vec![0; n], fp: vec![0; n], fn_: vec![0; n] }
    }

    pub fn for_classes(num_classes: u8) -> Self {
        Self::new(&(1..=num_classes).collect::<Vec<_>>())
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    /// Adds the pixel counts of one prediction/target pair.
    pub fn accumulate(&mut self, prediction: &MultiClassMask, target: &MultiClassMask) -> Result<()> {
        if prediction.height() != target.height() || prediction.width() != target.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs target {}x{}",
                prediction.height(),
                prediction.width(),
                target.height(),
                target.width()
            )));
        }
        for (&p, &t) in prediction.data().iter().zip(target.data()) {
            for (i, &c) in self.classes.iter().enumerate() {
                match (p == c, t == c) {
                    (true, true) => self.tp[i] += 1,
                    (true, false) => self.fp[i] += 1,
                    (false, true) => self.fn_[i] += 1,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// `(TP, FP, FN)` of `class_id`.
    pub fn counts(&self, class_id: u8) -> Option<(u64, u64, u64)> {
        let i = self.classes.iter().position(|&c| c == class_id)?;
        Some((self.tp[i], self.fp[i], self.fn_[i]))
    }

    /// IoU of `class_id`, `None` when its union is empty.
    pub fn iou(&self, class_id: u8) -> Option<f64> {
        let (tp, fp, fn_) = self.counts(class_id)?;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Classes left out of the mean because their union is empty.
    pub fn excluded(&self) -> Vec<u8> {
        self.classes.iter().copied().filter(|&c| self.iou(c).is_none()).collect()
    }

    /// Mean IoU over classes with a non-empty union; 0 when there are none.
    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.classes.iter().filter_map(|&c| self.iou(c)).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

pub fn miou(prediction: &MultiClassMask, target: &MultiClassMask, classes: &[u8]) -> Result<Metrics> {
    let mut m = Metrics::new(classes);
    m.accumulate(prediction, target)?;
    Ok(m)
}

/// A model under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    Teacher(&'a Teacher<f32>),
    Student(&'a Student<f32>),
}

impl Model<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Model::Teacher(_) => "teacher",
            Model::Student(_) => "student",
        }
    }
}

/// Segments every test item and accumulates counts globally over the split.
/// Teachers need `support`; students refuse it.
pub fn evaluate(model: Model<'_>, test: &Dataset, support: Option<&SupportSet>, support_batch: usize) -> Result<Metrics> {
    let mut metrics = Metrics::for_classes(test.num_classes);
    match model {
        Model::Teacher(t) => {
            let support = support.ok_or(Error::SupportRequired)?;
            if support.num_classes() != test.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "support has {} classes, test split {}",
                    support.num_classes(),
                    test.num_classes
                )));
            }
            let shots: Vec<(&Image, &MultiClassMask)> = support.entries().iter().map(|(i, m)| (i, m)).collect();
            for item in &test.items {
                let p = t.predict_shots(&item.image, &shots, test.num_classes, Some(support_batch))?;
                metrics.accumulate(&p.mask, &item.mask)?;
            }
        }
        Model::Student(s) => {
            if support.is_some() {
                return Err(Error::SupportNotAllowed);
            }
            if s.num_classes != test.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "student has {} class heads, test split {} classes",
                    s.num_classes, test.num_classes
                )));
            }
            for item in &test.items {
                let p = s.predict(&item.image)?;
                metrics.accumulate(&p.mask, &item.mask)?;
            }
        }
    }
    Ok(metrics)
}

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub model: String,
    pub k: usize,
    pub n: u8,
    pub image_size: usize,
    pub latency_ms_median: f64,
    pub peak_bytes: usize,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub shots: Vec<usize>,
    pub ways: Vec<u8>,
    pub image_size: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub support_batch: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 5, 10, 25, 50],
            ways: vec![1],
            image_size: 64,
            repeats: 20,
            warmups: 3,
            support_batch: Some(10),
            seed: 0,
        }
    }
}

type Run<'a> = Box<dyn FnMut() -> Result<()> + 'a>;

/// Times every run round-robin, so slow drift in machine speed is shared by
/// all shot counts instead of landing on whichever one ran last.
fn time_interleaved(cfg: &BenchConfig, runs: &mut [Run<'_>]) -> Result<Vec<(f64, usize, u64)>> {
    for run in runs.iter_mut() {
        for _ in 0..cfg.warmups {
            run()?;
        }
    }
    let mut times = vec![Vec::with_capacity(cfg.repeats); runs.len()];
    let count = runs.len();
    for round in 0..cfg.repeats {
        // Rotate the starting point so no run always follows the same neighbour.
        for i in (0..count).map(|i| (i + round) % count) {
            let t0 = Instant::now();
            runs[i]()?;
            times[i].push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut out = Vec::with_capacity(runs.len());
    for (run, t) in runs.iter_mut().zip(&times) {
        let (r, peak) = memory::measure_peak(&mut *run);
        r?;
        let (r, f) = flops::measure(&mut *run);
        r?;
        out.push((median(t), peak, f));
    }
    Ok(out)
}

/// Median latency, peak heap growth and FLOPs of one inference per `(K, N)`
/// pair. The support set for each pair holds `K * N` synthetic images.
pub fn bench_inference(model: Model<'_>, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repeats < 20 || cfg.warmups < 3 {
        return Err(Error::InvalidArgument("benchmarks need at least 20 repeats and 3 warmups".into()));
    }
    let max_k = cfg.shots.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    for &n in &cfg.ways {
        let pool = synth_split(max_k * n as usize, cfg.image_size, n, cfg.seed, Split::Train)?;
        let query = synth_split(1, cfg.image_size, n, cfg.seed, Split::Test)?.items.remove(0).image;
        let student = match model {
            Model::Student(s) => Some(s.with_num_classes(n)),
            Model::Teacher(_) => None,
        };
        let shot_sets: Vec<Vec<(&Image, &MultiClassMask)>> = cfg
            .shots
            .iter()
            .map(|&k| pool.items[..k * n as usize].iter().map(|s| (&s.image, &s.mask)).collect())
            .collect();
        let query = &query;
        let mut runs: Vec<Run<'_>> = shot_sets
            .iter()
            .map(|shots| -> Run<'_> {
                match model {
                    Model::Teacher(t) => {
                        Box::new(move || t.predict_shots(query, shots, n, cfg.support_batch).map(drop))
                    }
                    Model::Student(_) => {
                        let s = student.as_ref().expect("student variant");
                        Box::new(move || s.predict(query).map(drop))
                    }
                }
            })
            .collect();
        let measured = time_interleaved(cfg, &mut runs)?;
        for (&k, (latency, peak, fl)) in cfg.shots.iter().zip(measured) {
            out.push(BenchRecord {
                model: model.tag().to_string(),
                k,
                n,
                image_size: cfg.image_size,
                latency_ms_median: latency,
                peak_bytes: peak,
                flops: fl,
            });
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "model,K,N,image_size,latency_ms_median,peak_bytes,flops";

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{:.4},{},{}\n",
            r.model, r.k, r.n, r.image_size, r.latency_ms_median, r.peak_bytes, r.flops
        ));
    }
    s
}

/// Test mIoU of a model adapted with `m` support images.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouPoint {
    pub model: String,
    pub m: usize,
    pub miou: f64,
}

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

/// Line plot without text: one series per label, axes drawn as the frame.
fn line_plot(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let y1 = y1 * 1.05;
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(30)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(&e))?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, y1), (x0, y0), (x1, y0)], BLACK.stroke_width(2))))
        .map_err(|e| plot_err(&e))?;
    for (i, (_, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(p.iter().map(|&xy| Circle::new(xy, 4, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

fn series_by(records: &[BenchRecord], value: impl Fn(&BenchRecord) -> f64) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in records {
        let label = format!("{} N={}", r.model, r.n);
        let point = (r.k as f64, value(r));
        match out.iter_mut().find(|(l, _)| *l == label) {
            Some((_, p)) => p.push(point),
            None => out.push((label, vec![point])),
        }
    }
    out
}

/// Writes `bench.csv` (always), latency and memory plots when there are
/// records, and `miou.csv` plus its plot when there are mIoU points.
/// Returns the written paths.
pub fn emit_report(records: &[BenchRecord], miou_points: &[MiouPoint], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let csv = out_dir.join("bench.csv");
    fs::File::create(&csv)?.write_all(records_to_csv(records).as_bytes())?;
    written.push(csv);
    if !records.is_empty() {
        let p = out_dir.join("latency_vs_k.png");
        line_plot(&p, &series_by(records, |r| r.latency_ms_median))?;
        written.push(p);
        let p = out_dir.join("memory_vs_k.png");
        line_plot(&p, &series_by(records, |r| r.peak_bytes as f64 / (1024.0 * 1024.0)))?;
        written.push(p);
    }
    if !miou_points.is_empty() {
        let mut s = String::from("model,M,miou\n");
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for p in miou_points {
            s.push_str(&format!("{},{},{:.6}\n", p.model, p.m, p.miou));
            match series.iter_mut().find(|(l, _)| *l == p.model) {
                Some((_, v)) => v.push((p.m as f64, p.miou)),
                None => series.push((p.model.clone(), vec![(p.m as f64, p.miou)])),
            }
        }
        let csv = out_dir.join("miou.csv");
        fs::write(&csv, s)?;
        written.push(csv);
        let p = out_dir.join("miou_vs_m.png");
        line_plot(&p, &series)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[u8], n: u8) -> MultiClassMask {
        MultiClassMask::new(1, v.len(), n, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_disjoint() {
        let a = mask(&[0, 1, 2, 2], 2);
        assert_eq!(miou(&a, &a, &[1, 2]).unwrap().miou(), 1.0);
        let p = mask(&[1, 1, 0, 0], 1);
        let t = mask(&[0, 0, 1, 1], 1);
        assert_eq!(miou(&p, &t, &[1]).unwrap().iou(1), Some(0.0));
    }

    #[test]
    fn hand_counted_third() {
        let t = mask(&[1, 1, 0, 0], 1);
        let p = mask(&[1, 0, 1, 0], 1);
        let m = miou(&p, &t, &[1]).unwrap();
        assert_eq!(m.counts(1), Some((1, 1, 1)));
        assert!((m.iou(1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_and_excludes_empty_union() {
        let a = mask(&[1, 1, 0, 2], 3);
        let b = mask(&[1, 0, 2, 2], 3);
        let ab = miou(&a, &b, &[1, 2, 3]).unwrap();
        let ba = miou(&b, &a, &[1, 2, 3]).unwrap();
        for c in 1..=3 {
            assert_eq!(ab.iou(c), ba.iou(c));
        }
        assert_eq!(ab.excluded(), vec![3]);
        assert!((ab.miou() - (0.5 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(miou(&mask(&[0, 1], 1), &mask(&[0, 1, 1], 1), &[1]).is_err());
    }

    #[test]
    fn accumulation_is_global_not_per_image() {
        // Image A: 8 foreground pixels, all found. Image B: 2 foreground pixels, none found.
        let ta = mask(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0], 1);
        let tb = mask(&[1, 1, 0, 0, 0, 0, 0, 0, 0, 0], 1);
        let pb = mask(&[0; 10], 1);
        let mut m = Metrics::for_classes(1);
        m.accumulate(&ta, &ta).unwrap();
        m.accumulate(&pb, &tb).unwrap();
        // Global: TP 8, FN 2 -> 0.8. Per-image average would be (1 + 0) / 2 = 0.5.
        assert!((m.miou() - 0.8).abs() < 1e-15);
    }

    fn record(model: &str, k: usize) -> BenchRecord {
        BenchRecord {
            model: model.into(),
            k,
            n: 1,
            image_size: 64,
            latency_ms_median: 1.5 * k as f64,
            peak_bytes: 1000 * k,
            flops: 10 * k as u64,
        }
    }

    #[test]
    fn report_contract() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = ["teacher", "student"]
            .iter()
            .flat_map(|m| [1, 5, 10, 25].map(|k| record(m, k)))
            .collect();
        let files = emit_report(&records, &[], dir.path()).unwrap();
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "png").count(), 2);
        let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        emit_report(&records, &[], dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("bench.csv")).unwrap(), csv);

        let empty = tempfile::tempdir().unwrap();
        let files = emit_report(&[], &[], empty.path()).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(fs::read_to_string(&files[0]).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(emit_report(&[record("student", 1)], &[], &file.join("sub")).is_err());
    }
}
