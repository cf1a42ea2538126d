//! Single-file checkpoint container.
//!
//! Layout: a UTF-8 header, then raw little-endian `f32` data.
//!
//! ```text
//! DISTILLFSS-CHECKPOINT 1
//! kind = student
//! num_classes = 2
//! [config]
//! model.base = 2
//! ...
//! [metrics]
//! best_miou = 0.712000
//! [blocks]
//! backbone.stem0.bias 16 0
//! backbone.stem0.weight 16,3,3,3 16
//! ...
//! [data] 123456
//! <bytes>
//! ```
//!
//! Each block line is `name shape offset`, with shape as comma-separated
//! dimensions and offset counted in `f32` elements from the start of the
//! data section. `[data]` carries the data length in bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::backbone;
use crate::decoder;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::student::{self, convdist_prefix, Student};
use crate::teacher::{self, Teacher};
use crate::tensor::Tensor;

const MAGIC: &str = "DISTILLFSS-CHECKPOINT 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Number of ConvDist class banks; 0 for teachers.
    pub num_classes: u8,
    /// Model architecture plus any run settings, as `key = value`.
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_teacher(teacher: &Teacher<f32>) -> Self {
        Self {
            kind: ModelKind::Teacher,
            num_classes: 0,
            config: teacher.config.to_pairs().into_iter().collect(),
            metrics: BTreeMap::new(),
            params: teacher.params.clone(),
        }
    }

    /// Student export: backbone, ConvDist banks and decoder only.
    pub fn from_student(student: &Student<f32>) -> Self {
        Self {
            kind: ModelKind::Student,
            num_classes: student.num_classes,
            config: student.config.to_pairs().into_iter().collect(),
            metrics: BTreeMap::new(),
            params: student.params.filtered(|n| {
                n.starts_with(backbone::PREFIX) || n.starts_with(decoder::PREFIX) || n.starts_with(student::PREFIX)
            }),
        }
    }

    pub fn with_config(mut self, pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        self.config.extend(pairs);
        self
    }

    pub fn with_metrics(mut self, pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        self.metrics.extend(pairs);
        self
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_pairs(&self.config)
    }

    fn expect_blocks(&self, want: &[String]) -> Result<()> {
        let missing: Vec<&str> =
            want.iter().filter(|n| !self.params.contains(n)).map(String::as_str).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingBlocks(missing.join(", ")))
        }
    }

    pub fn into_teacher(self) -> Result<Teacher<f32>> {
        if self.kind != ModelKind::Teacher {
            return Err(Error::Checkpoint(format!("expected a teacher checkpoint, found {}", self.kind.as_str())));
        }
        let config = self.model_config()?;
        let template: Teacher<f32> = Teacher::init(config.clone(), 0)?;
        self.expect_blocks(&template.params.names().map(String::from).collect::<Vec<_>>())?;
        Ok(Teacher { config, params: self.params })
    }

    /// Loads a student. Any checkpoint lacking the ConvDist banks fails with
    /// the names of the missing blocks.
    pub fn into_student(self) -> Result<Student<f32>> {
        let config = self.model_config()?;
        let num_classes = match self.kind {
            ModelKind::Student => self.num_classes,
            ModelKind::Teacher => self
                .config
                .get("data.num_classes")
                .and_then(|v| v.parse().ok())
                .unwrap_or(1),
        };
        if num_classes == 0 {
            return Err(Error::Checkpoint("student checkpoint with zero classes".into()));
        }
        let mut want = Vec::new();
        for c in 1..=num_classes {
            for spec in config.backbone.layers() {
                let p = convdist_prefix(c, spec.index);
                for s in ["conv3.weight", "conv3.bias", "conv1.weight", "conv1.bias"] {
                    want.push(format!("{p}.{s}"));
                }
            }
        }
        self.expect_blocks(&want)?;
        let template: Student<f32> = Student::init(config.clone(), num_classes, 0)?;
        self.expect_blocks(&template.params.names().map(String::from).collect::<Vec<_>>())?;
        let params = self.params.filtered(|n| !n.starts_with(teacher::PREFIX));
        Ok(Student { config, num_classes, params })
    }
}

fn push_pairs(h: &mut String, section: &str, map: &BTreeMap<String, String>) -> Result<()> {
    h.push_str(&format!("[{section}]\n"));
    for (k, v) in map {
        if k.contains('\n') || k.contains(" = ") || k.starts_with('[') || v.contains('\n') {
            return Err(Error::Checkpoint(format!("{section} entry {k:?} cannot be stored")));
        }
        h.push_str(&format!("{k} = {v}\n"));
    }
    Ok(())
}

fn header(ckpt: &Checkpoint) -> Result<(String, usize)> {
    let mut h = format!("{MAGIC}\nkind = {}\nnum_classes = {}\n", ckpt.kind.as_str(), ckpt.num_classes);
    push_pairs(&mut h, "config", &ckpt.config)?;
    push_pairs(&mut h, "metrics", &ckpt.metrics)?;
    h.push_str("[blocks]\n");
    let mut offset = 0usize;
    for (name, t) in ckpt.params.iter() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("block name {name:?} contains whitespace")));
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        h.push_str(&format!("{name} {} {offset}\n", shape.join(",")));
        offset += t.len();
    }
    h.push_str(&format!("[data] {}\n", offset * 4));
    Ok((h, offset))
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let (h, total) = header(ckpt)?;
    let mut out = Vec::with_capacity(h.len() + total * 4);
    out.extend_from_slice(h.as_bytes());
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes to a temporary sibling file, then renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = b"\n[data] ";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt("no data section"))?;
    let line_end = bytes[pos + 1..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| pos + 1 + i)
        .ok_or_else(|| corrupt("unterminated data marker"))?;
    let head = std::str::from_utf8(&bytes[..pos]).map_err(|_| corrupt("header is not UTF-8"))?;
    let data_len: usize = std::str::from_utf8(&bytes[pos + marker.len()..line_end])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| corrupt("bad data length"))?;
    let data = &bytes[line_end + 1..];
    if data.len() != data_len {
        return Err(corrupt(format!("data section has {} bytes, header says {data_len}", data.len())));
    }

    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("bad magic line"));
    }
    let mut kind = None;
    let mut num_classes = 0u8;
    let mut config = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    let mut params = ParamStore::default();
    let mut section = "";
    for line in lines {
        if line.starts_with('[') {
            section = match line {
                "[config]" => "config",
                "[metrics]" => "metrics",
                "[blocks]" => "blocks",
                other => return Err(corrupt(format!("unknown section {other}"))),
            };
            continue;
        }
        match section {
            "blocks" => {
                let mut parts = line.split(' ');
                let (Some(name), Some(shape), Some(offset), None) = (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(corrupt(format!("bad block line {line:?}")));
                };
                let shape: Vec<usize> = shape
                    .split(',')
                    .map(|d| d.parse().map_err(|_| corrupt(format!("bad shape in {line:?}"))))
                    .collect::<Result<_>>()?;
                let offset: usize = offset.parse().map_err(|_| corrupt(format!("bad offset in {line:?}")))?;
                let len: usize = shape.iter().product();
                let (start, end) = (offset * 4, (offset + len) * 4);
                if end > data.len() {
                    return Err(corrupt(format!("block {name} runs past the data section")));
                }
                let values = data[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                params.insert(name, Tensor::from_vec(&shape, values)?);
            }
            _ => {
                let (k, v) = line.split_once(" = ").ok_or_else(|| corrupt(format!("bad line {line:?}")))?;
                match section {
                    "config" => {
                        config.insert(k.to_string(), v.to_string());
                    }
                    "metrics" => {
                        metrics.insert(k.to_string(), v.to_string());
                    }
                    _ => match k {
                        "kind" => {
                            kind = Some(match v {
                                "teacher" => ModelKind::Teacher,
                                "student" => ModelKind::Student,
                                other => return Err(corrupt(format!("unknown kind {other}"))),
                            })
                        }
                        "num_classes" => num_classes = v.parse().map_err(|_| corrupt("bad num_classes"))?,
                        other => return Err(corrupt(format!("unknown header key {other}"))),
                    },
                }
            }
        }
    }
    Ok(Checkpoint { kind: kind.ok_or_else(|| corrupt("missing kind"))?, num_classes, config, metrics, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
