//! Multi-scale aggregation decoder shared by teacher and student.
//!
//! Inputs are per-scale stacks of single-channel maps (attention maps for
//! the teacher, distilled maps for the student) and the query's
//! high-resolution skip features. Nothing support-derived enters here.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{init_conv, ParamStore};
use crate::tensor::Real;

pub const PREFIX: &str = "decoder.";
pub const MAPPER: &str = "decoder.mapper.";
pub const MERGE: &str = "decoder.merge.";
pub const SKIP: &str = "decoder.skip.";
pub const MIXER: &str = "decoder.mixer.";
pub const CLASSIFIER: &str = "decoder.classifier.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub mapper_width: usize,
    pub merge_width: usize,
    pub skip_width: usize,
    pub mixer_widths: [usize; 3],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { mapper_width: 64, merge_width: 64, skip_width: 32, mixer_widths: [48, 48, 32] }
    }
}

/// Channel plan of the decoder for a given backbone. Every width is derived
/// from the query path alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderShape {
    /// Maps stacked per scale (`L_j`), finest first.
    pub mapper_inputs: Vec<usize>,
    /// Input channels of the merge convolution into scale `j` (all but the coarsest).
    pub merge_inputs: Vec<usize>,
    pub skip_input: usize,
    pub mixer_input: usize,
    pub skip_factor: u32,
}

impl DecoderConfig {
    pub fn shape(&self, backbone: &BackboneConfig) -> DecoderShape {
        let scales = backbone.scales.layers_per_scale.len();
        let merge_inputs = (0..scales.saturating_sub(1))
            .map(|j| {
                let coarser = if j + 2 == scales { self.mapper_width } else { self.merge_width };
                coarser + self.mapper_width
            })
            .collect();
        let merged = if scales > 1 { self.merge_width } else { self.mapper_width };
        DecoderShape {
            mapper_inputs: backbone.scales.layers_per_scale.clone(),
            merge_inputs,
            skip_input: backbone.stem_channels,
            mixer_input: merged + self.skip_width,
            skip_factor: backbone.scales.skip_factor(),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, backbone: &BackboneConfig, rng: &mut R) -> ParamStore<T> {
        let shape = self.shape(backbone);
        let mut store = ParamStore::default();
        for (j, &l) in shape.mapper_inputs.iter().enumerate() {
            let mut ch = l;
            for k in 0..3 {
                init_conv(&mut store, rng, &format!("{MAPPER}s{j}.{k}"), self.mapper_width, ch, 3);
                ch = self.mapper_width;
            }
        }
        for (j, &cin) in shape.merge_inputs.iter().enumerate() {
            init_conv(&mut store, rng, &format!("{MERGE}s{j}"), self.merge_width, cin, 3);
        }
        init_conv(&mut store, rng, SKIP.trim_end_matches('.'), self.skip_width, shape.skip_input, 3);
        let mut ch = shape.mixer_input;
        for (k, &w) in self.mixer_widths.iter().enumerate() {
            init_conv(&mut store, rng, &format!("{MIXER}{k}"), w, ch, 3);
            ch = w;
        }
        init_conv(&mut store, rng, CLASSIFIER.trim_end_matches('.'), 1, ch, 1);
        store
    }
}

fn conv<T: Real>(tape: &Tape<T>, store: &ParamStore<T>, name: &str, x: &Var<T>, relu: bool) -> Result<Var<T>> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    let pad = w.shape()[2] / 2;
    let y = tape.conv2d(x, &w, &b, 1, pad)?;
    Ok(if relu { tape.relu(&y) } else { y })
}

/// Three conv+ReLU layers over the `L_j x H_j x W_j` stack of scale `j`.
pub fn conv_mapper<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    scale_index: usize,
    stack: &Var<T>,
) -> Result<Var<T>> {
    let expected = store.get(&format!("{MAPPER}s{scale_index}.0.weight"))?.dim(1);
    if stack.shape().len() != 3 || stack.shape()[0] != expected {
        return Err(Error::Shape(format!(
            "mapper scale {scale_index}: expected {expected} stacked maps, got {:?}",
            stack.shape()
        )));
    }
    let _ = cfg;
    let mut x = stack.clone();
    for k in 0..3 {
        x = conv(tape, store, &format!("{MAPPER}s{scale_index}.{k}"), &x, true)?;
    }
    Ok(x)
}

/// Coarse-to-fine fusion: upsample, concatenate with the next finer scale,
/// convolve. Returns features at the finest attention scale.
pub fn conv_merge<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    mapped: &[Var<T>],
    expected_scales: usize,
) -> Result<Var<T>> {
    if mapped.len() != expected_scales || mapped.is_empty() {
        return Err(Error::Shape(format!("merge expects {expected_scales} scales, got {}", mapped.len())));
    }
    let mut x = mapped[mapped.len() - 1].clone();
    for j in (0..mapped.len() - 1).rev() {
        let (h, w) = (mapped[j].shape()[1], mapped[j].shape()[2]);
        let up = tape.resize(&x, h, w)?;
        let cat = tape.concat(&[up, mapped[j].clone()])?;
        x = conv(tape, store, &format!("{MERGE}s{j}"), &cat, true)?;
    }
    Ok(x)
}

/// Skip convolution over query features, concatenation with the upsampled
/// merged features, three conv blocks, 1x1 classifier, and a final bilinear
/// upsample by the skip factor. Returns a `1 x H x W` logit map.
pub fn mixer<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    merged: &Var<T>,
    query_skip: &Var<T>,
    skip_factor: u32,
) -> Result<Var<T>> {
    let (h, w) = (query_skip.shape()[1], query_skip.shape()[2]);
    let s = conv(tape, store, SKIP.trim_end_matches('.'), query_skip, true)?;
    let up = tape.resize(merged, h, w)?;
    let mut x = tape.concat(&[up, s])?;
    for k in 0..3 {
        x = conv(tape, store, &format!("{MIXER}{k}"), &x, true)?;
    }
    let logits = conv(tape, store, CLASSIFIER.trim_end_matches('.'), &x, false)?;
    let f = skip_factor as usize;
    tape.resize(&logits, h * f, w * f)
}

/// Full decoder: `stacks` holds one `L_j x H_j x W_j` value per attention
/// scale, finest first.
pub fn decode<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    backbone: &BackboneConfig,
    stacks: &[Var<T>],
    query_skip: &Var<T>,
) -> Result<Var<T>> {
    let scales = backbone.scales.layers_per_scale.len();
    let mapped = stacks
        .iter()
        .enumerate()
        .map(|(j, s)| conv_mapper(tape, store, cfg, j, s))
        .collect::<Result<Vec<_>>>()?;
    let merged = conv_merge(tape, store, &mapped, scales)?;
    mixer(tape, store, &merged, query_skip, backbone.scales.skip_factor())
}

/// Stacks per-layer `H_j x W_j` maps into per-scale `L_j x H_j x W_j` values.
pub fn stack_by_scale<T: Real>(
    tape: &Tape<T>,
    backbone: &BackboneConfig,
    maps: &[Var<T>],
) -> Result<Vec<Var<T>>> {
    let specs = backbone.layers();
    if specs.len() != maps.len() {
        return Err(Error::Shape(format!("{} maps for {} layers", maps.len(), specs.len())));
    }
    let mut out = Vec::new();
    for j in 0..backbone.scales.layers_per_scale.len() {
        let parts = specs
            .iter()
            .zip(maps)
            .filter(|(s, _)| s.scale_index == j)
            .map(|(_, m)| {
                let (h, w) = (m.shape()[0], m.shape()[1]);
                tape.reshape(m, &[1, h, w])
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(tape.concat(&parts)?);
    }
    Ok(out)
}
