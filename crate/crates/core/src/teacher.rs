//! Dense cross-attention teacher.
//!
//! For every attention layer the query tokens attend over the support
//! tokens of all shots; the softmax weights are applied to the downsampled
//! support mask, giving a single-channel foreground-affinity map per layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{sigmoid, Tape, Var};
use crate::backbone::{downsample_mask, extract, tokens_with_pe, BackboneConfig, MultiScaleFeatures, TokenSequence};
use crate::data::{binarize_mask, Episode, Image, MultiClassMask};
use crate::decoder;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{init_matrix, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "attn.";

pub fn wq_name(scale_index: usize) -> String {
    format!("{PREFIX}s{scale_index}.wq")
}

pub fn wk_name(scale_index: usize) -> String {
    format!("{PREFIX}s{scale_index}.wk")
}

/// Query and key projections of one scale, each `C_j x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
}

impl<T: Real> AttentionBlockParams<T> {
    pub fn d_k(&self) -> usize {
        self.wq.dim(1)
    }

    pub fn from_store(store: &ParamStore<T>, scale_index: usize) -> Result<Self> {
        Ok(Self {
            wq: (**store.get(&wq_name(scale_index))?).clone(),
            wk: (**store.get(&wk_name(scale_index))?).clone(),
        })
    }
}

const ATTENTION_INIT_GAIN: f64 = 1.0;

/// Per-scale projections with `d_k = C_j`. Both start from the same matrix,
/// so initial scores are a similarity in the projected space.
pub fn init_attention<T: Real, R: Rng>(backbone: &BackboneConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::default();
    for (j, &c) in backbone.stage_channels.iter().enumerate() {
        let std = ATTENTION_INIT_GAIN / (c as f64).sqrt();
        let w: Tensor<T> = init_matrix(rng, c, c, std);
        store.insert(wk_name(j), w.clone());
        store.insert(wq_name(j), w);
    }
    store
}

/// One attention layer's `H_j x W_j` map at downsampling factor `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap<T> {
    pub scale: u32,
    pub map: Tensor<T>,
}

/// Per-layer single-channel maps in fixed layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapSet<T> {
    layers: Vec<LayerMap<T>>,
}

impl<T: Real> AttentionMapSet<T> {
    pub fn new(layers: Vec<LayerMap<T>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerMap<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-scale stacks `(factor, L_j x H_j x W_j)` in order of first appearance.
    pub fn grouped(&self) -> Vec<(u32, Tensor<T>)> {
        let mut out: Vec<(u32, Vec<T>, usize, usize, usize)> = Vec::new();
        for l in &self.layers {
            let (h, w) = (l.map.dim(0), l.map.dim(1));
            match out.iter_mut().find(|g| g.0 == l.scale) {
                Some(g) => {
                    g.1.extend_from_slice(l.map.data());
                    g.2 += 1;
                }
                None => out.push((l.scale, l.map.data().to_vec(), 1, h, w)),
            }
        }
        out.into_iter()
            .map(|(s, data, n, h, w)| (s, Tensor::from_vec(&[n, h, w], data).expect("sized")))
            .collect()
    }

    fn from_vars(backbone: &BackboneConfig, maps: &[Var<T>]) -> Self {
        Self::new(
            backbone
                .layers()
                .iter()
                .zip(maps)
                .map(|(spec, m)| LayerMap { scale: spec.factor, map: m.value().clone() })
                .collect(),
        )
    }
}

/// `softmax(Q K^T / sqrt(d_k)) * mask` on the tape, for a multi-column mask
/// (one column per class) so the softmax is shared.
pub fn attend<T: Real>(
    tape: &Tape<T>,
    query_tokens: &Var<T>,
    support_tokens: &Var<T>,
    mask: &Var<T>,
    wq: &Var<T>,
    wk: &Var<T>,
) -> Result<Var<T>> {
    let (qs, ss) = (query_tokens.shape(), support_tokens.shape());
    if ss[0] != mask.shape()[0] {
        return Err(Error::Shape(format!(
            "support axis: {} support tokens but {} mask entries",
            ss[0],
            mask.shape()[0]
        )));
    }
    if qs[1] != wq.shape()[0] || ss[1] != wk.shape()[0] {
        return Err(Error::Shape(format!(
            "channel axis: query {} / support {} channels, projections expect {} / {}",
            qs[1],
            ss[1],
            wq.shape()[0],
            wk.shape()[0]
        )));
    }
    if wq.shape()[1] != wk.shape()[1] {
        return Err(Error::Shape(format!("key axis: d_k {} vs {}", wq.shape()[1], wk.shape()[1])));
    }
    let d_k = wq.shape()[1];
    let q = tape.matmul(query_tokens, wq, false)?;
    let k = tape.matmul(support_tokens, wk, false)?;
    let scores = tape.scale(&tape.matmul(&q, &k, true)?, T::c(1.0 / (d_k as f64).sqrt()));
    let weights = tape.softmax_rows(&scores)?;
    tape.matmul(&weights, mask, false)
}

/// Attention map of one layer: query tokens over (possibly multi-shot)
/// support tokens, weighted by a binary mask column. Returns `H_j x W_j`.
pub fn cross_attention<T: Real>(
    query: &TokenSequence<T>,
    support_tokens: &Tensor<T>,
    mask_column: &[T],
    params: &AttentionBlockParams<T>,
) -> Result<Tensor<T>> {
    if support_tokens.shape().len() != 2 {
        return Err(Error::Shape(format!("support tokens must be 2-D, got {:?}", support_tokens.shape())));
    }
    let tape = Tape::inference();
    let mask = Var::constant(Tensor::from_vec(&[mask_column.len(), 1], mask_column.to_vec())?);
    let out = attend(
        &tape,
        &Var::constant(query.tokens.clone()),
        &Var::constant(support_tokens.clone()),
        &mask,
        &Var::constant(params.wq.clone()),
        &Var::constant(params.wk.clone()),
    )?;
    out.into_tensor().reshape(&[query.height, query.width])
}

/// Concatenated keys of several shots.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportKeys<T> {
    /// `(K * N_j) x C_j`.
    pub tokens: Tensor<T>,
    pub mask: Vec<T>,
}

/// Stacks shot tokens and mask columns in support-set order.
pub fn multi_shot_keys<T: Real>(shots: &[(&TokenSequence<T>, &[T])]) -> Result<SupportKeys<T>> {
    let first = shots.first().ok_or_else(|| Error::InvalidArgument("at least one shot is required".into()))?;
    let c = first.0.channels();
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for (i, (seq, col)) in shots.iter().enumerate() {
        if seq.channels() != c || col.len() != seq.len() {
            return Err(Error::Shape(format!(
                "shot {i}: {} tokens x {} channels with {} mask entries",
                seq.len(),
                seq.channels(),
                col.len()
            )));
        }
        tokens.extend_from_slice(seq.tokens.data());
        mask.extend_from_slice(col);
    }
    Ok(SupportKeys { tokens: Tensor::from_vec(&[mask.len(), c], tokens)?, mask })
}

/// Recorded teacher outputs for a set of classes.
pub(crate) struct TeacherGraph<T: Real> {
    /// `[class][layer]`, each `H_j x W_j`.
    pub maps: Vec<Vec<Var<T>>>,
    /// Per class, `1 x H x W`.
    pub logits: Vec<Var<T>>,
}

/// Attention maps for `classes`, computing support features batch by batch
/// and averaging the per-batch outputs.
pub(crate) fn attention_graph<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    backbone: &BackboneConfig,
    query: &MultiScaleFeatures<T>,
    shots: &[(&Image, &MultiClassMask)],
    classes: &[u8],
    support_batch: Option<usize>,
) -> Result<Vec<Vec<Var<T>>>> {
    if shots.is_empty() {
        return Err(Error::SupportRequired);
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes requested".into()));
    }
    let batch = support_batch.unwrap_or(shots.len()).max(1);
    let specs = backbone.layers();
    let query_tokens = query
        .layers
        .iter()
        .map(|l| tokens_with_pe(tape, &l.map))
        .collect::<Result<Vec<_>>>()?;
    let projections = (0..backbone.stage_channels.len())
        .map(|j| Ok((tape.param(store, &wq_name(j))?, tape.param(store, &wk_name(j))?)))
        .collect::<Result<Vec<_>>>()?;

    let mut summed: Vec<Option<Var<T>>> = vec![None; specs.len()];
    let mut batches = 0usize;
    for chunk in shots.chunks(batch) {
        let binary = chunk
            .iter()
            .map(|(_, m)| classes.iter().map(|&c| binarize_mask(m, c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let feats = chunk
            .iter()
            .map(|(img, _)| extract(tape, store, backbone, &img.cast::<T>()))
            .collect::<Result<Vec<_>>>()?;
        for (i, spec) in specs.iter().enumerate() {
            let shape = query.layers[i].map.shape();
            let (h, w) = (shape[1], shape[2]);
            let keys = feats
                .iter()
                .map(|f| tokens_with_pe(tape, &f.layers[i].map))
                .collect::<Result<Vec<_>>>()?;
            let keys = tape.concat(&keys)?;
            let mut mask = vec![T::zero(); chunk.len() * h * w * classes.len()];
            for (b, per_class) in binary.iter().enumerate() {
                for (ci, bm) in per_class.iter().enumerate() {
                    for (p, v) in downsample_mask(bm, h, w).into_iter().enumerate() {
                        mask[(b * h * w + p) * classes.len() + ci] = T::c(v as f64);
                    }
                }
            }
            let mask = Var::constant(Tensor::from_vec(&[chunk.len() * h * w, classes.len()], mask)?);
            let (wq, wk) = &projections[spec.scale_index];
            let out = attend(tape, &query_tokens[i], &keys, &mask, wq, wk)?;
            summed[i] = Some(match summed[i].take() {
                Some(acc) => tape.add(&acc, &out)?,
                None => out,
            });
        }
        batches += 1;
    }

    let inv = T::c(1.0 / batches as f64);
    let averaged: Vec<Var<T>> = summed
        .into_iter()
        .map(|s| {
            let s = s.expect("at least one batch");
            if batches > 1 {
                tape.scale(&s, inv)
            } else {
                s
            }
        })
        .collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for ci in 0..classes.len() {
        let maps = averaged
            .iter()
            .zip(&query.layers)
            .map(|(a, l)| {
                let s = l.map.shape();
                tape.reshape(&tape.column(a, ci)?, &[s[1], s[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        per_class.push(maps);
    }
    Ok(per_class)
}

/// Runs the shared decoder over one class's maps.
pub(crate) fn decode_maps<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    maps: &[Var<T>],
    query_skip: &Var<T>,
) -> Result<Var<T>> {
    let stacks = decoder::stack_by_scale(tape, &cfg.backbone, maps)?;
    decoder::decode(tape, store, &cfg.decoder, &cfg.backbone, &stacks, query_skip)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn teacher_graph<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    query: &MultiScaleFeatures<T>,
    shots: &[(&Image, &MultiClassMask)],
    classes: &[u8],
    support_batch: Option<usize>,
) -> Result<TeacherGraph<T>> {
    let maps = attention_graph(tape, store, &cfg.backbone, query, shots, classes, support_batch)?;
    let logits = maps
        .iter()
        .map(|m| decode_maps(tape, store, cfg, m, &query.skip))
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherGraph { maps, logits })
}

/// Per-pixel argmax over class probabilities when the maximum exceeds 0.5,
/// background otherwise; ties go to the lowest class index.
pub fn assemble_prediction<T: Real>(probabilities: &[Tensor<T>], num_classes: u8) -> Result<MultiClassMask> {
    let first = probabilities.first().ok_or_else(|| Error::InvalidArgument("no class probabilities".into()))?;
    if probabilities.len() != num_classes as usize {
        return Err(Error::Shape(format!("{} probability maps for {num_classes} classes", probabilities.len())));
    }
    let (h, w) = (first.dim(0), first.dim(1));
    if probabilities.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Shape("class probability maps differ in shape".into()));
    }
    let half = T::c(0.5);
    let data = (0..h * w)
        .map(|i| {
            let mut best = 0u8;
            let mut best_p = half;
            for (c, p) in probabilities.iter().enumerate() {
                if p.data()[i] > best_p {
                    best = c as u8 + 1;
                    best_p = p.data()[i];
                }
            }
            best
        })
        .collect();
    MultiClassMask::new(h, w, num_classes, data)
}

/// Maps and `H x W` logits of one class.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub maps: AttentionMapSet<T>,
    pub logits: Tensor<T>,
}

/// Per-class probability maps and the assembled label map.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub probabilities: Vec<Tensor<T>>,
    pub mask: MultiClassMask,
}

pub(crate) fn logits_to_map<T: Real>(logits: &Var<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    logits.value().clone().reshape(&[s[1], s[2]])
}

/// Backbone, attention projections and decoder.
#[derive(Debug, Clone)]
pub struct Teacher<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Teacher<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = config.backbone.init(&mut rng);
        params.extend(&init_attention(&config.backbone, &mut rng));
        params.extend(&config.decoder.init(&config.backbone, &mut rng));
        Ok(Self { config, params })
    }

    fn shots<'a>(episode: &'a Episode<'_>) -> Vec<(&'a Image, &'a MultiClassMask)> {
        episode.support.entries().iter().map(|(i, m)| (i, m)).collect()
    }

    pub fn forward(&self, episode: &Episode<'_>, class_id: u8) -> Result<ForwardOutput<T>> {
        let tape = Tape::inference();
        let query = extract(&tape, &self.params, &self.config.backbone, &episode.query_image.cast())?;
        let g = teacher_graph(&tape, &self.params, &self.config, &query, &Self::shots(episode), &[class_id], None)?;
        Ok(ForwardOutput {
            maps: AttentionMapSet::from_vars(&self.config.backbone, &g.maps[0]),
            logits: logits_to_map(&g.logits[0])?,
        })
    }

    /// One-vs-all prediction over every class, with support processed in
    /// batches of `support_batch` shots.
    pub fn predict(&self, episode: &Episode<'_>, support_batch: Option<usize>) -> Result<Prediction<T>> {
        self.predict_shots(episode.query_image, &Self::shots(episode), episode.support.num_classes(), support_batch)
    }

    /// [`Teacher::predict`] over an explicit list of shots.
    pub fn predict_shots(
        &self,
        query: &Image,
        shots: &[(&Image, &MultiClassMask)],
        num_classes: u8,
        support_batch: Option<usize>,
    ) -> Result<Prediction<T>> {
        let classes: Vec<u8> = (1..=num_classes).collect();
        let tape = Tape::inference();
        let feats = extract(&tape, &self.params, &self.config.backbone, &query.cast())?;
        let maps = attention_graph(&tape, &self.params, &self.config.backbone, &feats, shots, &classes, support_batch)?;
        let probabilities = maps
            .iter()
            .map(|m| Ok(logits_to_map(&decode_maps(&tape, &self.params, &self.config, m, &feats.skip)?)?.map(sigmoid)))
            .collect::<Result<Vec<_>>>()?;
        let mask = assemble_prediction(&probabilities, num_classes)?;
        Ok(Prediction { probabilities, mask })
    }

    /// Number of scalars in the attention projections.
    pub fn attention_scalars(&self) -> usize {
        self.params.num_scalars_with_prefix(PREFIX)
    }
}

pub fn teacher_forward<T: Real>(episode: &Episode<'_>, class_id: u8, teacher: &Teacher<T>) -> Result<ForwardOutput<T>> {
    if class_id == 0 || class_id > episode.support.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} outside 1..={}",
            episode.support.num_classes()
        )));
    }
    teacher.forward(episode, class_id)
}

pub fn multiclass_forward<T: Real>(
    episode: &Episode<'_>,
    teacher: &Teacher<T>,
    support_batch: Option<usize>,
) -> Result<Prediction<T>> {
    teacher.predict(episode, support_batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SupportSet;
    use crate::synth::synth_shapes;
    use rand::SeedableRng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    /// Per-query-pixel double loop, independent of the batched path.
    fn naive(q_tok: &Tensor<f64>, s_tok: &Tensor<f64>, mask: &[f64], p: &AttentionBlockParams<f64>) -> Vec<f64> {
        let (nq, c) = (q_tok.dim(0), q_tok.dim(1));
        let ns = s_tok.dim(0);
        let dk = p.d_k();
        let proj = |tok: &Tensor<f64>, row: usize, w: &Tensor<f64>| -> Vec<f64> {
            (0..dk)
                .map(|o| (0..c).map(|i| tok.data()[row * c + i] * w.data()[i * dk + o]).sum())
                .collect()
        };
        let keys: Vec<Vec<f64>> = (0..ns).map(|r| proj(s_tok, r, &p.wk)).collect();
        (0..nq)
            .map(|r| {
                let q = proj(q_tok, r, &p.wq);
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().zip(mask).map(|(e, m)| e / z * m).sum()
            })
            .collect()
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &dk in &[4usize, 16] {
            for _ in 0..10 {
                let c = dk;
                let q = flatten_random(&mut rng, c, 8, 8);
                let s = random(&mut rng, &[64, c], 1.0);
                let mask: Vec<f64> = (0..64).map(|_| rng.gen_range(0..2) as f64).collect();
                let p = AttentionBlockParams { wq: random(&mut rng, &[c, dk], 0.5), wk: random(&mut rng, &[c, dk], 0.5) };
                let out = cross_attention(&q, &s, &mask, &p).unwrap();
                let want = naive(&q.tokens, &s, &mask, &p);
                for (a, b) in out.data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    fn flatten_random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> TokenSequence<f64> {
        crate::backbone::flatten_with_pe(&random(rng, &[c, h, w], 1.0)).unwrap()
    }

    #[test]
    fn handcrafted_two_by_two() {
        // Identity projections on d_k = 4 with one-hot tokens.
        let eye = Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let p = AttentionBlockParams { wq: eye.clone(), wk: eye };
        let q = TokenSequence {
            tokens: Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 2.0 } else { 0.0 }).collect()).unwrap(),
            height: 2,
            width: 2,
        };
        let s = q.tokens.clone();
        let mask = [1.0, 0.0, 0.0, 1.0];
        let out = cross_attention(&q, &s, &mask, &p).unwrap();
        // score 4/2 = 2 on the diagonal, 0 elsewhere
        let on = 2f64.exp() / (2f64.exp() + 3.0);
        let off = 1.0 / (2f64.exp() + 3.0);
        let want = [on + off, 2.0 * off, 2.0 * off, on + off];
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_identities_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = flatten_random(&mut rng, 8, 4, 4);
        let s = random(&mut rng, &[16, 8], 2.0);
        let p = AttentionBlockParams { wq: random(&mut rng, &[8, 8], 1.0), wk: random(&mut rng, &[8, 8], 1.0) };
        let ones = cross_attention(&q, &s, &[1.0; 16], &p).unwrap();
        assert!(ones.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let zeros = cross_attention(&q, &s, &[0.0; 16], &p).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let mixed: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let out = cross_attention(&q, &s, &mixed, &p).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mask_length_mismatch_names_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = flatten_random(&mut rng, 4, 2, 2);
        let s = random(&mut rng, &[4, 4], 1.0);
        let p = AttentionBlockParams { wq: random(&mut rng, &[4, 4], 1.0), wk: random(&mut rng, &[4, 4], 1.0) };
        let err = cross_attention(&q, &s, &[1.0; 3], &p).unwrap_err().to_string();
        assert!(err.contains("support axis"), "{err}");
    }

    #[test]
    fn multi_shot_keys_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = flatten_random(&mut rng, 4, 2, 3);
        let ma = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let one = multi_shot_keys(&[(&a, &ma[..])]).unwrap();
        assert_eq!(one.tokens, a.tokens);
        assert_eq!(one.mask, ma);
        let three = multi_shot_keys(&[(&a, &ma[..]), (&a, &ma[..]), (&a, &ma[..])]).unwrap();
        assert_eq!(three.mask.len(), 3 * 6);
        assert_eq!(three.tokens.dim(0), 18);

        let q = flatten_random(&mut rng, 4, 2, 2);
        let p = AttentionBlockParams { wq: random(&mut rng, &[4, 4], 1.0), wk: random(&mut rng, &[4, 4], 1.0) };
        let k1 = cross_attention(&q, &one.tokens, &one.mask, &p).unwrap();
        let two = multi_shot_keys(&[(&a, &ma[..]), (&a, &ma[..])]).unwrap();
        let k2 = cross_attention(&q, &two.tokens, &two.mask, &p).unwrap();
        assert!(k1.max_abs_diff(&k2) < 1e-12);
        assert!(multi_shot_keys::<f64>(&[]).is_err());
    }

    #[test]
    fn grouped_view_is_a_reshape() {
        let set = AttentionMapSet::new(vec![
            LayerMap { scale: 8, map: Tensor::full(&[2, 2], 0.1) },
            LayerMap { scale: 8, map: Tensor::full(&[2, 2], 0.2) },
            LayerMap { scale: 16, map: Tensor::full(&[1, 1], 0.3) },
        ]);
        let g = set.grouped();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].1.shape(), &[2, 2, 2]);
        assert_eq!(g[0].1.data(), &[0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2]);
        assert_eq!(g[1], (16, Tensor::full(&[1, 1, 1], 0.3)));
    }

    fn fixture() -> (Teacher<f64>, crate::data::Dataset) {
        let ds = synth_shapes(6, 64, 2, 3).unwrap();
        (Teacher::init(ModelConfig::default(), 1).unwrap(), ds)
    }

    #[test]
    fn forward_shapes_and_permutation_invariance() {
        let (t, ds) = fixture();
        let entries: Vec<_> = ds.items[1..5].iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
        let support = SupportSet::new(entries.clone()).unwrap();
        let mut rev = entries;
        rev.reverse();
        let support_rev = SupportSet::new(rev).unwrap();
        let q = &ds.items[0];
        let a = teacher_forward(&Episode::new(&q.image, None, &support).unwrap(), 1, &t).unwrap();
        let b = teacher_forward(&Episode::new(&q.image, None, &support_rev).unwrap(), 1, &t).unwrap();
        assert_eq!(a.logits.shape(), &[64, 64]);
        assert_eq!(a.maps.len(), 6);
        for (x, y) in a.maps.layers().iter().zip(b.maps.layers()) {
            assert!(x.map.max_abs_diff(&y.map) < 1e-6);
            assert!(x.map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_support_mask_gives_zero_maps() {
        let (t, ds) = fixture();
        let empty = MultiClassMask::background(64, 64, 2);
        let shots = [(&ds.items[1].image, &empty), (&ds.items[2].image, &empty)];
        let tape = Tape::inference();
        let query = extract(&tape, &t.params, &t.config.backbone, &ds.items[0].image.cast()).unwrap();
        let g = teacher_graph(&tape, &t.params, &t.config, &query, &shots, &[2], None).unwrap();
        for m in &g.maps[0] {
            assert!(m.value().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(g.logits[0].shape(), &[1, 64, 64]);
    }

    #[test]
    fn batched_identical_batches_match_unbatched() {
        let (t, ds) = fixture();
        let s = &ds.items[1];
        let shots = vec![(&s.image, &s.mask); 4];
        let tape = Tape::inference();
        let query = extract(&tape, &t.params, &t.config.backbone, &ds.items[0].image.cast()).unwrap();
        let full = attention_graph(&tape, &t.params, &t.config.backbone, &query, &shots, &[1, 2], None).unwrap();
        let batched = attention_graph(&tape, &t.params, &t.config.backbone, &query, &shots, &[1, 2], Some(2)).unwrap();
        for (a, b) in full.iter().flatten().zip(batched.iter().flatten()) {
            assert!(a.value().max_abs_diff(b.value()) < 1e-6);
        }
    }

    #[test]
    fn attention_flops_linear_in_shots() {
        let (t, ds) = fixture();
        let s = &ds.items[1];
        let tape = Tape::inference();
        let query = extract(&tape, &t.params, &t.config.backbone, &ds.items[0].image.cast()).unwrap();
        let ks = [1usize, 2, 4, 8];
        let flops: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let shots = vec![(&s.image, &s.mask); k];
                let (_, f) = crate::flops::measure(|| {
                    attention_graph(&tape, &t.params, &t.config.backbone, &query, &shots, &[1], None).unwrap()
                });
                f as f64
            })
            .collect();
        let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
        assert!(crate::stats::r_squared(&xs, &flops) > 0.99);
        assert!(flops.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn assembly_policy() {
        let p = |v: &[f64]| Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap();
        let one = assemble_prediction(&[p(&[0.2, 0.5, 0.51])], 1).unwrap();
        assert_eq!(one.data(), &[0, 0, 1]);
        let two = assemble_prediction(&[p(&[0.7, 0.4, 0.6]), p(&[0.7, 0.3, 0.9])], 2).unwrap();
        assert_eq!(two.data(), &[1, 0, 2]);
    }
}
