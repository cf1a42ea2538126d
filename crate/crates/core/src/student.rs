//! Support-free student: ConvDist heads stand in for the attention blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{sigmoid, Tape, Var};
use crate::backbone::{self, extract, MultiScaleFeatures};
use crate::data::Image;
use crate::decoder;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{init_conv, ParamStore};
use crate::teacher::{assemble_prediction, decode_maps, logits_to_map, AttentionMapSet, ForwardOutput, LayerMap, Prediction, Teacher};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "convdist.";

/// Parameter prefix of the ConvDist head replacing attention layer `layer` for `class_id`.
pub fn convdist_prefix(class_id: u8, layer: usize) -> String {
    format!("{PREFIX}c{class_id}.l{layer}")
}

/// One ConvDist head: 3x3 conv `C -> C`, ReLU, 1x1 conv `C -> 1`, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDistParams<T> {
    pub conv3_weight: Tensor<T>,
    pub conv3_bias: Tensor<T>,
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
}

impl<T: Real> ConvDistParams<T> {
    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |s: &str| Ok::<_, Error>((**store.get(&format!("{prefix}.{s}"))?).clone());
        Ok(Self {
            conv3_weight: get("conv3.weight")?,
            conv3_bias: get("conv3.bias")?,
            conv1_weight: get("conv1.weight")?,
            conv1_bias: get("conv1.bias")?,
        })
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            conv3_weight: Tensor::zeros(&[channels, channels, 3, 3]),
            conv3_bias: Tensor::zeros(&[channels]),
            conv1_weight: Tensor::zeros(&[1, channels, 1, 1]),
            conv1_bias: Tensor::zeros(&[1]),
        }
    }
}

/// ConvDist banks for every class and attention layer. The 3x3 convolution
/// starts from scaled-down He weights; the 1x1 convolution starts at zero so
/// every initial map is 0.5.
pub fn init_convdist<T: Real, R: Rng>(
    backbone: &backbone::BackboneConfig,
    num_classes: u8,
    rng: &mut R,
) -> ParamStore<T> {
    let mut store = ParamStore::default();
    for c in 1..=num_classes {
        for spec in backbone.layers() {
            let p = convdist_prefix(c, spec.index);
            init_conv(&mut store, rng, &format!("{p}.conv3"), spec.channels, spec.channels, 3);
            let w = store.get_mut(&format!("{p}.conv3.weight")).expect("just inserted");
            w.scale_assign(T::c(0.5));
            store.insert(format!("{p}.conv1.weight"), Tensor::zeros(&[1, spec.channels, 1, 1]));
            store.insert(format!("{p}.conv1.bias"), Tensor::zeros(&[1]));
        }
    }
    store
}

fn conv_dist_var<T: Real>(tape: &Tape<T>, store: &ParamStore<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let p = |s: &str| tape.param(store, &format!("{prefix}.{s}"));
    let w3 = p("conv3.weight")?;
    if w3.shape()[1] != x.shape()[0] {
        return Err(Error::Shape(format!(
            "{prefix}: input has {} channels, head expects {}",
            x.shape()[0],
            w3.shape()[1]
        )));
    }
    let h = tape.relu(&tape.conv2d(x, &w3, &p("conv3.bias")?, 1, 1)?);
    let o = tape.sigmoid(&tape.conv2d(&h, &p("conv1.weight")?, &p("conv1.bias")?, 1, 0)?);
    let s = o.shape().to_vec();
    tape.reshape(&o, &[s[1], s[2]])
}

/// Distilled `H x W` map of one `C x H x W` query feature map.
pub fn conv_dist<T: Real>(features: &Tensor<T>, params: &ConvDistParams<T>) -> Result<Tensor<T>> {
    let mut store = ParamStore::default();
    store.insert("h.conv3.weight", params.conv3_weight.clone());
    store.insert("h.conv3.bias", params.conv3_bias.clone());
    store.insert("h.conv1.weight", params.conv1_weight.clone());
    store.insert("h.conv1.bias", params.conv1_bias.clone());
    if features.shape().len() != 3 {
        return Err(Error::Shape(format!("ConvDist expects C x H x W, got {:?}", features.shape())));
    }
    let out = conv_dist_var(&Tape::inference(), &store, "h", &Var::constant(features.clone()))?;
    Ok(out.into_tensor())
}

pub(crate) struct StudentGraph<T: Real> {
    /// `[class][layer]`, each `H_j x W_j`.
    pub maps: Vec<Vec<Var<T>>>,
    pub logits: Vec<Var<T>>,
}

/// ConvDist maps and decoder logits for `classes`, from query features only.
pub(crate) fn student_graph<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    query: &MultiScaleFeatures<T>,
    classes: &[u8],
) -> Result<StudentGraph<T>> {
    let mut maps = Vec::with_capacity(classes.len());
    let mut logits = Vec::with_capacity(classes.len());
    for &c in classes {
        let m = query
            .layers
            .iter()
            .map(|l| conv_dist_var(tape, store, &convdist_prefix(c, l.spec.index), &l.map))
            .collect::<Result<Vec<_>>>()?;
        logits.push(decode_maps(tape, store, cfg, &m, &query.skip)?);
        maps.push(m);
    }
    Ok(StudentGraph { maps, logits })
}

/// Backbone, per-class ConvDist banks and the shared decoder.
#[derive(Debug, Clone)]
pub struct Student<T: Real = f32> {
    pub config: ModelConfig,
    pub num_classes: u8,
    pub params: ParamStore<T>,
}

impl<T: Real> Student<T> {
    pub fn init(config: ModelConfig, num_classes: u8, seed: u64) -> Result<Self> {
        let teacher = Teacher::init(config, seed)?;
        Self::from_teacher(&teacher, num_classes, seed)
    }

    /// Shares the teacher's backbone and decoder; adds fresh ConvDist banks.
    pub fn from_teacher(teacher: &Teacher<T>, num_classes: u8, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("a student needs at least one class".into()));
        }
        let mut params =
            teacher.params.filtered(|n| n.starts_with(backbone::PREFIX) || n.starts_with(decoder::PREFIX));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        params.extend(&init_convdist(&teacher.config.backbone, num_classes, &mut rng));
        Ok(Self { config: teacher.config.clone(), num_classes, params })
    }

    /// Copy with `n` class banks; bank `c` reuses existing bank
    /// `(c - 1) % num_classes + 1`. Used to probe cost against way count.
    pub fn with_num_classes(&self, n: u8) -> Self {
        let mut params = self.params.filtered(|name| !name.starts_with(PREFIX));
        for c in 1..=n {
            let src = (c - 1) % self.num_classes + 1;
            let from = format!("{PREFIX}c{src}.");
            let to = format!("{PREFIX}c{c}.");
            for (name, t) in self.params.iter().filter(|(name, _)| name.starts_with(&from)) {
                params.insert(name.replacen(&from, &to, 1), t.clone());
            }
        }
        Self { config: self.config.clone(), num_classes: n, params }
    }

    fn check_class(&self, class_id: u8) -> Result<()> {
        if class_id == 0 || class_id > self.num_classes {
            return Err(Error::InvalidArgument(format!("class {class_id} outside 1..={}", self.num_classes)));
        }
        Ok(())
    }

    pub fn forward(&self, query: &Image, class_id: u8) -> Result<ForwardOutput<T>> {
        self.check_class(class_id)?;
        let tape = Tape::inference();
        let feats = extract(&tape, &self.params, &self.config.backbone, &query.cast())?;
        let g = student_graph(&tape, &self.params, &self.config, &feats, &[class_id])?;
        let layers = feats
            .layers
            .iter()
            .zip(&g.maps[0])
            .map(|(l, m)| LayerMap { scale: l.spec.factor, map: m.value().clone() })
            .collect();
        Ok(ForwardOutput { maps: AttentionMapSet::new(layers), logits: logits_to_map(&g.logits[0])? })
    }

    /// One backbone pass, then one ConvDist bank and decoder pass per class.
    pub fn predict(&self, query: &Image) -> Result<Prediction<T>> {
        let classes: Vec<u8> = (1..=self.num_classes).collect();
        let tape = Tape::inference();
        let feats = extract(&tape, &self.params, &self.config.backbone, &query.cast())?;
        let g = student_graph(&tape, &self.params, &self.config, &feats, &classes)?;
        let probabilities = g
            .logits
            .iter()
            .map(|l| Ok(logits_to_map(l)?.map(sigmoid)))
            .collect::<Result<Vec<_>>>()?;
        let mask = assemble_prediction(&probabilities, self.num_classes)?;
        Ok(Prediction { probabilities, mask })
    }

    /// Runs the shared decoder on externally supplied maps in place of the
    /// ConvDist outputs.
    pub fn decode_with_maps(&self, query: &Image, maps: &AttentionMapSet<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let feats = extract(&tape, &self.params, &self.config.backbone, &query.cast())?;
        let vars: Vec<Var<T>> = maps.layers().iter().map(|l| Var::constant(l.map.clone())).collect();
        logits_to_map(&decode_maps(&tape, &self.params, &self.config, &vars, &feats.skip)?)
    }
}

pub fn student_forward<T: Real>(query: &Image, class_id: u8, student: &Student<T>) -> Result<ForwardOutput<T>> {
    student.forward(query, class_id)
}

pub fn student_multiclass_forward<T: Real>(query: &Image, student: &Student<T>) -> Result<Prediction<T>> {
    student.predict(query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Episode, SupportSet};
    use crate::synth::synth_shapes;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn conv_dist_range_shape_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[8, 5, 7], 2.0);
        let p = ConvDistParams {
            conv3_weight: random(&mut rng, &[8, 8, 3, 3], 1.0),
            conv3_bias: random(&mut rng, &[8], 1.0),
            conv1_weight: random(&mut rng, &[1, 8, 1, 1], 1.0),
            conv1_bias: random(&mut rng, &[1], 1.0),
        };
        let out = conv_dist(&x, &p).unwrap();
        assert_eq!(out.shape(), &[5, 7]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = conv_dist(&Tensor::<f64>::zeros(&[8, 5, 7]), &ConvDistParams::zeros(8)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.5));
        assert!(conv_dist(&Tensor::zeros(&[4, 5, 7]), &p).is_err());
    }

    #[test]
    fn fresh_student_maps_are_one_half() {
        let s: Student<f64> = Student::init(ModelConfig::default(), 2, 3).unwrap();
        let img = synth_shapes(1, 64, 2, 0).unwrap().items.remove(0).image;
        let out = student_forward(&img, 2, &s).unwrap();
        assert_eq!(out.maps.len(), 6);
        assert_eq!(out.logits.shape(), &[64, 64]);
        for l in out.maps.layers() {
            assert!(l.map.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn student_holds_no_attention_blocks() {
        let s: Student<f32> = Student::init(ModelConfig::default(), 2, 3).unwrap();
        assert!(s.params.names().all(|n| !n.starts_with(crate::teacher::PREFIX)));
        assert_eq!(s.params.names().filter(|n| n.starts_with(PREFIX)).count(), 2 * 6 * 4);
    }

    #[test]
    fn decoder_sharing_is_exact() {
        let ds = synth_shapes(4, 64, 2, 9).unwrap();
        let teacher: Teacher<f64> = Teacher::init(ModelConfig::default(), 4).unwrap();
        let student = Student::from_teacher(&teacher, 2, 4).unwrap();
        let support =
            SupportSet::new(ds.items[1..].iter().map(|s| (s.image.clone(), s.mask.clone())).collect()).unwrap();
        let q = &ds.items[0].image;
        let t = teacher.forward(&Episode::new(q, None, &support).unwrap(), 1).unwrap();
        let logits = student.decode_with_maps(q, &t.maps).unwrap();
        assert_eq!(logits, t.logits);
    }

    #[test]
    fn multiclass_background_when_maps_low_and_decoder_zero() {
        let mut s: Student<f64> = Student::init(ModelConfig::default(), 2, 3).unwrap();
        let names: Vec<String> = s.params.names().filter(|n| n.starts_with(decoder::PREFIX)).map(String::from).collect();
        for n in names {
            s.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let heads: Vec<String> = s.params.names().filter(|n| n.ends_with("conv1.bias")).map(String::from).collect();
        for n in heads {
            s.params.get_mut(&n).unwrap().data_mut()[0] = -3.0;
        }
        let img = synth_shapes(1, 64, 2, 0).unwrap().items.remove(0).image;
        let out = student_multiclass_forward(&img, &s).unwrap();
        for c in 1..=2u8 {
            let m = s.forward(&img, c).unwrap().maps;
            assert!(m.layers().iter().all(|l| l.map.data().iter().all(|&v| v < 0.5)));
        }
        assert!(out.mask.data().iter().all(|&v| v == 0));
    }
}
