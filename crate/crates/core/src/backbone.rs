//! Shared multi-scale feature extractor and token flattening.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::params::{init_conv, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "backbone.";

/// Pyramid geometry: scales `1/s^n` for `n` in `n_min..=n_max`. The finest
/// scale `1/s^n_min` only feeds the decoder skip path; every coarser scale
/// carries `layers_per_scale[n - n_min - 1]` attention layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSpec {
    pub base: usize,
    pub n_min: u32,
    pub n_max: u32,
    pub layers_per_scale: Vec<usize>,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self { base: 2, n_min: 2, n_max: 5, layers_per_scale: vec![2, 2, 2] }
    }
}

impl ScaleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base < 2 {
            return Err(Error::InvalidArgument(format!("scale base {} must be at least 2", self.base)));
        }
        if self.n_min >= self.n_max {
            return Err(Error::InvalidArgument(format!("n_min {} must be below n_max {}", self.n_min, self.n_max)));
        }
        if self.layers_per_scale.len() != (self.n_max - self.n_min) as usize {
            return Err(Error::InvalidArgument(format!(
                "{} layer counts for {} attention scales",
                self.layers_per_scale.len(),
                self.n_max - self.n_min
            )));
        }
        if self.layers_per_scale.contains(&0) {
            return Err(Error::InvalidArgument("every attention scale needs at least one layer".into()));
        }
        Ok(())
    }

    /// Downsampling factor `s^n`.
    pub fn factor(&self, n: u32) -> u32 {
        (self.base as u32).pow(n)
    }

    pub fn skip_factor(&self) -> u32 {
        self.factor(self.n_min)
    }

    /// Downsampling factors of the attention scales, finest first.
    pub fn attention_factors(&self) -> Vec<u32> {
        (self.n_min + 1..=self.n_max).map(|n| self.factor(n)).collect()
    }

    /// Required divisor of input height and width.
    pub fn input_multiple(&self) -> usize {
        self.factor(self.n_max) as usize
    }

    pub fn num_layers(&self) -> usize {
        self.layers_per_scale.iter().sum()
    }
}

/// Toy convolutional extractor: `n_min` stride-`s` stem convolutions down to
/// the skip scale, then per attention scale one stride-`s` convolution
/// followed by stride-1 convolutions, each emitting an attention layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub scales: ScaleSpec,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Feature width per attention scale, finest first.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { scales: ScaleSpec::default(), in_channels: 3, stem_channels: 16, stage_channels: vec![32, 48, 64] }
    }
}

/// Static description of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    /// Position of the layer's scale among the attention scales, finest first.
    pub scale_index: usize,
    pub factor: u32,
    pub channels: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        if self.stage_channels.len() != self.scales.layers_per_scale.len() {
            return Err(Error::InvalidArgument(format!(
                "{} stage widths for {} attention scales",
                self.stage_channels.len(),
                self.scales.layers_per_scale.len()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for (j, (&count, &ch)) in self.scales.layers_per_scale.iter().zip(&self.stage_channels).enumerate() {
            let factor = self.scales.factor(self.scales.n_min + 1 + j as u32);
            for _ in 0..count {
                out.push(LayerSpec { index: out.len(), scale_index: j, factor, channels: ch });
            }
        }
        out
    }

    fn stem_name(i: usize) -> String {
        format!("{PREFIX}stem{i}")
    }

    fn layer_name(j: usize, l: usize) -> String {
        format!("{PREFIX}s{j}.{l}")
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::default();
        let mut ch = self.in_channels;
        for i in 0..self.scales.n_min as usize {
            init_conv(&mut store, rng, &Self::stem_name(i), self.stem_channels, ch, 3);
            ch = self.stem_channels;
        }
        for (j, (&count, &width)) in self.scales.layers_per_scale.iter().zip(&self.stage_channels).enumerate() {
            for l in 0..count {
                init_conv(&mut store, rng, &Self::layer_name(j, l), width, ch, 3);
                ch = width;
            }
        }
        store
    }
}

/// One attention-layer feature map.
#[derive(Clone, Debug)]
pub struct FeatureLayer<T: Real> {
    pub spec: LayerSpec,
    /// `C_j x H_j x W_j`.
    pub map: Var<T>,
}

#[derive(Clone, Debug)]
pub struct MultiScaleFeatures<T: Real> {
    pub layers: Vec<FeatureLayer<T>>,
    /// High-resolution features at the skip scale, `C x H/s^n_min x W/s^n_min`.
    pub skip: Var<T>,
}

fn conv_relu<T: Real>(tape: &Tape<T>, store: &ParamStore<T>, name: &str, x: &Var<T>, stride: usize) -> Result<Var<T>> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    Ok(tape.relu(&tape.conv2d(x, &w, &b, stride, 1)?))
}

/// Runs the extractor on a `C x H x W` image recorded on `tape`.
pub fn extract<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    image: &Tensor<T>,
) -> Result<MultiScaleFeatures<T>> {
    let s = image.shape();
    let multiple = cfg.scales.input_multiple();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(Error::Shape(format!("backbone expects {} x H x W, got {:?}", cfg.in_channels, s)));
    }
    if !s[1].is_multiple_of(multiple) || !s[2].is_multiple_of(multiple) {
        return Err(Error::InvalidArgument(format!(
            "image size {}x{} must be a multiple of {multiple}",
            s[1], s[2]
        )));
    }
    let mut x = Var::constant(image.clone());
    for i in 0..cfg.scales.n_min as usize {
        x = conv_relu(tape, store, &BackboneConfig::stem_name(i), &x, cfg.scales.base)?;
    }
    let skip = x.clone();
    let specs = cfg.layers();
    let mut layers = Vec::with_capacity(specs.len());
    let mut spec_iter = specs.into_iter();
    for (j, &count) in cfg.scales.layers_per_scale.iter().enumerate() {
        for l in 0..count {
            let stride = if l == 0 { cfg.scales.base } else { 1 };
            x = tape.channel_norm(&conv_relu(tape, store, &BackboneConfig::layer_name(j, l), &x, stride)?)?;
            layers.push(FeatureLayer { spec: spec_iter.next().expect("layer spec"), map: x.clone() });
        }
    }
    Ok(MultiScaleFeatures { layers, skip })
}

/// Inference-mode feature extraction.
pub fn extract_features<T: Real>(
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    image: &Tensor<T>,
) -> Result<MultiScaleFeatures<T>> {
    extract(&Tape::inference(), store, cfg, image)
}

/// Fixed 2-D sinusoidal encoding, `(H*W) x C`, row-major positions. The first
/// half of the channels encodes the row, the second half the column.
pub fn positional_encoding<T: Real>(height: usize, width: usize, channels: usize) -> Tensor<T> {
    let half_y = channels.div_ceil(2);
    let half_x = channels - half_y;
    let mut pe = vec![T::zero(); height * width * channels];
    let enc = |pos: usize, k: usize, dim: usize| -> f64 {
        let i = (k / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / dim.max(1) as f64);
        let a = pos as f64 * freq;
        if k.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    };
    for y in 0..height {
        for x in 0..width {
            let row = &mut pe[(y * width + x) * channels..(y * width + x + 1) * channels];
            let (ys, xs) = row.split_at_mut(half_y);
            for (k, v) in ys.iter_mut().enumerate() {
                *v = T::c(enc(y, k, half_y));
            }
            for (k, v) in xs[..half_x].iter_mut().enumerate() {
                *v = T::c(enc(x, k, half_x));
            }
        }
    }
    Tensor::from_vec(&[height * width, channels], pe).expect("sized")
}

/// Flattened, position-encoded feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `N x C`, `N = height * width`, row-major over positions.
    pub tokens: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.dim(1)
    }

    /// Removes the positional encoding and restores `C x H x W`.
    pub fn unflatten(&self) -> Tensor<T> {
        let (n, c) = (self.len(), self.channels());
        let pe = positional_encoding::<T>(self.height, self.width, c);
        let mut out = vec![T::zero(); c * n];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = self.tokens.data()[p * c + ch] - pe.data()[p * c + ch];
            }
        }
        Tensor::from_vec(&[c, self.height, self.width], out).expect("sized")
    }
}

/// Row-major flatten of a `C x H x W` map to `N x C` tokens plus positional encoding.
pub fn flatten_with_pe<T: Real>(map: &Tensor<T>) -> Result<TokenSequence<T>> {
    let tape = Tape::inference();
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("flatten expects C x H x W, got {:?}", s)));
    }
    let tokens = tokens_with_pe(&tape, &Var::constant(map.clone()))?;
    Ok(TokenSequence { tokens: tokens.into_tensor(), height: s[1], width: s[2] })
}

/// Tape form of [`flatten_with_pe`].
pub fn tokens_with_pe<T: Real>(tape: &Tape<T>, map: &Var<T>) -> Result<Var<T>> {
    let s = map.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = tape.transpose(&tape.reshape(map, &[c, h * w])?)?;
    tape.add(&flat, &Var::constant(positional_encoding(h, w, c)))
}

/// Nearest-neighbour (cell-centre) resampling of a binary mask to `height x width`,
/// returned as a row-major column.
pub fn downsample_mask(mask: &BinaryMask, height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = ((2 * y + 1) * mask.height) / (2 * height);
        for x in 0..width {
            let sx = ((2 * x + 1) * mask.width) / (2 * width);
            out.push(mask.data[sy.min(mask.height - 1) * mask.width + sx.min(mask.width - 1)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(cfg: &BackboneConfig) -> ParamStore<f64> {
        cfg.init(&mut ChaCha8Rng::seed_from_u64(1))
    }

    fn image(size: usize) -> Tensor<f64> {
        let n = 3 * size * size;
        Tensor::from_vec(&[3, size, size], (0..n).map(|i| ((i * 7919) % 255) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn scale_arithmetic_for_64_pixels() {
        let cfg = BackboneConfig::default();
        let f = extract_features(&params(&cfg), &cfg, &image(64)).unwrap();
        assert_eq!(f.skip.shape(), &[16, 16, 16]);
        let sizes: Vec<usize> = f.layers.iter().map(|l| l.map.shape()[1]).collect();
        assert_eq!(sizes, vec![8, 8, 4, 4, 2, 2]);
        for l in &f.layers {
            assert_eq!(64 / l.spec.factor as usize, l.map.shape()[1]);
            assert_eq!(l.spec.channels, l.map.shape()[0]);
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let cfg = BackboneConfig::default();
        let err = extract_features(&params(&cfg), &cfg, &image(48)).unwrap_err();
        assert!(err.to_string().contains("multiple of 32"), "{err}");
    }

    #[test]
    fn deterministic_and_shape_shared() {
        let cfg = BackboneConfig::default();
        let p = params(&cfg);
        let a = extract_features(&p, &cfg, &image(64)).unwrap();
        let b = extract_features(&p, &cfg, &image(64)).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x.map.value(), y.map.value());
        }
        let other = extract_features(&p, &cfg, &Tensor::full(&[3, 64, 64], 0.1)).unwrap();
        for (x, y) in a.layers.iter().zip(&other.layers) {
            assert_eq!(x.map.shape(), y.map.shape());
        }
    }

    /// Per-channel constant propagated through conv + relu layers for a
    /// spatially uniform input (replicate padding keeps it uniform).
    fn uniform_oracle(p: &ParamStore<f64>, name: &str, input: &[f64]) -> Vec<f64> {
        let w = p.get(&format!("{name}.weight")).unwrap();
        let b = p.get(&format!("{name}.bias")).unwrap();
        let (o, c, k) = (w.dim(0), w.dim(1), w.dim(2));
        (0..o)
            .map(|oc| {
                let mut acc = b.data()[oc];
                for (ic, &v) in input.iter().enumerate().take(c) {
                    let taps = &w.data()[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                    acc += taps.iter().sum::<f64>() * v;
                }
                acc.max(0.0)
            })
            .collect()
    }

    #[test]
    fn zero_image_gives_bias_propagated_constants() {
        let cfg = BackboneConfig::default();
        let mut p = params(&cfg);
        let names: Vec<String> = p.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
        for (i, name) in names.iter().enumerate() {
            p.get_mut(name).unwrap().data_mut().iter_mut().enumerate().for_each(|(k, b)| {
                *b = 0.05 * ((i + k) % 5) as f64 - 0.05;
            });
        }
        let f = extract_features(&p, &cfg, &Tensor::zeros(&[3, 64, 64])).unwrap();
        let mut v = vec![0.0; 3];
        v = uniform_oracle(&p, "backbone.stem0", &v);
        v = uniform_oracle(&p, "backbone.stem1", &v);
        let mut expected = Vec::new();
        for j in 0..3 {
            for l in 0..2 {
                v = uniform_oracle(&p, &format!("backbone.s{j}.{l}"), &v);
                let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64 + crate::autograd::CHANNEL_NORM_EPS).sqrt();
                v.iter_mut().for_each(|x| *x /= rms);
                expected.push(v.clone());
            }
        }
        for (layer, exp) in f.layers.iter().zip(&expected) {
            let (c, h, w) = (layer.map.shape()[0], layer.map.shape()[1], layer.map.shape()[2]);
            for (plane, &e) in layer.map.value().data().chunks(h * w).zip(exp).take(c) {
                assert!(plane.iter().all(|&x| (x - e).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn parameter_budget() {
        let cfg = BackboneConfig::default();
        assert!(params(&cfg).num_scalars() < 1_000_000);
    }

    #[test]
    fn flatten_zero_map_is_pe() {
        let t = flatten_with_pe(&Tensor::<f64>::zeros(&[4, 2, 3])).unwrap();
        assert_eq!(t.tokens, positional_encoding(2, 3, 4));
    }

    #[test]
    fn flatten_round_trip() {
        let map = image(8).reshape(&[3, 8, 8]).unwrap();
        let t = flatten_with_pe(&map).unwrap();
        let back = t.unflatten();
        assert!(back.max_abs_diff(&map) < 1e-12);
    }

    #[test]
    fn pe_distinguishes_positions() {
        let pe = positional_encoding::<f64>(4, 4, 8);
        for a in 0..16 {
            for b in 0..a {
                let ra = &pe.data()[a * 8..(a + 1) * 8];
                let rb = &pe.data()[b * 8..(b + 1) * 8];
                assert!(ra.iter().zip(rb).any(|(x, y)| (x - y).abs() > 1e-6), "positions {a} and {b}");
            }
        }
    }

    #[test]
    fn mask_downsampling() {
        let ones = BinaryMask { height: 8, width: 8, data: vec![1; 64] };
        assert_eq!(downsample_mask(&ones, 2, 2), vec![1; 4]);
        let zeros = BinaryMask { height: 8, width: 8, data: vec![0; 64] };
        assert_eq!(downsample_mask(&zeros, 4, 4), vec![0; 16]);
        let mut block = vec![0u8; 16];
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            block[y * 4 + x] = 1;
        }
        let m = BinaryMask { height: 4, width: 4, data: block };
        assert_eq!(downsample_mask(&m, 2, 2), vec![1, 0, 0, 0]);
    }
}
