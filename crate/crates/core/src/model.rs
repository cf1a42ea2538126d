//! Architecture configuration shared by teacher and student.

use std::collections::BTreeMap;

use crate::backbone::{BackboneConfig, ScaleSpec};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config { field: key.into(), reason: "missing".into() })
}

fn parse_num<N: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<N> {
    let raw = field(map, key)?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Config { field: key.into(), reason: format!("not a number: {raw:?}") })
}

fn parse_list(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    field(map, key)?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config { field: key.into(), reason: format!("bad list entry {s:?}") })
        })
        .collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()
    }

    /// Flat `key = value` view, used for checkpoint headers and config echo.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        let d = &self.decoder;
        vec![
            ("model.base".into(), b.scales.base.to_string()),
            ("model.n_min".into(), b.scales.n_min.to_string()),
            ("model.n_max".into(), b.scales.n_max.to_string()),
            ("model.layers_per_scale".into(), list(&b.scales.layers_per_scale)),
            ("model.in_channels".into(), b.in_channels.to_string()),
            ("model.stem_channels".into(), b.stem_channels.to_string()),
            ("model.stage_channels".into(), list(&b.stage_channels)),
            ("model.mapper_width".into(), d.mapper_width.to_string()),
            ("model.merge_width".into(), d.merge_width.to_string()),
            ("model.skip_width".into(), d.skip_width.to_string()),
            ("model.mixer_widths".into(), list(&d.mixer_widths)),
        ]
    }

    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let mixer = parse_list(map, "model.mixer_widths")?;
        let mixer_widths: [usize; 3] = mixer.try_into().map_err(|_| Error::Config {
            field: "model.mixer_widths".into(),
            reason: "expected three widths".into(),
        })?;
        let cfg = Self {
            backbone: BackboneConfig {
                scales: ScaleSpec {
                    base: parse_num(map, "model.base")?,
                    n_min: parse_num(map, "model.n_min")?,
                    n_max: parse_num(map, "model.n_max")?,
                    layers_per_scale: parse_list(map, "model.layers_per_scale")?,
                },
                in_channels: parse_num(map, "model.in_channels")?,
                stem_channels: parse_num(map, "model.stem_channels")?,
                stage_channels: parse_list(map, "model.stage_channels")?,
            },
            decoder: DecoderConfig {
                mapper_width: parse_num(map, "model.mapper_width")?,
                merge_width: parse_num(map, "model.merge_width")?,
                skip_width: parse_num(map, "model.skip_width")?,
                mixer_widths,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
