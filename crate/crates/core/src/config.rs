//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! Keys inside a section are flattened to `section.key`. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::training::{BaseTrainConfig, TrainConfig};

pub type ConfigMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<ConfigMap> {
    let mut out = ConfigMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            field: format!("line {}", i + 1),
            reason: format!("expected `key = value`, got {raw:?}"),
        })?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Renders pairs back to the file format, grouping by the text before the
/// first dot.
pub fn render(pairs: &ConfigMap) -> String {
    let mut out = String::new();
    for (k, v) in pairs.iter().filter(|(k, _)| !k.contains('.')) {
        out.push_str(&format!("{k} = {v}\n"));
    }
    let mut current: Option<&str> = None;
    for (k, v) in pairs {
        let Some((section, key)) = k.split_once('.') else { continue };
        if current != Some(section) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{section}]\n"));
            current = Some(section);
        }
        out.push_str(&format!("{key} = {v}\n"));
    }
    out
}

fn get<T: std::str::FromStr>(map: &ConfigMap, key: &str, field: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse().map_err(|_| Error::Config { field: field.into(), reason: format!("cannot parse {v:?}") })
        })
        .transpose()
}

/// Applies `[train]` entries on top of `base`.
pub fn train_config(map: &ConfigMap, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    if let Some(v) = get(map, "train.learning_rate", "learning_rate")? {
        c.learning_rate = v;
    }
    if let Some(v) = get(map, "train.weight_decay", "weight_decay")? {
        c.weight_decay = v;
    }
    if let Some(v) = get(map, "train.gamma", "gamma")? {
        c.gamma = v;
    }
    if let Some(v) = get(map, "train.alpha", "alpha")? {
        c.alpha = v;
    }
    if let Some(v) = get(map, "train.epochs", "epochs")? {
        c.epochs = v;
    }
    if let Some(v) = get(map, "train.patience", "patience")? {
        c.patience = v;
    }
    if let Some(v) = map.get("train.conditioning_count") {
        c.conditioning_count = if v == "auto" {
            None
        } else {
            Some(v.parse().map_err(|_| Error::Config {
                field: "conditioning_count".into(),
                reason: format!("cannot parse {v:?}"),
            })?)
        };
    }
    if let Some(v) = get(map, "train.seed", "seed")? {
        c.seed = v;
    }
    let w = LossWeights {
        distill: get(map, "train.weight_distill", "weight_distill")?.unwrap_or(c.loss_weights.distill),
        student_seg: get(map, "train.weight_student_seg", "weight_student_seg")?.unwrap_or(c.loss_weights.student_seg),
        teacher_seg: get(map, "train.weight_teacher_seg", "weight_teacher_seg")?.unwrap_or(c.loss_weights.teacher_seg),
    };
    c.loss_weights = w;
    c.validate()?;
    Ok(c)
}

/// Applies `[base]` entries on top of `base`.
pub fn base_config(map: &ConfigMap, base: BaseTrainConfig) -> Result<BaseTrainConfig> {
    let mut c = base;
    if let Some(v) = get(map, "base.steps", "steps")? {
        c.steps = v;
    }
    if let Some(v) = get(map, "base.max_shots", "max_shots")? {
        c.max_shots = v;
    }
    if let Some(v) = get(map, "base.learning_rate", "learning_rate")? {
        c.learning_rate = v;
    }
    if let Some(v) = get(map, "base.weight_decay", "weight_decay")? {
        c.weight_decay = v;
    }
    if let Some(v) = get(map, "base.gamma", "gamma")? {
        c.gamma = v;
    }
    if let Some(v) = get(map, "base.alpha", "alpha")? {
        c.alpha = v;
    }
    if let Some(v) = get(map, "base.seed", "seed")? {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_flatten_and_round_trip() {
        let text = "# run\nname = demo\n[train]\nlearning_rate = 0.002\nepochs=7\n\n[base]\nsteps = 10\n";
        let map = parse(text).unwrap();
        assert_eq!(map["train.learning_rate"], "0.002");
        assert_eq!(map["train.epochs"], "7");
        assert_eq!(map["name"], "demo");
        assert_eq!(parse(&render(&map)).unwrap(), map);
    }

    #[test]
    fn overrides_and_validation() {
        let map = parse("[train]\nepochs = 3\nconditioning_count = 2\n").unwrap();
        let c = train_config(&map, TrainConfig::default()).unwrap();
        assert_eq!((c.epochs, c.conditioning_count), (3, Some(2)));
        let bad = parse("[train]\nlearning_rate = -1\n").unwrap();
        assert!(train_config(&bad, TrainConfig::default()).unwrap_err().to_string().contains("learning_rate"));
        let bad = parse("[base]\nlearning_rate = 0\n").unwrap();
        assert!(base_config(&bad, BaseTrainConfig::default()).unwrap_err().to_string().contains("learning_rate"));
        assert!(parse("just words").is_err());
    }
}
