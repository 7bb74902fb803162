//! Structured-text config files: `key = value` lines grouped into `[section]`
//! blocks, `#` comments. Model configs round-trip through this format so a
//! training run can save its resolved config for later analysis.

use std::collections::BTreeMap;

use evt_core::decay::DecayKind;
use evt_core::model::{MixerKind, StageConfig, StemConfig, VariantConfig};

#[derive(Debug, Default, Clone)]
pub struct Section {
    map: BTreeMap<String, String>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("{key}: bad integer {v:?}")),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("{key}: bad number {v:?}")),
        }
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split([' ', ','])
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| format!("{key}: bad list entry {s:?}"))
                })
                .collect::<Result<Vec<usize>, String>>()
                .map(Some),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    pub top: Section,
    pub sections: Vec<(String, Section)>,
}

impl ConfigFile {
    pub fn first(&self, name: &str) -> Option<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    pub fn all(&self, name: &str) -> Vec<&Section> {
        self.sections
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, s)| s)
            .collect()
    }
}

pub fn parse_config(text: &str) -> Result<ConfigFile, String> {
    let mut file = ConfigFile::default();
    let mut current: Option<(String, Section)> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| format!("line {}: unterminated section", lineno + 1))?
                .trim()
                .to_string();
            if let Some(done) = current.take() {
                file.sections.push(done);
            }
            current = Some((name, Section::default()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
        let entry = (key.trim().to_string(), value.trim().to_string());
        match &mut current {
            Some((_, section)) => {
                section.map.insert(entry.0, entry.1);
            }
            None => {
                file.top.map.insert(entry.0, entry.1);
            }
        }
    }
    if let Some(done) = current.take() {
        file.sections.push(done);
    }
    Ok(file)
}

pub fn parse_decay_kind(token: &str, p: Option<f64>) -> Result<DecayKind, String> {
    let (name, inline_p) = match token.split_once(':') {
        Some((n, pv)) => {
            let parsed: f64 = pv.parse().map_err(|_| format!("bad minkowski p {pv:?}"))?;
            (n, Some(parsed))
        }
        None => (token, None),
    };
    let p = inline_p.or(p);
    match name {
        "euclidean" => Ok(DecayKind::Euclidean),
        "manhattan" => Ok(DecayKind::Manhattan),
        "minkowski" => Ok(DecayKind::Minkowski(p.ok_or("minkowski needs --p")?)),
        "gaussian-rbf" => Ok(DecayKind::GaussianRbf),
        "multiquadric-rbf" => Ok(DecayKind::MultiquadricRbf),
        "inverse-multiquadric-rbf" => Ok(DecayKind::InverseMultiquadricRbf),
        "none" => Ok(DecayKind::None),
        other => Err(format!("unknown decay kind {other:?}")),
    }
}

pub fn decay_kind_token(kind: DecayKind) -> String {
    match kind {
        DecayKind::Minkowski(p) => format!("minkowski:{p}"),
        other => other.name().to_string(),
    }
}

/// Build a model config from a parsed file.
pub fn model_from_config(file: &ConfigFile) -> Result<VariantConfig, String> {
    let top = &file.top;
    let decay_token = top.get("decay").unwrap_or("euclidean");
    let decay_kind = parse_decay_kind(decay_token, top.get_f64("minkowski_p")?)?;
    let stem_section = file.first("stem").ok_or("missing [stem] section")?;
    let stem = StemConfig {
        channels: stem_section
            .get_usize_list("channels")?
            .ok_or("stem needs channels")?,
        strides: stem_section
            .get_usize_list("strides")?
            .unwrap_or_else(|| vec![2, 1, 1, 2]),
    };
    let mut stages = Vec::new();
    for (i, section) in file.all("stage").into_iter().enumerate() {
        let mixer = match section.get("mixer").unwrap_or("grouped") {
            "grouped" => MixerKind::GroupedAlternating,
            "full" => MixerKind::Full,
            other => return Err(format!("stage {i}: unknown mixer {other:?}")),
        };
        stages.push(StageConfig {
            embed_dim: section.get_usize("dim")?.ok_or("stage needs dim")?,
            depth: section.get_usize("depth")?.unwrap_or(1),
            heads: section.get_usize("heads")?.unwrap_or(1),
            group_size: section.get_usize("k")?.unwrap_or(49),
            ffn_ratio: section.get_usize("ffn_ratio")?.unwrap_or(3),
            mixer,
        });
    }
    if stages.is_empty() {
        return Err("config needs at least one [stage] section".into());
    }
    let cfg = VariantConfig {
        name: top.get("name").unwrap_or("custom").to_string(),
        stem,
        stages,
        decay_kind,
        rbf_scale: top.get_f64("rbf_scale")?.unwrap_or(1.0),
        gamma_base_exponent: top.get_usize("gamma_base")?.unwrap_or(3) as i32,
        head_expansion: top
            .get_usize("head_expansion")?
            .ok_or("missing head_expansion")?,
        num_classes: top.get_usize("classes")?.ok_or("missing classes")?,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Emit a config in the same format `model_from_config` reads.
pub fn model_to_config_text(cfg: &VariantConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("name = {}\n", cfg.name));
    out.push_str(&format!("decay = {}\n", decay_kind_token(cfg.decay_kind)));
    out.push_str(&format!("rbf_scale = {}\n", cfg.rbf_scale));
    out.push_str(&format!("gamma_base = {}\n", cfg.gamma_base_exponent));
    out.push_str(&format!("head_expansion = {}\n", cfg.head_expansion));
    out.push_str(&format!("classes = {}\n", cfg.num_classes));
    out.push_str("\n[stem]\n");
    let fmt_list = |xs: &[usize]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push_str(&format!("channels = {}\n", fmt_list(&cfg.stem.channels)));
    out.push_str(&format!("strides = {}\n", fmt_list(&cfg.stem.strides)));
    for stage in &cfg.stages {
        out.push_str("\n[stage]\n");
        out.push_str(&format!("dim = {}\n", stage.embed_dim));
        out.push_str(&format!("depth = {}\n", stage.depth));
        out.push_str(&format!("heads = {}\n", stage.heads));
        out.push_str(&format!("k = {}\n", stage.group_size));
        out.push_str(&format!("ffn_ratio = {}\n", stage.ffn_ratio));
        out.push_str(&format!(
            "mixer = {}\n",
            match stage.mixer {
                MixerKind::GroupedAlternating => "grouped",
                MixerKind::Full => "full",
            }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use evt_core::model::micro;

    #[test]
    fn parse_sections_and_values() {
        let text = "a = 1\n# comment\n[s]\nb = two # trailing\n[s]\nb = three\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.top.get("a"), Some("1"));
        let all = cfg.all("s");
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].get("b"), Some("two"));
        assert_eq!(all[1].get("b"), Some("three"));
    }

    #[test]
    fn model_config_round_trips() {
        let cfg = micro();
        let text = model_to_config_text(&cfg);
        let parsed = model_from_config(&parse_config(&text).unwrap()).unwrap();
        assert_eq!(parsed.name, cfg.name);
        assert_eq!(parsed.stages.len(), cfg.stages.len());
        assert_eq!(parsed.stem.channels, cfg.stem.channels);
        assert_eq!(parsed.head_expansion, cfg.head_expansion);
        assert_eq!(
            evt_core::model::count_params(&parsed),
            evt_core::model::count_params(&cfg)
        );
    }

    #[test]
    fn decay_kind_tokens() {
        assert_eq!(
            parse_decay_kind("minkowski:3", None).unwrap(),
            DecayKind::Minkowski(3.0)
        );
        assert_eq!(
            parse_decay_kind("minkowski", Some(4.0)).unwrap(),
            DecayKind::Minkowski(4.0)
        );
        assert!(parse_decay_kind("minkowski", None).is_err());
        assert!(parse_decay_kind("fancy", None).is_err());
    }
}
