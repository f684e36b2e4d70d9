//! Plain-text configuration: `key = value` lines with `#` comments, then
//! `--key value` command-line overrides. Unknown keys are usage errors.

use crate::attention::ChannelGate;
use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::model::{AttentionConfig, GeneratorConfig};
use crate::tensor::Dtype;
use crate::train::TrainConfig;
use std::collections::BTreeMap;

/// Every key the system understands, with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("num_classes", "5"),
    ("image_h", "64"),
    ("image_w", "64"),
    ("widths", "16,32,64,64"),
    ("spatial", "true"),
    ("channel", "backbone"),
    ("dtype", "f32"),
    ("seed", "1"),
    ("data_seed", "1"),
    ("train_count", "200"),
    ("test_count", "50"),
    ("epochs", "40"),
    ("batch_size", "4"),
    ("lr_g", "1e-4"),
    ("lr_d", "4e-4"),
    ("beta1", "0"),
    ("beta2", "0.999"),
    ("epsilon", "1e-8"),
    ("out_dir", "out"),
    ("ckpt", ""),
    ("layouts", ""),
    ("preds", ""),
    ("gts", ""),
    ("scene_index", "0"),
];

#[derive(Clone, Debug)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            map: KEYS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(slot) = self.map.get_mut(key) else {
            return Err(Error::Usage(format!("unknown key `{key}`")));
        };
        *slot = value.to_string();
        Ok(())
    }

    /// Parse one file's worth of `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Usage(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key}: invalid count `{}`", self.get(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key}: invalid integer `{}`", self.get(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key}: invalid number `{}`", self.get(key))))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Usage(format!("{key}: expected true or false, got `{other}`"))),
        }
    }

    pub fn widths(&self) -> Result<Vec<usize>> {
        self.get("widths")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("widths: invalid entry `{s}`")))
            })
            .collect()
    }

    pub fn channel(&self) -> Result<Option<ChannelGate>> {
        match self.get("channel") {
            "none" => Ok(None),
            "fused" => Ok(Some(ChannelGate::Fused)),
            "backbone" => Ok(Some(ChannelGate::Backbone)),
            other => Err(Error::Usage(format!(
                "channel: expected none, fused, or backbone, got `{other}`"
            ))),
        }
    }

    pub fn dtype(&self) -> Result<Dtype> {
        match self.get("dtype") {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Usage(format!("dtype: expected f32 or f64, got `{other}`"))),
        }
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let scene = SceneConfig {
            num_classes: self.usize("num_classes")?,
            image_hw: (self.usize("image_h")?, self.usize("image_w")?),
            seed: self.u64("data_seed")?,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let cfg = GeneratorConfig {
            num_classes: self.usize("num_classes")?,
            image_hw: (self.usize("image_h")?, self.usize("image_w")?),
            widths: self.widths()?,
            attention: AttentionConfig {
                spatial: self.bool("spatial")?,
                channel: self.channel()?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            beta1: self.f64("beta1")?,
            beta2: self.f64("beta2")?,
            lr_g: self.f64("lr_g")?,
            lr_d: self.f64("lr_d")?,
            epsilon: self.f64("epsilon")?,
            batch_size: self.usize("batch_size")?,
            epochs: self.u64("epochs")? as u32,
            seed: self.u64("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Required path-valued key; empty means the caller forgot it.
    pub fn path(&self, key: &str) -> Result<&str> {
        let v = self.get(key);
        if v.is_empty() {
            return Err(Error::Usage(format!("`{key}` is required for this command")));
        }
        Ok(v)
    }
}

/// Split argv into `--key value` pairs; `--config FILE` loads a file first,
/// then the remaining flags override it in order.
pub fn from_args(args: &[String]) -> Result<Config> {
    let mut pairs = Vec::with_capacity(args.len() / 2);
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Error::Usage(format!("expected `--key value`, got `{arg}`")));
        };
        let Some(value) = args.get(i + 1) else {
            return Err(Error::Usage(format!("flag `--{key}` is missing its value")));
        };
        pairs.push((key.to_string(), value.clone()));
        i += 2;
    }

    let mut cfg = Config::default();
    for (key, value) in &pairs {
        if key == "config" {
            let text = std::fs::read_to_string(value)
                .map_err(|e| Error::Usage(format!("cannot read config `{value}`: {e}")))?;
            cfg.apply_text(&text)?;
        }
    }
    for (key, value) in &pairs {
        if key != "config" {
            cfg.set(key, value)?;
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_build_the_standard_configs() {
        let cfg = Config::default();
        let scene = cfg.scene().unwrap();
        assert_eq!(scene.num_classes, 5);
        assert_eq!(scene.image_hw, (64, 64));
        let gen = cfg.generator().unwrap();
        assert_eq!(gen.widths, vec![16, 32, 64, 64]);
        assert!(gen.attention.spatial);
        assert_eq!(gen.attention.channel, Some(ChannelGate::Backbone));
        let train = cfg.train().unwrap();
        assert_eq!(train.batch_size, 4);
        assert_eq!(train.epochs, 40);
        assert_eq!(cfg.dtype().unwrap(), Dtype::F32);
    }

    #[test]
    fn file_text_with_comments_is_parsed() {
        let mut cfg = Config::default();
        cfg.apply_text("# a comment\n\nnum_classes = 3\nspatial = true # trailing\nchannel=backbone\n")
            .unwrap();
        assert_eq!(cfg.usize("num_classes").unwrap(), 3);
        assert!(cfg.bool("spatial").unwrap());
        assert_eq!(cfg.channel().unwrap(), Some(ChannelGate::Backbone));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut cfg = Config::default();
        assert!(matches!(cfg.apply_text("nope = 1"), Err(Error::Usage(_))));
        assert!(matches!(cfg.set("classes", "5"), Err(Error::Usage(_))));
        assert!(matches!(
            from_args(&args(&["--mystery", "1"])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "epochs = 10\nseed = 5\n").unwrap();
        let cfg = from_args(&args(&[
            "--config",
            file.to_str().unwrap(),
            "--epochs",
            "3",
        ]))
        .unwrap();
        assert_eq!(cfg.train().unwrap().epochs, 3);
        assert_eq!(cfg.train().unwrap().seed, 5);
    }

    #[test]
    fn malformed_flags_are_usage_errors() {
        assert!(matches!(from_args(&args(&["epochs"])), Err(Error::Usage(_))));
        assert!(matches!(from_args(&args(&["--epochs"])), Err(Error::Usage(_))));
        assert!(matches!(
            from_args(&args(&["--config", "/no/such/file.cfg"])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn ablation_flag_combinations_map_to_attention_configs() {
        let variants = [
            ("false", "none", (false, None)),
            ("true", "none", (true, None)),
            ("false", "fused", (false, Some(ChannelGate::Fused))),
            ("false", "backbone", (false, Some(ChannelGate::Backbone))),
            ("true", "fused", (true, Some(ChannelGate::Fused))),
            ("true", "backbone", (true, Some(ChannelGate::Backbone))),
        ];
        for (spatial, channel, want) in variants {
            let mut cfg = Config::default();
            cfg.set("spatial", spatial).unwrap();
            cfg.set("channel", channel).unwrap();
            let a = cfg.generator().unwrap().attention;
            assert_eq!((a.spatial, a.channel), want);
        }
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = Config::default();
        cfg.set("epochs", "many").unwrap();
        match cfg.train().unwrap_err() {
            Error::Usage(msg) => assert!(msg.contains("epochs")),
            other => panic!("wrong error {other:?}"),
        }
    }
}
