//! `key = value` run configuration files.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use pneumoscan_core::imaging::Normalization;
use pneumoscan_core::metrics::Averaging;
use pneumoscan_core::train::{LossKind, TrainConfig, UnfreezeSchedule, UnfreezeStage};
use pneumoscan_core::{AugmentParams, DType, Error, Result, WidthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnfreezeSpec {
    /// Encoder frozen for the first 20% of epochs, then one block per 10%, deepest first.
    Default,
    All,
    /// Encoder never trained.
    Frozen,
    Stages(Vec<UnfreezeStage>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormSpec {
    PerImage,
    /// Mean and std of the training images, computed when training starts.
    Corpus,
    Fixed { mean: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub early_stop_patience: Option<usize>,
    pub class_weights: bool,
    pub augment: bool,
    pub augment_params: AugmentParams,
    pub averaging: Averaging,
    pub normalization: NormSpec,
    pub width: WidthConfig,
    pub input_side: usize,
    pub unfreeze: UnfreezeSpec,
    explicit: BTreeSet<String>,
}

pub const KEYS: [&str; 21] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "precision",
    "loss",
    "early_stop_patience",
    "class_weights",
    "augment",
    "max_rotation_deg",
    "zoom_min",
    "zoom_max",
    "hflip_prob",
    "averaging",
    "normalization",
    "in_channels",
    "base_channels",
    "dense_layers",
    "growth",
    "input_side",
    "unfreeze",
];

fn invalid(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}` (expected {expected})"))
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<N> {
    value.parse().map_err(|_| invalid(key, value, expected))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "true or false")),
    }
}

impl UnfreezeSpec {
    pub fn parse(value: &str) -> Result<Self> {
        match value {
            "default" => return Ok(UnfreezeSpec::Default),
            "all" => return Ok(UnfreezeSpec::All),
            "frozen" => return Ok(UnfreezeSpec::Frozen),
            _ => {}
        }
        let expected = "default, all, frozen or EPOCH:BLOCK[,BLOCK];...";
        let mut stages = Vec::new();
        for part in value.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (epoch, blocks) = part
                .split_once(':')
                .ok_or_else(|| invalid("unfreeze", value, expected))?;
            stages.push(UnfreezeStage {
                start_epoch: parse_num("unfreeze", epoch.trim(), expected)?,
                blocks: blocks.split(',').map(|b| b.trim().to_string()).collect(),
            });
        }
        if stages.is_empty() {
            return Err(invalid("unfreeze", value, expected));
        }
        UnfreezeSchedule::new(stages.clone())?;
        Ok(UnfreezeSpec::Stages(stages))
    }

    fn render(&self) -> String {
        match self {
            UnfreezeSpec::Default => "default".into(),
            UnfreezeSpec::All => "all".into(),
            UnfreezeSpec::Frozen => "frozen".into(),
            UnfreezeSpec::Stages(stages) => stages
                .iter()
                .map(|s| format!("{}:{}", s.start_epoch, s.blocks.join(",")))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    pub fn schedule(&self, encoder_blocks: &[String], epochs: usize) -> Result<UnfreezeSchedule> {
        match self {
            UnfreezeSpec::Default => Ok(UnfreezeSchedule::default_for(encoder_blocks, epochs)),
            UnfreezeSpec::All => Ok(UnfreezeSchedule::all_trainable(encoder_blocks)),
            UnfreezeSpec::Frozen => UnfreezeSchedule::new(vec![]),
            UnfreezeSpec::Stages(stages) => {
                for b in stages.iter().flat_map(|s| &s.blocks) {
                    if !encoder_blocks.contains(b) {
                        return Err(Error::UnknownBlock(b.clone()));
                    }
                }
                UnfreezeSchedule::new(stages.clone())
            }
        }
    }
}

impl NormSpec {
    pub fn parse(value: &str) -> Result<Self> {
        let expected = "per_image, corpus or corpus:MEAN:STD";
        match value {
            "per_image" => Ok(NormSpec::PerImage),
            "corpus" => Ok(NormSpec::Corpus),
            _ => {
                let rest = value
                    .strip_prefix("corpus:")
                    .ok_or_else(|| invalid("normalization", value, expected))?;
                let (m, s) = rest
                    .split_once(':')
                    .ok_or_else(|| invalid("normalization", value, expected))?;
                let mean: f64 = parse_num("normalization", m, expected)?;
                let std: f64 = parse_num("normalization", s, expected)?;
                if !(mean.is_finite() && std.is_finite() && std > 0.0) {
                    return Err(invalid("normalization", value, "a finite mean and a positive std"));
                }
                Ok(NormSpec::Fixed { mean, std })
            }
        }
    }

    pub fn render(&self) -> String {
        match self {
            NormSpec::PerImage => "per_image".into(),
            NormSpec::Corpus => "corpus".into(),
            NormSpec::Fixed { mean, std } => format!("corpus:{mean:?}:{std:?}"),
        }
    }

    /// Resolved normalization; `Corpus` must have been fixed first.
    pub fn normalization(&self) -> Result<Normalization> {
        match *self {
            NormSpec::PerImage => Ok(Normalization::PerImage),
            NormSpec::Fixed { mean, std } => Ok(Normalization::Corpus { mean, std }),
            NormSpec::Corpus => Err(Error::Config("corpus statistics have not been computed".into())),
        }
    }
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let t = match task {
            Task::Segmentation => TrainConfig::segmentation(),
            Task::Classification => TrainConfig::classification(),
        };
        RunConfig {
            task,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            loss: t.loss,
            early_stop_patience: t.early_stop_patience,
            class_weights: t.class_weights,
            augment: t.augment.is_some(),
            augment_params: t.augment.unwrap_or_default(),
            averaging: t.averaging,
            normalization: NormSpec::PerImage,
            width: WidthConfig::default(),
            input_side: 256,
            unfreeze: UnfreezeSpec::Default,
            explicit: BTreeSet::new(),
        }
    }

    /// Parses `key = value` lines over the task defaults. `#` starts a comment.
    pub fn parse(text: &str, task: Task) -> Result<Self> {
        let mut c = RunConfig::defaults(task);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, found `{line}`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !c.explicit.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, value, "a positive integer")?,
            "batch_size" => self.batch_size = parse_num(key, value, "a positive integer")?,
            "learning_rate" => self.learning_rate = parse_num(key, value, "a positive number")?,
            "seed" => self.seed = parse_num(key, value, "an unsigned integer")?,
            "precision" => match value {
                "f32" => {}
                "f64" => {
                    return Err(Error::Config(
                        "precision `f64` is only available for gradient checks; training and checkpoints use f32".into(),
                    ))
                }
                _ => return Err(invalid(key, value, "f32")),
            },
            "loss" => {
                self.loss = LossKind::parse(value).ok_or_else(|| invalid(key, value, "dice, ce or dice_plus_bce"))?
            }
            "early_stop_patience" => {
                self.early_stop_patience = match value {
                    "none" => None,
                    v => Some(parse_num(key, v, "none or an integer")?),
                }
            }
            "class_weights" => self.class_weights = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "max_rotation_deg" => self.augment_params.max_rotation_deg = parse_num(key, value, "a number")?,
            "zoom_min" => self.augment_params.zoom_range[0] = parse_num(key, value, "a number")?,
            "zoom_max" => self.augment_params.zoom_range[1] = parse_num(key, value, "a number")?,
            "hflip_prob" => self.augment_params.hflip_prob = parse_num(key, value, "a probability")?,
            "averaging" => {
                self.averaging = Averaging::parse(value).ok_or_else(|| invalid(key, value, "macro, micro or weighted"))?
            }
            "normalization" => self.normalization = NormSpec::parse(value)?,
            "in_channels" => self.width.in_channels = parse_num(key, value, "a positive integer")?,
            "base_channels" => self.width.base_channels = parse_num(key, value, "a positive integer")?,
            "dense_layers" => self.width.dense_layers = parse_num(key, value, "an integer")?,
            "growth" => self.width.growth = parse_num(key, value, "a positive integer")?,
            "input_side" => self.input_side = parse_num(key, value, "a power of two >= 16")?,
            "unfreeze" => self.unfreeze = UnfreezeSpec::parse(value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config_unchecked().validate()?;
        self.width.validate()?;
        if self.input_side < 16 || !self.input_side.is_power_of_two() {
            return Err(invalid("input_side", &self.input_side.to_string(), "a power of two >= 16"));
        }
        let fits = match self.task {
            Task::Segmentation => self.loss != LossKind::CrossEntropy,
            Task::Classification => self.loss == LossKind::CrossEntropy,
        };
        if !fits {
            return Err(Error::Config(format!("loss `{}` does not fit this task", self.loss.as_str())));
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    fn train_config_unchecked(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            precision: DType::F32,
            loss: self.loss,
            early_stop_patience: self.early_stop_patience,
            class_weights: self.class_weights,
            augment: self.augment.then_some(self.augment_params),
            averaging: self.averaging,
            normalization: Normalization::PerImage,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            normalization: self.normalization.normalization()?,
            ..self.train_config_unchecked()
        })
    }

    /// Effective configuration as ordered `(key, value)` pairs.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let a = &self.augment_params;
        let values = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.learning_rate),
            self.seed.to_string(),
            "f32".to_string(),
            self.loss.as_str().to_string(),
            self.early_stop_patience.map_or("none".into(), |p| p.to_string()),
            self.class_weights.to_string(),
            self.augment.to_string(),
            format!("{:?}", a.max_rotation_deg),
            format!("{:?}", a.zoom_range[0]),
            format!("{:?}", a.zoom_range[1]),
            format!("{:?}", a.hflip_prob),
            self.averaging.as_str().to_string(),
            self.normalization.render(),
            self.width.in_channels.to_string(),
            self.width.base_channels.to_string(),
            self.width.dense_layers.to_string(),
            self.width.growth.to_string(),
            self.input_side.to_string(),
            self.unfreeze.render(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Normalization recorded in a checkpoint's config echo.
pub fn normalization_from_pairs(pairs: &[(String, String)]) -> Result<Normalization> {
    match pairs.iter().find(|(k, _)| k == "normalization") {
        None => Ok(Normalization::PerImage),
        Some((_, v)) => NormSpec::parse(v)?.normalization(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_task_defaults() {
        let c = RunConfig::parse("", Task::Segmentation).unwrap();
        assert_eq!(c.train_config().unwrap(), TrainConfig::segmentation());
        let c = RunConfig::parse("# nothing\n\n", Task::Classification).unwrap();
        assert_eq!(c.train_config().unwrap(), TrainConfig::classification());
        assert_eq!(c.width, WidthConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let text = "epochs = 5  # short\nbase_channels=4\ninput_side = 32\naugment = off\nunfreeze = 1:enc5;2:enc4,enc3\nearly_stop_patience = 3\n";
        let c = RunConfig::parse(text, Task::Segmentation).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.width.base_channels, 4);
        assert_eq!(c.input_side, 32);
        assert!(c.train_config().unwrap().augment.is_none());
        assert_eq!(c.early_stop_patience, Some(3));
        assert!(c.is_explicit("base_channels") && !c.is_explicit("growth"));
        let names: Vec<String> = ["enc1", "enc2", "enc3", "enc4", "enc5"].map(String::from).to_vec();
        let s = c.unfreeze.schedule(&names, 5).unwrap();
        assert_eq!(s.unfreeze_epoch("enc3"), Some(2));
        assert_eq!(s.unfreeze_epoch("enc1"), None);
    }

    #[test]
    fn errors_name_the_problem() {
        let e = RunConfig::parse("learnin_rate = 0.1", Task::Segmentation).unwrap_err().to_string();
        assert!(e.contains("learnin_rate"), "{e}");
        let e = RunConfig::parse("epochs = 2\nepochs = 3", Task::Segmentation).unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
        assert!(RunConfig::parse("epochs", Task::Segmentation).is_err());
        assert!(RunConfig::parse("epochs = -1", Task::Segmentation).is_err());
        assert!(RunConfig::parse("epochs = 0", Task::Segmentation).is_err());
        assert!(RunConfig::parse("precision = f64", Task::Segmentation).is_err());
        assert!(RunConfig::parse("loss = ce", Task::Segmentation).is_err());
        assert!(RunConfig::parse("input_side = 48", Task::Segmentation).is_err());
        assert!(RunConfig::parse("unfreeze = 2:enc1;3:enc2", Task::Segmentation).is_err());
        assert!(RunConfig::parse("normalization = corpus:0.5:0", Task::Segmentation).is_err());
    }

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let text = "epochs = 7\nlearning_rate = 0.00025\nnormalization = corpus:0.3:0.125\nunfreeze = 0:enc4;3:enc2\nzoom_min = 0.8\n";
        let c = RunConfig::parse(text, Task::Classification).unwrap();
        let echoed = c.render();
        assert_eq!(echoed.lines().count(), KEYS.len());
        let back = RunConfig::parse(&echoed, Task::Classification).unwrap();
        assert_eq!(back.pairs(), c.pairs());
        assert_eq!(
            normalization_from_pairs(&c.pairs()).unwrap(),
            Normalization::Corpus { mean: 0.3, std: 0.125 }
        );
    }
}
