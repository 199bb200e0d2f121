//! Run configuration as a plain `key = value` file.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! Every key has a default; [`RunConfig::to_text`] prints the fully
//! resolved configuration in a form that parses back to the same values.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::protoloss::LossConfig;
use crate::segmodel::{BackboneConfig, BackboneVariant, ModelConfig};
use crate::synthdata::DatasetSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, String);

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
            .collect()
    }

    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for BackboneVariant {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(BackboneVariant::Plain),
            "skip" => Ok(BackboneVariant::Skip),
            _ => Err("expected `plain` or `skip`".into()),
        }
    }

    fn render(&self) -> String {
        match self {
            BackboneVariant::Plain => "plain".into(),
            BackboneVariant::Skip => "skip".into(),
        }
    }
}

impl ConfigValue for Precision {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            _ => Err("expected `f64` or `f32`".into()),
        }
    }

    fn render(&self) -> String {
        match self {
            Precision::F64 => "f64".into(),
            Precision::F32 => "f32".into(),
        }
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of a run. Field names are the config-file keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value).map_err(|e| {
                            Error::Config(format!("bad value `{value}` for `{key}`: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// `(key, rendered value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($key), self.$key.render()), )* ]
            }

            /// `(key, default, description)` for every key.
            pub fn documentation() -> Vec<(&'static str, String, &'static str)> {
                let d = RunConfig::default();
                vec![ $( (stringify!($key), d.$key.render(), concat!($($doc),*).trim()), )* ]
            }
        }
    };
}

run_config! {
    /// number of classes, background (class 0) included
    num_classes: usize = 4,
    /// training images generated
    train_samples: usize = 300,
    /// validation images generated
    val_samples: usize = 60,
    /// image height (also the training crop height)
    height: usize = 64,
    /// image width (also the training crop width)
    width: usize = 64,
    /// fewest foreground figures per image
    min_figures: usize = 1,
    /// most foreground figures per image
    max_figures: usize = 3,
    /// smallest figure height as a fraction of the image side
    min_scale: f64 = 0.45,
    /// largest figure height as a fraction of the image side
    max_scale: f64 = 0.75,
    /// dataset generation seed
    data_seed: u64 = 7,
    /// backbone variant: plain or skip
    backbone: BackboneVariant = BackboneVariant::Plain,
    /// channels of each 3x3 conv stage
    widths: Vec<usize> = vec![16, 32, 32],
    /// total backbone stride (power of two)
    downsample: usize = 4,
    /// prototype / feature dimension
    proto_dim: usize = 64,
    /// prototypes per class
    protos_per_class: usize = 10,
    /// epsilon of the log similarity
    epsilon: f64 = 1e-4,
    /// softmax over negated squared distances in the diversity loss
    negate_distances: bool = false,
    /// weight of the diversity loss
    lambda_j: f64 = 0.25,
    /// weight of the off-class L1 penalty during fine-tuning
    lambda_l1: f64 = 1e-4,
    /// floating point precision: f64 or f32
    precision: Precision = Precision::F64,
    /// warmup steps
    warmup_steps: usize = 1500,
    /// joint training steps
    joint_steps: usize = 3000,
    /// first fine-tuning steps
    tune1_steps: usize = 500,
    /// second fine-tuning steps
    tune2_steps: usize = 500,
    /// constant warmup learning rate
    warmup_lr: f64 = 2.5e-3,
    /// initial joint learning rate of the backbone convolutions
    joint_backbone_lr: f64 = 1e-3,
    /// initial joint learning rate of the projection layer and prototypes
    joint_head_lr: f64 = 2.5e-3,
    /// constant fine-tuning learning rate
    tune_lr: f64 = 1e-3,
    /// Adam beta1
    beta1: f64 = 0.9,
    /// Adam beta2
    beta2: f64 = 0.999,
    /// L2 weight decay (not applied to prototypes)
    weight_decay: f64 = 5e-4,
    /// images per step
    batch_size: usize = 4,
    /// polynomial learning-rate power
    poly_power: f64 = 0.9,
    /// neighbours inspected by pruning
    prune_knn: usize = 6,
    /// minimum same-class neighbours for a prototype to survive pruning
    prune_threshold: usize = 3,
    /// training images used for the train_loss column of the stage report
    eval_train_images: usize = 32,
    /// training seed
    seed: u64 = 1,
    /// dataset directory
    data_dir: String = "data".into(),
    /// output directory for checkpoints, reports and metrics
    out_dir: String = "run".into(),
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes,
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            height: self.height,
            width: self.width,
            min_figures: self.min_figures,
            max_figures: self.max_figures,
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            seed: self.data_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                variant: self.backbone,
                widths: self.widths.clone(),
                downsample: self.downsample,
                out_dim: self.proto_dim,
            },
            num_classes: self.num_classes,
            protos_per_class: self.protos_per_class,
            epsilon: self.epsilon,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_j: self.lambda_j,
            lambda_l1: self.lambda_l1,
            epsilon: self.epsilon,
            negate_distances: self.negate_distances,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            warmup_steps: self.warmup_steps,
            joint_steps: self.joint_steps,
            tune1_steps: self.tune1_steps,
            tune2_steps: self.tune2_steps,
            warmup_lr: self.warmup_lr,
            joint_backbone_lr: self.joint_backbone_lr,
            joint_head_lr: self.joint_head_lr,
            tune_lr: self.tune_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            poly_power: self.poly_power,
            prune_knn: self.prune_knn,
            prune_threshold: self.prune_threshold,
            eval_train_images: self.eval_train_images,
            crop_height: self.height,
            crop_width: self.width,
            loss: self.loss_config(),
            seed: self.seed,
        }
    }

    /// Checks cross-field constraints of every derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model_config().validate(self.height, self.width)?;
        self.train_config().validate()
    }
}
