//! Flat `key = value` pipeline configuration.
//!
//! Lines starting with `#` are comments. The special key `preset` loads a
//! named preset (`desk` or `suite`) at that point, so later lines override it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ApProtocol;
use crate::hcp::{AugmentConfig, CnnConfig, FusionOrder, StageConfig};
use crate::hselect::HSConfig;
use crate::nn::{Stage, WeightInit};
use crate::objectness::{ObjectnessConfig, ObjectnessTrainConfig};

use super::synth::SyntheticSpec;

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|e| Error::Config(format!("{s:?}: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(u64, usize, f64, FusionOrder, ApProtocol);

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }

    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($($(#[$doc:meta])* $key:ident: $t:ty = $default:expr,)*) => {
        /// Every tunable of the pipeline, keyed by field name in config files.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $($(#[$doc])* pub $key: $t,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                PipelineConfig { $($key: $default,)* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    "preset" => *self = Self::preset(value)?,
                    $(stringify!($key) => {
                        self.$key = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("key {key}: {e}")))?
                    })*
                    other => return Err(Error::Config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// The configuration in file syntax, one key per line.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key.render()));)*
                out
            }
        }
    };
}

config! {
    seed: u64 = 0,

    image_size: usize = 128,
    categories: usize = 10,
    min_objects: usize = 1,
    max_objects: usize = 4,
    object_min: usize = 30,
    object_max: usize = 42,
    occlusion_prob: f64 = 0.1,
    clutter: usize = 6,
    pretrain_canvas: usize = 48,
    pretrain_min_scale: f64 = 0.33,
    train_images: usize = 150,
    test_images: usize = 50,
    pretrain_images: usize = 600,

    /// Scenes of held-out categories whose boxes train the objectness scorer.
    objectness_images: usize = 100,
    objectness_epochs: usize = 20,
    objectness_negatives: usize = 64,
    min_window: usize = 16,
    nms_iou: f64 = 0.8,
    proposals: usize = 200,

    input_side: usize = 64,
    resize_side: usize = 72,
    conv_channels: Vec<usize> = vec![8, 16, 32],
    fc_hidden: Vec<usize> = vec![128],
    dropout: f64 = 0.5,
    classifier_std: f64 = 0.01,

    hs_clusters: usize = 10,
    hs_k_train: usize = 1,
    hs_k_test: usize = 50,
    hs_min_area: usize = 900,
    hs_max_ratio: f64 = 4.0,

    pretrain_epochs: usize = 90,
    pretrain_lr: Vec<f64> = vec![0.01, 0.01, 0.01],
    pretrain_batch: usize = 32,
    ift_epochs: usize = 60,
    ift_lr: Vec<f64> = vec![0.001, 0.002, 0.01],
    ift_batch: usize = 2,
    hft_epochs: usize = 60,
    hft_lr: Vec<f64> = vec![0.0001, 0.0002, 0.001],
    hft_batch: usize = 2,
    lr_decay: f64 = 0.1,
    lr_decay_period: usize = 20,
    momentum: f64 = 0.9,
    weight_decay: f64 = 0.0005,

    fusion_order: FusionOrder = FusionOrder::SoftmaxThenMax,
    late_fusion_weight: f64 = 0.5,
    ap_protocol: ApProtocol = ApProtocol::ElevenPoint,
}

impl PipelineConfig {
    /// `desk`: 200 scene images and short schedules, for smoke runs.
    /// `suite`: 2000 train / 500 test scenes.
    pub fn preset(name: &str) -> Result<Self> {
        let base = PipelineConfig::default();
        match name {
            "desk" => Ok(PipelineConfig {
                pretrain_epochs: 6,
                ift_epochs: 6,
                hft_epochs: 2,
                lr_decay_period: 4,
                ..base
            }),
            "suite" => Ok(PipelineConfig {
                train_images: 2000,
                test_images: 500,
                pretrain_images: 3000,
                objectness_images: 300,
                pretrain_epochs: 30,
                ift_epochs: 30,
                hft_epochs: 12,
                lr_decay_period: 10,
                ..base
            }),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, suite)"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            categories: self.categories,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            object_min: self.object_min,
            object_max: self.object_max,
            occlusion_prob: self.occlusion_prob,
            clutter: self.clutter,
            pretrain_canvas: self.pretrain_canvas,
            pretrain_min_scale: self.pretrain_min_scale,
            seed: self.seed,
        }
    }

    pub fn objectness(&self) -> ObjectnessConfig {
        ObjectnessConfig {
            min_window: self.min_window,
            nms_iou: self.nms_iou,
            ..ObjectnessConfig::default()
        }
    }

    pub fn objectness_training(&self) -> ObjectnessTrainConfig {
        ObjectnessTrainConfig {
            negatives_per_image: self.objectness_negatives,
            epochs: self.objectness_epochs,
            seed: self.seed,
            ..ObjectnessTrainConfig::default()
        }
    }

    pub fn cnn(&self) -> CnnConfig {
        CnnConfig {
            input_side: self.input_side,
            conv_channels: self.conv_channels.clone(),
            fc_hidden: self.fc_hidden.clone(),
            dropout: self.dropout,
            init: WeightInit::He,
            classifier_std: self.classifier_std,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            resize_side: self.resize_side,
            ..AugmentConfig::default()
        }
    }

    fn hs(&self, k: usize) -> HSConfig {
        HSConfig {
            m: self.hs_clusters,
            k,
            min_area: self.hs_min_area,
            max_ratio: self.hs_max_ratio,
            crop_size: self.input_side,
        }
    }

    pub fn hs_train(&self) -> HSConfig {
        self.hs(self.hs_k_train)
    }

    pub fn hs_test(&self) -> HSConfig {
        self.hs(self.hs_k_test)
    }

    pub fn stage(&self, stage: Stage) -> StageConfig {
        let (base, lr, epochs, batch, offset) = match stage {
            Stage::Pretrain => (StageConfig::pretrain(), &self.pretrain_lr, self.pretrain_epochs, self.pretrain_batch, 1),
            Stage::Ift => (StageConfig::ift(), &self.ift_lr, self.ift_epochs, self.ift_batch, 2),
            Stage::Hft => (StageConfig::hft(), &self.hft_lr, self.hft_epochs, self.hft_batch, 3),
        };
        StageConfig {
            base_lr: lr.clone(),
            epochs,
            batch_size: batch,
            seed: self.seed.wrapping_mul(1000).wrapping_add(offset),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_factor: self.lr_decay,
            decay_period: self.lr_decay_period,
            classifier_std: self.classifier_std,
            ..base
        }
    }
}
