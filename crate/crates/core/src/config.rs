//! Experiment configuration as flat `section.key = value` text.
//!
//! Every key has a default; a config file or command-line override may set
//! any subset. Unknown keys are rejected with the list of valid ones.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::CodecConfig;
use crate::dataset::{parse_kv, DatasetKind, SynthSpec};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::evaluation::{Aggregation, EvalOptions, MaskScope};
use crate::pipeline::GeometryConfig;
use crate::training::{CodecTrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Samples generated by `gen-data`.
    pub count: usize,
    /// Train, val and test fractions.
    pub fractions: [f64; 3],
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            count: 640,
            fractions: [0.8, 0.1, 0.1],
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scope: MaskScope,
    pub aggregation: Aggregation,
    /// Inference steps used by `infer` and `eval`.
    pub steps: usize,
    pub seed: u64,
    /// Step counts compared by `ablate-steps`.
    pub ablation_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scope: MaskScope::TransparentOnly,
            aggregation: Aggregation::PixelWeighted,
            steps: 20,
            seed: 0,
            ablation_counts: vec![2, 5, 10],
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            scope: self.scope,
            aggregation: self.aggregation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub geometry: GeometryConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    for part in key.split('.') {
        node = node.get_mut(part).expect("key validated against defaults");
    }
    *node = value;
}

/// Bare words such as `refined` are read as strings; everything else as JSON.
fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Every key with its current value, in sorted order.
    pub fn flat(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.into_iter().map(|(k, v)| (k, value_text(&v))).collect()
    }

    pub fn keys() -> Vec<String> {
        Self::default().flat().into_keys().collect()
    }

    /// Applies `key = value` pairs on top of `self`.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let mut known = BTreeMap::new();
        flatten("", &tree, &mut known);
        for (k, v) in pairs {
            if !known.contains_key(k) {
                let valid: Vec<&str> = known.keys().map(String::as_str).collect();
                return Err(Error::Config(format!(
                    "unknown key '{k}'; valid keys are: {}",
                    valid.join(", ")
                )));
            }
            set_path(&mut tree, k, parse_value(v));
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` override strings as given on the command line.
    pub fn with_cli_overrides(&self, overrides: &[String]) -> Result<Self> {
        let pairs: Vec<(String, String)> = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))
            })
            .collect::<Result<_>>()?;
        self.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::default().with_overrides(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_text(&text)
    }

    /// Flat text that [`ExperimentConfig::from_text`] reads back unchanged.
    pub fn to_text(&self) -> String {
        self.flat().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.data.synth.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.codec.validate().map_err(wrap)?;
        self.denoiser.validate().map_err(wrap)?;
        if self.denoiser.latent_channels != self.codec.latent_channels {
            return Err(Error::Config(format!(
                "denoiser.latent_channels {} must equal codec.latent_channels {}",
                self.denoiser.latent_channels, self.codec.latent_channels
            )));
        }
        if self.eval.steps == 0 || self.eval.steps > self.train.horizon {
            return Err(Error::Config(format!(
                "eval.steps {} must lie in [1, train.horizon]",
                self.eval.steps
            )));
        }
        if self.eval.ablation_counts.iter().any(|&c| c == 0 || c > self.train.horizon) {
            return Err(Error::Config("eval.ablation_counts must lie in [1, train.horizon]".into()));
        }
        Ok(())
    }
}

/// One-line descriptions for the reference page.
pub fn describe(key: &str) -> &'static str {
    match key {
        "data.kind" => "dataset layout: synthetic, cleargrasp or transcg",
        "data.count" => "number of samples written by gen-data",
        "data.fractions" => "train/val/test fractions used by gen-data",
        "data.synth.height" => "image height in pixels (multiple of 4)",
        "data.synth.width" => "image width in pixels (multiple of 4)",
        "data.synth.focal" => "focal length in pixels",
        "data.synth.objects_min" => "fewest objects per scene",
        "data.synth.objects_max" => "most objects per scene",
        "data.synth.table_depth" => "range of the table depth at the image center, meters",
        "data.synth.max_tilt_deg" => "largest table tilt, degrees",
        "data.synth.transparent_prob" => "chance an object is transparent",
        "data.synth.hole_prob" => "chance a masked pixel reads as missing",
        "data.synth.leak_prob" => "chance a surviving masked pixel reads the surface behind",
        "data.synth.noise_sigma" => "sensor noise on masked pixels, meters",
        "data.synth.refraction_offset" => "largest offset of leaked readings, meters",
        "data.synth.boundary_threshold" => "depth jump that marks an occlusion boundary, meters",
        "data.synth.seed" => "corpus seed",
        "geometry.weights.w_obs" => "weight of the observed-depth term",
        "geometry.weights.w_normal" => "weight of the normal-consistency term",
        "geometry.weights.w_smooth" => "weight of the smoothness term",
        "geometry.solver.tol" => "conjugate-gradient tolerance relative to the right-hand side",
        "geometry.solver.max_iter_factor" => "iteration cap as a multiple of the pixel count",
        "codec.latent_channels" => "latent channels",
        "codec.hidden" => "encoder channel widths",
        "codec.normalization.d_min" => "depth mapped to 0, meters",
        "codec.normalization.d_max" => "depth mapped to 1, meters",
        "codec_train.epochs" => "codec training epochs",
        "codec_train.batch_size" => "codec batch size",
        "codec_train.lr" => "codec peak learning rate",
        "codec_train.latent_reg" => "weight of the latent magnitude penalty",
        "codec_train.pixel_lambda" => "lambda inside the codec pixel loss",
        "codec_train.seed" => "codec initialization and shuffling seed",
        "denoiser.latent_channels" => "latent channels (must match the codec)",
        "denoiser.channels" => "trunk width",
        "denoiser.blocks" => "number of residual bottleneck blocks",
        "denoiser.bottleneck" => "bottleneck width inside each block",
        "denoiser.time_dim" => "sinusoidal timestep embedding size",
        "denoiser.pyramid_channels" => "feature widths of the three pyramid levels",
        "denoiser.se_reduction" => "squeeze-and-excitation reduction factor",
        "denoiser.residual_init" => "initial per-channel residual gain",
        "denoiser.condition" => "condition inputs: refined or rgb_only",
        "train.horizon" => "diffusion horizon T",
        "train.beta_start" => "first noise variance",
        "train.beta_end" => "last noise variance",
        "train.inference_count" => "inference steps; also the training plan when train_on_plan",
        "train.train_on_plan" => "sample training timesteps from the inference plan only",
        "train.lambda1" => "weight of the latent MSE",
        "train.lambda2" => "weight of the decoded pixel loss",
        "train.lambda3" => "weight of the latent RMS distance",
        "train.pixel_lambda" => "lambda inside the pixel loss",
        "train.lr" => "peak learning rate (cosine decay)",
        "train.beta1" => "Adam first-moment decay",
        "train.beta2" => "Adam second-moment decay",
        "train.eps" => "Adam epsilon",
        "train.epochs" => "diffusion training epochs",
        "train.batch_size" => "diffusion batch size",
        "train.seed" => "initialization, shuffling and noise seed",
        "eval.scope" => "evaluated pixels: transparent_only or all_pixels",
        "eval.aggregation" => "pixel_weighted or per_sample",
        "eval.steps" => "inference steps for infer and eval",
        "eval.seed" => "base seed of the initial noise",
        "eval.ablation_counts" => "step counts compared by ablate-steps",
        _ => "",
    }
}

/// Markdown table of every key, its default and its meaning.
pub fn reference_table() -> String {
    let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (k, v) in ExperimentConfig::default().flat() {
        out.push_str(&format!("| `{k}` | `{v}` | {} |\n", describe(&k)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = ExperimentConfig::default()
            .with_overrides([("train.lr", "0.001"), ("denoiser.condition", "rgb_only")])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = ExperimentConfig::default()
            .with_overrides([("train.learning_rate", "1")])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.learning_rate") && msg.contains("train.lr"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for (k, v) in [("train.epochs", "many"), ("train.lambda2", "-1"), ("data.synth.height", "50")] {
            let err = ExperimentConfig::default().with_overrides([(k, v)]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{k}={v}: {err}");
        }
    }

    #[test]
    fn every_key_is_described() {
        for k in ExperimentConfig::keys() {
            assert!(!describe(&k).is_empty(), "{k} has no description");
        }
    }
}
