//! Flat run configuration: defaults, then a TOML file, then `RUACKIT_*` environment
//! variables, then `--set key=value` flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use ruackit_core::eval::EvalOptions;
use ruackit_core::head::HeadConfig;
use ruackit_core::metrics::MetricOptions;
use ruackit_core::style::StyleVariant;
use ruackit_core::synth::{BenchmarkConfig, DomainSpec, SceneSpec, ShiftKind, TextureKind};
use ruackit_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const CONFIG_FILE: &str = "config.toml";
pub const ENV_PREFIX: &str = "RUACKIT_";

/// Bad input from the user: unknown keys, type mismatches, malformed flags.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // training
    pub beta: f64,
    pub gamma: f64,
    pub lambda_cal: f64,
    pub eps_style: f64,
    pub eps_deform: f64,
    pub lr_head: f64,
    pub lr_attack_start: f64,
    pub lr_attack_end: f64,
    pub lr_scale: f64,
    pub lr_attack_scale: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub p1: f64,
    pub p2: f64,
    pub kl_element_scale: f64,
    pub grl_scale: f64,
    pub ue_only: bool,
    pub style: bool,
    pub style_variant: StyleVariant,
    pub deform: bool,
    pub cal_to_head: bool,
    pub seed: u64,
    // head
    pub feat_dim: usize,
    pub hypotheses: usize,
    pub token_hidden: usize,
    pub enc_channels: usize,
    pub kappa_init: f64,
    // benchmark
    pub height: usize,
    pub width: usize,
    /// Objects per scene; 0 draws 1–3.
    pub n_objects: usize,
    pub textures: Vec<TextureKind>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub ood_per_domain: usize,
    pub data_seed: u64,
    /// Shifted domains as `kind@magnitude`.
    pub domains: Vec<String>,
    // metrics
    pub patch: usize,
    pub taus: Vec<f64>,
    pub ece_bins: usize,
    pub coverages: Vec<f64>,
    // evaluation
    pub mc_samples: usize,
    pub eval_seed: u64,
    pub unc_corr: bool,
    pub jobs: usize,
    /// Uncertainty/confidence maps written per domain.
    pub maps: usize,
    // locations
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let b = BenchmarkConfig::default();
        let e = EvalOptions::default();
        Self {
            beta: t.beta,
            gamma: t.gamma,
            lambda_cal: t.lambda_cal,
            eps_style: t.eps_style,
            eps_deform: t.eps_deform,
            lr_head: t.lr_head,
            lr_attack_start: t.lr_attack_start,
            lr_attack_end: t.lr_attack_end,
            lr_scale: t.lr_scale,
            lr_attack_scale: t.lr_attack_scale,
            weight_decay: t.weight_decay,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            epochs: t.epochs,
            batch_size: t.batch_size,
            p1: t.p1,
            p2: t.p2,
            kl_element_scale: t.kl_element_scale,
            grl_scale: t.grl_scale,
            ue_only: t.ue_only,
            style: t.style,
            style_variant: t.style_variant,
            deform: t.deform,
            cal_to_head: t.cal_to_head,
            seed: t.seed,
            feat_dim: t.head.feat_dim,
            hypotheses: t.head.hypotheses,
            token_hidden: t.head.token_hidden,
            enc_channels: t.head.enc_channels,
            kappa_init: t.head.kappa_init,
            height: b.scene.h,
            width: b.scene.w,
            n_objects: b.scene.n_objects.unwrap_or(0),
            textures: b.scene.textures.clone(),
            train_scenes: b.train,
            val_scenes: b.val,
            ood_per_domain: b.ood_per_domain,
            data_seed: b.base_seed,
            domains: b.domains.iter().map(DomainSpec::name).collect(),
            patch: e.metrics.patch,
            taus: e.metrics.taus.clone(),
            ece_bins: e.metrics.ece_bins,
            coverages: e.metrics.coverages.clone(),
            mc_samples: e.mc_samples,
            eval_seed: e.seed,
            unc_corr: e.unc_corr,
            jobs: e.jobs,
            maps: 4,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

pub fn parse_domain(s: &str) -> Result<DomainSpec> {
    let (kind, mag) = s
        .split_once('@')
        .ok_or_else(|| usage(format!("domain `{s}` is not of the form kind@magnitude")))?;
    let kind = ShiftKind::from_str(kind).map_err(|e| usage(format!("domain `{s}`: {e}")))?;
    let magnitude = mag.parse::<f64>().map_err(|_| usage(format!("domain `{s}`: bad magnitude `{mag}`")))?;
    Ok(DomainSpec { kind, magnitude })
}

impl RunConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            head: HeadConfig {
                feat_dim: self.feat_dim,
                hypotheses: self.hypotheses,
                token_hidden: self.token_hidden,
                enc_channels: self.enc_channels,
                kappa_init: self.kappa_init,
            },
            beta: self.beta,
            gamma: self.gamma,
            lambda_cal: self.lambda_cal,
            eps_style: self.eps_style,
            eps_deform: self.eps_deform,
            lr_head: self.lr_head,
            lr_attack_start: self.lr_attack_start,
            lr_attack_end: self.lr_attack_end,
            lr_scale: self.lr_scale,
            lr_attack_scale: self.lr_attack_scale,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            p1: self.p1,
            p2: self.p2,
            kl_element_scale: self.kl_element_scale,
            grl_scale: self.grl_scale,
            ue_only: self.ue_only,
            style: self.style,
            style_variant: self.style_variant,
            deform: self.deform,
            cal_to_head: self.cal_to_head,
            seed: self.seed,
        }
    }

    pub fn benchmark(&self) -> Result<BenchmarkConfig> {
        Ok(BenchmarkConfig {
            scene: SceneSpec {
                h: self.height,
                w: self.width,
                n_objects: (self.n_objects > 0).then_some(self.n_objects),
                textures: self.textures.clone(),
            },
            train: self.train_scenes,
            val: self.val_scenes,
            ood_per_domain: self.ood_per_domain,
            base_seed: self.data_seed,
            domains: self.domains.iter().map(|d| parse_domain(d)).collect::<Result<_>>()?,
        })
    }

    pub fn eval(&self) -> EvalOptions {
        EvalOptions {
            mc_samples: self.mc_samples,
            seed: self.eval_seed,
            unc_corr: self.unc_corr,
            jobs: self.jobs,
            metrics: MetricOptions {
                patch: self.patch,
                taus: self.taus.clone(),
                ece_bins: self.ece_bins,
                coverages: self.coverages.clone(),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

/// A value given as text on the command line or in the environment: TOML syntax when it
/// parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// One source of overrides, named for error messages.
pub struct Layer {
    pub source: String,
    pub table: Table,
}

impl Layer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let table = toml::from_str::<Table>(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        Ok(Self { source: path.display().to_string(), table })
    }

    pub fn from_env(vars: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut table = Table::new();
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                table.insert(key.to_ascii_lowercase(), parse_value(&v));
            }
        }
        Self { source: "environment".into(), table }
    }

    pub fn from_flags(sets: &[String]) -> Result<Self> {
        let mut table = Table::new();
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got `{s}`")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        Ok(Self { source: "--set".into(), table })
    }

    pub fn single(source: &str, key: &str, value: Value) -> Self {
        let mut table = Table::new();
        table.insert(key.to_string(), value);
        Self { source: source.into(), table }
    }
}

/// Later layers win. Unknown keys and values of the wrong type are reported with the
/// key name and the layer that set them.
pub fn resolve(layers: &[Layer]) -> Result<RunConfig> {
    let defaults = Table::try_from(RunConfig::default())?;
    let mut merged = defaults.clone();
    for layer in layers {
        for (k, v) in &layer.table {
            if !defaults.contains_key(k) {
                return Err(usage(format!("unknown config key `{k}` (from {})", layer.source)));
            }
            let mut probe = defaults.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = probe.try_into::<RunConfig>() {
                return Err(usage(format!("invalid value for `{k}` (from {}): {}", layer.source, e.message())));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| anyhow!(e.message().to_string()))?;
    cfg.benchmark()?;
    cfg.train().validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_layer(text: &str) -> Layer {
        Layer { source: "test".into(), table: toml::from_str(text).unwrap() }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = resolve(&[file_layer("")]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.beta, c.gamma, c.lambda_cal, c.eps_style, c.eps_deform), (0.05, 0.2, 0.1, 0.3, 0.15));
        assert_eq!(c.mc_samples, 20);
    }

    #[test]
    fn later_layers_win() {
        let flags = Layer::from_flags(&["gamma=0.5".into()]).unwrap();
        let c = resolve(&[file_layer("gamma = 0.1\nbeta = 0.2"), flags]).unwrap();
        assert_eq!((c.beta, c.gamma), (0.2, 0.5));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = resolve(&[file_layer("gama = 0.3")]).unwrap_err();
        assert!(e.to_string().contains("`gama`"), "{e}");
        assert!(e.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn type_mismatch_is_named() {
        let e = resolve(&[file_layer("epochs = \"many\"")]).unwrap_err();
        assert!(e.to_string().contains("`epochs`"), "{e}");
    }

    #[test]
    fn env_keys_are_lowercased() {
        let env = Layer::from_env([("RUACKIT_STYLE_VARIANT".to_string(), "gcn".to_string()), ("HOME".into(), "/".into())]);
        let c = resolve(&[env]).unwrap();
        assert_eq!(c.style_variant, StyleVariant::Gcn);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig { ue_only: true, domains: vec!["blur@1.5".into()], ..RunConfig::default() };
        let back = resolve(&[file_layer(&c.to_toml().unwrap())]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn domains_parse() {
        let d = parse_domain("elastic@4").unwrap();
        assert_eq!(d.name(), "elastic@4");
        assert!(parse_domain("elastic").is_err());
        assert!(parse_domain("warp@1").is_err());
    }
}
