//! Layered run configuration: built-in defaults, then a TOML file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use stealthpatch_core::evaluation::EvalConfig;
use stealthpatch_core::trainer::TrainConfig;
use stealthpatch_core::victim::{Registry, REGISTRY_ENV};
use stealthpatch_core::PatchRegion;

use crate::error::{CliError, CliResult};

/// Everything one run needs. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image: Option<PathBuf>,
    /// Surrogate model id in the registry.
    pub model: Option<String>,
    pub registry: Option<PathBuf>,
    /// Models the patches are transferred to during evaluation.
    pub transfer_models: Vec<String>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.image.as_mut().map(resolve);
        cfg.registry.as_mut().map(resolve);
        cfg.train.palette.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("config serialization: {e}")))
    }

    pub fn require_image(&self) -> CliResult<&Path> {
        self.image
            .as_deref()
            .ok_or_else(|| CliError::missing("image", "a path to a PNG or JPEG file", "--image"))
    }

    pub fn require_model(&self) -> CliResult<&str> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::missing("model", "a model id string from the registry", "--model"))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.eval.samples == 0 {
            return Err(CliError::Validation("config key `eval.samples`: must be >= 1 (expected a positive integer)".into()));
        }
        Ok(())
    }
}

/// Open the registry from the config, falling back to the environment.
pub fn open_registry(path: Option<&Path>) -> CliResult<Registry> {
    match path {
        Some(p) => Ok(Registry::open(p)?),
        None if std::env::var_os(REGISTRY_ENV).is_some() => Ok(Registry::from_env()?),
        None => Err(CliError::missing(
            "registry",
            &format!("a model registry directory, or the {REGISTRY_ENV} environment variable"),
            "--registry",
        )),
    }
}

/// Parse `HxW`, e.g. `8x8`.
pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Parse `TOP,LEFT`.
pub fn parse_point(s: &str) -> Result<(usize, usize), String> {
    let (t, l) = s.split_once(',').ok_or_else(|| format!("expected TOP,LEFT, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(t)?, p(l)?))
}

/// Flags that override the `[train]` section and the input selection.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Surrogate model id.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scales above the coarsest.
    #[arg(long)]
    pub k: Option<usize>,
    /// Patch size as HxW.
    #[arg(long, value_parser = parse_dims)]
    pub patch: Option<(usize, usize)>,
    /// Fixed placement TOP,LEFT instead of attention-based selection.
    #[arg(long, value_parser = parse_point)]
    pub region: Option<(usize, usize)>,
    /// Targeted attack toward this class.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta_print: Option<f64>,
    #[arg(long)]
    pub gp_coef: Option<f64>,
}

impl TrainFlags {
    /// Defaults, then the config file if given, then these flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.image {
            cfg.image = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(v) = &self.registry {
            cfg.registry = Some(v.clone());
        }
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs_per_scale = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.k {
            t.k = v;
        }
        if let Some((h, w)) = self.patch {
            t.patch_h = h;
            t.patch_w = w;
        }
        if let Some((top, left)) = self.region {
            t.region = Some(PatchRegion::new(top, left, t.patch_h, t.patch_w));
        }
        if let Some(v) = self.target {
            t.targeted = true;
            t.target_class = Some(v);
        }
        if let Some(v) = self.base_channels {
            t.net.base_channels = v;
        }
        let w = &mut t.weights;
        for (dst, src) in [
            (&mut w.kappa, self.kappa),
            (&mut w.alpha, self.alpha),
            (&mut w.beta, self.beta),
            (&mut w.gamma, self.gamma),
            (&mut w.delta_print, self.delta_print),
            (&mut w.gp_coef, self.gp_coef),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
    }
}

/// Flags that override the `[eval]` section.
#[derive(Args, Clone, Debug, Default)]
pub struct EvalFlags {
    /// Comma-separated transfer model ids.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// First evaluation sample seed.
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Skip the PGD baseline.
    #[arg(long)]
    pub no_pgd: bool,
}

impl EvalFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = &self.models {
            cfg.transfer_models = m.clone();
        }
        if let Some(v) = self.samples {
            cfg.eval.samples = v;
        }
        if let Some(v) = self.eval_seed {
            cfg.eval.seed = v;
        }
        if self.no_pgd {
            cfg.eval.run_pgd = false;
        }
    }
}
