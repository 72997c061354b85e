//! Run configuration: defaults, then the `--config` file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccfr::eval::FixtureConfig;
use ccfr::geometry::{AnchorSpec, DEFAULT_KEEP_PER_SCALE, DEFAULT_NMS_THRESHOLD};
use ccfr::rerank::{RerankConfig, TopmMode};
use serde::Deserialize;

use crate::args::{Cli, Command, NmsArgs, RerankFlags, TopmModeArg};

/// Every key is optional; absent keys fall back to built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub topn: Option<usize>,
    pub topm: Option<usize>,
    pub t_sf: Option<f64>,
    pub t_sc: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub topm_mode: Option<TopmMode>,
    pub iou_threshold: Option<f64>,
    pub keep_per_scale: Option<usize>,
    pub image_size: Option<u32>,
    pub scales: Option<Vec<f64>>,
    pub strides: Option<Vec<u32>>,
    pub fixture: Option<FixtureConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmsSettings {
    pub iou_threshold: f64,
    pub keep_per_scale: usize,
    pub anchors: AnchorSpec,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub rerank: RerankConfig,
    pub nms: NmsSettings,
    pub fixture: FixtureConfig,
}

impl From<TopmModeArg> for TopmMode {
    fn from(m: TopmModeArg) -> Self {
        match m {
            TopmModeArg::FixedTopm => TopmMode::FixedTopm,
            TopmModeArg::ThresholdOnly => TopmMode::ThresholdOnly,
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn rerank_flags(cmd: &Command) -> RerankFlags {
    match cmd {
        Command::Rerank { rerank, .. } | Command::Eval { rerank, .. } => rerank.clone(),
        Command::Sweep {
            topm,
            topm_mode,
            alpha,
            beta,
            ..
        } => RerankFlags {
            topm: *topm,
            topm_mode: *topm_mode,
            alpha: *alpha,
            beta: *beta,
            ..RerankFlags::default()
        },
        _ => RerankFlags::default(),
    }
}

fn input_paths(cmd: &Command) -> Vec<&PathBuf> {
    match cmd {
        Command::BuildDb { embeddings, .. } | Command::Hierarchy { embeddings, .. } => {
            vec![embeddings]
        }
        Command::Fuse { bundle, weights, .. } => vec![bundle, weights],
        Command::Nms(NmsArgs { boxes, .. }) => boxes.iter().collect(),
        Command::Rerank { inputs, .. }
        | Command::Eval { inputs, .. }
        | Command::Sweep { inputs, .. } => vec![&inputs.db, &inputs.preds, &inputs.queries],
        Command::LossCheck { .. } | Command::GenFixture { .. } => Vec::new(),
    }
}

/// Merges defaults, the config file and flags, then validates. Errors name
/// the offending field or file.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    resolve_with(cli, file)
}

pub fn resolve_with(cli: &Cli, file: ConfigFile) -> Result<RunConfig> {
    for path in input_paths(&cli.command) {
        if !path.is_file() {
            bail!("input file not found: {}", path.display());
        }
    }

    let seed = pick(cli.seed, file.seed, 0);
    let threads = cli.threads.or(file.threads);
    if threads == Some(0) {
        bail!("invalid `threads`: must be at least 1");
    }

    let flags = rerank_flags(&cli.command);
    let d = RerankConfig::default();
    let rerank = RerankConfig {
        topn: pick(flags.topn, file.topn, d.topn),
        topm: pick(flags.topm, file.topm, d.topm),
        t_sf: pick(flags.t_sf, file.t_sf, d.t_sf),
        t_sc: pick(flags.t_sc, file.t_sc, d.t_sc),
        alpha: pick(flags.alpha, file.alpha, d.alpha),
        beta: pick(flags.beta, file.beta, d.beta),
        topm_mode: pick(flags.topm_mode.map(Into::into), file.topm_mode, d.topm_mode),
    };
    rerank.validate()?;

    let nms_flags = match &cli.command {
        Command::Nms(a) => Some(a),
        _ => None,
    };
    let da = AnchorSpec::default();
    let anchors = AnchorSpec {
        image_size: pick(nms_flags.and_then(|a| a.image_size), file.image_size, da.image_size),
        scales: pick(nms_flags.and_then(|a| a.scales.clone()), file.scales, da.scales),
        strides: pick(nms_flags.and_then(|a| a.strides.clone()), file.strides, da.strides),
        clip: !nms_flags.is_some_and(|a| a.no_clip),
        ..da
    };
    anchors.validate()?;
    let nms = NmsSettings {
        iou_threshold: pick(
            nms_flags.and_then(|a| a.iou_threshold),
            file.iou_threshold,
            DEFAULT_NMS_THRESHOLD,
        ),
        keep_per_scale: pick(
            nms_flags.and_then(|a| a.keep_per_scale),
            file.keep_per_scale,
            DEFAULT_KEEP_PER_SCALE,
        ),
        anchors,
    };
    if !(0.0..=1.0).contains(&nms.iou_threshold) {
        bail!("invalid `iou_threshold`: {} not in [0, 1]", nms.iou_threshold);
    }
    if nms.keep_per_scale == 0 {
        bail!("invalid `keep_per_scale`: must be at least 1");
    }

    let mut fixture = file.fixture.unwrap_or_default();
    fixture.seed = seed;
    if let Command::GenFixture {
        num_classes,
        train_per_class,
        test_per_class,
        dim,
        confusable_fraction,
        ..
    } = &cli.command
    {
        fixture.num_classes = num_classes.unwrap_or(fixture.num_classes);
        fixture.train_per_class = train_per_class.unwrap_or(fixture.train_per_class);
        fixture.test_per_class = test_per_class.unwrap_or(fixture.test_per_class);
        fixture.dim = dim.unwrap_or(fixture.dim);
        fixture.confusable_fraction = confusable_fraction.unwrap_or(fixture.confusable_fraction);
    }

    Ok(RunConfig {
        seed,
        threads,
        rerank,
        nms,
        fixture,
    })
}
