//! Command line verbs and the HTTP session service.

pub mod service;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use touchedit_core::editor::EditorModel;
use touchedit_core::pipeline::{self, CompareInputs, PipelineConfig};
use touchedit_core::placement::PlacementModel;

pub use service::{router, AppState, ServeConfig};

/// Contents of the `--config` TOML file; every key is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub serve: ServeConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "touchedit", version, about = "Touch-guided instruction-based object addition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/val dataset and the benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the placement model on a generated dataset directory.
    TrainPlacement {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Train without reasoning text in the target.
        #[arg(long)]
        no_reasoning: bool,
    },
    /// Train the diffusion editor on a generated dataset directory.
    TrainEditor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Condition on a touch-centred square instead of the box.
        #[arg(long)]
        touch_mask: bool,
    },
    /// Evaluate a placement checkpoint and optionally the editor on it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        placement: PathBuf,
        #[arg(long)]
        editor: Option<PathBuf>,
    },
    /// Compare the trained models against the random baseline and ablations.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        placement: PathBuf,
        #[arg(long)]
        placement_no_reasoning: Option<PathBuf>,
        #[arg(long)]
        editor: Option<PathBuf>,
        #[arg(long)]
        touch_editor: Option<PathBuf>,
    },
    /// Serve the HTTP session API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        placement: Option<PathBuf>,
        #[arg(long)]
        editor: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = Config::load(common.config.as_deref())?;
            pipeline::gen_data(&cfg.pipeline, common.seed, &common.out)?;
            println!("wrote dataset to {}", common.out.display());
        }
        Command::TrainPlacement { common, data, no_reasoning } => {
            let mut cfg = Config::load(common.config.as_deref())?;
            if no_reasoning {
                cfg.pipeline.placement.reasoning = false;
            }
            pipeline::train_placement_stage(&cfg.pipeline, common.seed, &data, &common.out)?;
            println!("wrote {}", common.out.join(pipeline::PLACEMENT_CKPT).display());
        }
        Command::TrainEditor { common, data, touch_mask } => {
            let mut cfg = Config::load(common.config.as_deref())?;
            if touch_mask {
                cfg.pipeline.editor.conditioning = touchedit_core::editor::Conditioning::TouchMask;
            }
            pipeline::train_editor_stage(&cfg.pipeline, common.seed, &data, &common.out)?;
            println!("wrote {}", common.out.join(pipeline::EDITOR_CKPT).display());
        }
        Command::Eval { common, bench, placement, editor } => {
            let cfg = Config::load(common.config.as_deref())?;
            let (p, e) =
                pipeline::eval_stage(&cfg.pipeline, common.seed, &bench, &placement, editor.as_deref(), &common.out)?;
            print!("{}", touchedit_core::eval::render_table(&p));
            if let Some(e) = e {
                print!("{}", touchedit_core::eval::render_table(&e));
            }
        }
        Command::Compare { common, bench, placement, placement_no_reasoning, editor, touch_editor } => {
            let cfg = Config::load(common.config.as_deref())?;
            let inputs = CompareInputs { placement: Some(placement), placement_no_reasoning, editor, touch_editor };
            let (p, e) = pipeline::compare_stage(&cfg.pipeline, common.seed, &bench, &inputs, &common.out)?;
            print!("{}", touchedit_core::eval::render_table(&p));
            if let Some(e) = e {
                print!("{}", touchedit_core::eval::render_table(&e));
            }
        }
        Command::Serve { common, placement, editor, addr } => {
            let mut cfg = Config::load(common.config.as_deref())?.serve;
            cfg.placement = placement.or(cfg.placement);
            cfg.editor = editor.or(cfg.editor);
            cfg.addr = addr.unwrap_or(cfg.addr);
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("serve.toml"), toml::to_string(&cfg)?)?;
            serve(&cfg, common.seed)?;
        }
    }
    Ok(())
}

/// Loads both checkpoints and blocks serving requests.
pub fn serve(cfg: &ServeConfig, default_seed: u64) -> anyhow::Result<()> {
    let (Some(placement), Some(editor)) = (&cfg.placement, &cfg.editor) else {
        bail!("serve needs both a placement and an editor checkpoint");
    };
    let placement = PlacementModel::load(placement).context("loading placement checkpoint")?;
    let editor = EditorModel::load(editor).context("loading editor checkpoint")?;
    let state = Arc::new(AppState::new(placement, editor, cfg.max_side)?.with_default_seed(default_seed));
    let app = router(state, cfg.max_upload_bytes);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, app).await?;
        Ok(())
    })
}
