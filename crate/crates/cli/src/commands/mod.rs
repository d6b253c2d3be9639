pub mod distill;
pub mod eval;
pub mod reward;
pub mod tools;
pub mod train;

use std::path::{Path, PathBuf};

use genotrait::grpo::train::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::manifest::{read_input, RunDir, RunManifest};
use crate::GlobalArgs;

pub struct Ctx {
    pub args: GlobalArgs,
}

impl Ctx {
    pub fn new(args: GlobalArgs) -> Self {
        Ctx { args }
    }

    pub fn data_path(&self, name: &str) -> PathBuf {
        self.args.data_dir.join(name)
    }

    /// The config document with the seed override applied, plus its source text.
    pub fn config(&self) -> CliResult<(TrainConfig, Option<String>)> {
        let (mut cfg, text) = match &self.args.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let cfg: TrainConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                (cfg, Some(text))
            }
            None => (TrainConfig::default(), None),
        };
        if let Some(seed) = self.args.seed {
            cfg.seed = seed;
        }
        Ok((cfg, text))
    }

    pub fn validated_config(&self) -> CliResult<TrainConfig> {
        let (cfg, _) = self.config()?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Opens the run directory for `command`, recording the config file digest.
    pub fn run_dir(&self, command: &str, cfg: &TrainConfig) -> CliResult<RunDir> {
        let path = self.args.out.clone().unwrap_or_else(|| self.data_path("runs").join(command));
        let snapshot = serde_json::to_value(cfg).expect("config serializes");
        let mut manifest = RunManifest::start(command, snapshot, cfg.seed);
        if let (Some(path), (_, Some(text))) = (&self.args.config, self.config()?) {
            manifest.record_input(path, text.as_bytes());
        }
        RunDir::create(path, manifest)
    }

    /// Reads an input file and records its digest.
    pub fn input(&self, run: &mut RunDir, path: &Path) -> CliResult<String> {
        let text = read_input(path)?;
        run.manifest_mut().record_input(path, text.as_bytes());
        Ok(text)
    }
}

/// Non-blank JSONL lines with their 1-based line numbers.
pub fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l))
}

pub fn show_config(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.validated_config()?;
    emit(&(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"));
    Ok(())
}

/// Writes to standard output, ignoring a closed pipe.
pub fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}
