use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use csgru::bench::{
    ablation_grid, default_subsets, grid_csv, parse_mod_subsets, run_experiment, ExperimentConfig,
};
use csgru::checkpoint;
use csgru::data::{
    load_events, load_idx_images, load_idx_labels, rate_encode, reshape_pipeline, write_spike_file, Dataset,
    PipelineSpec, TaskSpec,
};
use csgru::train::evaluate;
use csgru::{Error, Result};

#[derive(Parser)]
#[command(name = "csgru", version, about = "Train and evaluate spiking GRU variants")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for metrics, config echo and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the baselines and one variant per modification subset.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// A subset such as `1,2,3,4`; repeat the flag or separate subsets
        /// with `;`. Defaults to 1, 2, 3, 4 and 1,2,3,4.
        #[arg(long)]
        mods: Vec<String>,
    },
    /// Convert IDX images or an event CSV into a spike file.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label file for IDX input; defaults to the matching
        /// `labels-idx1` file next to the images.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        timesteps: usize,
        /// Encode only the first N images.
        #[arg(long)]
        limit: Option<usize>,
        /// 2×2 max-pool every frame.
        #[arg(long)]
        pool: bool,
        /// Event sensor extent as HxW.
        #[arg(long, default_value = "128x128")]
        sensor: String,
        /// Event window in seconds.
        #[arg(long, default_value_t = 1.0)]
        window: f64,
        /// Label of an event recording.
        #[arg(long, default_value_t = 0)]
        label: usize,
        /// Class count of an event recording.
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Evaluate a checkpoint on a task given as a JSON file or inline JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalTask {
    task: TaskSpec,
    #[serde(default)]
    pipeline: PipelineSpec,
    #[serde(default)]
    seed: u64,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cli: &Cli, config: &Path) -> Result<ExitCode> {
    let cfg = load_config(config, cli.seed)?;
    create_dir(&cli.out_dir)?;
    write(&cli.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    eprintln!("training {} ({} epochs)", cfg.label(), cfg.epochs);
    let out = run_experiment(&cfg)?;
    let rec = &out.record;
    for row in &rec.rows {
        eprintln!("{}", row.csv_row());
    }
    write(&cli.out_dir.join("metrics.csv"), rec.metrics_csv())?;
    if let Some(net) = &out.network {
        checkpoint::save(&cli.out_dir.join("model.ckpt"), net)?;
    }
    println!(
        "{}: test accuracy {:.4}, spikes/neuron/step {}",
        rec.label,
        rec.final_test_acc,
        rec.spikes_per_neuron_per_step.map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    if let Some(msg) = &rec.diverged {
        eprintln!("error: {msg}");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(cli: &Cli, config: &Path, mods: &[String]) -> Result<ExitCode> {
    let cfg = load_config(config, cli.seed)?;
    let subsets = if mods.is_empty() {
        default_subsets()
    } else {
        let mut all = Vec::new();
        for m in mods {
            all.extend(parse_mod_subsets(m)?);
        }
        all
    };
    create_dir(&cli.out_dir.join("runs"))?;
    write(&cli.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let mut failure = None;
    let rows = ablation_grid(&cfg, &subsets, |row| {
        eprintln!("{}", row.csv_row());
        if let Some(rec) = &row.record {
            let path = cli.out_dir.join("runs").join(format!("{}.csv", row.label));
            if let Err(e) = write(&path, rec.metrics_csv()) {
                failure.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write(&cli.out_dir.join("ablation.csv"), grid_csv(&rows))?;
    print!("{}", grid_csv(&rows));
    Ok(ExitCode::SUCCESS)
}

fn is_idx(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[2] == 0x08)
}

fn parse_sensor(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("sensor must be HxW, got {text:?}")))?;
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("sensor must be HxW, got {text:?}")))
    };
    Ok((num(h)?, num(w)?))
}

#[allow(clippy::too_many_arguments)]
fn encode_cmd(
    seed: u64,
    input: &Path,
    out: &Path,
    labels: Option<&Path>,
    timesteps: usize,
    limit: Option<usize>,
    pool: bool,
    sensor: &str,
    window: f64,
    label: usize,
    classes: usize,
) -> Result<ExitCode> {
    let pipeline = PipelineSpec { grid: None, pool };
    let dataset = if is_idx(input)? {
        let images = load_idx_images(input)?;
        let label_path = match labels {
            Some(p) => p.to_path_buf(),
            None => {
                let name = input
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| Error::Config("cannot derive label file name".into()))?;
                input.with_file_name(name.replace("images-idx3", "labels-idx1"))
            }
        };
        let labs = load_idx_labels(&label_path)?;
        if labs.len() != images.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labs.len()
            )));
        }
        let n = limit.unwrap_or(images.len()).min(images.len());
        let classes = labs.iter().max().map_or(1, |m| m + 1).max(2);
        let samples = images
            .iter()
            .zip(&labs)
            .take(n)
            .enumerate()
            .map(|(i, (img, &l))| reshape_pipeline(&rate_encode(img, timesteps, seed, i as u64, l)?, &pipeline))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, classes)?
    } else {
        let seq = load_events(input, parse_sensor(sensor)?, timesteps, window, label)?;
        Dataset::new(vec![reshape_pipeline(&seq, &pipeline)?], classes)?
    };
    write_spike_file(out, &dataset)?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(cli: &Cli, ckpt: &Path, task: &str) -> Result<ExitCode> {
    let (text, base) = if task.trim_start().starts_with('{') {
        (task.to_string(), None)
    } else {
        let path = Path::new(task);
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        (text, path.parent().map(Path::to_path_buf))
    };
    let mut spec: EvalTask = match serde_json::from_str(&text) {
        Ok(t) => t,
        Err(_) => EvalTask {
            task: serde_json::from_str(&text)?,
            pipeline: PipelineSpec::default(),
            seed: 0,
        },
    };
    if let Some(dir) = base {
        spec.task.rebase(&dir);
    }
    let seed = cli.seed.unwrap_or(spec.seed);
    let net = checkpoint::load(ckpt)?;
    let splits = spec.task.load(seed, &spec.pipeline)?;
    let eval = evaluate(&net, &splits.test)?;
    let report = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "samples": splits.test.len(),
        "accuracy": eval.accuracy,
        "mean_loss": eval.mean_loss,
        "spikes_per_neuron_per_step": eval.activity(),
    });
    create_dir(&cli.out_dir)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write(&cli.out_dir.join("eval.json"), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train { config } => train_cmd(cli, config),
        Command::Ablate { config, mods } => ablate_cmd(cli, config, mods),
        Command::Encode {
            input,
            out,
            labels,
            timesteps,
            limit,
            pool,
            sensor,
            window,
            label,
            classes,
        } => encode_cmd(
            cli.seed.unwrap_or(0),
            input,
            out,
            labels.as_deref(),
            *timesteps,
            *limit,
            *pool,
            sensor,
            *window,
            *label,
            *classes,
        ),
        Command::Eval { checkpoint, task } => eval_cmd(cli, checkpoint, task),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                e if e.is_config() => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
