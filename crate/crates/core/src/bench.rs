//! Experiment configuration, the spiking activity metric, single runs and
//! the ablation grid.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{SpikeMode, SurrogateKind, SurrogateSpec};
use crate::cells::{CellKind, Dynamics, ModSet};
use crate::data::{PipelineSpec, Splits, TaskSpec};
use crate::error::{Error, Result};
use crate::loss::AdamConfig;
use crate::network::{DownConvSpec, Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::train::{evaluate, metrics_csv, train, EpochMetrics, TrainConfig};

/// Spikes per neuron per timestep over binary `[T × neurons]` records.
pub fn spiking_activity_rate(records: &[Tensor]) -> Result<f64> {
    let slots: usize = records.iter().map(Tensor::len).sum();
    if slots == 0 {
        return Err(Error::Empty("spike records"));
    }
    let mut spikes = 0usize;
    for r in records {
        if !r.is_binary() {
            return Err(Error::Data("spike record contains non-binary values".into()));
        }
        spikes += r.data().iter().filter(|&&x| x == 1.0).count();
    }
    Ok(spikes as f64 / slots as f64)
}

/// Percentage by which `rate` undercuts `baseline`.
pub fn relative_reduction(baseline: f64, rate: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (baseline - rate) / baseline)
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}

fn default_one() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

fn default_threshold() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_surrogate() -> SurrogateSpec {
    SurrogateSpec::new(SurrogateKind::Triangular)
}

fn default_mod4() -> SurrogateKind {
    SurrogateKind::Arctan
}

/// A complete declarative description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cell: CellKind,
    #[serde(default)]
    pub mods: ModSet,
    /// Surrogate used unless mod4 is on.
    #[serde(default = "default_surrogate")]
    pub surrogate: SurrogateSpec,
    /// Surrogate kind mod4 switches to; the scale is shared.
    #[serde(default = "default_mod4")]
    pub mod4_surrogate: SurrogateKind,
    pub task: TaskSpec,
    #[serde(default)]
    pub pipeline: PipelineSpec,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_one")]
    pub layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub downconv: Option<DownConvSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub v_th: f64,
    #[serde(default)]
    pub detach_reset: bool,
    #[serde(default = "default_true")]
    pub learn_decay: bool,
    #[serde(default)]
    pub target_train_acc: Option<f64>,
    /// Write elapsed time into the metrics log; off keeps logs reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.task.rebase(dir);
        }
        Ok(cfg)
    }

    /// The surrogate actually used by the spike nonlinearity.
    pub fn effective_surrogate(&self) -> SurrogateSpec {
        let mut s = self.surrogate;
        if self.cell == CellKind::Variant && self.mods.mod4 {
            s.kind = self.mod4_surrogate;
        }
        s.v_th = self.v_th;
        s
    }

    /// Row label in the ablation table.
    pub fn label(&self) -> String {
        match self.cell {
            CellKind::Variant => self.mods.label(),
            other => other.label().to_string(),
        }
    }

    pub fn network_spec(&self, input_shape: Vec<usize>, classes: usize) -> NetworkSpec {
        // Modifications other than mod3 do not change the operators, so
        // every cell except the convolutional variant sees a flat state.
        NetworkSpec {
            cell: self.cell,
            mods: if self.cell == CellKind::Variant {
                self.mods
            } else {
                ModSet::NONE
            },
            input_shape,
            hidden: self.hidden.clone(),
            layers: self.layers,
            kernel: self.kernel,
            classes,
            v_th: self.v_th,
            downconv: self.downconv,
            dynamics: Dynamics {
                surrogate: self.effective_surrogate(),
                mode: SpikeMode::Hard,
                detach_reset: self.detach_reset,
            },
            learn_decay: self.learn_decay,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            target_train_acc: self.target_train_acc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell != CellKind::Variant && self.mods != ModSet::NONE {
            return Err(Error::Config(format!(
                "mods are only meaningful for the variant cell, not {}",
                self.cell.label()
            )));
        }
        if self.mods.mod3 && self.hidden.len() != 3 {
            return Err(Error::Config(format!(
                "mod3 requires a C×H×W hidden grid, got {:?}",
                self.hidden
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        self.surrogate.validate()?;
        self.train_config().validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub config_digest: String,
    pub rows: Vec<EpochMetrics>,
    pub final_test_acc: f64,
    pub final_train_acc: f64,
    pub final_loss: f64,
    pub spikes_per_neuron_per_step: Option<f64>,
    /// Percent reduction in activity relative to the SpikGRU baseline.
    pub relative_reduction: Option<f64>,
    /// Set when the run stopped early on a non-finite loss.
    pub diverged: Option<String>,
}

impl MetricsRecord {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("record serialises");
        hex(&Sha256::digest(json))
    }
}

/// A finished run: its record and the trained network (absent when the
/// network could not be built).
pub struct RunOutput {
    pub record: MetricsRecord,
    pub network: Option<Network>,
}

/// Builds the network for `config`, trains it and evaluates it. A
/// diverging run still returns a record, with `diverged` set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let splits = config.task.load(config.seed, &config.pipeline)?;
    run_on(config, &splits)
}

/// [`run_experiment`] on already loaded data.
pub fn run_on(config: &ExperimentConfig, splits: &Splits) -> Result<RunOutput> {
    config.validate()?;
    let spec = config.network_spec(splits.train.frame_shape(), splits.train.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::init(spec, &mut rng)?;
    let mut rows = Vec::new();
    let outcome = train(
        &mut net,
        splits,
        &config.train_config(),
        config.seed,
        config.record_wall_time,
        |row| rows.push(row.clone()),
    );
    let diverged = match outcome {
        Ok(_) => None,
        Err(e @ Error::Diverged { .. }) => Some(e.to_string()),
        Err(e) => return Err(e),
    };
    let (final_test_acc, spikes) = if rows.is_empty() {
        let eval = evaluate(&net, &splits.test)?;
        (eval.accuracy, eval.activity())
    } else {
        let last = rows.last().expect("non-empty");
        (last.test_acc, last.spikes_per_neuron_per_step)
    };
    let last = rows.last();
    let record = MetricsRecord {
        label: config.label(),
        config_digest: config.digest(),
        final_test_acc,
        final_train_acc: last.map_or(0.0, |r| r.train_acc),
        final_loss: last.map_or(f64::NAN, |r| r.train_loss),
        spikes_per_neuron_per_step: spikes,
        relative_reduction: None,
        diverged,
        rows,
    };
    Ok(RunOutput {
        record,
        network: Some(net),
    })
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub mods: ModSet,
    pub record: Option<MetricsRecord>,
    /// Diagnostic when the run failed before producing a record.
    pub error: Option<String>,
}

pub const GRID_HEADER: &str =
    "model,mods,test_acc,train_acc,final_loss,epochs,spikes_per_neuron_per_step,relative_reduction_pct,status";

impl GridRow {
    pub fn csv_row(&self) -> String {
        let mods: Vec<String> = self.mods.indices().iter().map(u8::to_string).collect();
        let mods = if mods.is_empty() { "-".to_string() } else { mods.join("+") };
        match (&self.record, &self.error) {
            (Some(r), _) => {
                let status = match &r.diverged {
                    Some(msg) => format!("diverged: {}", msg.replace(',', ";")),
                    None => "ok".to_string(),
                };
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    self.label,
                    mods,
                    r.final_test_acc,
                    r.final_train_acc,
                    r.final_loss,
                    r.rows.len(),
                    r.spikes_per_neuron_per_step.map_or("n/a".into(), |x| x.to_string()),
                    r.relative_reduction.map_or("n/a".into(), |x| x.to_string()),
                    status
                )
            }
            (None, err) => format!(
                "{},{},n/a,n/a,n/a,0,n/a,n/a,failed: {}",
                self.label,
                mods,
                err.as_deref().unwrap_or("unknown").replace(',', ";")
            ),
        }
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// The configurations an ablation runs, in table order: GRU, Cuba-LIF and
/// SpikGRU baselines, then one variant per subset.
pub fn grid_configs(base: &ExperimentConfig, subsets: &[ModSet]) -> Vec<ExperimentConfig> {
    let mut out = Vec::with_capacity(3 + subsets.len());
    for cell in [CellKind::Gru, CellKind::CubaLif, CellKind::SpikGru] {
        out.push(ExperimentConfig {
            cell,
            mods: ModSet::NONE,
            ..base.clone()
        });
    }
    for &mods in subsets {
        out.push(ExperimentConfig {
            cell: CellKind::Variant,
            mods,
            ..base.clone()
        });
    }
    out
}

/// Runs every configuration of the grid sequentially, sharing one data
/// load and one seed. `on_row` sees each row as it completes.
pub fn ablation_grid(
    base: &ExperimentConfig,
    subsets: &[ModSet],
    mut on_row: impl FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    base.train_config().validate()?;
    let splits = base.task.load(base.seed, &base.pipeline)?;
    let mut rows = Vec::new();
    let mut baseline_rate = None;
    for cfg in grid_configs(base, subsets) {
        let mut row = GridRow {
            label: cfg.label(),
            mods: cfg.mods,
            record: None,
            error: None,
        };
        match run_on(&cfg, &splits) {
            Ok(out) => {
                let mut rec = out.record;
                if cfg.cell == CellKind::SpikGru {
                    baseline_rate = rec.spikes_per_neuron_per_step;
                }
                if cfg.cell == CellKind::Variant {
                    rec.relative_reduction = baseline_rate
                        .zip(rec.spikes_per_neuron_per_step)
                        .and_then(|(b, r)| relative_reduction(b, r));
                }
                row.record = Some(rec);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Parses `1,2,3,4`-style subsets; several subsets are separated by `;`.
pub fn parse_mod_subsets(text: &str) -> Result<Vec<ModSet>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let idx = s
                .split(',')
                .map(|p| {
                    let p = p.trim().trim_start_matches("mod");
                    p.parse::<u8>()
                        .map_err(|_| Error::Config(format!("bad modification index {p:?}")))
                })
                .collect::<Result<Vec<u8>>>()?;
            ModSet::from_indices(&idx)
        })
        .collect()
}

/// `{1},{2},{3},{4},{1,2,3,4}`.
pub fn default_subsets() -> Vec<ModSet> {
    [&[1u8][..], &[2], &[3], &[4], &[1, 2, 3, 4]]
        .iter()
        .map(|s| ModSet::from_indices(s).expect("valid indices"))
        .collect()
}

/// Table of activity rates in the layout of a per-model comparison, with
/// the reduction relative to the first entry.
pub fn activity_table(entries: &[(String, f64)]) -> String {
    let mut out = String::from("model,spikes_per_neuron_per_step,relative_reduction_pct\n");
    let base = entries.first().map(|e| e.1);
    for (i, (name, rate)) in entries.iter().enumerate() {
        let red = if i == 0 {
            "-".to_string()
        } else {
            base.and_then(|b| relative_reduction(b, *rate))
                .map_or("n/a".into(), |r| format!("{r:.2}"))
        };
        out.push_str(&format!("{name},{rate:.4},{red}\n"));
    }
    out
}
