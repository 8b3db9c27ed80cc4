//! Monte Carlo collusion sweeps with detection and false-alarm metrics.
//!
//! Per trial, with true colluders `T` and reported minimal sets `S`:
//! detection is the mean over `S` of `|S ∩ T| / |T|`, false alarm the mean
//! over `S` of `|S \ T| / (n - |T|)` (zero when everyone colludes). An empty
//! verdict scores zero on both. Reported rates average trials.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attacks::{collude_average, finetune_attack, prune_magnitude, PruneScope, DEFAULT_FINETUNE_LR};
use crate::codebook::{AccCodebook, CodebookSpec};
use crate::detection::{correlation_scores, decode_codevector, detect_colluders, extract_fingerprint, ColluderVerdict};
use crate::error::{io_err, Error, Result};
use crate::fingerprint::{fingerprint_for, generate_basis, OwnerKeys};
use crate::host::{accuracy, DataSplit, ToyHostModel};
use crate::marking::{embed_fingerprint, EmbedConfig, DEFAULT_TAU};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Desk-scale default trial count.
pub const DEFAULT_TRIALS: usize = 1000;

/// Recorded in every report so readers know which denominator was used.
pub const FALSE_ALARM_DEFINITION: &str = "innocents accused per trial / (n - K), averaged over minimal feasible sets";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Fingerprints composed analytically, no model involved.
    CodeLevel,
    /// Marked models averaged, optionally attacked, then extracted.
    ModelLevel,
}

/// Attacks stacked on top of collusion. Fine-tuning is applied to each
/// colluder's model before averaging; pruning to the averaged model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackStack {
    pub prune_rate: Option<f64>,
    pub prune_scope: PruneScope,
    pub finetune_epochs: Option<usize>,
    pub finetune_learning_rate: Option<f64>,
}

impl AttackStack {
    pub fn is_empty(&self) -> bool {
        self.prune_rate.is_none() && self.finetune_epochs.is_none()
    }

    /// Label used in the `attack` report column.
    pub fn label(&self) -> &'static str {
        match (self.prune_rate.is_some(), self.finetune_epochs.is_some()) {
            (false, false) => "none",
            (true, false) => "prune",
            (false, true) => "finetune",
            (true, true) => "finetune+prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub codebook: CodebookSpec,
    /// Colluder counts to sweep.
    pub k_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default)]
    pub attack: AttackStack,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Largest colluder set searched; defaults to `k + 1`.
    #[serde(default)]
    pub k_cap: Option<usize>,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl TrialConfig {
    pub fn code_level(codebook: CodebookSpec, k_values: Vec<usize>, trials: usize, seed: u64) -> Self {
        Self {
            codebook,
            k_values,
            trials,
            seed,
            mode: Mode::CodeLevel,
            attack: AttackStack::default(),
            tau: DEFAULT_TAU,
            k_cap: None,
        }
    }

    pub fn model_level(codebook: CodebookSpec, k_values: Vec<usize>, trials: usize, seed: u64) -> Self {
        Self {
            mode: Mode::ModelLevel,
            ..Self::code_level(codebook, k_values, trials, seed)
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParams("trials must be at least 1".into()));
        }
        if let Some(&k) = self.k_values.iter().find(|&&k| k == 0 || k > n) {
            return Err(Error::InvalidParams(format!("colluder count {k} outside 1..={n}")));
        }
        if let Some(r) = self.attack.prune_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidParams(format!("pruning rate {r} outside [0, 1]")));
            }
        }
        if self.mode == Mode::CodeLevel && !self.attack.is_empty() {
            return Err(Error::InvalidParams("attacks need model-level mode".into()));
        }
        Ok(())
    }

    fn effective_k_cap(&self, book: &AccCodebook) -> usize {
        self.k_cap.unwrap_or(book.resilience() + 2)
    }
}

/// One row per colluder count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub detection_rate: f64,
    pub false_alarm_rate: f64,
    pub trials: usize,
    pub attack: String,
    pub rate: f64,
    /// Fraction of trials whose decoded code equals the AND of the true
    /// colluders' code-vectors.
    pub decode_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub config: TrialConfig,
    pub false_alarm_definition: String,
    /// Mean test accuracy of the attacked single-user models (model level).
    pub host_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn row(&self, k: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Embedded models for every user of a codebook, plus the owner secrets and
/// data needed to attack them.
#[derive(Debug, Clone)]
pub struct Population {
    pub codebook: AccCodebook,
    pub keys: OwnerKeys,
    pub data: DataSplit,
    /// `models[j - 1]` carries user `j`'s fingerprint.
    pub models: Vec<ToyHostModel>,
}

impl Population {
    /// Embeds every user starting from the same baseline. User `j`'s
    /// descent seed is derived from `config.seed` and `j`.
    pub fn embed(
        codebook: AccCodebook,
        keys: OwnerKeys,
        baseline: &ToyHostModel,
        data: DataSplit,
        config: &EmbedConfig,
    ) -> Result<Self> {
        let mut models = Vec::with_capacity(codebook.n());
        for j in 1..=codebook.n() {
            let f = fingerprint_for(&keys.basis, &codebook, j)?;
            let cfg = EmbedConfig {
                seed: derive_seed(config.seed, &[j as u64]),
                ..*config
            };
            models.push(embed_fingerprint(baseline, &f, &keys, &cfg, &data)?.model);
        }
        Ok(Self { codebook, keys, data, models })
    }

    /// Applies a cross-entropy fine-tune to every user's model.
    pub fn finetuned(&self, epochs: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let models = self
            .models
            .iter()
            .enumerate()
            .map(|(i, m)| finetune_attack(m, &self.data, epochs, learning_rate, derive_seed(seed, &[i as u64 + 1])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { models, ..self.clone() })
    }

    /// Decoded code of a model under this population's secrets.
    pub fn decode(&self, model: &ToyHostModel, tau: f64) -> Result<Vec<u8>> {
        let f = extract_fingerprint(model.marked(), &self.keys.projection)?;
        Ok(decode_codevector(&correlation_scores(&f, &self.keys.basis)?, tau).bits)
    }

    /// Fraction of users whose (optionally pruned) model decodes exactly.
    pub fn decode_accuracy(&self, prune: Option<(f64, PruneScope)>, tau: f64) -> Result<f64> {
        let mut hits = 0usize;
        for (i, m) in self.models.iter().enumerate() {
            let m = match prune {
                Some((rate, scope)) => prune_magnitude(m, rate, scope)?,
                None => m.clone(),
            };
            if self.decode(&m, tau)? == self.codebook.codevector(i) {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.models.len() as f64)
    }

    pub fn mean_test_accuracy(&self, prune: Option<(f64, PruneScope)>) -> Result<f64> {
        let mut sum = 0.0;
        for m in &self.models {
            let m = match prune {
                Some((rate, scope)) => prune_magnitude(m, rate, scope)?,
                None => m.clone(),
            };
            sum += accuracy(&m, &self.data.test)?;
        }
        Ok(sum / self.models.len() as f64)
    }
}

/// Per-trial detection and false-alarm rates for a verdict.
pub fn trial_metrics(verdict: &ColluderVerdict, truth: &[usize], n: usize) -> (f64, f64) {
    if verdict.feasible_sets.is_empty() {
        return (0.0, 0.0);
    }
    let innocents = n - truth.len();
    let (mut det, mut fa) = (0.0, 0.0);
    for set in &verdict.feasible_sets {
        let caught = set.iter().filter(|u| truth.contains(u)).count();
        det += caught as f64 / truth.len() as f64;
        if innocents > 0 {
            fa += (set.len() - caught) as f64 / innocents as f64;
        }
    }
    let m = verdict.feasible_sets.len() as f64;
    (det / m, fa / m)
}

/// The 1-based colluder set for trial `t` at colluder count `k`.
pub fn draw_colluders(seed: u64, n: usize, k: usize, trial: usize) -> Vec<usize> {
    let mut rng = stream_rng(derive_seed(seed, &[k as u64, trial as u64]), Stream::Trials, 0);
    let mut users: Vec<usize> = sample(&mut rng, n, k).into_iter().map(|u| u + 1).collect();
    users.sort_unstable();
    users
}

/// Runs the collusion sweep. Model-level mode needs a population; its
/// codebook must match `config.codebook`.
pub fn run_collusion_sweep(config: &TrialConfig, population: Option<&Population>) -> Result<MetricsReport> {
    match config.mode {
        Mode::CodeLevel => {
            let book = config.codebook.build()?;
            config.validate(book.n())?;
            let basis = generate_basis(book.v(), derive_seed(config.seed, &[0]))?;
            let fingerprints = (1..=book.n())
                .map(|j| fingerprint_for(&basis, &book, j).map(|f| f.values))
                .collect::<Result<Vec<_>>>()?;
            sweep(config, &book, None, |users| {
                let mut avg = vec![0.0; book.v()];
                for &u in users {
                    avg.iter_mut().zip(&fingerprints[u - 1]).for_each(|(a, f)| *a += f);
                }
                avg.iter_mut().for_each(|a| *a /= users.len() as f64);
                Ok(decode_codevector(&correlation_scores(&avg, &basis)?, config.tau).bits)
            })
        }
        Mode::ModelLevel => {
            let pop = population.ok_or(Error::Empty("model-level sweep needs a marked population"))?;
            let book = config.codebook.build()?;
            if book.export().codevectors != pop.codebook.export().codevectors {
                return Err(Error::InvalidParams(
                    "population was embedded with a different codebook".into(),
                ));
            }
            config.validate(book.n())?;
            let finetuned;
            let pop = match config.attack.finetune_epochs {
                Some(epochs) => {
                    let lr = config.attack.finetune_learning_rate.unwrap_or(DEFAULT_FINETUNE_LR);
                    finetuned = pop.finetuned(epochs, lr, derive_seed(config.seed, &[u64::MAX]))?;
                    &finetuned
                }
                None => pop,
            };
            let prune = config.attack.prune_rate.map(|r| (r, config.attack.prune_scope));
            let host_accuracy = Some(pop.mean_test_accuracy(prune)?);
            sweep(config, &book, host_accuracy, |users| {
                let models: Vec<&ToyHostModel> = users.iter().map(|&u| &pop.models[u - 1]).collect();
                let mut attacked = match models.as_slice() {
                    [one] => (*one).clone(),
                    many => collude_average(many)?,
                };
                if let Some((rate, scope)) = prune {
                    attacked = prune_magnitude(&attacked, rate, scope)?;
                }
                pop.decode(&attacked, config.tau)
            })
        }
    }
}

fn sweep<F>(config: &TrialConfig, book: &AccCodebook, host_accuracy: Option<f64>, mut decode: F) -> Result<MetricsReport>
where
    F: FnMut(&[usize]) -> Result<Vec<u8>>,
{
    let n = book.n();
    let k_cap = config.effective_k_cap(book);
    let mut verdicts: HashMap<Vec<u8>, ColluderVerdict> = HashMap::new();
    let mut rows = Vec::with_capacity(config.k_values.len());
    for &k in &config.k_values {
        let (mut det, mut fa, mut exact) = (0.0, 0.0, 0usize);
        for t in 0..config.trials {
            let users = draw_colluders(config.seed, n, k, t);
            let bits = decode(&users)?;
            let zero_based: Vec<usize> = users.iter().map(|u| u - 1).collect();
            if bits == book.and_composition(&zero_based).to_bits() {
                exact += 1;
            }
            let verdict = match verdicts.get(&bits) {
                Some(v) => v,
                None => {
                    let code = crate::detection::DecodedCode { bits: bits.clone(), tau: config.tau };
                    let v = detect_colluders(&code, book, k_cap)?;
                    verdicts.entry(bits).or_insert(v)
                }
            };
            let (d, f) = trial_metrics(verdict, &users, n);
            det += d;
            fa += f;
        }
        let trials = config.trials as f64;
        rows.push(MetricsRow {
            k,
            detection_rate: det / trials,
            false_alarm_rate: fa / trials,
            trials: config.trials,
            attack: config.attack.label().to_string(),
            rate: config.attack.prune_rate.unwrap_or(0.0),
            decode_accuracy: exact as f64 / trials,
        });
    }
    Ok(MetricsReport {
        rows,
        config: config.clone(),
        false_alarm_definition: FALSE_ALARM_DEFINITION.to_string(),
        host_accuracy,
    })
}

/// Outcome of one pruning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningOutcome {
    pub rate: f64,
    /// Fraction of single-user pruned models decoding to their own code.
    pub decode_accuracy: f64,
    pub host_accuracy: f64,
    pub collusion: MetricsReport,
}

pub fn run_pruning_sweep(config: &TrialConfig, population: &Population, rates: &[f64]) -> Result<Vec<PruningOutcome>> {
    rates
        .iter()
        .map(|&rate| {
            let mut cfg = config.clone();
            cfg.mode = Mode::ModelLevel;
            cfg.attack.prune_rate = Some(rate);
            let collusion = run_collusion_sweep(&cfg, Some(population))?;
            let scope = cfg.attack.prune_scope;
            Ok(PruningOutcome {
                rate,
                decode_accuracy: population.decode_accuracy(Some((rate, scope)), cfg.tau)?,
                host_accuracy: collusion.host_accuracy.unwrap_or(f64::NAN),
                collusion,
            })
        })
        .collect()
}

/// Outcome of a fine-tuning sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub decode_accuracy: f64,
    pub resilience_level: usize,
    pub collusion: MetricsReport,
}

/// Fine-tunes every user model for `epochs` (default 20) and reruns the
/// collusion sweep on the result.
pub fn run_finetune_sweep(config: &TrialConfig, population: &Population) -> Result<FinetuneOutcome> {
    let mut cfg = config.clone();
    cfg.mode = Mode::ModelLevel;
    let epochs = cfg.attack.finetune_epochs.unwrap_or(crate::attacks::DEFAULT_FINETUNE_EPOCHS);
    let lr = cfg.attack.finetune_learning_rate.unwrap_or(DEFAULT_FINETUNE_LR);
    let tuned = population.finetuned(epochs, lr, derive_seed(cfg.seed, &[u64::MAX]))?;
    let mut plain = cfg.clone();
    plain.attack.finetune_epochs = None;
    let mut collusion = run_collusion_sweep(&plain, Some(&tuned))?;
    cfg.attack.finetune_epochs = Some(epochs);
    for row in &mut collusion.rows {
        row.attack = cfg.attack.label().to_string();
    }
    collusion.config = cfg.clone();
    Ok(FinetuneOutcome {
        decode_accuracy: tuned.decode_accuracy(None, cfg.tau)?,
        resilience_level: resilience_level(&collusion),
        collusion,
    })
}

/// Largest `K` such that every colluder count `1..=K` is in the report with
/// detection 1 and false alarm 0.
pub fn resilience_level(report: &MetricsReport) -> usize {
    let mut rows: Vec<&MetricsRow> = report.rows.iter().collect();
    rows.sort_by_key(|r| r.k);
    let mut level = 0;
    for r in rows {
        if r.k != level + 1 || r.detection_rate != 1.0 || r.false_alarm_rate != 0.0 {
            break;
        }
        level = r.k;
    }
    level
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// CSV columns: `K,detection_rate,false_alarm_rate,trials,attack,rate`.
pub fn render_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["K", "detection_rate", "false_alarm_rate", "trials", "attack", "rate"])?;
    for r in &report.rows {
        w.write_record([
            r.k.to_string(),
            r.detection_rate.to_string(),
            r.false_alarm_rate.to_string(),
            r.trials.to_string(),
            r.attack.clone(),
            r.rate.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
    }
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(io_err(path))
}
