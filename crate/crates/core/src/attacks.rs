//! Model-level attacks: weight averaging across colluders, magnitude
//! pruning, and cross-entropy-only fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::{train_baseline, DataSplit, ToyHostModel};

/// Default number of fine-tuning epochs.
pub const DEFAULT_FINETUNE_EPOCHS: usize = 20;
/// Default fine-tuning learning rate, matching the embedding default.
pub const DEFAULT_FINETUNE_LR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    CollusionAverage,
    Prune,
    Finetune,
}

/// Which weights magnitude pruning ranks together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    #[default]
    MarkedLayer,
    /// Marked layer and dense weights (biases are left alone).
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub scope: PruneScope,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    DEFAULT_FINETUNE_EPOCHS
}

fn default_lr() -> f64 {
    DEFAULT_FINETUNE_LR
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            rate: 0.0,
            scope: PruneScope::MarkedLayer,
            epochs: DEFAULT_FINETUNE_EPOCHS,
            learning_rate: DEFAULT_FINETUNE_LR,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidParams(format!(
                "fine-tuning learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Applies the attack. Collusion needs at least two models; the other
    /// kinds take exactly one.
    pub fn apply(&self, models: &[&ToyHostModel], data: Option<&DataSplit>) -> Result<ToyHostModel> {
        self.validate()?;
        match self.kind {
            AttackKind::CollusionAverage => collude_average(models),
            AttackKind::Prune | AttackKind::Finetune => {
                let [model] = models else {
                    return Err(Error::InvalidParams(format!(
                        "{:?} attack takes one model, got {}",
                        self.kind,
                        models.len()
                    )));
                };
                if self.kind == AttackKind::Prune {
                    prune_magnitude(model, self.rate, self.scope)
                } else {
                    let data = data.ok_or(Error::Empty("fine-tuning dataset"))?;
                    finetune_attack(model, data, self.epochs, self.learning_rate, self.seed)
                }
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParams(format!("pruning rate must lie in [0, 1], got {rate}")));
    }
    Ok(())
}

/// Elementwise average of every parameter tensor.
pub fn collude_average(models: &[&ToyHostModel]) -> Result<ToyHostModel> {
    let Some((first, rest)) = models.split_first() else {
        return Err(Error::Empty("colluder models"));
    };
    if rest.is_empty() {
        return Err(Error::InvalidParams("collusion needs at least two models".into()));
    }
    if let Some(bad) = rest.iter().position(|m| !first.same_architecture(m)) {
        return Err(Error::Dimension(format!(
            "colluder model {} has a different architecture from model 0",
            bad + 1
        )));
    }
    let mut out = (*first).clone();
    let scale = 1.0 / models.len() as f64;
    let average = |dst: &mut [f64], pick: &dyn Fn(&ToyHostModel) -> &[f64]| {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = models.iter().map(|m| pick(m)[i]).sum::<f64>() * scale;
        }
    };
    average(out.marked.data_mut(), &|m| m.marked.data());
    average(&mut out.dense_w, &|m| &m.dense_w);
    average(&mut out.dense_b, &|m| &m.dense_b);
    Ok(out)
}

/// Zeroes the `round(rate * len)` smallest-magnitude weights in scope.
/// Ties are broken by position, earlier first.
pub fn prune_magnitude(model: &ToyHostModel, rate: f64, scope: PruneScope) -> Result<ToyHostModel> {
    check_rate(rate)?;
    let mut out = model.clone();
    let marked_len = out.marked.len();
    let total = match scope {
        PruneScope::MarkedLayer => marked_len,
        PruneScope::Global => marked_len + out.dense_w.len(),
    };
    let value = |m: &ToyHostModel, i: usize| {
        if i < marked_len {
            m.marked.data()[i]
        } else {
            m.dense_w[i - marked_len]
        }
    };
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| value(model, a).abs().total_cmp(&value(model, b).abs()).then(a.cmp(&b)));
    let count = (rate * total as f64).round() as usize;
    for &i in &order[..count.min(total)] {
        if i < marked_len {
            out.marked.data_mut()[i] = 0.0;
        } else {
            out.dense_w[i - marked_len] = 0.0;
        }
    }
    Ok(out)
}

/// Retrains on the cross-entropy alone.
pub fn finetune_attack(
    model: &ToyHostModel,
    data: &DataSplit,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ToyHostModel> {
    Ok(train_baseline(model, data, epochs, learning_rate, seed)?.0)
}
