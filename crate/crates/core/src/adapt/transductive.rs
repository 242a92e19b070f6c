use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::finetune::{finetune_classifier, Classifier, FinetuneConfig};
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::pretrain::argmax;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransductiveConfig {
    pub t_max: usize,
    pub agreement_threshold: f64,
    /// Keep only pseudo-labels whose probability reaches this value.
    pub confidence_filter: Option<f64>,
    pub finetune: FinetuneConfig,
}

impl Default for TransductiveConfig {
    fn default() -> Self {
        Self {
            t_max: 5,
            agreement_threshold: 0.99,
            confidence_filter: None,
            finetune: FinetuneConfig::default(),
        }
    }
}

/// One pseudo-labelling round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransductiveState {
    pub t: usize,
    /// Fraction of pseudo-labels unchanged since the previous round (0 in round 1).
    pub agreement: f64,
    /// Size of the pseudo-labelled set used for the following fine-tune.
    pub pseudo_labeled: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TransductiveRun {
    pub trace: Vec<TransductiveState>,
    pub metrics: Vec<MetricsRecord>,
    pub converged: bool,
}

/// Fine-tunes on the labelled seed `seed_data`, then repeatedly labels the
/// unlabelled `target` inputs with the current model and fine-tunes on the
/// union, until consecutive labellings agree on at least
/// `agreement_threshold` of `target` or `t_max` rounds have run.
pub fn transductive_finetune(
    model: &mut Classifier,
    seed_data: &[LabeledExample],
    target: &[LabeledExample],
    config: &TransductiveConfig,
) -> Result<TransductiveRun> {
    if target.is_empty() {
        return Err(Error::Data("transduction needs target inputs".into()));
    }
    if !(0.0..=1.0).contains(&config.agreement_threshold) {
        return Err(Error::Config("agreement_threshold must lie in [0, 1]".into()));
    }
    let mut metrics = finetune_classifier(model, seed_data, &config.finetune)?;
    let mut trace: Vec<TransductiveState> = Vec::new();
    let mut converged = false;
    for t in 1..=config.t_max {
        let probs = model.predict_probs(target)?;
        let labels: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let agreement = match trace.last() {
            Some(prev) => {
                let same = prev.labels.iter().zip(&labels).filter(|(a, b)| a == b).count();
                same as f64 / labels.len() as f64
            }
            None => 0.0,
        };
        let pseudo: Vec<LabeledExample> = target
            .iter()
            .zip(&labels)
            .zip(&probs)
            .filter(|(_, p)| config.confidence_filter.is_none_or(|c| p.iter().cloned().fold(0.0, f64::max) >= c))
            .map(|((e, &l), _)| LabeledExample {
                text: e.text.clone(),
                token_ids: e.token_ids.clone(),
                label: l,
            })
            .collect();
        let mut r = MetricsRecord::new("transductive", t);
        r.agreement = Some(agreement);
        metrics.push(r);
        let state = TransductiveState {
            t,
            agreement,
            pseudo_labeled: pseudo.len(),
            labels,
        };
        log::info!("transductive round {t}: agreement {agreement:.4}, {} pseudo-labels", pseudo.len());
        trace.push(state);
        if t > 1 && agreement >= config.agreement_threshold {
            converged = true;
            break;
        }
        let union: Vec<LabeledExample> = seed_data.iter().cloned().chain(pseudo).collect();
        let mut round = config.finetune;
        round.seed = rng::stream(config.finetune.seed, &[rng::tag("transductive"), t as u64]).random();
        finetune_classifier(model, &union, &round)?;
    }
    Ok(TransductiveRun {
        trace,
        metrics,
        converged,
    })
}
