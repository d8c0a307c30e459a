//! Test-time self-adaptation and the leave-one-subject-out harness.
//!
//! Self-adaptation runs the controller forward on the unlabeled target
//! domain and takes plain gradient steps on the extractor alone; the
//! classifier, g and tau stay frozen. Labels are never read except for
//! optional accuracy reporting.

use crate::autodiff::{NodeId, Tape};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::{self, bind_classifier, bind_controller, bind_extractor, ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::training::{train_loop, DomainBatch, TrainConfig};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug)]
pub struct AdaptationStep {
    pub step: usize,
    pub l_c: f64,
    pub accuracy: Option<f64>,
}

/// Per-step trace of one self-adaptation run. Entry 0 is the
/// pre-adaptation state, so there are `steps + 1` entries.
#[derive(Clone, Debug)]
pub struct AdaptationReport {
    pub steps: Vec<AdaptationStep>,
    pub final_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptConfig {
    pub steps: usize,
    pub adapt_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { steps: 10, adapt_lr: 1e-3 }
    }
}

/// Argmax predictions for a full domain.
pub fn predict(model: &ModelParams, domain: &Domain) -> Result<Vec<u8>> {
    if domain.feat_dim != model.dims.input {
        return Err(Error::invalid(format!(
            "feature dim {} does not match model input {}",
            domain.feat_dim, model.dims.input
        )));
    }
    let batch = DomainBatch::full(domain);
    let mut tape = Tape::new();
    let ext = bind_extractor(&mut tape, &model.extractor)?;
    let clf = bind_classifier(&mut tape, &model.classifier)?;
    let steps: Vec<NodeId> = batch
        .steps
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let feats = model::extract(&mut tape, &ext, &steps)?;
    let logits = model::classify(&mut tape, &clf, feats)?;
    Ok(model::argmax_labels(tape.value(logits)))
}

pub fn accuracy_against(predictions: &[u8], domain: &Domain) -> f64 {
    let correct = predictions
        .iter()
        .zip(domain.samples.iter())
        .filter(|(p, s)| **p == s.label)
        .count();
    correct as f64 / domain.samples.len() as f64
}

fn target_controller_loss(model: &ModelParams, domain: &Domain) -> Result<(f64, Vec<Option<Tensor>>)> {
    let batch = DomainBatch::full(domain);
    let mut tape = Tape::new();
    let ext = bind_extractor(&mut tape, &model.extractor)?;
    let ctrl = bind_controller(&mut tape, &model.controller)?;
    let steps: Vec<NodeId> = batch
        .steps
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let feats = model::extract(&mut tape, &ext, &steps)?;
    let l_c = model::controller_domain_loss(&mut tape, &ctrl, feats)?;
    tape.backward(l_c, false)?;
    let grads = ext.ids().iter().map(|&id| tape.grad(id).cloned()).collect();
    Ok((tape.value(l_c).item(), grads))
}

/// Runs `steps` full-batch gradient steps on theta driven by the
/// single-domain controller loss. phi, omega and tau are untouched. With
/// `report_accuracy` the per-step accuracy against the target's labels is
/// recorded; labels never influence the adaptation itself.
pub fn self_adapt(
    model: &ModelParams,
    target: &Domain,
    cfg: &AdaptConfig,
    report_accuracy: bool,
) -> Result<(ModelParams, AdaptationReport)> {
    if target.samples.is_empty() {
        return Err(Error::invalid("self-adaptation needs a nonempty target domain"));
    }
    let mut adapted = model.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (l_c, grads) = target_controller_loss(&adapted, target)?;
        let accuracy = if report_accuracy {
            Some(accuracy_against(&predict(&adapted, target)?, target))
        } else {
            None
        };
        trace.push(AdaptationStep { step, l_c, accuracy });
        for (t, g) in adapted.extractor.tensors_mut().into_iter().zip(&grads) {
            if let Some(g) = g {
                for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= cfg.adapt_lr * gv;
                }
            }
        }
    }
    let (l_c, _) = target_controller_loss(&adapted, target)?;
    let final_accuracy = if report_accuracy {
        Some(accuracy_against(&predict(&adapted, target)?, target))
    } else {
        None
    };
    trace.push(AdaptationStep { step: cfg.steps, l_c, accuracy: final_accuracy });
    Ok((adapted, AdaptationReport { steps: trace, final_accuracy }))
}

pub fn write_adaptation_csv(report: &AdaptationReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,l_c,accuracy")?;
    for s in &report.steps {
        match s.accuracy {
            Some(a) => writeln!(f, "{},{},{}", s.step, s.l_c, a)?,
            None => writeln!(f, "{},{},", s.step, s.l_c)?,
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct FoldResult {
    pub subject_id: u32,
    pub accuracy: f64,
    /// Accuracy of the same trained model without self-adaptation.
    pub accuracy_frozen: f64,
    pub l_c_start: f64,
    pub l_c_end: f64,
}

#[derive(Clone, Debug)]
pub struct LosoReport {
    pub per_subject: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_deviation: f64,
    pub mean_accuracy_frozen: f64,
}

impl LosoReport {
    fn from_folds(mut folds: Vec<FoldResult>) -> Self {
        folds.sort_by_key(|f| f.subject_id);
        let n = folds.len() as f64;
        let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / n;
        let var = folds.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / n;
        let mean_frozen = folds.iter().map(|f| f.accuracy_frozen).sum::<f64>() / n;
        LosoReport {
            per_subject: folds,
            mean_accuracy: mean,
            std_deviation: var.sqrt(),
            mean_accuracy_frozen: mean_frozen,
        }
    }
}

fn run_fold(
    domains: &[Domain],
    target_idx: usize,
    cfg: &TrainConfig,
    dims: ModelDims,
    adapt: &AdaptConfig,
) -> Result<FoldResult> {
    let target = &domains[target_idx];
    let sources: Vec<Domain> = domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, d)| d.clone())
        .collect();
    // fold isolation: the target subject must not appear among the sources
    assert!(sources.iter().all(|d| d.subject_id != target.subject_id));
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = crate::rng::SplitMix64::derive(cfg.seed, target.subject_id as u64).next_u64();
    let (trained, _history, _pre) = train_loop(&sources, &fold_cfg, dims)?;
    let frozen_pred = predict(&trained, target)?;
    let accuracy_frozen = accuracy_against(&frozen_pred, target);
    let (adapted, report) = self_adapt(&trained, target, adapt, false)?;
    // adaptation must leave phi, omega and tau untouched
    debug_assert_eq!(trained.classifier, adapted.classifier);
    debug_assert_eq!(trained.controller.g_hash(), adapted.controller.g_hash());
    debug_assert_eq!(trained.controller.tau, adapted.controller.tau);
    let pred = predict(&adapted, target)?;
    Ok(FoldResult {
        subject_id: target.subject_id,
        accuracy: accuracy_against(&pred, target),
        accuracy_frozen,
        l_c_start: report.steps.first().map(|s| s.l_c).unwrap_or(f64::NAN),
        l_c_end: report.steps.last().map(|s| s.l_c).unwrap_or(f64::NAN),
    })
}

/// Leave-one-subject-out evaluation: each subject in turn becomes the
/// unlabeled target, the rest train the model. `jobs > 1` runs folds in
/// parallel; the report is merged in subject-id order either way.
pub fn loso_evaluate(
    domains: &[Domain],
    cfg: &TrainConfig,
    dims: ModelDims,
    adapt: &AdaptConfig,
    jobs: usize,
) -> Result<LosoReport> {
    if domains.len() < 2 {
        return Err(Error::invalid("LOSO needs at least 2 subjects"));
    }
    let folds: Vec<FoldResult> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..domains.len())
                .into_par_iter()
                .map(|i| run_fold(domains, i, cfg, dims, adapt))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..domains.len())
            .map(|i| run_fold(domains, i, cfg, dims, adapt))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(LosoReport::from_folds(folds))
}

pub fn write_loso_csv(report: &LosoReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "subject,accuracy")?;
    for fold in &report.per_subject {
        writeln!(f, "{},{}", fold.subject_id, fold.accuracy)?;
    }
    Ok(())
}
