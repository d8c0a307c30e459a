//! Episodic meta-training: backbone pretraining, the joint network update
//! and the controller update, alternating once per iteration.
//!
//! The inner step theta' = theta - alpha * dL_C/dtheta is plain gradient
//! descent recorded on the tape, so the meta loss differentiates through it
//! (second order). With the first-order ablation flag the inner gradients
//! are detached and the meta term contributes exactly zero gradient to the
//! controller.

use crate::autodiff::{AdamConfig, AdamState, GroupAdam, NodeId, Tape};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::{
    self, bind_classifier, bind_controller, bind_extractor, ClassifierNodes,
    ExtractorNodes, ModelDims, ModelParams,
};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub inner_alpha: f64,
    pub n_valid_domains: usize,
    pub freeze_threshold: usize,
    pub max_iterations: usize,
    pub batch_per_domain: usize,
    pub pretrain_acc_gate: f64,
    pub pretrain_max_iters: usize,
    pub seed: u64,
    /// Ablation: detach the inner step so L_meta contributes no gradient
    /// to the controller.
    pub first_order: bool,
    /// Network updates per controller update (the k:1 schedule knob).
    pub net_steps_per_controller_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-4,
            lambda: 0.1,
            inner_alpha: 1e-3,
            n_valid_domains: 3,
            freeze_threshold: 40,
            max_iterations: 200,
            batch_per_domain: 64,
            pretrain_acc_gate: 0.85,
            pretrain_max_iters: 2000,
            seed: 42,
            first_order: false,
            net_steps_per_controller_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.inner_alpha < 0.0 {
            return Err(Error::invalid("rates must be positive (alpha may be zero)"));
        }
        if self.freeze_threshold > self.max_iterations {
            return Err(Error::invalid("freeze threshold must not exceed max iterations"));
        }
        if self.batch_per_domain < 1 || self.net_steps_per_controller_step < 1 {
            return Err(Error::invalid("counts must be >= 1"));
        }
        Ok(())
    }
}

/// Random per-episode split of the source domains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub train_domains: Vec<usize>,
    pub valid_domains: Vec<usize>,
}

/// Uniformly random disjoint split into |ids| - n_valid train domains and
/// n_valid validation domains.
pub fn partition_episode(
    domain_ids: &[usize],
    n_valid: usize,
    rng: &mut SplitMix64,
) -> Result<EpisodeSplit> {
    if n_valid < 1 || n_valid >= domain_ids.len() {
        return Err(Error::invalid(format!(
            "n_valid must be in [1, {}), got {n_valid}",
            domain_ids.len()
        )));
    }
    let mut ids = domain_ids.to_vec();
    rng.shuffle(&mut ids);
    let valid = ids.split_off(ids.len() - n_valid);
    Ok(EpisodeSplit { train_domains: ids, valid_domains: valid })
}

/// One domain's sampled minibatch, already laid out per time step.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub steps: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl DomainBatch {
    pub fn from_indices(domain: &Domain, indices: &[usize]) -> Self {
        let samples: Vec<&crate::data::SequenceSample> =
            indices.iter().map(|&i| &domain.samples[i]).collect();
        let steps = model::batch_to_steps(&samples, domain.seq_len, domain.feat_dim);
        let labels = samples.iter().map(|s| s.label).collect();
        DomainBatch { steps, labels }
    }

    pub fn full(domain: &Domain) -> Self {
        let indices: Vec<usize> = (0..domain.samples.len()).collect();
        DomainBatch::from_indices(domain, &indices)
    }
}

/// Per-domain sampling without replacement; the order reshuffles each time
/// a domain's epoch is exhausted.
pub struct BatchSampler {
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl BatchSampler {
    pub fn new(domains: &[Domain], rng: &mut SplitMix64) -> Self {
        let order = domains
            .iter()
            .map(|d| {
                let mut idx: Vec<usize> = (0..d.samples.len()).collect();
                rng.shuffle(&mut idx);
                idx
            })
            .collect();
        let cursor = vec![0; domains.len()];
        BatchSampler { order, cursor }
    }

    pub fn next_batch(
        &mut self,
        domain_idx: usize,
        n: usize,
        domain: &Domain,
        rng: &mut SplitMix64,
    ) -> DomainBatch {
        let pool = &mut self.order[domain_idx];
        let n = n.min(pool.len());
        let mut picked = Vec::with_capacity(n);
        while picked.len() < n {
            if self.cursor[domain_idx] >= pool.len() {
                rng.shuffle(pool);
                self.cursor[domain_idx] = 0;
            }
            picked.push(pool[self.cursor[domain_idx]]);
            self.cursor[domain_idx] += 1;
        }
        DomainBatch::from_indices(domain, &picked)
    }
}

/// Optimizer states for the four parameter groups.
pub struct Optimizers {
    pub extractor: GroupAdam,
    pub classifier: GroupAdam,
    pub controller_g: GroupAdam,
    pub tau: AdamState,
    pub cfg: AdamConfig,
}

impl Optimizers {
    pub fn new(model: &ModelParams, cfg: AdamConfig) -> Self {
        Optimizers {
            extractor: GroupAdam::new(&model.extractor.tensors(), cfg),
            classifier: GroupAdam::new(&model.classifier.tensors(), cfg),
            controller_g: GroupAdam::new(&model.controller.g_tensors(), cfg),
            tau: AdamState::for_param(&model.controller.tau),
            cfg,
        }
    }
}

fn leaf_steps(tape: &mut Tape, batch: &DomainBatch) -> Result<Vec<NodeId>> {
    batch.steps.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Features of each domain batch under the given extractor nodes.
fn extract_domains(
    tape: &mut Tape,
    ext: &ExtractorNodes,
    batches: &[DomainBatch],
) -> Result<Vec<NodeId>> {
    batches
        .iter()
        .map(|b| {
            let steps = leaf_steps(tape, b)?;
            model::extract(tape, ext, &steps)
        })
        .collect()
}

/// Mean cross-entropy over equally sized domain batches (average of
/// per-domain means).
fn classification_loss(
    tape: &mut Tape,
    clf: &ClassifierNodes,
    feats: &[NodeId],
    batches: &[DomainBatch],
) -> Result<NodeId> {
    let mut acc = None;
    for (f, b) in feats.iter().zip(batches) {
        let logits = model::classify(tape, clf, *f)?;
        let (ce, _) = model::cross_entropy(tape, logits, &b.labels)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    let total = acc.ok_or_else(|| Error::invalid("no batches"))?;
    tape.scale(total, 1.0 / batches.len() as f64)
}

/// theta' = theta - alpha * dL_C/dtheta, kept on the tape so later losses
/// differentiate through it. With `detach` the gradients enter as
/// constants and the dependence on omega (and theta) is severed.
pub fn inner_update(
    tape: &mut Tape,
    ext: &ExtractorNodes,
    l_c: NodeId,
    alpha: f64,
    detach: bool,
) -> Result<ExtractorNodes> {
    let ids = ext.ids();
    let mut new_ids = Vec::with_capacity(ids.len());
    if detach {
        tape.backward(l_c, false)?;
        let grads: Vec<Option<Tensor>> = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        for (&id, g) in ids.iter().zip(grads) {
            new_ids.push(match g {
                None => id,
                Some(g) => {
                    let gl = tape.leaf(g)?;
                    let step = tape.scale(gl, alpha)?;
                    tape.sub(id, step)?
                }
            });
        }
    } else {
        tape.backward(l_c, true)?;
        for &id in &ids {
            new_ids.push(match tape.grad_node(id)? {
                None => id,
                Some(g) => {
                    let step = tape.scale(g, alpha)?;
                    tape.sub(id, step)?
                }
            });
        }
    }
    Ok(ExtractorNodes::from_ids(&new_ids, ext.layers.len()))
}

/// Eq. 5: sum over validation samples of tanh(l(theta') - l(theta)).
pub fn meta_loss(
    tape: &mut Tape,
    ext_base: &ExtractorNodes,
    ext_updated: &ExtractorNodes,
    clf: &ClassifierNodes,
    valid_batches: &[DomainBatch],
) -> Result<NodeId> {
    if valid_batches.is_empty() {
        return Err(Error::invalid("meta loss needs a nonempty validation set"));
    }
    let mut acc = None;
    for b in valid_batches {
        let steps = leaf_steps(tape, b)?;
        let f_upd = model::extract(tape, ext_updated, &steps)?;
        let logits_upd = model::classify(tape, clf, f_upd)?;
        let (_, per_upd) = model::cross_entropy(tape, logits_upd, &b.labels)?;
        let f_base = model::extract(tape, ext_base, &steps)?;
        let logits_base = model::classify(tape, clf, f_base)?;
        let (_, per_base) = model::cross_entropy(tape, logits_base, &b.labels)?;
        let diff = tape.sub(per_upd, per_base)?;
        let th = tape.tanh(diff)?;
        let s = tape.sum_all(th)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

#[derive(Clone, Copy, Debug)]
pub struct MeladaStepStats {
    pub l_c: f64,
    pub loss_train: f64,
    pub loss_valid: f64,
    pub total: f64,
}

/// One network update (Eq. 7): lambda L_C + train CE + validation CE under
/// the inner-updated extractor; Adam-updates theta and phi.
pub fn melada_step(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    train_batches: &[DomainBatch],
    valid_batches: &[DomainBatch],
    cfg: &TrainConfig,
) -> Result<MeladaStepStats> {
    let mut tape = Tape::new();
    let ext = bind_extractor(&mut tape, &params.extractor)?;
    let clf = bind_classifier(&mut tape, &params.classifier)?;
    let ctrl = bind_controller(&mut tape, &params.controller)?;

    let train_feats = extract_domains(&mut tape, &ext, train_batches)?;
    let l_c = model::controller_loss(&mut tape, &ctrl, &train_feats)?;
    let loss_train = classification_loss(&mut tape, &clf, &train_feats, train_batches)?;
    let l_c_inner = model::controller_loss_plain(&mut tape, &ctrl, &train_feats)?;
    let ext_upd = inner_update(&mut tape, &ext, l_c_inner, cfg.inner_alpha, cfg.first_order)?;
    let valid_feats = extract_domains(&mut tape, &ext_upd, valid_batches)?;
    let loss_valid = classification_loss(&mut tape, &clf, &valid_feats, valid_batches)?;

    let lc_scaled = tape.scale(l_c, cfg.lambda)?;
    let sup = tape.add(loss_train, loss_valid)?;
    let total = tape.add(lc_scaled, sup)?;
    tape.backward(total, false)?;

    let ext_grads: Vec<Option<Tensor>> =
        ext.ids().iter().map(|&id| tape.grad(id).cloned()).collect();
    let clf_ids = [clf.w1, clf.b1, clf.w2, clf.b2];
    let clf_grads: Vec<Option<Tensor>> =
        clf_ids.iter().map(|&id| tape.grad(id).cloned()).collect();
    let stats = MeladaStepStats {
        l_c: tape.value(l_c).item(),
        loss_train: tape.value(loss_train).item(),
        loss_valid: tape.value(loss_valid).item(),
        total: tape.value(total).item(),
    };
    opts.extractor.step(params.extractor.tensors_mut(), &ext_grads)?;
    opts.classifier.step(params.classifier.tensors_mut(), &clf_grads)?;
    Ok(stats)
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerStepStats {
    pub l_c: f64,
    pub l_meta: f64,
}

/// One controller update (Eq. 6): L_C + lambda L_meta with the meta term
/// flowing through the recorded inner step; Adam-updates omega and tau.
/// Past the freeze threshold g's weights stop moving; tau keeps training.
pub fn controller_step(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    train_batches: &[DomainBatch],
    valid_batches: &[DomainBatch],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<ControllerStepStats> {
    let mut tape = Tape::new();
    let ext = bind_extractor(&mut tape, &params.extractor)?;
    let clf = bind_classifier(&mut tape, &params.classifier)?;
    let ctrl = bind_controller(&mut tape, &params.controller)?;

    let train_feats = extract_domains(&mut tape, &ext, train_batches)?;
    let l_c = model::controller_loss(&mut tape, &ctrl, &train_feats)?;
    let l_c_inner = model::controller_loss_plain(&mut tape, &ctrl, &train_feats)?;
    let ext_upd = inner_update(&mut tape, &ext, l_c_inner, cfg.inner_alpha, cfg.first_order)?;
    let l_meta = meta_loss(&mut tape, &ext, &ext_upd, &clf, valid_batches)?;
    let meta_scaled = tape.scale(l_meta, cfg.lambda)?;
    let total = tape.add(l_c, meta_scaled)?;
    tape.backward(total, false)?;

    let stats = ControllerStepStats {
        l_c: tape.value(l_c).item(),
        l_meta: tape.value(l_meta).item(),
    };
    let frozen = params.controller.frozen || iteration > cfg.freeze_threshold;
    if iteration > cfg.freeze_threshold {
        params.controller.frozen = true;
    }
    if !frozen {
        let g_grads: Vec<Option<Tensor>> =
            ctrl.g_ids().iter().map(|&id| tape.grad(id).cloned()).collect();
        opts.controller_g.step(params.controller.g_tensors_mut(), &g_grads)?;
    }
    if let Some(tau_grad) = tape.grad(ctrl.tau).cloned() {
        crate::autodiff::adam_step(&mut params.controller.tau, &tau_grad, &mut opts.tau, &opts.cfg)?;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainStatus {
    GateReached,
    /// Iteration cap hit before the accuracy gate; parameters still usable.
    CapHit,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainOutcome {
    pub status: PretrainStatus,
    pub iterations: usize,
    pub final_accuracy: f64,
}

/// Supervised pretraining of extractor and classifier until training batch
/// accuracy exceeds the gate, or the iteration cap is hit.
pub fn pretrain(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    domains: &[Domain],
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<PretrainOutcome> {
    if domains.is_empty() || domains.iter().all(|d| d.samples.is_empty()) {
        return Err(Error::invalid("pretraining needs labeled source data"));
    }
    let mut sampler = BatchSampler::new(domains, rng);
    let mut accuracy = 0.0;
    for it in 1..=cfg.pretrain_max_iters {
        let batches: Vec<DomainBatch> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| sampler.next_batch(i, cfg.batch_per_domain, d, rng))
            .collect();
        let mut tape = Tape::new();
        let ext = bind_extractor(&mut tape, &params.extractor)?;
        let clf = bind_classifier(&mut tape, &params.classifier)?;
        let feats = extract_domains(&mut tape, &ext, &batches)?;
        // accuracy of the current parameters on this batch
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut logit_nodes = Vec::with_capacity(batches.len());
        for (f, b) in feats.iter().zip(&batches) {
            let logits = model::classify(&mut tape, &clf, *f)?;
            logit_nodes.push(logits);
            let pred = model::argmax_labels(tape.value(logits));
            correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
            total += b.labels.len();
        }
        accuracy = correct as f64 / total as f64;
        if accuracy > cfg.pretrain_acc_gate {
            return Ok(PretrainOutcome {
                status: PretrainStatus::GateReached,
                iterations: it,
                final_accuracy: accuracy,
            });
        }
        let mut acc = None;
        for (logits, b) in logit_nodes.iter().zip(&batches) {
            let (ce, _) = model::cross_entropy(&mut tape, *logits, &b.labels)?;
            acc = Some(match acc {
                None => ce,
                Some(a) => tape.add(a, ce)?,
            });
        }
        let loss = acc.expect("nonempty");
        let loss = tape.scale(loss, 1.0 / batches.len() as f64)?;
        tape.backward(loss, false)?;
        let ext_grads: Vec<Option<Tensor>> =
            ext.ids().iter().map(|&id| tape.grad(id).cloned()).collect();
        let clf_ids = [clf.w1, clf.b1, clf.w2, clf.b2];
        let clf_grads: Vec<Option<Tensor>> =
            clf_ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        opts.extractor.step(params.extractor.tensors_mut(), &ext_grads)?;
        opts.classifier.step(params.classifier.tensors_mut(), &clf_grads)?;
    }
    log::warn!(
        "pretraining hit the {}-iteration cap at accuracy {:.3} (gate {:.2})",
        cfg.pretrain_max_iters,
        accuracy,
        cfg.pretrain_acc_gate
    );
    Ok(PretrainOutcome {
        status: PretrainStatus::CapHit,
        iterations: cfg.pretrain_max_iters,
        final_accuracy: accuracy,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct HistoryRow {
    pub iteration: usize,
    pub l_c: f64,
    pub loss_train: f64,
    pub loss_valid: f64,
    pub l_meta: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,l_c,loss_train,loss_valid,l_meta")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.iteration, r.l_c, r.loss_train, r.loss_valid, r.l_meta
        )?;
    }
    Ok(())
}

/// Full training: pretrain the backbone, then alternate network and
/// controller updates for `max_iterations` episodes.
pub fn train_loop(
    domains: &[Domain],
    cfg: &TrainConfig,
    dims: ModelDims,
) -> Result<(ModelParams, Vec<HistoryRow>, PretrainOutcome)> {
    train_loop_observed(domains, cfg, dims, &mut |_, _| {})
}

/// [`train_loop`] with a per-iteration observer (called after each
/// controller update with the iteration number and current parameters);
/// used to audit invariants like the freeze rule across a run.
pub fn train_loop_observed(
    domains: &[Domain],
    cfg: &TrainConfig,
    dims: ModelDims,
    observe: &mut dyn FnMut(usize, &ModelParams),
) -> Result<(ModelParams, Vec<HistoryRow>, PretrainOutcome)> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(Error::invalid("training needs at least 2 source domains"));
    }
    if cfg.n_valid_domains >= domains.len() {
        return Err(Error::invalid(format!(
            "n_valid_domains {} must be below the domain count {}",
            cfg.n_valid_domains,
            domains.len()
        )));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut params = ModelParams::init(dims, &mut rng);
    let mut opts = Optimizers::new(&params, AdamConfig::new(cfg.lr, cfg.weight_decay));
    let outcome = pretrain(&mut params, &mut opts, domains, cfg, &mut rng)?;

    let ids: Vec<usize> = (0..domains.len()).collect();
    let mut sampler = BatchSampler::new(domains, &mut rng);
    let mut history = Vec::with_capacity(cfg.max_iterations);
    for iteration in 1..=cfg.max_iterations {
        let split = partition_episode(&ids, cfg.n_valid_domains, &mut rng)?;
        let mut last_stats = None;
        let mut train_batches = Vec::new();
        let mut valid_batches = Vec::new();
        for _ in 0..cfg.net_steps_per_controller_step {
            train_batches = split
                .train_domains
                .iter()
                .map(|&i| sampler.next_batch(i, cfg.batch_per_domain, &domains[i], &mut rng))
                .collect();
            valid_batches = split
                .valid_domains
                .iter()
                .map(|&i| sampler.next_batch(i, cfg.batch_per_domain, &domains[i], &mut rng))
                .collect();
            last_stats = Some(melada_step(&mut params, &mut opts, &train_batches, &valid_batches, cfg)?);
        }
        let net = last_stats.expect("at least one network step");
        let ctrl = controller_step(
            &mut params,
            &mut opts,
            &train_batches,
            &valid_batches,
            cfg,
            iteration,
        )?;
        history.push(HistoryRow {
            iteration,
            l_c: net.l_c,
            loss_train: net.loss_train,
            loss_valid: net.loss_valid,
            l_meta: ctrl.l_meta,
        });
        observe(iteration, &params);
    }
    Ok((params, history, outcome))
}
