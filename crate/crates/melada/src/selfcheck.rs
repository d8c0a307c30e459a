//! Invariant suite and independent oracles.
//!
//! Everything here checks the implementation through a different route
//! than the implementation itself: central finite differences for
//! gradients, a separately coded Kalman/RTS smoother, direct pairwise
//! sums for the barycenter identity. The CLI `selfcheck` subcommand runs
//! `run_all`; the acceptance tests run the same checks at full scale.

use crate::autodiff::{NodeId, Tape};
use crate::data::{gen_synthetic, serialize_dataset, SynthSpec};
use crate::error::Result;
use crate::model::{
    self, barycenter_identity_check, bind_classifier, bind_controller, bind_extractor,
    mmnd_estimate, ModelDims, ModelParams,
};
use crate::rng::SplitMix64;
use crate::signal::{self, LdsParams};
use crate::tensor::Tensor;
use crate::training::{inner_update, meta_loss, DomainBatch, TrainConfig};

/// Relative error with a floor so finite-difference noise on near-zero
/// gradients does not dominate: |a - b| / max(|a|, |b|, 1e-2).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Central finite differences of a scalar function over a parameter list.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].rows(), params[pi].cols());
        for k in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[k] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[k] -= h;
            g.data_mut()[k] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// One gradient-check case: a scalar function of leaf parameters, with the
/// analytic side computed by the tape.
pub struct GradCase {
    pub name: String,
    pub params: Vec<Tensor>,
    /// Builds the graph, returns loss value and analytic grads per param.
    #[allow(clippy::type_complexity)]
    pub eval: Box<dyn Fn(&[Tensor]) -> Result<(f64, Vec<Option<Tensor>>)>>,
}

impl GradCase {
    /// Max relative error between analytic and central-difference grads.
    pub fn max_rel_err(&self, h: f64) -> Result<f64> {
        let (_, analytic) = (self.eval)(&self.params)?;
        let eval = &self.eval;
        let mut value_only = |p: &[Tensor]| -> Result<f64> { Ok(eval(p)?.0) };
        let fd = finite_diff_grad(&mut value_only, &self.params, h)?;
        let mut worst: f64 = 0.0;
        for (a, f) in analytic.iter().zip(&fd) {
            match a {
                Some(a) => {
                    for (x, y) in a.data().iter().zip(f.data()) {
                        worst = worst.max(rel_err(*x, *y));
                    }
                }
                None => {
                    for y in f.data() {
                        worst = worst.max(rel_err(0.0, *y));
                    }
                }
            }
        }
        Ok(worst)
    }
}

fn rand_tensor(rng: &mut SplitMix64, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| scale * rng.next_normal()).collect()).unwrap()
}

/// A randomly composed op graph over three leaf matrices, reduced to a
/// scalar. Every differentiable primitive appears across the family; the
/// gradient-reversal op only ever appears as a double (net identity) so
/// the finite-difference oracle applies.
fn random_op_graph(seed: u64) -> GradCase {
    let mut rng = SplitMix64::new(seed);
    let rows = 2 + rng.below(3);
    let cols = 2 + rng.below(3);
    let params = vec![
        rand_tensor(&mut rng, rows, cols, 0.8),
        rand_tensor(&mut rng, rows, cols, 0.8),
        rand_tensor(&mut rng, cols, rows, 0.8),
    ];
    let n_ops = 4 + rng.below(6);
    let op_picks: Vec<usize> = (0..n_ops).map(|_| rng.below(10)).collect();
    let eval = move |p: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let a = tape.leaf(p[0].clone())?;
        let b = tape.leaf(p[1].clone())?;
        let w = tape.leaf(p[2].clone())?;
        let mut cur = a;
        for &pick in &op_picks {
            cur = match pick {
                0 => tape.add(cur, b)?,
                1 => tape.sub(cur, b)?,
                2 => tape.mul(cur, b)?,
                3 => tape.tanh(cur)?,
                4 => tape.sigmoid(cur)?,
                5 => {
                    // safe division: denominator in [0.5, 1.5]
                    let s = tape.sigmoid(b)?;
                    let d = tape.add_scalar(s, 0.5)?;
                    tape.div(cur, d)?
                }
                6 => {
                    // matmul with the rectangular leaf and back
                    let m = tape.matmul(cur, w)?;
                    let wt = tape.transpose(w)?;
                    tape.matmul(m, wt)?
                }
                7 => {
                    let sq = tape.mul(cur, cur)?;
                    let sq = tape.add_scalar(sq, 1.0)?;
                    tape.sqrt(sq)?
                }
                8 => {
                    let s = tape.scale(cur, 0.3)?;
                    tape.exp(s)?
                }
                _ => {
                    let g = tape.grl(cur)?;
                    tape.grl(g)?
                }
            };
        }
        let lse = tape.log_sum_exp_rows(cur)?;
        let loss = tape.sum_all(lse)?;
        tape.backward(loss, false)?;
        let grads = [a, b, w].iter().map(|&id| tape.grad(id).cloned()).collect();
        Ok((tape.value(loss).item(), grads))
    };
    GradCase { name: format!("random-ops-{seed}"), params, eval: Box::new(eval) }
}

/// Gradient check through a two-layer recurrent cell.
fn recurrent_cell_graph(seed: u64) -> GradCase {
    let mut rng = SplitMix64::new(seed);
    let dims = ModelDims { input: 3, hidden: 3, clf_hidden: 2, n_classes: 3, ctrl_hidden: 2, ctrl_out: 2 };
    let model = ModelParams::init(dims, &mut rng);
    let steps: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 2, 3, 0.7)).collect();
    let params: Vec<Tensor> = model.extractor.tensors().into_iter().cloned().collect();
    let eval = move |p: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let mut ext = model.extractor.clone();
        for (t, src) in ext.tensors_mut().into_iter().zip(p) {
            *t = src.clone();
        }
        let nodes = bind_extractor(&mut tape, &ext)?;
        let ids: Vec<NodeId> = steps
            .iter()
            .map(|s| tape.leaf(s.clone()))
            .collect::<Result<_>>()?;
        let f = model::extract(&mut tape, &nodes, &ids)?;
        let t = tape.tanh(f)?;
        let loss = tape.sum_all(t)?;
        tape.backward(loss, false)?;
        let grads = nodes.ids().iter().map(|&id| tape.grad(id).cloned()).collect();
        Ok((tape.value(loss).item(), grads))
    };
    GradCase { name: format!("recurrent-cell-{seed}"), params, eval: Box::new(eval) }
}

/// Gradient check through the classifier cross-entropy.
fn classifier_graph(seed: u64) -> GradCase {
    let mut rng = SplitMix64::new(seed);
    let dims = ModelDims { input: 3, hidden: 4, clf_hidden: 3, n_classes: 3, ctrl_hidden: 2, ctrl_out: 2 };
    let model = ModelParams::init(dims, &mut rng);
    let feats = rand_tensor(&mut rng, 5, 4, 0.9);
    let labels: Vec<u8> = (0..5).map(|_| rng.below(3) as u8).collect();
    let params: Vec<Tensor> = model.classifier.tensors().into_iter().cloned().collect();
    let eval = move |p: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let mut clf = model.classifier.clone();
        for (t, src) in clf.tensors_mut().into_iter().zip(p) {
            *t = src.clone();
        }
        let nodes = bind_classifier(&mut tape, &clf)?;
        let f = tape.leaf(feats.clone())?;
        let logits = model::classify(&mut tape, &nodes, f)?;
        let (ce, _) = model::cross_entropy(&mut tape, logits, &labels)?;
        tape.backward(ce, false)?;
        let ids = [nodes.w1, nodes.b1, nodes.w2, nodes.b2];
        let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        Ok((tape.value(ce).item(), grads))
    };
    GradCase { name: format!("classifier-{seed}"), params, eval: Box::new(eval) }
}

/// Gradient check through the full controller loss with respect to the
/// feature batches and the anchor. (g's own weights sit behind a single
/// reversal and are deliberately excluded: their tape gradient is the
/// negation of the true derivative.)
fn controller_graph(seed: u64) -> GradCase {
    let mut rng = SplitMix64::new(seed);
    let dims = ModelDims { input: 3, hidden: 4, clf_hidden: 3, n_classes: 3, ctrl_hidden: 3, ctrl_out: 2 };
    let model = ModelParams::init(dims, &mut rng);
    let (tau_rows, tau_cols) = model.controller.tau.shape();
    let params = vec![
        rand_tensor(&mut rng, 4, 4, 0.9),
        rand_tensor(&mut rng, 3, 4, 0.9),
        rand_tensor(&mut rng, tau_rows, tau_cols, 0.3),
    ];
    let eval = move |p: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let mut ctrl = model.controller.clone();
        ctrl.tau = p[2].clone();
        let nodes = bind_controller(&mut tape, &ctrl)?;
        let fa = tape.leaf(p[0].clone())?;
        let fb = tape.leaf(p[1].clone())?;
        let l = model::controller_loss(&mut tape, &nodes, &[fa, fb])?;
        tape.backward(l, false)?;
        let grads = [fa, fb, nodes.tau]
            .iter()
            .map(|&id| tape.grad(id).cloned())
            .collect();
        Ok((tape.value(l).item(), grads))
    };
    GradCase { name: format!("controller-{seed}"), params, eval: Box::new(eval) }
}

/// The seeded gradient-check family; cases cycle through random op
/// graphs, the recurrent cell, the classifier and the controller.
pub fn gradient_cases(count: usize) -> Vec<GradCase> {
    (0..count)
        .map(|i| match i % 4 {
            0 => random_op_graph(1000 + i as u64),
            1 => recurrent_cell_graph(2000 + i as u64),
            2 => classifier_graph(3000 + i as u64),
            _ => controller_graph(4000 + i as u64),
        })
        .collect()
}

/// Second-order probe: lambda * L_meta as a function of the controller
/// weights, with theta' produced by the recorded inner step. Returns
/// (analytic grads via double backward, finite-difference grads), plus the
/// analytic grads under the first-order ablation.
pub struct SecondOrderProbe {
    pub analytic: Vec<Tensor>,
    pub fd: Vec<Tensor>,
    pub ablated: Vec<Tensor>,
}

pub fn second_order_probe(seed: u64) -> Result<SecondOrderProbe> {
    let mut rng = SplitMix64::new(seed);
    let dims = ModelDims { input: 2, hidden: 2, clf_hidden: 2, n_classes: 3, ctrl_hidden: 2, ctrl_out: 2 };
    let base = ModelParams::init(dims, &mut rng);
    let spec = SynthSpec {
        n_domains: 2,
        feat_dim: 2,
        seq_len: 3,
        samples_per_class: 3,
        shift_strength: 0.4,
        seed: seed ^ 0xABCD,
        ..Default::default()
    };
    let domains = gen_synthetic(&spec)?;
    let train = vec![DomainBatch::full(&domains[0])];
    let valid = vec![DomainBatch::full(&domains[1])];
    let cfg = TrainConfig { lambda: 0.1, inner_alpha: 0.05, ..Default::default() };

    let base_eval = {
        let base = base.clone();
        let train = train.clone();
        let valid = valid.clone();
        move |omega: &[Tensor], detach: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
            let mut tape = Tape::new();
            let mut m = base.clone();
            for (t, src) in m.controller.g_tensors_mut().into_iter().zip(omega) {
                *t = src.clone();
            }
            let ext = bind_extractor(&mut tape, &m.extractor)?;
            let clf = bind_classifier(&mut tape, &m.classifier)?;
            let ctrl = bind_controller(&mut tape, &m.controller)?;
            let feats: Vec<NodeId> = train
                .iter()
                .map(|b| {
                    let steps: Vec<NodeId> = b
                        .steps
                        .iter()
                        .map(|t| tape.leaf(t.clone()))
                        .collect::<Result<_>>()?;
                    model::extract(&mut tape, &ext, &steps)
                })
                .collect::<Result<_>>()?;
            let l_c = model::controller_loss_plain(&mut tape, &ctrl, &feats)?;
            let ext_upd = inner_update(&mut tape, &ext, l_c, cfg.inner_alpha, detach)?;
            let l_meta = meta_loss(&mut tape, &ext, &ext_upd, &clf, &valid)?;
            let scaled = tape.scale(l_meta, cfg.lambda)?;
            tape.backward(scaled, false)?;
            let grads = ctrl.g_ids().iter().map(|&id| tape.grad(id).cloned()).collect();
            Ok((tape.value(scaled).item(), grads))
        }
    };

    let omega0: Vec<Tensor> = base.controller.g_tensors().into_iter().cloned().collect();
    let (_, analytic_raw) = base_eval(&omega0, false)?;
    let analytic: Vec<Tensor> = analytic_raw
        .into_iter()
        .zip(&omega0)
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    let (_, ablated_raw) = base_eval(&omega0, true)?;
    let ablated: Vec<Tensor> = ablated_raw
        .into_iter()
        .zip(&omega0)
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    let mut value_only = |p: &[Tensor]| -> Result<f64> { Ok(base_eval(p, false)?.0) };
    let fd = finite_diff_grad(&mut value_only, &omega0, 1e-5)?;
    Ok(SecondOrderProbe { analytic, fd, ablated })
}

/// Independently coded scalar Kalman filter + RTS smoother; the reference
/// the production smoother is checked against.
pub fn lds_reference(series: &[f64], params: &LdsParams) -> Vec<f64> {
    let (a, c, q, r) = (
        params.transition,
        params.observation,
        params.process_var,
        params.obs_var,
    );
    let n = series.len();
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    let mut priors = Vec::with_capacity(n);
    let mut prior_vars = Vec::with_capacity(n);
    for (t, &y) in series.iter().enumerate() {
        let (prior_m, prior_v) = if t == 0 {
            (y / c, r)
        } else {
            let last_m: f64 = *means.last().unwrap();
            let last_v: f64 = *vars.last().unwrap();
            (a * last_m, a * a * last_v + q)
        };
        priors.push(prior_m);
        prior_vars.push(prior_v);
        if t == 0 {
            means.push(prior_m);
            vars.push(prior_v);
        } else {
            let gain = prior_v * c / (c * c * prior_v + r);
            means.push(prior_m + gain * (y - c * prior_m));
            vars.push((1.0 - gain * c) * prior_v);
        }
    }
    let mut smoothed = means.clone();
    for t in (0..n.saturating_sub(1)).rev() {
        let j = vars[t] * a / prior_vars[t + 1];
        smoothed[t] = means[t] + j * (smoothed[t + 1] - priors[t + 1]);
    }
    smoothed.iter().map(|&m| c * m).collect()
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

fn check_gradients(n_cases: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for case in gradient_cases(n_cases) {
        match case.max_rel_err(1e-5) {
            Ok(e) => worst = worst.max(e),
            Err(err) => {
                return CheckResult::new(
                    "gradient-oracle",
                    false,
                    format!("case {} failed: {err}", case.name),
                )
            }
        }
    }
    CheckResult::new(
        "gradient-oracle",
        worst < 1e-4,
        format!("{n_cases} cases, max rel err {worst:.3e} (limit 1e-4)"),
    )
}

fn check_grl() -> CheckResult {
    let run = || -> Result<bool> {
        let mut tape = Tape::new();
        let input = Tensor::row(vec![1.5, -2.0, 0.0, 3.7]);
        let x = tape.leaf(input.clone())?;
        let g = tape.grl(x)?;
        let forward_ok = tape.value(g).data() == input.data();
        let s = tape.sum_all(g)?;
        tape.backward(s, false)?;
        let backward_ok = tape.grad(x).unwrap().data() == [-1.0, -1.0, -1.0, -1.0];
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(input)?;
        let gg = tape2.grl(x2)?;
        let gg = tape2.grl(gg)?;
        let s2 = tape2.sum_all(gg)?;
        tape2.backward(s2, false)?;
        let double_ok = tape2.grad(x2).unwrap().data() == [1.0, 1.0, 1.0, 1.0];
        Ok(forward_ok && backward_ok && double_ok)
    };
    match run() {
        Ok(ok) => CheckResult::new("grl-contract", ok, "identity forward, exact negation backward".into()),
        Err(e) => CheckResult::new("grl-contract", false, format!("{e}")),
    }
}

fn check_second_order() -> CheckResult {
    match second_order_probe(77) {
        Ok(probe) => {
            let mut worst: f64 = 0.0;
            for (a, f) in probe.analytic.iter().zip(&probe.fd) {
                for (x, y) in a.data().iter().zip(f.data()) {
                    worst = worst.max(rel_err(*x, *y));
                }
            }
            let ablated_zero = probe
                .ablated
                .iter()
                .all(|t| t.data().iter().all(|&v| v == 0.0));
            CheckResult::new(
                "second-order-path",
                worst < 1e-3 && ablated_zero,
                format!("max rel err {worst:.3e} (limit 1e-3), ablated path zero: {ablated_zero}"),
            )
        }
        Err(e) => CheckResult::new("second-order-path", false, format!("{e}")),
    }
}

fn check_permutation_invariance(cases: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..cases as u64 {
        let mut rng = SplitMix64::new(500 + seed);
        let dims = ModelDims {
            input: 3,
            hidden: 4,
            clf_hidden: 3,
            n_classes: 3,
            ctrl_hidden: 3,
            ctrl_out: 2,
        };
        let m = ModelParams::init(dims, &mut rng);
        let n_domains = 2 + rng.below(3);
        let doms: Vec<Tensor> = (0..n_domains)
            .map(|_| {
                let rows = 2 + rng.below(4);
                rand_tensor(&mut rng, rows, 4, 1.0)
            })
            .collect();
        let eval = |doms: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let nodes = bind_controller(&mut tape, &m.controller).unwrap();
            let ids: Vec<NodeId> =
                doms.iter().map(|d| tape.leaf(d.clone()).unwrap()).collect();
            let l = model::controller_loss(&mut tape, &nodes, &ids).unwrap();
            tape.value(l).item()
        };
        let base = eval(&doms);
        let mut permuted: Vec<Tensor> = doms
            .iter()
            .map(|d| {
                let mut rows: Vec<usize> = (0..d.rows()).collect();
                rng.shuffle(&mut rows);
                let mut data = Vec::with_capacity(d.len());
                for &r in &rows {
                    for c in 0..d.cols() {
                        data.push(d.get(r, c));
                    }
                }
                Tensor::new(d.rows(), d.cols(), data).unwrap()
            })
            .collect();
        worst = worst.max((eval(&permuted) - base).abs());
        permuted.reverse();
        worst = worst.max((eval(&permuted) - base).abs());
    }
    CheckResult::new(
        "permutation-invariance",
        worst <= 1e-9,
        format!("{cases} cases, max |delta| {worst:.3e} (limit 1e-9)"),
    )
}

fn check_barycenter(cases: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..cases as u64 {
        let mut rng = SplitMix64::new(900 + seed);
        let k = 2 + rng.below(9);
        let dim = 1 + rng.below(64);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.next_normal()).collect())
            .collect();
        let (lhs, rhs) = barycenter_identity_check(&means);
        if lhs > 0.0 {
            worst = worst.max((lhs - rhs).abs() / lhs);
        }
    }
    CheckResult::new(
        "barycenter-identity",
        worst < 1e-9,
        format!("{cases} cases, max rel err {worst:.3e} (limit 1e-9)"),
    )
}

fn check_mmnd(cases: usize) -> CheckResult {
    let identity = |t: &Tensor| t.clone();
    let mut ok = true;
    let mut detail = String::new();
    for seed in 0..cases as u64 {
        let mut rng = SplitMix64::new(1300 + seed);
        let dim = 2 + rng.below(6);
        let rows_a = 2 + rng.below(5);
        let a = rand_tensor(&mut rng, rows_a, dim, 1.0);
        let rows_b = 2 + rng.below(5);
        let b = rand_tensor(&mut rng, rows_b, dim, 1.0);
        let same = mmnd_estimate(&a, &a, &identity).unwrap();
        let ab = mmnd_estimate(&a, &b, &identity).unwrap();
        let ba = mmnd_estimate(&b, &a, &identity).unwrap();
        if same > 1e-12 || ab < 0.0 || (ab - ba).abs() > 0.0 {
            ok = false;
            detail = format!("seed {seed}: same={same:e} ab={ab} ba={ba}");
            break;
        }
    }
    if detail.is_empty() {
        detail = format!("{cases} cases: symmetric, nonnegative, zero on identical sets");
    }
    CheckResult::new("mmnd-estimator", ok, detail)
}

fn check_signal() -> CheckResult {
    let run = || -> Result<(f64, f64, f64)> {
        let fs = 200;
        let tone: Vec<f64> = (0..fs)
            .map(|n| (2.0 * std::f64::consts::PI * 10.0 * n as f64 / fs as f64).sin())
            .collect();
        let e = signal::stft_band_energy(&[tone.clone()], fs, &signal::default_bands())?;
        let total: f64 = e[0].iter().sum();
        let alpha_frac = e[0][2] / total;

        let taper = signal::hann_periodic(fs);
        let time_energy: f64 = tone
            .iter()
            .zip(&taper)
            .map(|(&x, &w)| (x * w) * (x * w))
            .sum();
        let spec_energy = signal::total_spectral_energy(&tone, fs);
        let parseval_rel = (spec_energy - time_energy).abs() / time_energy;

        let mut rng = SplitMix64::new(1700);
        let series: Vec<f64> = (0..50).map(|_| rng.next_normal()).collect();
        let params = LdsParams::default();
        let ours = signal::lds_smooth(&series, &params)?;
        let reference = lds_reference(&series, &params);
        let lds_err = ours
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok((alpha_frac, parseval_rel, lds_err))
    };
    match run() {
        Ok((alpha_frac, parseval_rel, lds_err)) => CheckResult::new(
            "signal-oracles",
            alpha_frac > 0.999999 && parseval_rel < 1e-9 && lds_err < 1e-9,
            format!(
                "alpha fraction {alpha_frac:.9}, parseval rel {parseval_rel:.3e}, lds max err {lds_err:.3e}"
            ),
        ),
        Err(e) => CheckResult::new("signal-oracles", false, format!("{e}")),
    }
}

fn check_synth_determinism() -> CheckResult {
    let spec = SynthSpec { n_domains: 2, samples_per_class: 4, ..Default::default() };
    let a = serialize_dataset(&gen_synthetic(&spec).unwrap());
    let b = serialize_dataset(&gen_synthetic(&spec).unwrap());
    CheckResult::new(
        "synthetic-determinism",
        a == b,
        format!("{} bytes, regenerated identically", a.len()),
    )
}

/// Runs every invariant check at self-check scale.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_gradients(24),
        check_grl(),
        check_second_order(),
        check_permutation_invariance(20),
        check_barycenter(50),
        check_mmnd(20),
        check_signal(),
        check_synth_determinism(),
    ]
}
