//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (visible with `--nocapture`; a failing criterion fails
//! the test either way).

use std::time::Instant;

use melada::adaptation::{loso_evaluate, write_loso_csv, AdaptConfig};
use melada::autodiff::Tape;
use melada::data::{dataset_sha256, gen_synthetic, SynthSpec};
use melada::model::{
    barycenter_identity_check, bind_controller, controller_loss, mmnd_estimate, ModelDims,
    ModelParams,
};
use melada::rng::SplitMix64;
use melada::selfcheck::{
    gradient_cases, lds_reference, rel_err, second_order_probe,
};
use melada::signal::{
    default_bands, hann_periodic, lds_smooth, stft_band_energy, total_spectral_energy,
    LdsParams,
};
use melada::tensor::Tensor;
use melada::training::TrainConfig;

fn report(criterion: u32, passed: bool, detail: &str) {
    println!(
        "criterion {criterion:02} {}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion}: {detail}");
}

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let cases = gradient_cases(100);
    assert_eq!(cases.len(), 100);
    for case in cases {
        let e = case
            .max_rel_err(1e-5)
            .unwrap_or_else(|err| panic!("case {}: {err}", case.name));
        worst = worst.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-4 && secs < 60.0,
        &format!("100 seeded graphs, max rel err {worst:.3e} (< 1e-4), {secs:.1}s (< 60s)"),
    );
}

#[test]
fn criterion_02_second_order_path() {
    let probe = second_order_probe(77).unwrap();
    let mut worst: f64 = 0.0;
    let mut signal: f64 = 0.0;
    for (a, f) in probe.analytic.iter().zip(&probe.fd) {
        for (x, y) in a.data().iter().zip(f.data()) {
            worst = worst.max(rel_err(*x, *y));
            signal = signal.max(x.abs());
        }
    }
    let ablated_zero = probe
        .ablated
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 0.0));
    report(
        2,
        worst < 1e-3 && ablated_zero && signal > 1e-10,
        &format!(
            "double-backward vs FD max rel err {worst:.3e} (< 1e-3); first-order ablation exactly zero: {ablated_zero}"
        ),
    );
}

#[test]
fn criterion_03_grl_contract() {
    let input = Tensor::row(vec![1.5, -2.25, 0.0, 1e-300, -3.875]);

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone()).unwrap();
    let g = tape.grl(x).unwrap();
    let forward_bits: Vec<u64> = tape.value(g).data().iter().map(|v| v.to_bits()).collect();
    let input_bits: Vec<u64> = input.data().iter().map(|v| v.to_bits()).collect();
    let s = tape.sum_all(g).unwrap();
    tape.backward(s, false).unwrap();
    let neg_ok = tape.grad(x).unwrap().data().iter().all(|&v| v == -1.0);

    let mut t2 = Tape::new();
    let x2 = t2.leaf(input.clone()).unwrap();
    let gg = t2.grl(x2).unwrap();
    let gg = t2.grl(gg).unwrap();
    let w = t2.leaf(Tensor::row(vec![0.5, -1.5, 2.0, 3.0, -0.25])).unwrap();
    let prod = t2.mul(gg, w).unwrap();
    let s2 = t2.sum_all(prod).unwrap();
    t2.backward(s2, false).unwrap();
    let grl_grad = t2.grad(x2).unwrap().clone();

    let mut t3 = Tape::new();
    let x3 = t3.leaf(input).unwrap();
    let w3 = t3.leaf(Tensor::row(vec![0.5, -1.5, 2.0, 3.0, -0.25])).unwrap();
    let prod3 = t3.mul(x3, w3).unwrap();
    let s3 = t3.sum_all(prod3).unwrap();
    t3.backward(s3, false).unwrap();
    let id_grad = t3.grad(x3).unwrap().clone();
    let double_exact = grl_grad
        .data()
        .iter()
        .zip(id_grad.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    report(
        3,
        forward_bits == input_bits && neg_ok && double_exact,
        "forward bit-identity, backward exact negation, double reversal == identity (exact)",
    );
}

#[test]
fn criterion_04_permutation_and_reorder_invariance() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = SplitMix64::new(4000 + seed);
        let dims = ModelDims {
            input: 4,
            hidden: 5,
            clf_hidden: 4,
            n_classes: 3,
            ctrl_hidden: 4,
            ctrl_out: 3,
        };
        let m = ModelParams::init(dims, &mut rng);
        let n_domains = 2 + rng.below(4);
        let doms: Vec<Tensor> = (0..n_domains)
            .map(|_| {
                let rows = 2 + rng.below(5);
                let data: Vec<f64> = (0..rows * 5).map(|_| rng.next_normal()).collect();
                Tensor::new(rows, 5, data).unwrap()
            })
            .collect();
        let eval = |doms: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let ctrl = bind_controller(&mut tape, &m.controller).unwrap();
            let ids: Vec<_> = doms.iter().map(|d| tape.leaf(d.clone()).unwrap()).collect();
            let l = controller_loss(&mut tape, &ctrl, &ids).unwrap();
            tape.value(l).item()
        };
        let base = eval(&doms);
        // permute rows within each domain
        let mut permuted: Vec<Tensor> = doms
            .iter()
            .map(|d| {
                let mut order: Vec<usize> = (0..d.rows()).collect();
                rng.shuffle(&mut order);
                let mut data = Vec::with_capacity(d.len());
                for &r in &order {
                    for c in 0..d.cols() {
                        data.push(d.get(r, c));
                    }
                }
                Tensor::new(d.rows(), d.cols(), data).unwrap()
            })
            .collect();
        worst = worst.max((eval(&permuted) - base).abs());
        // reorder the domains themselves
        rng.shuffle(&mut permuted);
        worst = worst.max((eval(&permuted) - base).abs());
    }
    report(
        4,
        worst <= 1e-9,
        &format!("50 cases, max |delta| {worst:.3e} (<= 1e-9)"),
    );
}

#[test]
fn criterion_05_barycenter_identity() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = SplitMix64::new(5000 + seed);
        let k = 2 + rng.below(9); // K <= 10
        let dim = 1 + rng.below(64); // dim <= 64
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.next_normal()).collect())
            .collect();
        let (lhs, rhs) = barycenter_identity_check(&means);
        if lhs > 0.0 {
            worst = worst.max((lhs - rhs).abs() / lhs);
        }
    }
    report(
        5,
        worst < 1e-9,
        &format!("100 cases K<=10 dim<=64, max rel err {worst:.3e} (< 1e-9)"),
    );
}

#[test]
fn criterion_06_mmnd_estimator() {
    let mut rng = SplitMix64::new(6000);
    let mut max_same: f64 = 0.0;
    let mut max_asym: f64 = 0.0;
    let mut min_val = f64::INFINITY;
    for _ in 0..50 {
        let dim = 2 + rng.below(8);
        let rows_a = 2 + rng.below(6);
        let rows_b = 2 + rng.below(6);
        let a = Tensor::new(rows_a, dim, (0..rows_a * dim).map(|_| rng.next_normal()).collect())
            .unwrap();
        let b = Tensor::new(rows_b, dim, (0..rows_b * dim).map(|_| rng.next_normal()).collect())
            .unwrap();
        let g = |t: &Tensor| t.map(|v| v.tanh());
        max_same = max_same.max(mmnd_estimate(&a, &a, &g).unwrap());
        let ab = mmnd_estimate(&a, &b, &g).unwrap();
        let ba = mmnd_estimate(&b, &a, &g).unwrap();
        max_asym = max_asym.max((ab - ba).abs());
        min_val = min_val.min(ab.min(ba));
    }
    report(
        6,
        max_same <= 1e-12 && max_asym == 0.0 && min_val >= 0.0,
        &format!(
            "50 cases: identical sets <= {max_same:.3e} (<= 1e-12), symmetric, nonnegative"
        ),
    );
}

#[test]
fn criterion_07_signal_oracles() {
    let fs = 200;
    let tone: Vec<f64> = (0..fs)
        .map(|n| (2.0 * std::f64::consts::PI * 10.0 * n as f64 / fs as f64).sin())
        .collect();
    let bands = default_bands();
    let energies = stft_band_energy(&[tone.clone()], fs, &bands).unwrap();
    let total: f64 = energies[0].iter().sum();
    let alpha_idx = bands.iter().position(|b| b.name == "alpha").unwrap();
    let alpha_frac = energies[0][alpha_idx] / total;

    let taper = hann_periodic(fs);
    let time_energy: f64 = tone.iter().zip(&taper).map(|(&x, &w)| (x * w) * (x * w)).sum();
    let parseval_rel = (total_spectral_energy(&tone, fs) - time_energy).abs() / time_energy;

    let mut rng = SplitMix64::new(7000);
    let mut lds_err: f64 = 0.0;
    for _ in 0..20 {
        let n = 5 + rng.below(60);
        let series: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let params = LdsParams::default();
        let ours = lds_smooth(&series, &params).unwrap();
        let reference = lds_reference(&series, &params);
        for (a, b) in ours.iter().zip(&reference) {
            lds_err = lds_err.max((a - b).abs());
        }
    }
    report(
        7,
        alpha_frac > 0.999999 && parseval_rel < 1e-9 && lds_err < 1e-9,
        &format!(
            "alpha fraction {alpha_frac:.8} (> 0.999999), Parseval rel {parseval_rel:.3e} (< 1e-9), smoother vs oracle {lds_err:.3e} (< 1e-9)"
        ),
    );
}

#[test]
fn criterion_08_freeze_rule() {
    let spec = SynthSpec { n_domains: 4, samples_per_class: 12, feat_dim: 8, seq_len: 6, ..Default::default() };
    let domains = gen_synthetic(&spec).unwrap();
    let dims = ModelDims::synthetic(spec.feat_dim, spec.n_classes);
    let cfg = TrainConfig {
        max_iterations: 60,
        freeze_threshold: 40,
        batch_per_domain: 8,
        n_valid_domains: 1,
        pretrain_max_iters: 3,
        ..Default::default()
    };
    let mut hashes = Vec::new();
    melada::training::train_loop_observed(&domains, &cfg, dims, &mut |_, params| {
        hashes.push(params.controller.g_hash());
    })
    .unwrap();
    assert_eq!(hashes.len(), 60);
    // entry i is g's hash after iteration i+1; the weights must move at
    // least once through iteration 40 and never after it
    let changed_before = hashes.windows(2).take(39).any(|w| w[0] != w[1]);
    let constant_after = hashes[39..].iter().all(|h| *h == hashes[39]);
    report(
        8,
        changed_before && constant_after,
        &format!(
            "g hash changed before the threshold: {changed_before}; constant from iteration 41 on: {constant_after}"
        ),
    );
}

#[test]
fn criterion_09_synthetic_loso_benefit() {
    let start = Instant::now();
    let domains = gen_synthetic(&SynthSpec::default()).unwrap();
    assert_eq!(domains.len(), 8);
    let dims = ModelDims::synthetic(20, 3);
    let cfg = benchmark_train_config();
    let adapt = benchmark_adapt_config();
    assert_eq!(adapt.steps, 10);
    let report_data = loso_evaluate(&domains, &cfg, dims, &adapt, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let delta = report_data.mean_accuracy - report_data.mean_accuracy_frozen;
    let lc_down_everywhere = report_data
        .per_subject
        .iter()
        .all(|f| f.l_c_end < f.l_c_start);
    report(
        9,
        delta >= 0.05 && lc_down_everywhere && secs < 600.0,
        &format!(
            "mean adapted {:.4} vs frozen {:.4} (delta {delta:+.4} >= 0.05); target L_C fell in every fold: {lc_down_everywhere}; {secs:.0}s (< 600s)",
            report_data.mean_accuracy, report_data.mean_accuracy_frozen
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let domains = gen_synthetic(&SynthSpec::default()).unwrap();
    let hash = dataset_sha256(&domains);
    let pinned = "1d9bd6e933935f81d0b4d2efbe2ee49a22823ddb2a235f1f0529d6330aaf60d8";

    // two identical miniature LOSO runs must write byte-identical CSVs
    let spec = SynthSpec { n_domains: 3, samples_per_class: 6, feat_dim: 6, seq_len: 5, ..Default::default() };
    let small = gen_synthetic(&spec).unwrap();
    let dims = ModelDims::synthetic(spec.feat_dim, spec.n_classes);
    let cfg = TrainConfig {
        max_iterations: 2,
        freeze_threshold: 1,
        batch_per_domain: 6,
        n_valid_domains: 1,
        pretrain_max_iters: 2,
        ..Default::default()
    };
    let adapt = AdaptConfig { steps: 2, adapt_lr: 1e-3 };
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run in 0..2 {
        let rep = loso_evaluate(&small, &cfg, dims, &adapt, 1).unwrap();
        let path = dir.path().join(format!("loso{run}.csv"));
        write_loso_csv(&rep, &path).unwrap();
        csvs.push(std::fs::read(&path).unwrap());
    }
    report(
        10,
        hash == pinned && csvs[0] == csvs[1],
        &format!(
            "dataset sha256 {}.. matches pinned value; repeat runs byte-identical: {}",
            &hash[..16],
            csvs[0] == csvs[1]
        ),
    );
}

#[test]
fn criterion_11_out_of_scope_claims_stated() {
    // Published full-scale results on the gated SEED corpus (15 subjects,
    // 62 channels, mean LOSO accuracy 0.864, SD 0.09) require that dataset
    // and full-scale training; they are not reproducible here and are
    // covered instead by criteria 1-10 at desk scale. What this test pins
    // is the full-scale configuration those runs would use.
    let dims = ModelDims::default();
    let full_scale = dims.input == 310
        && dims.hidden == 256
        && dims.clf_hidden == 100
        && dims.n_classes == 3
        && dims.ctrl_hidden == 128
        && dims.ctrl_out == 64;
    let cfg = TrainConfig::default();
    let hp = cfg.lr == 2e-4
        && cfg.weight_decay == 1e-4
        && cfg.lambda == 0.1
        && cfg.freeze_threshold == 40
        && cfg.max_iterations == 200
        && cfg.pretrain_acc_gate == 0.85
        && AdaptConfig::default().steps == 10;
    report(
        11,
        full_scale && hp,
        "full-scale SEED evaluation (reported mean accuracy 0.864, SD 0.09) is out of scope: dataset is access-gated; its configuration is pinned and criteria 1-10 substitute at desk scale",
    );
}

fn benchmark_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        pretrain_max_iters: 200,
        pretrain_acc_gate: 0.95,
        max_iterations: 25,
        freeze_threshold: 12,
        batch_per_domain: 16,
        n_valid_domains: 2,
        ..Default::default()
    }
}

fn benchmark_adapt_config() -> AdaptConfig {
    AdaptConfig { steps: 10, adapt_lr: 3e-1 }
}
