//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The end-to-end criteria train 15 models per family
//! and take several minutes on one core.

use std::path::{Path, PathBuf};
use std::time::Instant;

use coco_cli::commands::{compare, CompareReport};
use coco_cli::RunConfig;
use cocolora_core::adapters::{clora_layer_delta, coco_layer_delta, AdapterStack};
use cocolora_core::data::{generate_synthetic, SyntheticSpec};
use cocolora_core::eval::{auc, ece, nll_metric, predict};
use cocolora_core::training::{expected_groups, gradient_check, perturb_parameters, train, GradCheckOptions};
use cocolora_core::variational::{kl_to_isotropic_prior, mc_kl_estimate};
use cocolora_core::{
    DiagonalGaussian, Family, IsotropicPrior, KeyedNoise, Mode, Model, ModelConfig, Purpose, SeededRng, StreamId,
    TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(criterion: u64, draw: u64) -> SeededRng {
    SeededRng::new(2024, StreamId::new(Purpose::Oracle, criterion, 0, draw))
}

fn small_config(family: Family) -> ModelConfig {
    ModelConfig {
        family,
        width: 16,
        depth: 2,
        rank: 4,
        context_dim: 8,
        audio_dim: 16,
        classes: 2,
        ..ModelConfig::default()
    }
}

fn default_config(family: Family) -> ModelConfig {
    ModelConfig {
        family,
        width: 16,
        audio_dim: 16,
        ..ModelConfig::default()
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(&SyntheticSpec {
        n_samples: 4,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut ok = true;
    for family in Family::ALL {
        let mut model = Model::new(small_config(family), 1).unwrap();
        perturb_parameters(&mut model, 0.1, 1);
        let r = gradient_check(&model, &data.samples, &GradCheckOptions::default()).unwrap();
        let mut groups: Vec<_> = r.per_group.iter().map(|g| g.0).collect();
        let mut want = expected_groups(family);
        groups.sort();
        want.sort();
        ok &= r.passes(1e-4) && r.checked >= 200 && groups == want;
        if r.max_relative_error >= worst.0 {
            worst = (r.max_relative_error, format!("{family} {}[{}]", r.worst.0, r.worst.1));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ok && secs < 60.0,
        format!(
            "worst relative error {:.2e} at {} (limit 1e-4), every group covered, {secs:.1} s (limit 60 s)",
            worst.0, worst.1
        ),
    )
}

fn kl_correctness() -> Outcome {
    let mut r = rng(2, 0);
    let mut worst = 0.0_f64;
    for i in 0..50 {
        let n = 1 + r.index(64);
        let beta = 0.05 + 1.95 * r.uniform();
        let mu: Vec<f64> = r.standard_normal(n).into_iter().map(|v| v * beta).collect();
        let sigma: Vec<f64> = (0..n).map(|_| beta * (2.0 * r.uniform() - 1.0).exp()).collect();
        let q = DiagonalGaussian::new(mu, sigma).unwrap();
        let p = IsotropicPrior::new(beta, n).unwrap();
        let exact = kl_to_isotropic_prior(&q, &p).unwrap();
        let mc = mc_kl_estimate(&q, &p, 1_000_000, &mut rng(2, 1 + i)).unwrap();
        worst = worst.max(((mc - exact) / exact).abs());
    }
    let prior_q = DiagonalGaussian::new(vec![0.0; 64], vec![0.2; 64]).unwrap();
    let prior = IsotropicPrior::new(0.2, 64).unwrap();
    let zero = kl_to_isotropic_prior(&prior_q, &prior).unwrap();
    let mut mu = vec![0.0; 64];
    mu[0] = 0.2;
    let hand = kl_to_isotropic_prior(&DiagonalGaussian::new(mu, vec![0.2; 64]).unwrap(), &prior).unwrap();
    outcome(
        worst < 1e-2 && zero == 0.0 && (hand - 0.5).abs() < 1e-12,
        format!("closed form vs 1e6-draw MC worst relative gap {worst:.2e} (limit 1e-2); KL(prior)={zero}; hand case {hand}"),
    )
}

fn reduction_chain() -> Outcome {
    let mut coco = Model::new(default_config(Family::Coco), 3).unwrap();
    perturb_parameters(&mut coco, 0.1, 3);
    let AdapterStack::Coco { layers, .. } = &mut coco.params.adapters else {
        unreachable!()
    };
    for l in layers.iter_mut() {
        l.zero_audio_half();
    }
    let clora_layers: Vec<_> = layers.iter().map(|l| l.text_only()).collect();

    let mut r = rng(3, 0);
    let mut delta_gap = 0.0_f64;
    for (coco_l, clora_l) in layers.iter().zip(&clora_layers) {
        for _ in 0..200 {
            let x = r.standard_normal(16);
            let u = r.standard_normal(16);
            let xi = r.standard_normal(64);
            for noise in [None, Some(xi.as_slice())] {
                let (a, _) = coco_layer_delta(coco_l, &x, &u, noise).unwrap();
                let (b, _) = clora_layer_delta(clora_l, &x, noise).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    delta_gap = delta_gap.max((p - q).abs());
                }
            }
        }
    }

    let mut clora = Model::new(default_config(Family::CLora), 0).unwrap();
    clora.params.classifier = coco.params.classifier.clone();
    clora.params.adapters = AdapterStack::CLora(clora_layers.clone());
    clora.params.adapters.pin_identity_mean();
    clora.params.adapters.pin_sigma_to_floor();
    let AdapterStack::CLora(pinned) = &clora.params.adapters else {
        unreachable!()
    };
    let mut lora = Model::new(default_config(Family::Lora), 0).unwrap();
    lora.params.classifier = clora.params.classifier.clone();
    lora.params.adapters = AdapterStack::Lora(pinned.iter().map(|l| l.factors.clone()).collect());
    let mut logit_gap = 0.0_f64;
    for i in 0..200 {
        let x = r.standard_normal(16);
        let noise = KeyedNoise {
            seed: 3,
            purpose: Purpose::Predict,
            sample: i,
            draw: 0,
        };
        let want = lora.forward(&x, None, Mode::Mean).unwrap().logits;
        let got = clora.forward(&x, None, Mode::Sample(&noise)).unwrap().logits;
        for (p, q) in got.iter().zip(&want) {
            logit_gap = logit_gap.max((p - q).abs());
        }
    }
    outcome(
        delta_gap < 1e-12 && logit_gap < 1e-3,
        format!("CoCo(audio half 0) vs C-LoRA delta gap {delta_gap:.1e} (limit 1e-12); pinned C-LoRA vs LoRA logit gap {logit_gap:.1e} (limit 1e-3)"),
    )
}

fn frozen_and_budget() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        n_samples: 200,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut frozen_ok = true;
    for family in Family::ALL {
        let model = Model::new(default_config(family), 0).unwrap();
        let before = model.frozen_checksum();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &data, &cfg).unwrap();
        frozen_ok &= trained.frozen_checksum() == before && trained.backbone() == model.backbone();
        frozen_ok &= trained.params != model.params;
    }
    let c = Model::new(default_config(Family::Coco), 0).unwrap().parameter_count();
    let clora = Model::new(default_config(Family::CLora), 0).unwrap().parameter_count();
    outcome(
        frozen_ok && c.stochastic_per_layer == 64 && clora.stochastic_per_layer == 64 && c.inference_head_per_layer == 2176,
        format!(
            "W0 checksums unchanged for all families; stochastic latents per layer {} (want 64); CoCo inference head {} (want 2176)",
            c.stochastic_per_layer, c.inference_head_per_layer
        ),
    )
}

fn protocol(overrides: &[(&str, &str)]) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/heteroscedastic.conf");
    let ov: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::load(Some(&path), &ov).unwrap()
}

fn mean(report: &CompareReport, family: Family, pick: fn(&coco_cli::commands::CompareSummary) -> Option<f64>) -> f64 {
    report.summary(family).and_then(pick).unwrap_or(f64::NAN)
}

fn auc_of(s: &coco_cli::commands::CompareSummary) -> Option<f64> {
    s.auc.map(|m| m.mean)
}

fn spearman_of(s: &coco_cli::commands::CompareSummary) -> Option<f64> {
    s.spearman.map(|m| m.mean)
}

fn heteroscedasticity(noisy: &CompareReport, secs: f64) -> Outcome {
    let coco = mean(noisy, Family::Coco, spearman_of);
    let clora = mean(noisy, Family::CLora, spearman_of);
    outcome(
        coco > 0.8 && coco - clora >= 0.2 && secs < 600.0,
        format!(
            "Spearman(rho, entropy): coco {coco:.4} (> 0.8), clora {clora:.4} (gap {:.4} >= 0.2), {secs:.0} s (limit 600 s)",
            coco - clora
        ),
    )
}

fn discrimination(noisy: &CompareReport, clean: &CompareReport) -> Outcome {
    let coco = mean(noisy, Family::Coco, auc_of);
    let clora = mean(noisy, Family::CLora, auc_of);
    let fusion = mean(noisy, Family::Fusion, auc_of);
    let clean_aucs: Vec<(Family, f64)> = Family::ALL.iter().map(|&f| (f, mean(clean, f, auc_of))).collect();
    let clean_ok = clean_aucs.iter().all(|(_, a)| *a > 0.95);
    let clean_txt: Vec<String> = clean_aucs.iter().map(|(f, a)| format!("{f} {a:.4}")).collect();
    outcome(
        coco - clora >= 0.03 && (coco - fusion).abs() <= 0.02 && clean_ok,
        format!(
            "AUC coco {coco:.4}, clora {clora:.4} (gap {:.4} >= 0.03), fusion {fusion:.4} (|gap| {:.4} <= 0.02); clean task: {}",
            coco - clora,
            (coco - fusion).abs(),
            clean_txt.join(", ")
        ),
    )
}

fn normalization_and_convergence() -> Outcome {
    let mut r = rng(7, 0);
    let mut worst_sum = 0.0_f64;
    for family in Family::ALL {
        let mut model = Model::new(default_config(family), 7).unwrap();
        perturb_parameters(&mut model, 0.3, 7);
        for i in 0..1000 {
            let x = r.standard_normal(16);
            let a = r.standard_normal(16);
            let p = predict(&model, &x, Some(&a), 10, 7, i).unwrap();
            worst_sum = worst_sum.max((p.probs.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut worst_gap = 0.0_f64;
    for family in [Family::Blob, Family::CLora, Family::Coco] {
        let mut model = Model::new(default_config(family), 8).unwrap();
        perturb_parameters(&mut model, 0.1, 8);
        for i in 0..10 {
            let x = r.standard_normal(16);
            let a = r.standard_normal(16);
            let p = predict(&model, &x, Some(&a), 10_000, 100, i).unwrap();
            let q = predict(&model, &x, Some(&a), 10_000, 200, i).unwrap();
            for (u, v) in p.probs.iter().zip(&q.probs) {
                worst_gap = worst_gap.max((u - v).abs());
            }
        }
    }
    outcome(
        worst_sum < 1e-6 && worst_gap < 0.01,
        format!("max |sum(p) - 1| {worst_sum:.1e} over 1000 inputs per family (limit 1e-6); independent M=1e4 runs differ by at most {worst_gap:.4} (limit 0.01)"),
    )
}

fn metric_oracles() -> Outcome {
    let hand = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let constant = auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
    let calibrated = ece(&vec![vec![0.75, 0.25]; 4], &[0, 0, 0, 1], 10).unwrap();
    let one_hot = ece(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 10).unwrap();
    let nll = nll_metric(&vec![vec![0.5, 0.5]; 5], &[0, 1, 1, 0, 1]).unwrap().value;
    outcome(
        hand == 0.75 && constant == 0.5 && calibrated.abs() < 1e-12 && one_hot == 0.0 && (nll - std::f64::consts::LN_2).abs() < 1e-12,
        format!("AUC hand {hand}, constant {constant}; ECE calibrated {calibrated:.1e}, one-hot {one_hot}; uniform NLL {nll}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let small = [
        "--data.n_samples=150",
        "--model.depth=2",
        "--model.rank=4",
        "--train.epochs=2",
        "--eval.folds=2",
        "--eval.seeds=0,1",
        "--train.batch_size.coco=4",
    ];
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let out = |verb: &str| root.join(verb).display().to_string();
        let ckpt = root.join("train/model.cclr").display().to_string();
        let jobs: Vec<Vec<String>> = vec![
            vec!["generate-data".into(), "--out".into(), out("generate-data")],
            vec![
                "train".into(),
                "--model.family=coco".into(),
                "--out".into(),
                out("train"),
            ],
            vec![
                "eval".into(),
                "--checkpoint".into(),
                ckpt,
                "--seed".into(),
                "5".into(),
                "--out".into(),
                out("eval"),
            ],
            vec!["compare".into(), "--out".into(), out("compare")],
            vec!["grad-check".into(), "--out".into(), out("grad-check")],
        ];
        for job in jobs {
            let args = std::iter::once("cocolora".to_string())
                .chain(job)
                .chain(small.iter().map(|s| s.to_string()));
            coco_cli::run(args).unwrap();
        }
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let files = files_under(&a);
    let same = files == files_under(&b)
        && files
            .iter()
            .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    outcome(
        same,
        format!(
            "{} output files from all five commands byte-identical across reruns",
            files.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches nothing here skips the suite.
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.is_some_and(|f| !"acceptance".contains(f.as_str())) {
        return;
    }

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "KL correctness", kl_correctness());
    report(3, "reduction chain", reduction_chain());
    report(4, "frozen and budget contracts", frozen_and_budget());

    let start = Instant::now();
    let noisy = compare(&protocol(&[("eval.families", "coco,clora")])).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(5, "heteroscedasticity", heteroscedasticity(&noisy, secs));
    let fusion = compare(&protocol(&[("eval.families", "fusion")])).unwrap();
    let noisy = CompareReport {
        rows: [noisy.rows, fusion.rows].concat(),
        summaries: [noisy.summaries, fusion.summaries].concat(),
        splits: noisy.splits,
    };
    let clean = compare(&protocol(&[("data.noise_levels", "0")])).unwrap();
    report(6, "discrimination ordering", discrimination(&noisy, &clean));

    report(
        7,
        "predictive normalization and MC convergence",
        normalization_and_convergence(),
    );
    report(8, "metric oracles", metric_oracles());
    report(9, "determinism", determinism());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
