//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! each runtime budget is measured on its own. Exits non-zero if any
//! criterion fails.

use std::process::{Command, ExitCode, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfl_cli::RunConfig;
use tfl_core::data::*;
use tfl_core::demo::{demo_round, DemoConfig};
use tfl_core::diagnostics::{divergence_probe, ProbeRow};
use tfl_core::fedcore::{run_federated, ExperimentConfig, Strategy};
use tfl_core::nn::{self, MlpArch, ParamVector};
use tfl_core::refinery::*;
use tfl_core::Matrix;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn and(a: Outcome, b: Outcome) -> Outcome {
    outcome(a.pass && b.pass, format!("{}; {}", a.detail, b.detail))
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn final_accuracy(mut cfg: RunConfig, seed: u64, edit: impl Fn(&mut ExperimentConfig)) -> f64 {
    cfg.experiment.seed = seed;
    cfg.experiment.threads = 1;
    edit(&mut cfg.experiment);
    let scenario = cfg.scenario().build().expect("scenario");
    let out = run_federated(&cfg.experiment, &scenario.shards, &scenario.pool).expect("run");
    out.metrics.last().unwrap().acc_refined
}

fn per_seed(edit: impl Fn(&mut ExperimentConfig) + Copy) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| final_accuracy(RunConfig::default(), s, edit))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", cells.join(" "))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small_mlp(rng: &mut ChaCha8Rng, input: usize, hidden: Vec<usize>, classes: usize) -> ParamVector {
    let arch = Arc::new(MlpArch::new(input, hidden, classes).unwrap());
    let p = ParamVector::init(arch, rng);
    let values = p.values().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    ParamVector::from_values(p.arch().clone(), values).unwrap()
}

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    let tau = 4.0;
    let norm = |m: &Matrix| normalize_logits(m, tau).unwrap().probs;
    for trial in 0..50 {
        let (m, c, k) = (12, 5, 3);
        let locals: Vec<Matrix> = (0..k).map(|_| random_matrix(&mut rng, m, c, 10.0)).collect();
        let before = random_matrix(&mut rng, m, c, 10.0);
        let after = random_matrix(&mut rng, m, c, 10.0);
        let losses: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
        let feats = random_matrix(&mut rng, m, 6, 1.0).map(f64::abs);
        let set = |ls: &[Matrix]| TeacherSet::new(ls.iter().map(norm).collect(), norm(&before), norm(&after), losses.clone()).unwrap();
        let u = compute_ut(&losses, c).unwrap();
        if !(0.25..=1.0).contains(&u) {
            failures.push(format!("u_t {u} out of range"));
        }
        let w = [0.5, 0.3, 0.2];
        let refs: Vec<&Matrix> = locals.iter().collect();
        let probs: Vec<Matrix> = locals.iter().map(norm).collect();
        let rect = rectified_targets(&set(&locals), u).unwrap();
        let refined = cluster_refine(&build_centroids(&rect, &feats).unwrap(), &feats, tau).unwrap();
        let stages = [
            avg_logi(&refs, &w).unwrap(),
            avg_prob(&probs.iter().collect::<Vec<_>>(), &w).unwrap(),
            rect.clone(),
            refined,
        ];
        if !stages.iter().all(|t| t.probs().is_row_stochastic(1e-6)) {
            failures.push(format!("trial {trial}: targets not row-stochastic"));
        }
        // scale one client's raw logits: rectified targets must not move a bit
        let mut scaled = locals.clone();
        let factor = 10f64.powf(rng.random_range(-3.0..3.0));
        scaled[trial % k] = scaled[trial % k].map(|v| v * factor);
        let moved = rectified_targets(&set(&scaled), u).unwrap();
        if moved.probs().as_slice().iter().zip(rect.probs().as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures.push(format!("trial {trial}: scale {factor} moved rectified targets"));
        }
        let shift = rng.random_range(-50.0..50.0);
        let p = nn::softmax(&locals[0], 1.0).unwrap();
        let q = nn::softmax(&locals[0].map(|v| v + shift), 1.0).unwrap();
        if p.as_slice().iter().zip(q.as_slice()).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push(format!("trial {trial}: softmax moved under shift {shift}"));
        }
    }

    // 2x2 centroid hand case, against hand arithmetic
    let q = TeacherTargets::new(Matrix::from_rows(&[[0.8, 0.2], [0.2, 0.8]]), Provenance::Rectified).unwrap();
    let h = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
    let cen = build_centroids(&q, &h).unwrap();
    let want_v = [[0.8, 0.2], [0.2, 0.8]];
    let refined = cluster_refine(&cen, &h, tau).unwrap();
    // D(h_0, v_0) = 1 - 0.8/sqrt(0.68), D(h_0, v_1) = 1 - 0.2/sqrt(0.68)
    let n = 0.68f64.sqrt();
    let (d_near, d_far) = (1.0 - 0.8 / n, 1.0 - 0.2 / n);
    let p_near = 1.0 / (1.0 + (-tau * (d_far - d_near)).exp());
    let want_q = [[p_near, 1.0 - p_near], [1.0 - p_near, p_near]];
    for i in 0..2 {
        for j in 0..2 {
            if (cen.centroids.get(i, j) - want_v[i][j]).abs() > 1e-12 {
                failures.push(format!("centroid v_{i}[{j}] = {}", cen.centroids.get(i, j)));
            }
            if (refined.probs().get(i, j) - want_q[i][j]).abs() > 1e-12 {
                failures.push(format!("refined q[{i}][{j}] = {}", refined.probs().get(i, j)));
            }
        }
    }

    // distilling a model on its own predictions is a fixed point
    let params = small_mlp(&mut rng, 4, vec![8, 6], 3);
    let x = random_matrix(&mut rng, 40, 4, 2.0);
    let own = TeacherTargets::new(nn::softmax(&nn::forward_logits(&params, &x).unwrap(), 1.0).unwrap(), Provenance::AvgProb).unwrap();
    let settings = DistillSettings {
        steps: 100,
        lr: 3e-4,
        batch_size: 16,
        seed: 0,
        round: 0,
    };
    let out = refine_model(&params, &x, &own, settings).unwrap();
    if !(out.initial_loss <= 1e-9 && out.final_loss <= out.initial_loss) {
        failures.push(format!("self-distillation KL {} -> {}", out.initial_loss, out.final_loss));
    }
    match failures.first() {
        None => outcome(true, "50 random trials + hand cases clean"),
        Some(f) => outcome(false, format!("{} violations, first: {f}", failures.len())),
    }
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = small_mlp(&mut rng, 6, vec![9, 7], 4);
    let x = random_matrix(&mut rng, 10, 6, 2.0);
    let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
    let soft = nn::softmax(&random_matrix(&mut rng, 10, 4, 3.0), 1.0).unwrap();
    let losses: [(&str, Box<dyn Fn(&ParamVector) -> (f64, ParamVector)>); 2] = [
        ("cross-entropy", Box::new(|p: &ParamVector| nn::cross_entropy_loss_grad(p, &x, &labels).unwrap())),
        ("KL", Box::new(|p: &ParamVector| nn::kl_distill_loss_grad(p, &x, &soft).unwrap())),
    ];
    let mut worst: f64 = 0.0;
    let coords = 30;
    for (_, lg) in &losses {
        let (_, g) = lg(&params);
        for _ in 0..coords {
            let i = rng.random_range(0..params.len());
            let h = 1e-5;
            let at = |d: f64| {
                let mut v = params.values().to_vec();
                v[i] += d;
                lg(&ParamVector::from_values(params.arch().clone(), v).unwrap()).0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let rel = (g.values()[i] - fd).abs() / g.values()[i].abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{coords} coordinates per loss on a 6-9-7-4 MLP, worst relative error {worst:.2e}"),
    )
}

fn demo() -> Outcome {
    let cfg = DemoConfig::default();
    let (mut prob_wins, mut rect_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..5 {
        let r = demo_round(&cfg, seed).expect("demo");
        let w = r.uniform_weights();
        let al = r.accuracy(&r.avg_logi(&w).unwrap());
        let ap = r.accuracy(&r.avg_prob(&w).unwrap());
        let rect = r.accuracy(&r.rectified().unwrap());
        prob_wins += (ap > al) as usize;
        rect_wins += (rect > ap) as usize;
        rows.push(format!("{al:.3}/{ap:.3}/{rect:.3}"));
    }
    outcome(
        prob_wins >= 4 && rect_wins >= 4,
        format!(
            "AvgProb>AvgLogi in {prob_wins}/5, rectified>AvgProb in {rect_wins}/5 (AL/AP/rect: {})",
            rows.join(" ")
        ),
    )
}

fn end_to_end() -> Outcome {
    let avg = per_seed(|e| e.strategy = Strategy::FedAvg);
    let df = per_seed(|e| e.strategy = Strategy::FedDf);
    let mr = per_seed(|e| e.strategy = Strategy::Mrtf);
    let ordered = (0..3).filter(|&i| mr[i] > df[i] && df[i] > avg[i]).count();
    let beats_avg = (0..3).filter(|&i| mr[i] > avg[i]).count();
    outcome(
        ordered >= 2 && beats_avg == 3,
        format!(
            "MrTF>FedDF>FedAvg in {ordered}/3, MrTF>FedAvg in {beats_avg}/3; fedavg {} feddf {} mrtf {}",
            fmt(&avg),
            fmt(&df),
            fmt(&mr)
        ),
    )
}

fn ablation() -> Outcome {
    let st = per_seed(|e| {
        e.use_rectified = false;
        e.use_cluster_refinery = false;
    });
    let st_rd = per_seed(|e| e.use_cluster_refinery = false);
    let full = per_seed(|_| {});
    let (a, b, c) = (mean(&st), mean(&st_rd), mean(&full));
    // gaps in percentage points; -0.5 pp is the noise allowance
    let ok = (c - b) * 100.0 >= -0.5 && (b - a) * 100.0 >= -0.5;
    outcome(
        ok,
        format!("means ST {a:.4} ST+RD {b:.4} ST+RD+CLR {c:.4} (per seed {} {} {})", fmt(&st), fmt(&st_rd), fmt(&full)),
    )
}

fn dp_direction() -> Outcome {
    let sigmas = [0.0, 0.01, 0.1];
    let mut means = Vec::new();
    for strategy in [Strategy::FedAvg, Strategy::Mrtf] {
        let m: Vec<f64> = sigmas
            .iter()
            .map(|&s| {
                mean(&per_seed(|e| {
                    e.strategy = strategy;
                    e.dp.clip_norm = Some(1.0);
                    e.dp.sigma = s;
                }))
            })
            .collect();
        means.push(m);
    }
    let monotone = means.iter().all(|m| m[0] >= m[1] && m[1] >= m[2]);
    let mrtf_ahead = (0..3).all(|i| means[1][i] >= means[0][i]);
    outcome(
        monotone && mrtf_ahead,
        format!(
            "monotone {monotone}, MrTF>=FedAvg at every sigma {mrtf_ahead}; fedavg {} mrtf {} at sigma 0/0.01/0.1",
            fmt(&means[0]),
            fmt(&means[1])
        ),
    )
}

fn replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tfl");
    let run = |args: &[&str], out: &str| -> bool {
        Command::new(bin)
            .args(args)
            .args(["--out-dir", dir.path().join(out).to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    // short but complete: DP noise, client sampling and every refinery stage
    let sets = [
        "--set", "rounds=8", "--set", "cluster_skip_rounds=2", "--set", "distill_steps=100",
        "--set", "dp_clip_norm=1", "--set", "dp_sigma=0.01", "--set", "hidden_dims=64",
    ];
    let mut first = vec!["run", "--strategy", "mrtf", "--seed", "5", "--threads", "1"];
    first.extend_from_slice(&sets);
    if !run(&first, "orig") {
        return outcome(false, "original run failed");
    }
    let manifest = dir.path().join("orig/manifest.json");
    let m = manifest.to_str().unwrap();
    let mut same = Vec::new();
    for threads in ["1", "8"] {
        let out = format!("t{threads}");
        if !run(&["run", "--manifest", m, "--threads", threads], &out) {
            return outcome(false, format!("replay with {threads} threads failed"));
        }
        let a = std::fs::read(dir.path().join("orig/metrics.csv")).unwrap();
        let b = std::fs::read(dir.path().join(&out).join("metrics.csv")).unwrap();
        same.push(a == b);
    }
    outcome(
        same.iter().all(|&s| s),
        format!("metrics.csv byte-identical: --threads 1 {}, --threads 8 {}", same[0], same[1]),
    )
}

fn probe() -> Outcome {
    let cfg = RunConfig::default();
    let mut divergence_ok = 0;
    let mut gap_ok = 0;
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let mut c = cfg.clone();
        c.experiment.seed = seed;
        let probe_cfg = c.probe_config();
        let rows = divergence_probe(&probe_cfg).expect("probe");
        let iid = probe_cfg.levels[0].name.clone();
        let non = probe_cfg.levels.last().unwrap().name.clone();
        let find = |r0: usize, level: &str| -> &ProbeRow {
            rows.iter().find(|r| r.pretrain_steps == r0 && r.level == level).unwrap()
        };
        let r0s = &probe_cfg.pretrain_steps;
        let (a, b) = (find(r0s[0], &non), find(r0s[0], &iid));
        if a.gradient_variance > b.gradient_variance && a.weight_divergence > b.weight_divergence {
            divergence_ok += 1;
        }
        let g0 = a.accuracy_gap();
        let shrinks = r0s[1..].iter().all(|&r| find(r, &non).accuracy_gap() < g0);
        gap_ok += shrinks as usize;
        let gaps: Vec<String> = r0s.iter().map(|&r| format!("{:+.3}", find(r, &non).accuracy_gap())).collect();
        notes.push(format!("s{seed} gaps {}", gaps.join("/")));
    }
    outcome(
        divergence_ok >= 4 && gap_ok >= 4,
        format!(
            "non-IID > IID divergence in {divergence_ok}/5, gap shrinks in {gap_ok}/5 ({})",
            notes.join(", ")
        ),
    )
}

fn partitioners() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bad = Vec::new();
    let spec = |classes, seed| BlobSpec {
        classes,
        dim: 4,
        separation: 3.0,
        seed,
    };
    for trial in 0..10 {
        let classes = rng.random_range(2..9);
        let clients = rng.random_range(1..12);
        let src = generate_blobs(&spec(classes, trial), rng.random_range(5..40), 0, &DomainShift::identity()).unwrap();
        let strategy = match trial % 3 {
            0 => PartitionStrategy::ByDirichlet {
                alpha: rng.random_range(0.05..5.0),
            },
            1 => PartitionStrategy::Iid,
            _ => PartitionStrategy::ByLabel {
                classes_per_client: classes,
            },
        };
        let shards = PartitionSpec {
            strategy,
            clients,
            seed: trial,
        }
        .apply(&src);
        let shards = match shards {
            Ok(s) => s,
            Err(e) => {
                bad.push(format!("trial {trial}: {e}"));
                continue;
            }
        };
        let mut seen = vec![0usize; src.len()];
        for s in &shards {
            for (j, &i) in s.source_indices.iter().enumerate() {
                seen[i] += 1;
                if s.dataset.labels()[j] != src.labels()[i] || s.dataset.features().row(j) != src.features().row(i) {
                    bad.push(format!("trial {trial}: sample {i} altered"));
                }
            }
        }
        if seen.iter().any(|&n| n != 1) || shards.len() != clients {
            bad.push(format!("trial {trial}: not a partition"));
        }
    }
    let src = generate_blobs(&spec(10, 2), 40, 0, &DomainShift::identity()).unwrap();
    for (clients, cbar) in [(5, 5), (10, 3), (20, 2)] {
        for s in partition_by_label(&src, clients, cbar, 3).unwrap() {
            if s.observed_classes(1) != cbar {
                bad.push(format!("K={clients} C̄={cbar}: shard sees {} classes", s.observed_classes(1)));
            }
        }
    }
    let src = generate_blobs(&spec(10, 4), 200, 0, &DomainShift::identity()).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        for s in partition_by_dirichlet(&src, 10, 10_000.0, seed).unwrap() {
            for (c, &n) in s.dataset.class_counts().iter().enumerate() {
                let global = src.class_counts()[c] as f64 / src.len() as f64;
                worst = worst.max((n as f64 / s.n_k() as f64 - global).abs());
            }
        }
    }
    if worst > 0.05 {
        bad.push(format!("alpha=10000 deviation {worst:.3}"));
    }
    match bad.first() {
        None => outcome(true, format!("10 random splits lossless, C̄ exact, alpha=10000 max deviation {worst:.4}")),
        Some(b) => outcome(false, format!("{} violations, first: {b}", bad.len())),
    }
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let criteria: [Criterion; 9] = [
        (1, "refinery invariants", Duration::from_secs(10), invariants),
        (2, "gradient oracle", Duration::from_secs(30), gradient_oracle),
        (3, "demo ensemble ordering", min(2), demo),
        (4, "end-to-end Non-IID comparison", min(5), end_to_end),
        (5, "ablation monotonicity", min(15), ablation),
        (6, "DP direction", min(10), dp_direction),
        (7, "manifest replay determinism", min(10), replay_determinism),
        (8, "divergence probe", min(3), probe),
        (9, "partitioner contracts", Duration::from_secs(10), partitioners),
    ];
    let only: Vec<u32> = std::env::var("TFL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        let took = started.elapsed();
        let in_budget = took <= budget;
        let pass = result.pass && in_budget;
        failed += (!pass) as usize;
        let result = if in_budget {
            result
        } else {
            and(result, outcome(false, format!("over the {}s budget", budget.as_secs())))
        };
        println!(
            "criterion {id} [PRIMARY] {name}: {} ({:.1}s) {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            result.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
