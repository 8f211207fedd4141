//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails. A substring argument restricts the run
//! to matching criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde_json::json;
use vip_core::curation::{curate, Candidate, PairRules, PreferencePair, Source};
use vip_core::diffusion::{normal_points, DiffusionModel, NoiseSchedule, ScheduleConfig};
use vip_core::distill::{
    loss_diff_dpo, loss_redpo, objective, DistillConfig, LossKind, NoiseDraw, OmegaMode, PairBatch,
};
use vip_core::nn::{EpsilonNet, Graph, NetArch, NetPreset, Tensor};
use vip_core::pipeline::toy::{run_toy_experiment, ToyConfig, ToyReport};
use vip_core::pruning::{block_importance, select_blocks, ImportanceEntry, ImportanceTable};
use vip_core::reward::{EvalReport, GroundTruthMixture, RewardSpec, QUALITY};
use vip_core::rng;

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

// ---------------------------------------------------------------- toy

fn toy_reports() -> Vec<ToyReport> {
    (0..5)
        .map(|seed| {
            let t = Instant::now();
            let (r, _) = run_toy_experiment(&ToyConfig::default(), seed).expect("toy run");
            eprintln!("  toy seed {seed}: {:.0?}", t.elapsed());
            r
        })
        .collect()
}

fn toy_seed_passes(r: &ToyReport) -> (bool, String) {
    let arm = |n: &str| r.arm(n).expect("arm");
    let (base, sft, dpo, redpo) = (arm("base"), arm("sft"), arm("dpo"), arm("redpo"));
    let target = ToyConfig::default().reward.target_mode;
    let checks = [
        sft.ood_count > base.ood_count,
        redpo.ood_count < sft.ood_count,
        redpo.ood_count < dpo.ood_count,
        redpo.mode_counts[target] >= base.mode_counts[target],
    ];
    let detail = format!(
        "seed {}: ood base/sft/dpo/redpo = {}/{}/{}/{}, target-mode base/redpo = {}/{}",
        r.seed,
        base.ood_count,
        sft.ood_count,
        dpo.ood_count,
        redpo.ood_count,
        base.mode_counts[target],
        redpo.mode_counts[target]
    );
    (checks.iter().all(|&c| c), detail)
}

fn toy_reproduction(reports: &[ToyReport]) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for r in reports {
        let (ok, d) = toy_seed_passes(r);
        passed += ok as usize;
        lines.push(format!("{}{}", if ok { "ok " } else { "no " }, d));
    }
    for l in &lines {
        println!("    {l}");
    }
    outcome(passed >= 4, format!("{passed}/5 seeds satisfy all four orderings (need >= 4)"))
}

fn diffusion_sanity(reports: &[ToyReport]) -> Outcome {
    let r = &reports[0];
    let ratio = r.teacher_final_loss / r.teacher_initial_loss;
    let ood_frac = r.teacher.ood_count as f64 / r.teacher.n_samples as f64;
    let (q_ok, q_detail) = q_sample_marginals();
    outcome(
        ratio <= 0.5 && ood_frac <= 0.05 && r.teacher.n_samples == 2000 && q_ok,
        format!(
            "teacher eps-MSE final/initial = {ratio:.3} (<= 0.5), OOD {}/{} = {:.2}% (<= 5%); {q_detail}",
            r.teacher.ood_count,
            r.teacher.n_samples,
            100.0 * ood_frac
        ),
    )
}

/// Monte Carlo marginals of `q(x_t | x_0)` with `x_0` from the default
/// mixture against `mean = √ᾱ·E[x0]`, `var = ᾱ·Var[x0] + 1 − ᾱ`. Mean error
/// is measured relative to the marginal standard deviation.
fn q_sample_marginals() -> (bool, String) {
    let n = 100_000;
    let schedule = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
    let mix = GroundTruthMixture::default();
    let mut r = rng::rng(11);
    // Closed-form mixture moments.
    let mut mu = [0.0; 2];
    let mut second = [0.0; 2];
    for m in &mix.modes {
        for d in 0..2 {
            mu[d] += m.weight * m.mean[d];
            second[d] += m.weight * (m.mean[d].powi(2) + m.sigma.powi(2));
        }
    }
    let mut worst: f64 = 0.0;
    for t in [0, 10, 25, 50, 75, 99] {
        let x0 = mix.sample(n, &mut r);
        let eps = normal_points(n, &mut r);
        let xt = schedule.q_sample(&x0, &vec![t; n], &eps).unwrap();
        let ab = schedule.alpha_bar()[t];
        for d in 0..2 {
            let col: Vec<f64> = (0..n).map(|i| xt.row(i)[d]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            let var0 = second[d] - mu[d].powi(2);
            let m_exp = ab.sqrt() * mu[d];
            let v_exp = ab * var0 + 1.0 - ab;
            worst = worst.max((m - m_exp).abs() / v_exp.sqrt()).max((v - v_exp).abs() / v_exp);
        }
    }
    (worst <= 0.02, format!("q_sample worst relative deviation {worst:.4} (<= 0.02, n=1e5)"))
}

// ---------------------------------------------------------------- losses

fn small_model(seed: u64, steps: usize, n_blocks: usize, width: usize) -> DiffusionModel {
    let schedule = NoiseSchedule::linear(ScheduleConfig {
        steps,
        beta_min: 1e-3,
        beta_max: 0.2,
    })
    .unwrap();
    let net = EpsilonNet::new(
        NetArch {
            input_dim: 2,
            time_embed_dim: 4,
            hidden_width: width,
            n_blocks,
        },
        seed,
    )
    .unwrap();
    DiffusionModel::new(net, schedule).unwrap()
}

fn random_pairs(n: usize, r: &mut rng::Rng) -> PairBatch {
    let pts = |r: &mut rng::Rng| -> Vec<[f64; 2]> {
        (0..n).map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)]).collect()
    };
    PairBatch {
        x_w: Tensor::from_points(&pts(r)),
        x_l: Tensor::from_points(&pts(r)),
    }
}

fn loss_identities() -> Outcome {
    let mut r = rng::rng(3);
    // θ = ref: every per-pair DPO loss is ln 2.
    let teacher = DiffusionModel::new(
        EpsilonNet::from_preset(NetPreset::Teacher, 5).unwrap(),
        NoiseSchedule::linear(ScheduleConfig::default()).unwrap(),
    )
    .unwrap();
    let batch = random_pairs(1000, &mut r);
    let cfg = DistillConfig::default();
    let mut g = Graph::new();
    let pv = teacher.net.register(&mut g);
    let obj = loss_diff_dpo(&mut g, &teacher, &pv, &teacher, &batch, &cfg, &mut r).unwrap();
    let per = g.value(obj.dpo_per_pair.unwrap());
    let max_dev = per
        .data()
        .iter()
        .map(|v| (v - std::f64::consts::LN_2).abs())
        .fold(0.0, f64::max);
    let ln2_ok = per.len() == 1000 && max_dev <= 1e-9;

    // w_sft = 0 and the additive decomposition, on random student/teacher pairs.
    let mut stream_ok = true;
    let mut total_ok = true;
    let mut doubling_ok = true;
    for i in 0..50 {
        let student = small_model(100 + i, 20, 2, 8);
        let teacher = small_model(200 + i, 20, 2, 8);
        let batch = random_pairs(16, &mut r);
        let seed = r.gen::<u64>();
        let w = r.gen_range(0.01..100.0);
        let run = |kind: LossKind, w_sft: f64| {
            let cfg = DistillConfig {
                w_sft,
                beta: 0.5,
                ..DistillConfig::default()
            };
            let mut stream = rng::rng(seed);
            let mut g = Graph::new();
            let pv = student.net.register(&mut g);
            let obj = match kind {
                LossKind::Dpo => loss_diff_dpo(&mut g, &student, &pv, &teacher, &batch, &cfg, &mut stream),
                _ => loss_redpo(&mut g, &student, &pv, &teacher, &batch, &cfg, &mut stream),
            }
            .unwrap();
            let value = g.value(obj.loss).item();
            let grads = student.net.gradients(&pv, &g.backward(obj.loss).unwrap());
            let flat: Vec<u64> = grads.0.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
            (value, flat, obj.breakdown, stream.gen::<u64>())
        };
        let dpo = run(LossKind::Dpo, 0.0);
        let red0 = run(LossKind::Redpo, 0.0);
        stream_ok &= dpo.0.to_bits() == red0.0.to_bits() && dpo.1 == red0.1 && dpo.3 == red0.3;
        let red = run(LossKind::Redpo, w);
        let b = red.2;
        total_ok &= b.total.to_bits() == (b.dpo + w * b.sft).to_bits() && red.0.to_bits() == b.total.to_bits();
        let red2 = run(LossKind::Redpo, 2.0 * w);
        let b2 = red2.2;
        doubling_ok &= b2.dpo.to_bits() == b.dpo.to_bits()
            && b2.sft.to_bits() == b.sft.to_bits()
            && (2.0 * w * b2.sft).to_bits() == (2.0 * (w * b.sft)).to_bits();
    }
    outcome(
        ln2_ok && stream_ok && total_ok && doubling_ok,
        format!(
            "theta=ref max |L-ln2| = {max_dev:.2e} over 1000 pairs; redpo(w=0)==dpo bitwise: {stream_ok}; \
             total==dpo+w*sft bitwise: {total_ok}; doubling w doubles sft term: {doubling_ok}"
        ),
    )
}

// ---------------------------------------------------------------- gradients

/// Central-difference check of one scalar loss over every parameter entry.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
fn fd_check<F>(model: &DiffusionModel, mut loss: F) -> f64
where
    F: FnMut(&DiffusionModel, Option<&mut Graph>) -> (f64, Option<vip_core::nn::Gradients>),
{
    let h = 1e-5;
    let mut g = Graph::new();
    let (_, grads) = loss(model, Some(&mut g));
    let grads = grads.expect("analytic gradients");
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    for (pi, gt) in grads.0.iter().enumerate() {
        for k in 0..gt.len() {
            let orig = m.net.params()[pi].data()[k];
            m.net.params_mut()[pi].data_mut()[k] = orig + h;
            let (fp, _) = loss(&m, None);
            m.net.params_mut()[pi].data_mut()[k] = orig - h;
            let (fm, _) = loss(&m, None);
            m.net.params_mut()[pi].data_mut()[k] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = gt.data()[k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn gradient_soundness() -> Outcome {
    let mut r = rng::rng(17);
    let mut worst = BTreeMap::new();
    for i in 0..100u64 {
        let n_blocks = r.gen_range(1..=3);
        let mut student = small_model(1000 + i, 10, n_blocks, 5);
        if n_blocks > 1 && r.gen_bool(0.3) {
            student.net.set_block_active(0, false).unwrap();
        }
        let teacher = small_model(2000 + i, 10, n_blocks, 5);
        let batch = random_pairs(3, &mut r);
        let draw = NoiseDraw::draw(3, 10, r.gen_bool(0.5), &mut r);
        let cfg = DistillConfig {
            beta: r.gen_range(0.001..0.05),
            w_sft: r.gen_range(0.1..10.0),
            omega: OmegaMode::Constant(1.0),
            ..DistillConfig::default()
        };
        for kind in [LossKind::Sft, LossKind::Dpo, LossKind::Redpo] {
            let e = fd_check(&student, |m, g| {
                let mut local = Graph::new();
                let g = g.unwrap_or(&mut local);
                let pv = m.net.register(g);
                let obj = objective(g, m, &pv, &teacher, &batch, &draw, &cfg, kind).unwrap();
                let v = g.value(obj.loss).item();
                let grads = g.backward(obj.loss).unwrap();
                (v, Some(m.net.gradients(&pv, &grads)))
            });
            let w: &mut f64 = worst.entry(kind.to_string()).or_insert(0.0);
            *w = w.max(e);
        }
        let x0 = random_pairs(4, &mut r).x_w;
        let noise_seed = r.gen::<u64>();
        let e = fd_check(&student, |m, g| {
            let mut local = Graph::new();
            let g = g.unwrap_or(&mut local);
            let pv = m.net.register(g);
            let loss = m.train_loss(g, &pv, &x0, &mut rng::rng(noise_seed)).unwrap();
            let v = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            (v, Some(m.net.gradients(&pv, &grads)))
        });
        let w: &mut f64 = worst.entry("diffusion".to_string()).or_insert(0.0);
        *w = w.max(e);
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(max <= 1e-4, format!("max relative error over 100 instances: {detail} (<= 1e-4, h=1e-5)"))
}

// ---------------------------------------------------------------- curation

const PROPS: [&str; 3] = ["a", "b", "c"];

fn random_candidates(r: &mut rng::Rng) -> (Vec<Candidate>, Vec<Candidate>) {
    let n_props = r.gen_range(1..=3);
    let score = |r: &mut rng::Rng| -> BTreeMap<String, f64> {
        PROPS[..n_props]
            .iter()
            .map(|p| (p.to_string(), r.gen_range(-8..=8) as f64 * 0.25))
            .collect()
    };
    let n_cond = r.gen_range(1..40);
    let mut teacher = Vec::new();
    for id in 0..n_cond {
        if r.gen_bool(0.9) {
            teacher.push(Candidate {
                sample: [id as f64, 0.0],
                scores: score(r),
                source: Source::Teacher,
                condition_id: id,
            });
        }
    }
    let n_students = r.gen_range(1..60);
    let students = (0..n_students)
        .map(|i| Candidate {
            sample: [i as f64, 1.0],
            scores: score(r),
            source: Source::Student,
            condition_id: r.gen_range(0..n_cond + 3),
        })
        .collect();
    (teacher, students)
}

fn random_rules(props: &[String], r: &mut rng::Rng) -> PairRules {
    let mut targets: Vec<String> = props.to_vec();
    targets.shuffle(r);
    targets.truncate(r.gen_range(1..=props.len()));
    let mut tau = BTreeMap::new();
    for p in props {
        if r.gen_bool(0.8) {
            tau.insert(p.clone(), r.gen_range(-10..=4) as f64 * 0.25);
        }
    }
    PairRules {
        targets,
        tau,
        alpha: 0.3,
        max_pairs: if r.gen_bool(0.5) { usize::MAX } else { r.gen_range(1..20) },
    }
}

/// Rule checker written from the curation rules alone.
fn oracle(teacher: &[Candidate], students: &[Candidate], rules: &PairRules) -> Vec<(usize, [f64; 2], [f64; 2])> {
    let bound = |p: &str| {
        let v: Vec<f64> = students.iter().map(|c| c.scores[p]).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        mean - rules.alpha * std
    };
    let bounds: Vec<f64> = rules.targets.iter().map(|p| bound(p)).collect();
    let mut out: Vec<(f64, usize, usize, [f64; 2], [f64; 2])> = Vec::new();
    for (si, l) in students.iter().enumerate() {
        if rules.targets.iter().zip(&bounds).any(|(p, b)| l.scores[p] < *b) {
            continue;
        }
        let Some(w) = teacher.iter().find(|w| w.condition_id == l.condition_id) else {
            continue;
        };
        let mut ok = true;
        for p in &rules.targets {
            let tau = rules.tau.get(p).copied().unwrap_or(f64::NEG_INFINITY);
            let (sw, sl) = (w.scores[p], l.scores[p]);
            ok &= sw > sl && sl > tau;
            for q in w.scores.keys().filter(|q| !rules.targets.contains(q)) {
                ok &= sw - sl > w.scores[q] - l.scores[q];
            }
        }
        if ok {
            let p = &rules.targets[0];
            out.push((w.scores[p] - l.scores[p], l.condition_id, si, w.sample, l.sample));
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    out.into_iter()
        .take(rules.max_pairs)
        .map(|(_, c, _, w, l)| (c, w, l))
        .collect()
}

fn key(pairs: &[PreferencePair]) -> Vec<(usize, [f64; 2], [f64; 2])> {
    pairs.iter().map(|p| (p.condition_id, p.x_w, p.x_l)).collect()
}

fn as_set(pairs: &[PreferencePair]) -> std::collections::BTreeSet<(usize, u64, u64)> {
    pairs
        .iter()
        .map(|p| (p.condition_id, p.x_l[0].to_bits(), p.x_l[1].to_bits()))
        .collect()
}

fn curation_soundness() -> Outcome {
    let mut r = rng::rng(23);
    let mut mismatches = 0;
    let mut monotone_violations = 0;
    let mut nonempty = 0;
    for _ in 0..1000 {
        let (teacher, students) = random_candidates(&mut r);
        let props: Vec<String> = students[0].scores.keys().cloned().collect();
        let rules = random_rules(&props, &mut r);
        let got = curate(&teacher, &students, &rules, 0, None);
        nonempty += !got.is_empty() as usize;
        if key(&got) != oracle(&teacher, &students, &rules) {
            mismatches += 1;
        }
        let unbounded = PairRules {
            max_pairs: usize::MAX,
            ..rules.clone()
        };
        let base = as_set(&curate(&teacher, &students, &unbounded, 0, None));
        let mut stricter = unbounded.clone();
        for p in &props {
            let t = stricter.tau.entry(p.clone()).or_insert(-3.0);
            *t += 0.25 * r.gen_range(0..4) as f64;
        }
        let looser_alpha = PairRules {
            alpha: unbounded.alpha + r.gen_range(0.0..1.0),
            ..unbounded.clone()
        };
        if !as_set(&curate(&teacher, &students, &stricter, 0, None)).is_subset(&base) {
            monotone_violations += 1;
        }
        if !base.is_subset(&as_set(&curate(&teacher, &students, &looser_alpha, 0, None))) {
            monotone_violations += 1;
        }
    }
    outcome(
        mismatches == 0 && monotone_violations == 0,
        format!(
            "1000 trials ({nonempty} non-empty): {mismatches} mismatches vs brute force, \
             {monotone_violations} violations of tau (subset) / alpha (superset) monotonicity"
        ),
    )
}

// ---------------------------------------------------------------- pruning

fn report(total: f64, quality: f64) -> EvalReport {
    EvalReport {
        properties: [(QUALITY.to_string(), quality)].into_iter().collect(),
        total,
        mode_counts: vec![0, 0, 0],
        ood_count: 0,
        n_samples: 100,
        seed: 0,
    }
}

/// Exhaustive search: among all `k`-subsets, the one whose sorted key list
/// `(Δ, −quality, id)` is lexicographically smallest.
fn exhaustive_select(table: &ImportanceTable, k: usize) -> Vec<usize> {
    let n = table.entries.len();
    let key = |e: &ImportanceEntry| (e.delta, -e.report_without.property(QUALITY).unwrap(), e.block_id);
    let mut best: Option<(Vec<(f64, f64, usize)>, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut keys: Vec<(f64, f64, usize)> =
            (0..n).filter(|i| mask & (1 << i) != 0).map(|i| key(&table.entries[i])).collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        let better = match &best {
            None => true,
            Some((bk, _)) => {
                keys.iter()
                    .zip(bk)
                    .map(|(a, b)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)))
                    .find(|o| o.is_ne())
                    == Some(std::cmp::Ordering::Less)
            }
        };
        if better {
            let ids = keys.iter().map(|k| k.2).collect();
            best = Some((keys, ids));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

fn pruning_oracle() -> Outcome {
    let mut r = rng::rng(29);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.gen_range(2..=9);
        let mut ids: Vec<usize> = (0..12).collect();
        ids.shuffle(&mut r);
        let mut entries: Vec<ImportanceEntry> = ids[..n]
            .iter()
            .map(|&id| ImportanceEntry {
                block_id: id,
                delta: r.gen_range(-3..=3) as f64 * 0.5,
                report_without: report(0.0, r.gen_range(-2..=2) as f64),
            })
            .collect();
        entries.sort_by_key(|e| e.block_id);
        let table = ImportanceTable {
            report_full: report(0.0, 0.0),
            entries,
        };
        let k = r.gen_range(0..n);
        if select_blocks(&table, k, Some(QUALITY)).unwrap() != exhaustive_select(&table, k) {
            mismatches += 1;
        }
    }
    let model = DiffusionModel::new(
        EpsilonNet::from_preset(NetPreset::PipelineTeacher, 3).unwrap(),
        NoiseSchedule::linear(ScheduleConfig::default()).unwrap(),
    )
    .unwrap();
    let before = model.checkpoint_hash().unwrap();
    block_importance(&model, &RewardSpec::default(), &GroundTruthMixture::default(), 100, 1).unwrap();
    let unchanged = model.checkpoint_hash().unwrap() == before;
    outcome(
        mismatches == 0 && unchanged,
        format!("1000 random tables: {mismatches} mismatches vs exhaustive search; model hash unchanged: {unchanged}"),
    )
}

// ---------------------------------------------------------------- CLI-level

fn vip(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_vip"))
        .args(args)
        .env_remove("VIP_SEED")
        .output()
        .expect("spawn vip");
    assert!(
        out.status.success(),
        "vip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline_config(teacher: Option<&Path>) -> serde_json::Value {
    let mut cfg = json!({
        "teacher_train": {"steps": 3000, "batch_size": 128, "learning_rate": 1e-3, "block_drop": 0.1},
        "plan": {
            "n_stages": 2,
            "k_per_stage": 1,
            "n_eval_samples": 300,
            "n_candidates": 1000,
            "distill": {"epochs": 2, "batch_size": 64},
            "curation": {"max_pairs": 256}
        }
    });
    if let Some(t) = teacher {
        cfg["teacher_checkpoint"] = json!(t);
    }
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stage_hashes(m: &serde_json::Value, field: &str) -> Vec<String> {
    m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s[field].as_str().unwrap().to_string())
        .collect()
}

fn pipeline_reproducibility(dir: &Path) -> Outcome {
    let cfg = write_config(dir, "pipeline.json", &pipeline_config(None));
    let c = cfg.to_str().unwrap();
    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    vip(&["--config", c, "--seed", "7", "--out", a.to_str().unwrap(), "run"]);
    vip(&["--config", c, "--seed", "7", "--out", b.to_str().unwrap(), "run"]);
    let (ma, mb) = (manifest(&a.join("manifest.json")), manifest(&b.join("manifest.json")));
    let fields = [
        "input_checkpoint_hash",
        "output_checkpoint_hash",
        "dataset_hash",
        "loser_samples_hash",
        "winner_samples_hash",
        "teacher_hash",
    ];
    let all_match = fields.iter().all(|f| stage_hashes(&ma, f) == stage_hashes(&mb, f))
        && ma["stages"] == mb["stages"]
        && ma["teacher_hash"] == mb["teacher_hash"];
    let teacher = ma["teacher_hash"].as_str().unwrap();
    let frozen = stage_hashes(&ma, "teacher_hash").iter().all(|h| h == teacher);
    let n = ma["stages"].as_array().unwrap().len();
    outcome(
        all_match && frozen && n == 2,
        format!("2 runs x {n} stages: all checkpoint/dataset hashes match: {all_match}; teacher hash constant: {frozen}"),
    )
}

fn sweep_fidelity(dir: &Path) -> Outcome {
    let cfg = write_config(dir, "teacher.json", &pipeline_config(None));
    let out = vip(&["--config", cfg.to_str().unwrap(), "--out", dir.join("t").to_str().unwrap(), "train-teacher"]);
    let teacher = PathBuf::from(out.lines().find_map(|l| l.strip_prefix("checkpoint=")).unwrap());
    let mut small = pipeline_config(Some(&teacher));
    small["plan"]["distill"]["epochs"] = json!(1);
    let cfg = write_config(dir, "sweep.json", &small);
    let c = cfg.to_str().unwrap();
    let d = |n: &str| dir.join(n).to_str().unwrap().to_string();

    vip(&["--config", c, "--out", &d("dpo"), "run", "--mode", "dpo-only"]);
    vip(&["--config", c, "--out", &d("sw0"), "sweep-wsft", "--grid", "0"]);
    let dpo = manifest(&dir.join("dpo/manifest.json"));
    let sw = manifest(&dir.join("sw0/wsft_0/manifest.json"));
    let same = stage_hashes(&dpo, "output_checkpoint_hash") == stage_hashes(&sw, "output_checkpoint_hash")
        && stage_hashes(&dpo, "dataset_hash") == stage_hashes(&sw, "dataset_hash");

    vip(&["--config", c, "--out", &d("sw6"), "sweep-wsft", "--grid", "1e7,1e2,1e4,1e3,1e6,1e5"]);
    let table = manifest(&dir.join("sw6/sweep.json"));
    let ws: Vec<f64> = table["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["w_sft"].as_f64().unwrap())
        .collect();
    let six = ws == vec![1e2, 1e3, 1e4, 1e5, 1e6, 1e7];
    let csv_rows = std::fs::read_to_string(dir.join("sw6/sweep.csv")).unwrap().lines().count() - 1;
    outcome(
        same && six,
        format!("grid {{0}} == dpo_only hashes: {same}; 6-value grid -> {} rows sorted ascending: {six} ({csv_rows} stage rows)", ws.len()),
    )
}

// ---------------------------------------------------------------- main

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().map_or(true, |f| name.contains(f));
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            let t = Instant::now();
            let o = f();
            println!(
                "{} {name}: {} [{:.1?}]",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail,
                t.elapsed()
            );
            results.push((name, o));
        }
    };
    run("loss_identities", &mut loss_identities);
    run("gradient_soundness", &mut gradient_soundness);
    run("curation_soundness", &mut curation_soundness);
    run("pruning_oracle", &mut pruning_oracle);
    run("pipeline_reproducibility", &mut || pipeline_reproducibility(tmp.path()));
    run("sweep_fidelity", &mut || sweep_fidelity(tmp.path()));
    if wanted("toy_reproduction") || wanted("diffusion_sanity") {
        let reports = toy_reports();
        run("diffusion_sanity", &mut || diffusion_sanity(&reports));
        run("toy_reproduction", &mut || toy_reproduction(&reports));
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
