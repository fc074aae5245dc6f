//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 3`.

use std::time::Instant;

use lss::concept_space::{dedup_embeddings, EmbeddingSet, SourceTag};
use lss::config::RunConfig;
use lss::diagnostics::loss_gradcheck_suite;
use lss::encoder::{encode_clip, encode_frame, init_encoder, Clip, EncoderConfig};
use lss::numerics::{randn, Rng};
use lss::objectives::{cd_loss, udp_update_and_loss, MovingAverageState, ObjectiveConfig, Space};
use lss::pipeline::{frames, Experiment};
use lss::trainer::{
    checkpoint_bytes, checkpoint_from_bytes, run_training, run_training_until, ConceptSpaces,
    RunOutput, TrainerState,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const STEPS: u64 = 500;

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

fn seeded(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.world.seed = seed;
    c.pretrain.seed = seed;
    c.train.seed = seed;
    c.probe.seed = seed;
    c.train.max_steps = STEPS;
    c
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

fn softmax(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean batch-mean teacher entropy over the last 10 steps.
fn final_teacher_entropy(st: &TrainerState) -> f64 {
    let tail = &st.metrics[st.metrics.len().saturating_sub(10)..];
    tail.iter().map(|m| m.loss.h_teacher_c).sum::<f64>() / tail.len() as f64
}

fn c1_gradients() -> Outcome {
    let cases = match loss_gradcheck_suite(24, 0, &ObjectiveConfig::default(), 0) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let blocks: Vec<usize> = cases.iter().map(|c| c.encoder.blocks).collect();
    let shapes_ok = cases
        .iter()
        .all(|c| c.encoder.d_embed <= 32 && c.classes <= 16)
        && blocks.contains(&1)
        && blocks.contains(&2);
    outcome(
        worst < 1e-5 && shapes_ok && cases.len() >= 20,
        format!(
            "{} configs, max relative error {worst:.2e} (< 1e-5)",
            cases.len()
        ),
    )
}

fn c2_zero_init() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(2);
    for i in 0..100u64 {
        let cfg = EncoderConfig {
            blocks: 1 + (i % 2) as usize,
            ..EncoderConfig::default()
        };
        let params = init_encoder(&cfg, &mut Rng::new(1000 + i / 10)).unwrap();
        let clip = Clip::new(randn(&[cfg.frames, cfg.tokens, cfg.d_in], &mut rng)).unwrap();
        let f = encode_clip(&params, &clip).unwrap();
        let mut mean = vec![0.0; f.len()];
        for t in 0..cfg.frames {
            let g = encode_frame(&params, &clip.frame(t)).unwrap();
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / cfg.frames as f64;
            }
        }
        for (a, b) in f.iter().zip(&mean) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst < 1e-10,
        format!("100 clips, max |clip - frame mean| {worst:.2e} (< 1e-10)"),
    )
}

fn c3_loss_analytics() -> Outcome {
    let cfg = ObjectiveConfig::default();
    let mut rng = Rng::new(3);
    let mut cd_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = 2 + rng.below(30);
        let t: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        // student scores whose student-temperature softmax equals the
        // teacher-temperature softmax of t
        let s: Vec<f64> = t
            .iter()
            .map(|v| v * cfg.lambda_student / cfg.lambda_teacher)
            .collect();
        let p = softmax(&t, cfg.lambda_teacher);
        let ws = p.iter().cloned().fold(0.0, f64::max);
        let got = cd_loss(&t, &s, &cfg).unwrap();
        cd_err = cd_err.max((got - ws * entropy(&p)).abs());
    }
    let mut fixed_err: f64 = 0.0;
    let mut above = true;
    let mut min_gap = f64::INFINITY;
    for n in 2..40usize {
        let u = vec![1.0 / n as f64; n];
        let mut st = MovingAverageState::uniform(n, n);
        let l = udp_update_and_loss(&mut st, &u, Space::Category, &cfg).unwrap();
        fixed_err = fixed_err.max((l - (n as f64).ln()).abs());
        for _ in 0..20 {
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let mean: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let mut st = MovingAverageState::uniform(n, n);
            let l = udp_update_and_loss(&mut st, &mean, Space::Category, &cfg).unwrap();
            let gap = l - (n as f64).ln();
            min_gap = min_gap.min(gap);
            above &= gap > 0.0;
        }
    }
    outcome(
        cd_err < 1e-10 && fixed_err < 1e-12 && above,
        format!(
            "matched CD error {cd_err:.2e} (< 1e-10), uniform L_UP error {fixed_err:.2e} (< 1e-12), \
             smallest non-uniform excess {min_gap:.2e} (> 0)"
        ),
    )
}

struct SeedRuns {
    exp: Experiment,
    with_udp: TrainerState,
    h_with: f64,
    h_without: f64,
}

fn collapse_runs() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = seeded(seed);
            let exp = Experiment::build(&cfg).unwrap();
            let with_udp = exp.train(&cfg.train, &RunOutput::default()).unwrap();
            let mut off = cfg.train;
            off.objective.use_udp = false;
            let without = exp.train(&off, &RunOutput::default()).unwrap();
            SeedRuns {
                h_with: final_teacher_entropy(&with_udp),
                h_without: final_teacher_entropy(&without),
                exp,
                with_udp,
            }
        })
        .collect()
}

fn c4_anti_collapse(runs: &[SeedRuns]) -> Outcome {
    let ln_n = (runs[0].exp.spaces.category.len() as f64).ln();
    let pass = runs
        .iter()
        .all(|r| r.h_without < 0.25 * ln_n && r.h_with > 0.5 * ln_n);
    let per: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| {
            format!(
                "seed {s}: without {:.3} / with {:.3}",
                r.h_without, r.h_with
            )
        })
        .collect();
    outcome(
        pass,
        format!(
            "teacher entropy after {STEPS} steps, need without < {:.3} and with > {:.3}; {}",
            0.25 * ln_n,
            0.5 * ln_n,
            per.join("; ")
        ),
    )
}

fn c5_end_to_end(runs: &[SeedRuns]) -> Outcome {
    let mut pass = true;
    let mut per = Vec::new();
    for (r, s) in runs.iter().zip(SEEDS) {
        let zs0 = r.exp.zero_shot(&r.exp.init).unwrap().top1;
        let lp0 = r.exp.linear_probe(&r.exp.init).unwrap().top1;
        let zs1 = r.exp.zero_shot(&r.with_udp.teacher).unwrap().top1;
        let lp1 = r.exp.linear_probe(&r.with_udp.teacher).unwrap().top1;
        pass &= zs1 >= zs0 + 0.05 && lp1 >= lp0;
        per.push(format!(
            "seed {s}: zero-shot {:.1}% -> {:.1}%, probe {:.1}% -> {:.1}%",
            100.0 * zs0,
            100.0 * zs1,
            100.0 * lp0,
            100.0 * lp1
        ));
    }
    outcome(pass, per.join("; "))
}

fn c6_significance_weight() -> Outcome {
    let mut pass = true;
    let mut per = Vec::new();
    for s in SEEDS {
        let mut cfg = seeded(s);
        cfg.data.mixed_fraction = 0.2;
        let exp = Experiment::build(&cfg).unwrap();
        let on = exp.train(&cfg.train, &RunOutput::default()).unwrap();
        let mut off = cfg.train;
        off.objective.use_significance_weight = false;
        let off = exp.train(&off, &RunOutput::default()).unwrap();
        let a = exp.zero_shot(&on.teacher).unwrap().top1;
        let b = exp.zero_shot(&off.teacher).unwrap().top1;
        pass &= a >= b;
        per.push(format!(
            "seed {s}: on {:.1}% off {:.1}% margin {:+.1}pp",
            100.0 * a,
            100.0 * b,
            100.0 * (a - b)
        ));
    }
    outcome(pass, per.join("; "))
}

fn c7_contracts() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_class = 4;
    cfg.data.test_per_class = 1;
    cfg.pretrain.steps = 20;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    let exp = Experiment::build(&cfg).unwrap();
    let spaces: &ConceptSpaces = &exp.spaces;
    let hash0 = spaces.content_hash();
    let vids = frames(&exp.train);
    let run = || {
        let st = TrainerState::new(exp.init.clone(), spaces, &cfg.train);
        run_training(st, &vids, spaces, &cfg.train, &RunOutput::default()).unwrap()
    };
    let a = run();
    let b = run();
    let identical = checkpoint_bytes(&a) == checkpoint_bytes(&b);
    let half = a.step / 2;
    let first = run_training_until(
        TrainerState::new(exp.init.clone(), spaces, &cfg.train),
        &vids,
        spaces,
        &cfg.train,
        &RunOutput::default(),
        half,
    )
    .unwrap();
    let reloaded = checkpoint_from_bytes(&checkpoint_bytes(&first)).unwrap();
    let resumed = run_training(reloaded, &vids, spaces, &cfg.train, &RunOutput::default()).unwrap();
    let resume_exact = checkpoint_bytes(&resumed) == checkpoint_bytes(&a);
    let frozen = spaces.content_hash() == hash0;
    outcome(
        identical && resume_exact && frozen,
        format!(
            "space hash stable: {frozen}; repeat run bit-identical: {identical}; \
             resume at step {half} of {} bit-exact: {resume_exact}",
            a.step
        ),
    )
}

fn c8_dedup() -> Outcome {
    let mut rng = Rng::new(8);
    let mut sets = 0;
    let mut removed = 0;
    let mut ok = true;
    for _ in 0..40 {
        let n = 1 + rng.below(500);
        let d = 2 + rng.below(15);
        let thr = rng.uniform_range(0.3, 0.95);
        // clustered rows so that duplicates actually occur
        let centers = randn(&[1 + rng.below(20), d], &mut rng);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let c = centers.row(rng.below(centers.rows())).to_vec();
            let noise = rng.uniform_range(0.0, 0.6);
            rows.push(
                c.iter()
                    .map(|v| v + noise * rng.normal())
                    .collect::<Vec<f64>>(),
            );
        }
        let labels: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
        let emb = EmbeddingSet::from_rows(labels, &rows, SourceTag::Synthetic).unwrap();
        let kept = dedup_embeddings(&emb, thr).unwrap();
        removed += n - kept.len();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let kv: Vec<&[f64]> = (0..kept.len()).map(|i| kept.vectors().row(i)).collect();
        for i in 0..kv.len() {
            for j in 0..i {
                ok &= cos(kv[i], kv[j]) < thr;
            }
        }
        for (i, l) in emb.labels().iter().enumerate() {
            if !kept.labels().contains(l) {
                ok &= kv.iter().any(|k| cos(emb.vectors().row(i), k) >= thr);
            }
        }
        sets += 1;
    }
    outcome(
        ok,
        format!(
            "{sets} random sets of size <= 500 verified by brute force, {removed} rows removed"
        ),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |k: usize| only.is_empty() || only.contains(&k);
    let mut failed = 0;
    let mut report = |k: usize, name: &str, t: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {k} ({name}, {:.1}s): {}",
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    };
    let simple: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "gradient correctness", c1_gradients),
        (2, "zero-init equivalence", c2_zero_init),
        (3, "loss analytics", c3_loss_analytics),
        (8, "dedup correctness", c8_dedup),
    ];
    for (k, name, f) in simple {
        if want(k) {
            let t = Instant::now();
            report(k, name, t, f());
        }
    }
    if want(4) || want(5) {
        let t = Instant::now();
        let runs = collapse_runs();
        if want(4) {
            report(4, "anti-collapse", t, c4_anti_collapse(&runs));
        }
        if want(5) {
            let t5 = Instant::now();
            report(5, "end-to-end gain", t5, c5_end_to_end(&runs));
        }
    }
    if want(6) {
        let t = Instant::now();
        report(6, "significance weight", t, c6_significance_weight());
    }
    if want(7) {
        let t = Instant::now();
        report(7, "determinism and frozen spaces", t, c7_contracts());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
