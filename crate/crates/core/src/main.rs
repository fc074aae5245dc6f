use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lss::concept_space::{
    build_category_space, build_description_space, dedup_embeddings, group_descriptions,
    load_embeddings, save_embeddings, ConceptSpace,
};
use lss::config::RunConfig;
use lss::diagnostics::loss_gradcheck_suite;
use lss::encoder::EncoderParams;
use lss::eval::{linear_probe, zero_shot_classify, EvalReport};
use lss::pipeline::{frames, labels, Experiment};
use lss::pretrain::pretrain_frame_encoder;
use lss::synth_world::{
    class_label, export_description_embeddings, export_label_embeddings, generate_dataset,
    generate_world, Split, SynthDataset,
};
use lss::trainer::{
    load_checkpoint, run_training, save_checkpoint, ConceptSpaces, RunOutput, TrainerState,
};
use lss::{LssError, Result};

/// Language-guided self-supervised video training on a synthetic world.
///
/// Any configuration key can be overridden with `--section.key value`.
#[derive(Parser)]
#[command(name = "lss", version)]
struct Cli {
    /// configuration file of `section.key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world, its train/test splits and label embeddings.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build category and description spaces from embedding files.
    BuildSpace {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised training on a dataset; labels are ignored.
    Train(TrainArgs),
    /// Training on a downstream train split (same procedure as `train`).
    TrainTransductive(TrainArgs),
    /// Zero-shot top-1 of a checkpoint against a concept space.
    EvalZeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long, value_enum, default_value_t = Branch::Teacher)]
        branch: Branch,
        /// per-class CSV report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe on frozen checkpoint features.
    EvalLinear {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = Branch::Teacher)]
        branch: Branch,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// coordinates sampled per tensor; 0 checks all of them
        #[arg(long, default_value_t = 6)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Train and evaluate every objective variant, writing a comparison CSV.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// world/training seeds, comma separated
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// dataset file written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// directory holding category.space and description.space
    #[arg(long)]
    spaces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// start from the student of this checkpoint instead of pretraining
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// continue a run from one of its checkpoints
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Teacher,
    Student,
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| LssError::Config(format!("{flag} (flag): missing value")))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

/// Adds the path to I/O errors so the one-line message names the file.
fn at<T>(p: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        LssError::Io(io) => LssError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", p.display()),
        )),
        other => other,
    })
}

fn branch_params(ckpt: &Path, branch: Branch) -> Result<EncoderParams> {
    let st = at(ckpt, load_checkpoint(ckpt))?;
    Ok(match branch {
        Branch::Teacher => st.teacher,
        Branch::Student => st.student,
    })
}

fn load_spaces(dir: &Path) -> Result<ConceptSpaces> {
    let d = dir.join("description.space");
    Ok(ConceptSpaces {
        category: {
            let c = dir.join("category.space");
            at(&c, ConceptSpace::load(&c))?
        },
        description: if d.exists() {
            Some(at(&d, ConceptSpace::load(&d))?)
        } else {
            None
        },
    })
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(class_label).collect()
}

fn report(r: &EvalReport, n: usize, out: Option<&Path>) -> Result<()> {
    print!("{}", r.summary());
    if let Some(p) = out {
        fs::write(p, r.to_csv(&class_names(n)))?;
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let world = generate_world(&cfg.world)?;
    let train = generate_dataset(
        &world,
        Split::Train,
        cfg.data.train_per_class,
        cfg.data.mixed_fraction,
    )?;
    let test = generate_dataset(&world, Split::Test, cfg.data.test_per_class, 0.0)?;
    train.save(&out.join("train.lssdata"))?;
    test.save(&out.join("test.lssdata"))?;
    let (cats, _) = export_label_embeddings(&world)?;
    save_embeddings(&cats, &out.join("labels.emb"))?;
    save_embeddings(
        &export_description_embeddings(&world)?,
        &out.join("descriptions.emb"),
    )?;
    cfg.write(&out.join("run.cfg"))?;
    println!(
        "wrote {} train and {} test videos of {} classes to {}",
        train.videos.len(),
        test.videos.len(),
        cfg.world.num_classes,
        out.display()
    );
    Ok(())
}

fn build_space(
    cfg: &RunConfig,
    labels: &Path,
    descriptions: Option<&Path>,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut cats = at(labels, load_embeddings(labels))?;
    if cfg.space.dedup_threshold > 0.0 {
        let before = cats.len();
        cats = dedup_embeddings(&cats, cfg.space.dedup_threshold)?;
        println!("dedup kept {} of {before} labels", cats.len());
    }
    let cat = build_category_space(&cats)?;
    cat.save(&out.join("category.space"))?;
    println!("category space: {} x {}", cat.len(), cat.dim());
    if let Some(p) = descriptions {
        let groups = group_descriptions(&at(p, load_embeddings(p))?)?;
        // description rows follow category order so the spaces pair up
        let mut ordered = Vec::with_capacity(cats.len());
        for l in cats.labels() {
            let g = groups.iter().find(|(k, _)| k == l).ok_or_else(|| {
                LssError::InvalidArgument(format!("no descriptions for label '{l}'"))
            })?;
            ordered.push(g.clone());
        }
        let desc = build_description_space(&ordered, cfg.space.pooling)?;
        desc.save(&out.join("description.space"))?;
        println!("description space: {} x {}", desc.len(), desc.dim());
    }
    cfg.write(&out.join("run.cfg"))?;
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    cfg.write(&a.out.join("run.cfg"))?;
    let data = at(&a.data, SynthDataset::load(&a.data))?;
    let spaces = load_spaces(&a.spaces)?;
    let state = if let Some(p) = &a.resume {
        at(p, load_checkpoint(p))?
    } else {
        let init = match &a.init {
            Some(p) => at(p, load_checkpoint(p))?.student,
            None => {
                pretrain_frame_encoder(&generate_world(&cfg.world)?, &cfg.encoder, &cfg.pretrain)?
            }
        };
        let st = TrainerState::new(init, &spaces, &cfg.train);
        save_checkpoint(&st, &a.out.join("init.ckpt"))?;
        st
    };
    let out = RunOutput {
        metrics: Some(a.out.join("metrics.csv")),
        checkpoint_dir: Some(a.out.clone()),
    };
    let st = run_training(state, &frames(&data), &spaces, &cfg.train, &out)?;
    save_checkpoint(&st, &a.out.join("final.ckpt"))?;
    if let Some(last) = st.metrics.last() {
        println!(
            "step {} loss {:.6} teacher entropy {:.4}",
            last.step, last.loss.total, last.loss.h_teacher_c
        );
    }
    println!("wrote {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, seeds: &[u64]) -> Result<()> {
    fs::create_dir_all(out)?;
    cfg.write(&out.join("run.cfg"))?;
    type Tweak = fn(&mut RunConfig);
    let variants: [(&str, Tweak); 6] = [
        ("full", |_| {}),
        ("no_alignment", |c| c.train.objective.use_alignment = false),
        ("category_only", |c| {
            c.train.objective.use_alignment = false;
            c.train.objective.use_description_space = false;
        }),
        ("no_udp", |c| c.train.objective.use_udp = false),
        ("no_significance_weight", |c| {
            c.train.objective.use_significance_weight = false
        }),
        ("udp_from_teacher", |c| {
            c.train.objective.udp_source = lss::objectives::UdpSource::Teacher
        }),
    ];
    let mut csv = String::from("variant,seed,zero_shot_top1,linear_probe_top1,teacher_entropy\n");
    for &seed in seeds {
        let mut base = cfg.clone();
        base.world.seed = seed;
        base.train.seed = seed;
        base.pretrain.seed = seed;
        base.probe.seed = seed;
        let exp = Experiment::build(&base)?;
        let zs = exp.zero_shot(&exp.init)?.top1;
        let lp = exp.linear_probe(&exp.init)?.top1;
        csv.push_str(&format!("init,{seed},{zs:.6},{lp:.6},\n"));
        println!("seed {seed} init: zero-shot {zs:.4} probe {lp:.4}");
        for (name, tweak) in variants {
            let mut c = base.clone();
            tweak(&mut c);
            c.validate()?;
            let st = exp.train(&c.train, &RunOutput::default())?;
            let zs = exp.zero_shot(&st.teacher)?.top1;
            let lp = exp.linear_probe(&st.teacher)?.top1;
            let h = st.metrics.last().map_or(f64::NAN, |m| m.loss.h_teacher_c);
            csv.push_str(&format!("{name},{seed},{zs:.6},{lp:.6},{h:.6}\n"));
            println!("seed {seed} {name}: zero-shot {zs:.4} probe {lp:.4} entropy {h:.4}");
        }
    }
    fs::write(out.join("ablation.csv"), csv)?;
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    match cli.cmd {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::BuildSpace {
            labels,
            descriptions,
            out,
        } => build_space(&cfg, &labels, descriptions.as_deref(), &out),
        Command::Train(a) | Command::TrainTransductive(a) => train(&cfg, &a),
        Command::EvalZeroshot {
            checkpoint,
            data,
            space,
            branch,
            out,
        } => {
            let params = branch_params(&checkpoint, branch)?;
            let ds = at(&data, SynthDataset::load(&data))?;
            let space = at(&space, ConceptSpace::load(&space))?;
            let (_, r) = zero_shot_classify(
                &params,
                &frames(&ds),
                &labels(&ds),
                &space,
                cfg.zero_shot_crops,
            )?;
            report(&r, space.len(), out.as_deref())
        }
        Command::EvalLinear {
            checkpoint,
            train,
            test,
            branch,
            out,
        } => {
            let params = branch_params(&checkpoint, branch)?;
            let tr = at(&train, SynthDataset::load(&train))?;
            let te = at(&test, SynthDataset::load(&test))?;
            let n = labels(&tr)
                .into_iter()
                .chain(labels(&te))
                .max()
                .map_or(0, |m| m + 1);
            let r = linear_probe(
                &params,
                (&frames(&tr), &labels(&tr)),
                (&frames(&te), &labels(&te)),
                n,
                &cfg.probe,
            )?;
            report(&r, n, out.as_deref())
        }
        Command::Gradcheck {
            cases,
            seed,
            per_tensor,
            tolerance,
        } => {
            let results = loss_gradcheck_suite(cases, seed, &cfg.train.objective, per_tensor)?;
            let mut worst: f64 = 0.0;
            for c in &results {
                println!(
                    "seed {} blocks {} d_embed {} classes {} params {} checked {} max_rel_error {:.3e} ({})",
                    c.seed,
                    c.encoder.blocks,
                    c.encoder.d_embed,
                    c.classes,
                    c.params,
                    c.checked,
                    c.max_rel_error,
                    c.worst
                );
                worst = worst.max(c.max_rel_error);
            }
            println!(
                "max relative error over {} cases: {worst:.3e}",
                results.len()
            );
            if worst < tolerance {
                Ok(())
            } else {
                Err(LssError::NumericalFailure(format!(
                    "gradient error {worst:.3e} exceeds tolerance {tolerance:.1e}"
                )))
            }
        }
        Command::Ablate { out, seeds } => ablate(&cfg, &out, &seeds),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let result = split_overrides(args).and_then(|(rest, overrides)| {
        let cli = Cli::try_parse_from(rest).map_err(|e| {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            LssError::InvalidArgument(first.to_string())
        })?;
        run(cli, &overrides)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let body = msg.split_once(": ").map_or(msg.as_str(), |(_, b)| b);
            eprintln!("error: {}: {}", e.kind(), body);
            ExitCode::FAILURE
        }
    }
}
