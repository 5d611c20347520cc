use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use xmal::datagen::{gen_corpus, gen_probing_tasks, read_corpus, write_corpus, Corpus, ZeroShotKind};
use xmal::evaluation::{project_2d, projection_csv, retrieval_report, trend_correlation, trend_csv, Provenance};
use xmal::experiment::{
    cascade_embeddings, probe_text, probing_study, reference_id, speech_embeddings, wer_trend, ExperimentConfig,
    ZeroShotSuite, CASCADE_ID,
};
use xmal::models::{checkpoint, StudentInit};
use xmal::training::{
    initial_bundle, matrix_csv, pretrain_asr, pretrain_teacher, run_matrix, train_joint, TeacherTargets, TrainScenario,
};
use xmal::ModelBundle;

/// Teacher-student joint speech-text embedding experiments.
///
/// Every subcommand reads its inputs from and writes its outputs to the run
/// directory, so the stages can be run as separate processes in order:
/// gen-data, pretrain-teacher, pretrain-asr, matrix (or train), then any
/// evaluation.
#[derive(Parser)]
#[command(name = "xmal", version)]
struct Cli {
    /// Run only this seed instead of the seed list in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (TOML). Defaults to `<out>/experiment.toml`
    /// when present, otherwise the built-in desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for training cells and embedding computation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired corpus.
    GenData,
    /// Masked-token pretraining of the teacher text encoder.
    PretrainTeacher,
    /// Recognition pretraining of the student encoder and decoder.
    PretrainAsr,
    /// Train one scenario: a preset id (A-F) or a path to a scenario TOML file.
    Train {
        #[arg(long)]
        scenario: String,
    },
    /// Train every configured scenario for every seed.
    Matrix,
    /// Text-to-speech and speech-to-text retrieval on the test split.
    EvalRetrieval,
    /// Zero-shot classification on the digit-, word- and sentence-like sets.
    EvalZeroshot,
    /// Probing classifiers trained on text, reused on speech.
    EvalProbe,
    /// Recognize-then-embed baseline.
    EvalCascade,
    /// Recognition WER of each checkpoint against post-alignment retrieval.
    WerTrend,
    /// Two-dimensional PCA of a zero-shot set's speech and label embeddings.
    #[command(name = "export-2d")]
    Export2d {
        #[arg(long, default_value = "F")]
        scenario: String,
        #[arg(long, default_value = "sentence-like")]
        dataset: String,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    config_text: String,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let saved = cli.out.join("experiment.toml");
        let path = cli.config.clone().or_else(|| saved.exists().then_some(saved));
        let mut cfg = match &path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        fs::create_dir_all(&cli.out)?;
        Ok(Ctx {
            config_text: cfg.canonical(),
            cfg,
            out: cli.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&self) -> Result<Corpus> {
        read_corpus(&self.path("corpus")).context("reading corpus; run gen-data first")
    }

    fn load(&self, name: &str) -> Result<ModelBundle> {
        let p = self.path(name);
        checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn teacher(&self) -> Result<ModelBundle> {
        self.load("teacher.ckpt").context("run pretrain-teacher first")
    }

    fn asr(&self) -> Result<ModelBundle> {
        self.load("asr.ckpt").context("run pretrain-asr first")
    }

    fn run_dir(&self, id: &str, seed: u64) -> PathBuf {
        self.out.join("runs").join(id).join(seed.to_string())
    }

    /// Reference bundles G/H are rebuilt from their seed; trained ones are loaded.
    fn bundle(&self, id: &str, seed: u64, teacher: &ModelBundle, asr: &ModelBundle) -> Result<ModelBundle> {
        for init in [StudentInit::Random, StudentInit::Pretrained] {
            if id == reference_id(init) {
                return Ok(initial_bundle(&self.cfg.model, init, seed, teacher, Some(asr))?);
            }
        }
        let p = self.run_dir(id, seed).join("best.ckpt");
        checkpoint::load(&p).with_context(|| format!("loading {}; run train or matrix first", p.display()))
    }

    fn provenance(&self, checkpoints: &[PathBuf]) -> Result<Provenance> {
        let mut prov = Provenance::new(&self.config_text, self.cfg.seeds[0]);
        for p in checkpoints {
            let name = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            prov = prov.with_checkpoint(&name, &checkpoint::content_hash(&checkpoint::read(p)?));
        }
        Ok(prov)
    }

    fn evaluated_ids(&self) -> Vec<String> {
        ["G", "H"]
            .into_iter()
            .map(String::from)
            .chain(self.cfg.scenarios.iter().cloned())
            .collect()
    }

    fn trained_checkpoints(&self) -> Vec<PathBuf> {
        let mut v = vec![self.path("teacher.ckpt"), self.path("asr.ckpt")];
        for id in &self.cfg.scenarios {
            for &s in &self.cfg.seeds {
                v.push(self.run_dir(id, s).join("best.ckpt"));
            }
        }
        v
    }

    fn write_table(&self, name: &str, csv: &str, checkpoints: &[PathBuf]) -> Result<()> {
        let prov = self.provenance(checkpoints)?;
        xmal::evaluation::write_with_provenance(&self.path(name), csv, &prov)?;
        println!("wrote {}", self.path(name).display());
        Ok(())
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let corpus = gen_corpus(&ctx.cfg.corpus)?;
    write_corpus(&corpus, &ctx.path("corpus"))?;
    fs::write(ctx.path("experiment.toml"), &ctx.config_text)?;
    println!(
        "corpus: {} train, {} valid, {} test pairs",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    Ok(())
}

fn cmd_pretrain_teacher(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (teacher, r) = pretrain_teacher(&corpus, &ctx.cfg.model, &ctx.cfg.teacher)?;
    checkpoint::save(&teacher, &ctx.path("teacher.ckpt"))?;
    fs::write(ctx.path("teacher_history.csv"), r.history.to_csv())?;
    println!(
        "teacher: masked-token accuracy {:.3} -> {:.3} (chance {:.3}, majority {:.3}), best epoch {}",
        r.accuracy_before, r.accuracy_after, r.chance, r.majority, r.best_epoch
    );
    Ok(())
}

fn cmd_pretrain_asr(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let init = initial_bundle(&ctx.cfg.model, StudentInit::Random, ctx.cfg.asr.seed, &teacher, None)?;
    let (asr, r, snaps) = pretrain_asr(&corpus, init, &ctx.cfg.asr, &ctx.cfg.trend.snapshot_steps)?;
    checkpoint::save(&asr, &ctx.path("asr.ckpt"))?;
    for s in &snaps {
        checkpoint::save(&s.bundle, &ctx.path(&format!("asr-step-{}.ckpt", s.step)))?;
    }
    fs::write(ctx.path("asr_history.csv"), r.history.to_csv())?;
    println!(
        "asr: validation WER {:.3} -> {:.3} after {} steps (best epoch {}), {} snapshots",
        r.wer_before,
        r.wer_after,
        r.steps,
        r.best_epoch,
        snaps.len()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, scenario: &str) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr().ok();
    let targets = TeacherTargets::compute(&teacher, &corpus)?;
    let runs: Vec<TrainScenario> = if Path::new(scenario).is_file() {
        let text = fs::read_to_string(scenario)?;
        let mut sc = TrainScenario::from_toml(&text)?;
        if let Some(&s) = ctx.cfg.seeds.first().filter(|_| ctx.cfg.seeds.len() == 1) {
            sc.seed = s;
        }
        vec![sc]
    } else {
        ctx.cfg
            .seeds
            .iter()
            .map(|&s| TrainScenario::preset(scenario, &ctx.cfg.joint, s))
            .collect::<xmal::Result<_>>()?
    };
    for sc in runs {
        let o = train_joint(&sc, &corpus, &teacher, asr.as_ref(), &targets)?;
        let dir = ctx.run_dir(&sc.id, sc.seed);
        o.write_run(&dir)?;
        let (ce, l2, total) = o.best_valid();
        println!(
            "{}/{}: best epoch {}, valid ce {:?} l2 {:?} total {total:.4}, wrote {}",
            sc.id,
            sc.seed,
            o.best_epoch,
            ce,
            l2,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_matrix(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr()?;
    let targets = TeacherTargets::compute(&teacher, &corpus)?;
    let scenarios = ctx
        .cfg
        .scenarios
        .iter()
        .map(|id| TrainScenario::preset(id, &ctx.cfg.joint, 0))
        .collect::<xmal::Result<Vec<_>>>()?;
    let cells = run_matrix(
        &scenarios,
        &ctx.cfg.seeds,
        &corpus,
        &teacher,
        Some(&asr),
        &targets,
        Some(&ctx.out.join("runs")),
    )?;
    print!("{}", matrix_csv(&cells));
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        bail!("{failed} matrix cells failed");
    }
    Ok(())
}

fn cmd_eval_retrieval(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr()?;
    let targets = TeacherTargets::compute(&teacher, &corpus)?;
    let text: Vec<Vec<f64>> = targets.test.iter().map(|t| t.data().to_vec()).collect();
    let mut csv = String::from("scenario,seed,n,acc_t2s,acc_s2t,margin_t2s,margin_s2t\n");
    for id in ctx.evaluated_ids() {
        for &seed in &ctx.cfg.seeds {
            let b = ctx.bundle(&id, seed, &teacher, &asr)?;
            let speech = speech_embeddings(&b, corpus.test.par_iter().map(|p| &p.frames))?;
            let r = retrieval_report("test", &speech, &text)?;
            println!(
                "{id}/{seed}: T->S {:.3}  S->T {:.3}  (n = {})",
                r.acc_t2s, r.acc_s2t, r.n
            );
            csv += &format!(
                "{id},{seed},{},{},{},{},{}\n",
                r.n, r.acc_t2s, r.acc_s2t, r.margin_t2s, r.margin_s2t
            );
        }
    }
    ctx.write_table("retrieval.csv", &csv, &ctx.trained_checkpoints())
}

fn cmd_eval_zeroshot(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr()?;
    let suite = ZeroShotSuite::build(&ctx.cfg.zeroshot, &corpus, &teacher)?;
    for (d, c) in suite.datasets.iter().zip(&suite.label_cosine) {
        println!("{}: mean pairwise label cosine {c:.4}", d.kind.name());
    }
    let mut rows = Vec::new();
    for id in ctx.evaluated_ids() {
        for &seed in &ctx.cfg.seeds {
            let b = ctx.bundle(&id, seed, &teacher, &asr)?;
            rows.extend(suite.evaluate(&id, Some(seed), &b)?);
        }
    }
    rows.extend(suite.evaluate_cascade(&asr, &teacher)?);
    let mut csv = String::from("scenario,seed,dataset,n,accuracy\n");
    for r in &rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        println!("{}/{seed} {}: {:.3}", r.scenario, r.kind.name(), r.accuracy);
        csv += &format!("{},{seed},{},{},{}\n", r.scenario, r.kind.name(), r.n, r.accuracy);
    }
    ctx.write_table("zeroshot.csv", &csv, &ctx.trained_checkpoints())
}

fn cmd_eval_probe(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr()?;
    let (_, splits) = gen_probing_tasks(
        &ctx.cfg.probing,
        &corpus.language,
        &corpus.acoustic,
        &corpus.sentences(),
    )?;
    let texts = splits
        .iter()
        .map(|s| probe_text(s, &teacher))
        .collect::<xmal::Result<Vec<_>>>()?;
    let mut bundles = Vec::new();
    for &seed in &ctx.cfg.seeds {
        bundles.push((
            seed,
            ctx.bundle("H", seed, &teacher, &asr)?,
            ctx.bundle(&ctx.cfg.probe_scenario, seed, &teacher, &asr)?,
        ));
    }
    let students: Vec<_> = bundles.iter().map(|(s, b, a)| (*s, b, a)).collect();
    let rows = probing_study(&splits, &texts, &students, &ctx.cfg.probe)?;
    let mut csv = String::from(
        "task,seed,n_test,text_acc,speech_acc_before,speech_acc_after,delta,gap_to_text,classifier_hash\n",
    );
    for r in &rows {
        let p = &r.report;
        println!(
            "{} seed {}: text {:.3}  speech before {:.3}  after {:.3}  classifier {}",
            p.task,
            r.seed,
            p.text_acc,
            p.speech_acc_before,
            p.speech_acc_after,
            &p.classifier_hash[..12]
        );
        csv += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.task,
            r.seed,
            p.n_test,
            p.text_acc,
            p.speech_acc_before,
            p.speech_acc_after,
            p.delta,
            p.gap_to_text,
            p.classifier_hash
        );
    }
    ctx.write_table("probing.csv", &csv, &ctx.trained_checkpoints())
}

fn cmd_eval_cascade(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr()?;
    let targets = TeacherTargets::compute(&teacher, &corpus)?;
    let text: Vec<Vec<f64>> = targets.test.iter().map(|t| t.data().to_vec()).collect();
    let refs: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.tokens.clone()).collect();
    let (speech, s) = cascade_embeddings(corpus.test.par_iter().map(|p| &p.frames), &refs, &asr, &teacher)?;
    let r = retrieval_report("test", &speech, &text)?;
    println!(
        "cascade: T->S {:.3}  S->T {:.3}  exact transcripts {}/{}  truncated {}  empty {}",
        r.acc_t2s, r.acc_s2t, s.exact, s.n, s.truncated, s.empty
    );
    let csv = format!(
        "scenario,n,acc_t2s,acc_s2t,exact,truncated,empty\n{CASCADE_ID},{},{},{},{},{},{}\n",
        r.n, r.acc_t2s, r.acc_s2t, s.exact, s.truncated, s.empty
    );
    ctx.write_table("cascade.csv", &csv, &[ctx.path("teacher.ckpt"), ctx.path("asr.ckpt")])
}

fn cmd_wer_trend(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let targets = TeacherTargets::compute(&teacher, &corpus)?;
    let mut loaded = Vec::new();
    let mut paths = vec![ctx.path("teacher.ckpt")];
    for &step in &ctx.cfg.trend.snapshot_steps {
        let name = format!("asr-step-{step}.ckpt");
        loaded.push((format!("step-{step}"), step, ctx.load(&name)?));
        paths.push(ctx.path(&name));
    }
    let asr = ctx.asr()?;
    let final_steps = validation_steps(ctx)?;
    loaded.push(("final".into(), final_steps, asr));
    paths.push(ctx.path("asr.ckpt"));
    let cks: Vec<_> = loaded.iter().map(|(n, s, b)| (n.clone(), *s, b)).collect();
    let sc = TrainScenario::preset(&ctx.cfg.trend.scenario, &ctx.cfg.joint, ctx.cfg.seeds[0])?;
    let rows = wer_trend(&sc, &cks, &corpus, &teacher, &targets)?;
    for r in &rows {
        println!(
            "{}: WER {:.3}  T->S {:.3}  S->T {:.3}",
            r.checkpoint, r.wer, r.acc_t2s, r.acc_s2t
        );
    }
    match trend_correlation(&rows) {
        Ok(rho) => println!("spearman(-WER, T->S) = {rho:.3}"),
        Err(e) => println!("spearman undefined: {e}"),
    }
    ctx.write_table("wer_trend.csv", &trend_csv(&rows), &paths)
}

/// Steps behind the final recognition checkpoint, from its training history.
fn validation_steps(ctx: &Ctx) -> Result<u64> {
    let text = fs::read_to_string(ctx.path("asr_history.csv")).context("reading asr_history.csv")?;
    let h = xmal::training::History::from_csv(&text)?;
    Ok(h.train().map(|r| r.step).max().unwrap_or(0))
}

fn cmd_export_2d(ctx: &Ctx, scenario: &str, dataset: &str) -> Result<()> {
    let kind: ZeroShotKind = dataset.parse()?;
    let corpus = ctx.corpus()?;
    let teacher = ctx.teacher()?;
    let asr = ctx.asr()?;
    let seed = ctx.cfg.seeds[0];
    let b = ctx.bundle(scenario, seed, &teacher, &asr)?;
    let suite = ZeroShotSuite::build(&ctx.cfg.zeroshot, &corpus, &teacher)?;
    let k = ZeroShotKind::ALL.iter().position(|&x| x == kind).expect("kind listed");
    let ds = &suite.datasets[k];
    let mut points = speech_embeddings(&b, ds.utterances.par_iter().map(|u| &u.frames))?;
    let mut classes: Vec<String> = ds.utterances.iter().map(|u| u.label.to_string()).collect();
    let mut modality = vec!["speech".to_string(); points.len()];
    for (i, l) in suite.label_embeddings[k].iter().enumerate() {
        points.push(l.clone());
        classes.push(i.to_string());
        modality.push("text".into());
    }
    let p = project_2d(&points)?;
    println!(
        "{scenario}/{seed} {}: {} points, explained variance {:.3}{}",
        kind.name(),
        points.len(),
        p.explained,
        if p.rank_deficient { " (rank < 2)" } else { "" }
    );
    let name = format!("projection-{scenario}-{}.csv", kind.name());
    let mut cks = vec![ctx.path("teacher.ckpt")];
    if ctx.cfg.scenarios.iter().any(|s| s == scenario) {
        cks.push(ctx.run_dir(scenario, seed).join("best.ckpt"));
    }
    ctx.write_table(&name, &projection_csv(&p, &classes, &modality)?, &cks)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::PretrainTeacher => cmd_pretrain_teacher(&ctx),
        Command::PretrainAsr => cmd_pretrain_asr(&ctx),
        Command::Train { scenario } => cmd_train(&ctx, scenario),
        Command::Matrix => cmd_matrix(&ctx),
        Command::EvalRetrieval => cmd_eval_retrieval(&ctx),
        Command::EvalZeroshot => cmd_eval_zeroshot(&ctx),
        Command::EvalProbe => cmd_eval_probe(&ctx),
        Command::EvalCascade => cmd_eval_cascade(&ctx),
        Command::WerTrend => cmd_wer_trend(&ctx),
        Command::Export2d { scenario, dataset } => cmd_export_2d(&ctx, scenario, dataset),
    }
}
