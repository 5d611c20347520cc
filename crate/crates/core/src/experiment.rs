//! The full desk experiment: data, teacher and recognition pretraining, the
//! scenario matrix, and every evaluation on top of it.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::corpus::{gen_corpus, write_corpus, Corpus, CorpusConfig};
use crate::datagen::probing::{gen_probing_tasks, ProbingConfig, ProbingSplits, ProbingTask};
use crate::datagen::zeroshot::{gen_zeroshot_dataset, ZeroShotConfig, ZeroShotDataset, ZeroShotKind};
use crate::error::{Error, Result};
use crate::evaluation::cascade::cascade_embed;
use crate::evaluation::probe::{score_probe, train_probe, ProbeClassifierConfig, ProbingReport};
use crate::evaluation::report::{write_with_provenance, Provenance};
use crate::evaluation::retrieval::{retrieval_report, RetrievalReport};
use crate::evaluation::trend::{trend_correlation, trend_csv, TrendRow};
use crate::evaluation::zeroshot::{mean_pairwise_cosine, zero_shot_classify};
use crate::models::{checkpoint, ModelConfig, StudentInit};
use crate::numerics::ParamGroup;
use crate::training::matrix::{matrix_csv, run_matrix, MatrixCell};
use crate::training::pretrain::{
    pretrain_asr, pretrain_teacher, validation_wer, AsrReport, AsrSnapshot, AsrTrainConfig, TeacherReport,
    TeacherTrainConfig,
};
use crate::training::scenario::{
    initial_bundle, train_joint, JointBudget, TeacherTargets, TrainScenario, TRAINED_SCENARIOS,
};
use crate::{ModelBundle, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendConfig {
    /// Scenario retrained from every recognition checkpoint.
    pub scenario: String,
    /// Recognition steps at which intermediate checkpoints are kept; the
    /// final best checkpoint is always added.
    pub snapshot_steps: Vec<u64>,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            scenario: "B".into(),
            snapshot_steps: vec![250, 750, 1500],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub scenarios: Vec<String>,
    /// Scenario whose student is probed after alignment.
    pub probe_scenario: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub teacher: TeacherTrainConfig,
    pub asr: AsrTrainConfig,
    pub joint: JointBudget,
    pub trend: TrendConfig,
    pub zeroshot: ZeroShotConfig,
    pub probing: ProbingConfig,
    pub probe: ProbeClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            scenarios: TRAINED_SCENARIOS.iter().map(|s| s.to_string()).collect(),
            probe_scenario: "F".into(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            teacher: TeacherTrainConfig::default(),
            asr: AsrTrainConfig::default(),
            joint: JointBudget::default(),
            trend: TrendConfig::default(),
            zeroshot: ZeroShotConfig::default(),
            probing: ProbingConfig::default(),
            probe: ProbeClassifierConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.corpus.language.vocab_size != self.model.text.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                self.corpus.language.vocab_size, self.model.text.vocab_size
            )));
        }
        if self.corpus.acoustic.frame_dim != self.model.speech.frame_dim {
            return Err(Error::Config("corpus frame_dim differs from model frame_dim".into()));
        }
        for id in &self.scenarios {
            TrainScenario::preset(id, &self.joint, 0)?.validate(&self.model)?;
        }
        if !self.scenarios.contains(&self.probe_scenario) {
            return Err(Error::Config(format!(
                "probe scenario `{}` is not trained",
                self.probe_scenario
            )));
        }
        let trend = TrainScenario::preset(&self.trend.scenario, &self.joint, 0)?;
        if trend.student_init != StudentInit::Pretrained {
            return Err(Error::Config(
                "trend scenario must start from a recognition checkpoint".into(),
            ));
        }
        if self.trend.snapshot_steps.len() < 2 {
            return Err(Error::Config(
                "trend needs at least two intermediate checkpoints".into(),
            ));
        }
        Ok(())
    }
}

pub fn text_embeddings<'a>(
    bundle: &ModelBundle,
    sentences: impl IntoParallelIterator<Item = &'a Vec<usize>>,
) -> Result<Vec<Vec<f64>>> {
    sentences.into_par_iter().map(|t| bundle.encode_text(t)).collect()
}

pub fn speech_embeddings<'a>(
    bundle: &ModelBundle,
    frames: impl IntoParallelIterator<Item = &'a Tensor>,
) -> Result<Vec<Vec<f64>>> {
    frames.into_par_iter().map(|f| bundle.encode_speech(f)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeSummary {
    pub n: usize,
    /// Transcripts equal to the reference.
    pub exact: usize,
    pub truncated: usize,
    pub empty: usize,
}

pub fn cascade_embeddings<'a>(
    frames: impl IntoParallelIterator<Item = &'a Tensor>,
    references: &[Vec<usize>],
    asr: &ModelBundle,
    teacher: &ModelBundle,
) -> Result<(Vec<Vec<f64>>, CascadeSummary)> {
    let outs = frames
        .into_par_iter()
        .map(|f| cascade_embed(f, asr, teacher))
        .collect::<Result<Vec<_>>>()?;
    let mut s = CascadeSummary {
        n: outs.len(),
        ..Default::default()
    };
    for (o, r) in outs.iter().zip(references) {
        s.exact += usize::from(&o.transcript == r);
        s.truncated += usize::from(o.truncated);
        s.empty += usize::from(o.empty);
    }
    Ok((outs.into_iter().map(|o| o.embedding).collect(), s))
}

/// Reference and trained bundles evaluated by the experiment.
pub fn reference_id(init: StudentInit) -> &'static str {
    match init {
        StudentInit::Random => "G",
        StudentInit::Pretrained => "H",
    }
}

pub const CASCADE_ID: &str = "I";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub scenario: String,
    /// `None` for the seed-independent cascade.
    pub seed: Option<u64>,
    pub report: RetrievalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub scenario: String,
    pub seed: Option<u64>,
    pub kind: ZeroShotKind,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbingRow {
    pub seed: u64,
    pub report: ProbingReport,
}

/// Text-side probing data for one task.
#[derive(Clone, Debug)]
pub struct ProbeText {
    pub task: ProbingTask,
    pub train: Vec<Vec<f64>>,
    pub train_labels: Vec<usize>,
    pub valid: Vec<Vec<f64>>,
    pub valid_labels: Vec<usize>,
    pub test: Vec<Vec<f64>>,
    pub test_labels: Vec<usize>,
}

pub fn probe_text(splits: &ProbingSplits, teacher: &ModelBundle) -> Result<ProbeText> {
    let emb = |xs: &[crate::datagen::ProbingExample]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let toks: Vec<&Vec<usize>> = xs.iter().map(|x| &x.tokens).collect();
        Ok((text_embeddings(teacher, toks)?, xs.iter().map(|x| x.label).collect()))
    };
    let (train, train_labels) = emb(&splits.train)?;
    let (valid, valid_labels) = emb(&splits.valid)?;
    let (test, test_labels) = emb(&splits.test)?;
    Ok(ProbeText {
        task: splits.task,
        train,
        train_labels,
        valid,
        valid_labels,
        test,
        test_labels,
    })
}

/// One classifier per task trained on text, then scored against every
/// `(seed, before, after)` student pair.
pub fn probing_study(
    splits: &[ProbingSplits],
    texts: &[ProbeText],
    students: &[(u64, &ModelBundle, &ModelBundle)],
    cfg: &ProbeClassifierConfig,
) -> Result<Vec<ProbingRow>> {
    let mut rows = Vec::new();
    for (sp, tx) in splits.iter().zip(texts) {
        let trained = train_probe(
            &tx.train,
            &tx.train_labels,
            &tx.valid,
            &tx.valid_labels,
            sp.task.n_classes(),
            cfg,
        )?;
        let frames: Vec<&Tensor> = sp.test.iter().map(|x| &x.frames).collect();
        for &(seed, before, after) in students {
            let b = speech_embeddings(before, frames.par_iter().copied())?;
            let a = speech_embeddings(after, frames.par_iter().copied())?;
            let report = score_probe(&trained, sp.task.name(), &tx.test, &tx.test_labels, &b, &a)?;
            rows.push(ProbingRow { seed, report });
        }
    }
    Ok(rows)
}

pub struct ZeroShotSuite {
    pub datasets: Vec<ZeroShotDataset>,
    pub label_embeddings: Vec<Vec<Vec<f64>>>,
    /// Mean pairwise cosine of the teacher's label embeddings, per dataset.
    pub label_cosine: Vec<f64>,
}

impl ZeroShotSuite {
    pub fn build(cfg: &ZeroShotConfig, corpus: &Corpus, teacher: &ModelBundle) -> Result<Self> {
        let exclude = corpus.sentences();
        let datasets = ZeroShotKind::ALL
            .iter()
            .map(|&k| gen_zeroshot_dataset(k, cfg, &corpus.language, &corpus.acoustic, &exclude))
            .collect::<Result<Vec<_>>>()?;
        let label_embeddings = datasets
            .iter()
            .map(|d| text_embeddings(teacher, &d.labels))
            .collect::<Result<Vec<_>>>()?;
        let label_cosine = label_embeddings.iter().map(|l| mean_pairwise_cosine(l)).collect();
        Ok(ZeroShotSuite {
            datasets,
            label_embeddings,
            label_cosine,
        })
    }

    fn rows(
        &self,
        scenario: &str,
        seed: Option<u64>,
        embed: impl Fn(&ZeroShotDataset) -> Result<Vec<Vec<f64>>>,
    ) -> Result<Vec<ZeroShotRow>> {
        self.datasets
            .iter()
            .zip(&self.label_embeddings)
            .map(|(d, labels)| {
                let speech = embed(d)?;
                let truth: Vec<usize> = d.utterances.iter().map(|u| u.label).collect();
                let r = zero_shot_classify(d.kind.name(), &speech, &truth, labels)?;
                Ok(ZeroShotRow {
                    scenario: scenario.to_string(),
                    seed,
                    kind: d.kind,
                    accuracy: r.accuracy,
                    n: r.n,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, scenario: &str, seed: Option<u64>, bundle: &ModelBundle) -> Result<Vec<ZeroShotRow>> {
        self.rows(scenario, seed, |d| {
            speech_embeddings(bundle, d.utterances.par_iter().map(|u| &u.frames))
        })
    }

    pub fn evaluate_cascade(&self, asr: &ModelBundle, teacher: &ModelBundle) -> Result<Vec<ZeroShotRow>> {
        self.rows(CASCADE_ID, None, |d| {
            let refs: Vec<Vec<usize>> = d.utterances.iter().map(|u| u.tokens.clone()).collect();
            Ok(cascade_embeddings(d.utterances.par_iter().map(|u| &u.frames), &refs, asr, teacher)?.0)
        })
    }
}

/// Retrains `scenario` from every recognition checkpoint and records
/// validation WER against post-alignment retrieval on the test split.
pub fn wer_trend(
    scenario: &TrainScenario,
    checkpoints: &[(String, u64, &ModelBundle)],
    corpus: &Corpus,
    teacher: &ModelBundle,
    targets: &TeacherTargets,
) -> Result<Vec<TrendRow>> {
    let text: Vec<Vec<f64>> = targets.test.iter().map(|t| t.data().to_vec()).collect();
    checkpoints
        .iter()
        .map(|(name, steps, asr)| {
            let wer = validation_wer(asr, &corpus.valid)?;
            let out = train_joint(scenario, corpus, teacher, Some(asr), targets)?;
            let speech = speech_embeddings(&out.best, corpus.test.par_iter().map(|p| &p.frames))?;
            let r = retrieval_report("test", &speech, &text)?;
            Ok(TrendRow {
                checkpoint: name.clone(),
                steps: *steps,
                wer,
                acc_t2s: r.acc_t2s,
                acc_s2t: r.acc_s2t,
            })
        })
        .collect()
}

pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub teacher: ModelBundle,
    pub teacher_report: TeacherReport,
    pub asr: ModelBundle,
    pub asr_report: AsrReport,
    pub asr_test_wer: f64,
    pub snapshots: Vec<AsrSnapshot>,
    pub matrix: Vec<MatrixCell>,
    /// Test-split text embeddings, row-aligned with every speech set.
    pub test_text: Vec<Vec<f64>>,
    /// Test-split speech embeddings keyed by `<scenario>/<seed>` (`I` alone
    /// for the cascade).
    pub test_speech: BTreeMap<String, Vec<Vec<f64>>>,
    pub retrieval: Vec<RetrievalRow>,
    pub cascade: CascadeSummary,
    pub zeroshot: Vec<ZeroShotRow>,
    pub label_cosine: Vec<(ZeroShotKind, f64)>,
    pub probe_text: Vec<ProbeText>,
    pub probing: Vec<ProbingRow>,
    pub trend: Vec<TrendRow>,
    pub trend_spearman: Option<f64>,
    /// Wall time per stage, in execution order.
    pub timings: Vec<(String, Duration)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl ExperimentResults {
    pub fn total_time(&self) -> Duration {
        self.timings.iter().map(|t| t.1).sum()
    }

    /// Seed-mean `(T→S, S→T)` retrieval of a matrix row.
    pub fn mean_retrieval(&self, scenario: &str) -> Option<(f64, f64)> {
        let rows: Vec<&RetrievalRow> = self.retrieval.iter().filter(|r| r.scenario == scenario).collect();
        Some((
            mean(rows.iter().map(|r| r.report.acc_t2s))?,
            mean(rows.iter().map(|r| r.report.acc_s2t))?,
        ))
    }

    pub fn mean_zeroshot(&self, scenario: &str, kind: ZeroShotKind) -> Option<f64> {
        mean(
            self.zeroshot
                .iter()
                .filter(|r| r.scenario == scenario && r.kind == kind)
                .map(|r| r.accuracy),
        )
    }

    pub fn mean_valid_l2(&self, scenario: &str) -> Option<f64> {
        mean(
            self.matrix
                .iter()
                .filter(|c| c.scenario == scenario)
                .filter_map(|c| c.outcome.as_ref().ok()?.best_valid().1),
        )
    }

    /// Seed-mean `(before, after, text)` probing accuracy of a task.
    pub fn mean_probing(&self, task: ProbingTask) -> Option<(f64, f64, f64)> {
        let rows: Vec<&ProbingReport> = self
            .probing
            .iter()
            .map(|r| &r.report)
            .filter(|r| r.task == task.name())
            .collect();
        Some((
            mean(rows.iter().map(|r| r.speech_acc_before))?,
            mean(rows.iter().map(|r| r.speech_acc_after))?,
            mean(rows.iter().map(|r| r.text_acc))?,
        ))
    }

    pub fn retrieval_csv(&self) -> String {
        let mut s = String::from("scenario,seed,n,acc_t2s,acc_s2t,margin_t2s,margin_s2t\n");
        for r in &self.retrieval {
            let seed = r.seed.map(|x| x.to_string()).unwrap_or_default();
            let p = &r.report;
            let _ = writeln!(
                s,
                "{},{seed},{},{},{},{},{}",
                r.scenario, p.n, p.acc_t2s, p.acc_s2t, p.margin_t2s, p.margin_s2t
            );
        }
        s
    }

    pub fn zeroshot_csv(&self) -> String {
        let mut s = String::from("scenario,seed,dataset,n,accuracy\n");
        for r in &self.zeroshot {
            let seed = r.seed.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{seed},{},{},{}", r.scenario, r.kind.name(), r.n, r.accuracy);
        }
        s
    }

    pub fn probing_csv(&self) -> String {
        let mut s = String::from(
            "task,seed,n_test,text_acc,speech_acc_before,speech_acc_after,delta,gap_to_text,classifier_hash\n",
        );
        for r in &self.probing {
            let p = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
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
        s
    }

    /// Writes checkpoints, tables and provenance sidecars under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let config = self.config.canonical();
        fs::write(dir.join("experiment.toml"), &config)?;
        write_corpus(&self.corpus, &dir.join("corpus"))?;
        let mut prov = Provenance::new(&config, self.config.seeds[0]);
        let mut save = |name: &str, b: &ModelBundle| -> Result<()> {
            let bytes = checkpoint::to_bytes(b);
            fs::write(dir.join(format!("{name}.ckpt")), &bytes)?;
            prov.checkpoints
                .insert(name.to_string(), checkpoint::content_hash(&bytes));
            Ok(())
        };
        save("teacher", &self.teacher)?;
        save("asr", &self.asr)?;
        for s in &self.snapshots {
            save(&format!("asr-step-{}", s.step), &s.bundle)?;
        }
        for c in &self.matrix {
            if let Ok(o) = &c.outcome {
                o.write_run(&dir.join("runs").join(&c.scenario).join(c.seed.to_string()))?;
                save(&format!("{}-{}", c.scenario, c.seed), &o.best)?;
            }
        }
        fs::write(dir.join("teacher_history.csv"), self.teacher_report.history.to_csv())?;
        fs::write(dir.join("asr_history.csv"), self.asr_report.history.to_csv())?;
        write_with_provenance(&dir.join("matrix.csv"), &matrix_csv(&self.matrix), &prov)?;
        write_with_provenance(&dir.join("retrieval.csv"), &self.retrieval_csv(), &prov)?;
        write_with_provenance(&dir.join("zeroshot.csv"), &self.zeroshot_csv(), &prov)?;
        write_with_provenance(&dir.join("probing.csv"), &self.probing_csv(), &prov)?;
        write_with_provenance(&dir.join("wer_trend.csv"), &trend_csv(&self.trend), &prov)?;
        Ok(())
    }
}

fn timed<T>(timings: &mut Vec<(String, Duration)>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f()?;
    let dt = t0.elapsed();
    log::info!("{name}: {dt:.2?}");
    timings.push((name.to_string(), dt));
    Ok(out)
}

/// Runs the whole experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let mut tm = Vec::new();
    let corpus = timed(&mut tm, "corpus", || gen_corpus(&cfg.corpus))?;
    let (teacher, teacher_report) = timed(&mut tm, "teacher", || {
        pretrain_teacher(&corpus, &cfg.model, &cfg.teacher)
    })?;
    let (asr, asr_report, snapshots) = timed(&mut tm, "asr", || {
        let init = initial_bundle(&cfg.model, StudentInit::Random, cfg.asr.seed, &teacher, None)?;
        pretrain_asr(&corpus, init, &cfg.asr, &cfg.trend.snapshot_steps)
    })?;
    if snapshots.len() != cfg.trend.snapshot_steps.len() {
        return Err(Error::Config(format!(
            "recognition pretraining ran {} steps, short of the requested snapshots",
            asr_report.steps
        )));
    }
    let asr_test_wer = validation_wer(&asr, &corpus.test)?;
    let targets = timed(&mut tm, "targets", || TeacherTargets::compute(&teacher, &corpus))?;
    let scenarios = cfg
        .scenarios
        .iter()
        .map(|id| TrainScenario::preset(id, &cfg.joint, 0))
        .collect::<Result<Vec<_>>>()?;
    let matrix = timed(&mut tm, "matrix", || {
        run_matrix(&scenarios, &cfg.seeds, &corpus, &teacher, Some(&asr), &targets, None)
    })?;
    if let Some(c) = matrix.iter().find(|c| c.outcome.is_err()) {
        return Err(Error::invalid(format!(
            "cell {}/{} failed: {}",
            c.scenario,
            c.seed,
            c.outcome.as_ref().err().map_or("", String::as_str)
        )));
    }
    let trained = |id: &str, seed: u64| -> &ModelBundle {
        &matrix
            .iter()
            .find(|c| c.scenario == id && c.seed == seed)
            .and_then(|c| c.outcome.as_ref().ok())
            .expect("every cell succeeded")
            .best
    };

    let test_text: Vec<Vec<f64>> = targets.test.iter().map(|t| t.data().to_vec()).collect();
    let test_frames: Vec<&Tensor> = corpus.test.iter().map(|p| &p.frames).collect();
    let mut references = BTreeMap::new();
    for &seed in &cfg.seeds {
        for init in [StudentInit::Random, StudentInit::Pretrained] {
            references.insert(
                (reference_id(init).to_string(), seed),
                initial_bundle(&cfg.model, init, seed, &teacher, Some(&asr))?,
            );
        }
    }
    let mut test_speech = BTreeMap::new();
    let mut retrieval = Vec::new();
    let mut cascade = CascadeSummary::default();
    timed(&mut tm, "retrieval", || {
        for &seed in &cfg.seeds {
            let ids = ["G", "H"].into_iter().chain(cfg.scenarios.iter().map(String::as_str));
            for id in ids {
                let bundle = references
                    .get(&(id.to_string(), seed))
                    .unwrap_or_else(|| trained(id, seed));
                let speech = speech_embeddings(bundle, test_frames.par_iter().copied())?;
                retrieval.push(RetrievalRow {
                    scenario: id.to_string(),
                    seed: Some(seed),
                    report: retrieval_report("test", &speech, &test_text)?,
                });
                test_speech.insert(format!("{id}/{seed}"), speech);
            }
        }
        let refs: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.tokens.clone()).collect();
        let (speech, summary) = cascade_embeddings(test_frames.par_iter().copied(), &refs, &asr, &teacher)?;
        cascade = summary;
        retrieval.push(RetrievalRow {
            scenario: CASCADE_ID.into(),
            seed: None,
            report: retrieval_report("test", &speech, &test_text)?,
        });
        test_speech.insert(CASCADE_ID.to_string(), speech);
        Ok(())
    })?;

    let (zeroshot, label_cosine) = timed(&mut tm, "zeroshot", || {
        let suite = ZeroShotSuite::build(&cfg.zeroshot, &corpus, &teacher)?;
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            for id in ["G", "H"].into_iter().chain(cfg.scenarios.iter().map(String::as_str)) {
                let bundle = references
                    .get(&(id.to_string(), seed))
                    .unwrap_or_else(|| trained(id, seed));
                rows.extend(suite.evaluate(id, Some(seed), bundle)?);
            }
        }
        rows.extend(suite.evaluate_cascade(&asr, &teacher)?);
        let cos = suite
            .datasets
            .iter()
            .map(|d| d.kind)
            .zip(suite.label_cosine.iter().copied())
            .collect();
        Ok((rows, cos))
    })?;

    let (probe_text_sets, probing) = timed(&mut tm, "probing", || {
        let (_, splits) = gen_probing_tasks(&cfg.probing, &corpus.language, &corpus.acoustic, &corpus.sentences())?;
        let texts = splits
            .iter()
            .map(|s| probe_text(s, &teacher))
            .collect::<Result<Vec<_>>>()?;
        let students: Vec<(u64, &ModelBundle, &ModelBundle)> = cfg
            .seeds
            .iter()
            .map(|&s| (s, &references[&("H".to_string(), s)], trained(&cfg.probe_scenario, s)))
            .collect();
        let rows = probing_study(&splits, &texts, &students, &cfg.probe)?;
        Ok((texts, rows))
    })?;

    let (trend, trend_spearman) = timed(&mut tm, "trend", || {
        let sc = TrainScenario::preset(&cfg.trend.scenario, &cfg.joint, cfg.seeds[0])?;
        let mut cks: Vec<(String, u64, &ModelBundle)> = snapshots
            .iter()
            .map(|s| (format!("step-{}", s.step), s.step, &s.bundle))
            .collect();
        cks.push(("final".into(), asr_report.steps, &asr));
        let rows = wer_trend(&sc, &cks, &corpus, &teacher, &targets)?;
        let rho = trend_correlation(&rows).ok();
        Ok((rows, rho))
    })?;

    for c in &matrix {
        let o = c.outcome.as_ref().expect("checked above");
        if o.best.params.group_bytes(ParamGroup::Teacher) != teacher.params.group_bytes(ParamGroup::Teacher) {
            return Err(Error::FrozenDrift(format!("{}/{} teacher", c.scenario, c.seed)));
        }
    }

    Ok(ExperimentResults {
        config: cfg.clone(),
        corpus,
        teacher,
        teacher_report,
        asr,
        asr_report,
        asr_test_wer,
        snapshots,
        matrix,
        test_text,
        test_speech,
        retrieval,
        cascade,
        zeroshot,
        label_cosine,
        probe_text: probe_text_sets,
        probing,
        trend,
        trend_spearman,
        timings: tm,
    })
}
