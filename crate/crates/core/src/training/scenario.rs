//! Joint embedding training scenarios.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::corpus::{Corpus, UtterancePair};
use crate::error::{Error, Result};
use crate::models::{checkpoint, ModelConfig, StudentInit};
use crate::numerics::{LossWeights, LrSchedule, ParamGroup, LABEL_SMOOTHING};
use crate::training::fit::{fit, AugmentConfig, FitOptions, History, Item, Objective};
use crate::{ModelBundle, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    AllStudent,
    ProjectionOnly,
}

/// Budget shared by all joint-training scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub label_smoothing: f64,
    pub augment: Option<AugmentConfig>,
}

impl Default for JointBudget {
    fn default() -> Self {
        JointBudget {
            epochs: 12,
            batch_size: 16,
            schedule: LrSchedule {
                peak_lr: 2e-3,
                warmup_steps: 200,
            },
            label_smoothing: LABEL_SMOOTHING,
            augment: Some(AugmentConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainScenario {
    pub id: String,
    pub student_init: StudentInit,
    pub trainable: Trainable,
    pub multitask: bool,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub label_smoothing: f64,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

/// Identifiers of the trained rows of the scenario matrix.
pub const TRAINED_SCENARIOS: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

impl TrainScenario {
    /// One of the matrix rows `A`..`F`.
    pub fn preset(id: &str, budget: &JointBudget, seed: u64) -> Result<Self> {
        use StudentInit::*;
        use Trainable::*;
        let (init, trainable, multitask, gamma, beta) = match id {
            "A" => (Random, AllStudent, false, 0.0, 1.0),
            "B" => (Pretrained, AllStudent, false, 0.0, 1.0),
            "C" => (Pretrained, ProjectionOnly, false, 0.0, 1.0),
            "D" => (Random, AllStudent, true, 1.0, 1.0),
            "E" => (Random, AllStudent, true, 1.0, 10.0),
            "F" => (Pretrained, AllStudent, true, 1.0, 100.0),
            _ => return Err(Error::invalid(format!("unknown scenario `{id}`"))),
        };
        Ok(TrainScenario {
            id: id.to_string(),
            student_init: init,
            trainable,
            multitask,
            weights: LossWeights { gamma, beta },
            epochs: budget.epochs,
            batch_size: budget.batch_size,
            schedule: budget.schedule,
            label_smoothing: budget.label_smoothing,
            augment: budget.augment,
            seed,
        })
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.multitask && model.decoder.is_none() {
            return Err(Error::MissingDecoder);
        }
        if self.trainable == Trainable::ProjectionOnly && self.multitask {
            return Err(Error::Config("projection-only training has no recognition term".into()));
        }
        if !self.multitask && self.weights.gamma != 0.0 {
            return Err(Error::Config(format!(
                "scenario {} has gamma {} without a recognition term",
                self.id, self.weights.gamma
            )));
        }
        if self.weights.beta == 0.0 && !self.multitask {
            return Err(Error::Config("scenario optimizes nothing".into()));
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        match self.trainable {
            Trainable::ProjectionOnly => vec![ParamGroup::Projection],
            Trainable::AllStudent if self.multitask => {
                vec![ParamGroup::Student, ParamGroup::Projection, ParamGroup::Decoder]
            }
            Trainable::AllStudent => vec![ParamGroup::Student, ParamGroup::Projection],
        }
    }

    pub fn objective(&self) -> Objective {
        Objective::Speech {
            weights: self.weights,
            ce: self.multitask,
            l2: true,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn options(&self) -> FitOptions {
        FitOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            seed: self.seed,
            augment: self.augment,
            trainable: self.trainable_groups(),
            snapshot_steps: vec![],
        }
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Bundle a scenario starts from: fresh parameters from `seed`, the given
/// teacher, and for pretrained students the encoder and decoder of `asr`.
/// With `Random` this is the untrained reference G, with `Pretrained` the
/// reference H.
pub fn initial_bundle(
    model: &ModelConfig,
    init: StudentInit,
    seed: u64,
    teacher: &ModelBundle,
    asr: Option<&ModelBundle>,
) -> Result<ModelBundle> {
    let mut b = ModelBundle::new(model.clone(), seed)?;
    b.params.copy_group_from(&teacher.params, ParamGroup::Teacher)?;
    if init == StudentInit::Pretrained {
        let asr = asr.ok_or_else(|| Error::invalid("pretrained student requested without a recognition checkpoint"))?;
        b.params.copy_group_from(&asr.params, ParamGroup::Student)?;
        if b.has_decoder() && asr.has_decoder() {
            b.params.copy_group_from(&asr.params, ParamGroup::Decoder)?;
        }
    }
    b.params.set_group_frozen(ParamGroup::Teacher, true);
    Ok(b)
}

/// Teacher embeddings of every corpus sentence, computed once in eval mode.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub train: Vec<Tensor>,
    pub valid: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

fn embed_all(teacher: &ModelBundle, pairs: &[UtterancePair]) -> Result<Vec<Tensor>> {
    pairs
        .iter()
        .map(|p| Ok(Tensor::vector(teacher.encode_text(&p.tokens)?)))
        .collect()
}

impl TeacherTargets {
    pub fn compute(teacher: &ModelBundle, corpus: &Corpus) -> Result<Self> {
        Ok(TeacherTargets {
            train: embed_all(teacher, &corpus.train)?,
            valid: embed_all(teacher, &corpus.valid)?,
            test: embed_all(teacher, &corpus.test)?,
        })
    }
}

pub(crate) fn joint_items<'a>(pairs: &'a [UtterancePair], targets: &'a [Tensor]) -> Vec<Item<'a>> {
    pairs
        .iter()
        .zip(targets)
        .map(|(p, t)| Item {
            tokens: &p.tokens,
            frames: Some(&p.frames),
            target: Some(t),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub scenario: TrainScenario,
    pub best: ModelBundle,
    pub last: ModelBundle,
    pub best_epoch: usize,
    pub history: History,
    pub steps: u64,
}

impl JointOutcome {
    /// Validation (ce, l2, total) at the selected epoch.
    pub fn best_valid(&self) -> (Option<f64>, Option<f64>, f64) {
        let r = self.history.valid()[self.best_epoch];
        (r.ce, r.l2, r.total)
    }

    pub fn initial_valid_l2(&self) -> Option<f64> {
        self.history.valid()[0].l2
    }

    /// Mean ratio of recognition to alignment loss over training steps.
    pub fn ce_to_l2_ratio(&self) -> Option<f64> {
        let ratios: Vec<f64> = self
            .history
            .train()
            .filter_map(|r| Some(r.ce? / r.l2?))
            .filter(|x| x.is_finite())
            .collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }

    /// Writes `config`, `history.csv`, `best.ckpt` and `final.ckpt` into `dir`.
    pub fn write_run(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let config = format!(
            "[scenario]\n{}\n[model]\n{}",
            self.scenario.canonical(),
            self.best.config.canonical()
        );
        fs::write(dir.join("config"), config)?;
        fs::write(dir.join("history.csv"), self.history.to_csv())?;
        checkpoint::save(&self.best, &dir.join("best.ckpt"))?;
        checkpoint::save(&self.last, &dir.join("final.ckpt"))?;
        Ok(())
    }
}

/// Trains one scenario against a frozen teacher.
pub fn train_joint(
    scenario: &TrainScenario,
    corpus: &Corpus,
    teacher: &ModelBundle,
    asr: Option<&ModelBundle>,
    targets: &TeacherTargets,
) -> Result<JointOutcome> {
    let model = &teacher.config;
    scenario.validate(model)?;
    let mut bundle = initial_bundle(model, scenario.student_init, scenario.seed, teacher, asr)?;
    let teacher_bytes = bundle.params.group_bytes(ParamGroup::Teacher);
    let train = joint_items(&corpus.train, &targets.train);
    let valid = joint_items(&corpus.valid, &targets.valid);
    let out = fit(&mut bundle, &train, &valid, scenario.objective(), &scenario.options())?;
    if bundle.params.group_bytes(ParamGroup::Teacher) != teacher_bytes {
        return Err(Error::FrozenDrift(ParamGroup::Teacher.as_str().into()));
    }
    let mut best = bundle.clone();
    best.params = out.best;
    Ok(JointOutcome {
        scenario: scenario.clone(),
        best,
        last: bundle,
        best_epoch: out.best_epoch,
        history: out.history,
        steps: out.steps,
    })
}
