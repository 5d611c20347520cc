//! Probing tasks: sentences labeled by a rule over their tokens, each also
//! rendered to frames so the same items probe both encoders.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::acoustic::AcousticModel;
use crate::datagen::language::BigramLanguage;
use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

/// Speaker used for probe-time renderings.
pub const PROBE_SPEAKER: u64 = 2000;

/// Sentence-length buckets for the LEN task.
pub const LEN_BUCKETS: [&[usize]; 6] = [&[4, 5], &[6, 7], &[8], &[9], &[10], &[11, 12]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbingTask {
    /// Length bucket.
    Len,
    /// Which designated token occurs.
    Content,
    /// Whether one adjacent pair was swapped.
    Shift,
    /// Which marker token appears.
    Marker,
    /// Parity of the count of a designated token class.
    Parity,
}

impl ProbingTask {
    pub const ALL: [ProbingTask; 5] = [
        ProbingTask::Len,
        ProbingTask::Content,
        ProbingTask::Shift,
        ProbingTask::Marker,
        ProbingTask::Parity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbingTask::Len => "len",
            ProbingTask::Content => "content",
            ProbingTask::Shift => "shift",
            ProbingTask::Marker => "marker",
            ProbingTask::Parity => "parity",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            ProbingTask::Len => LEN_BUCKETS.len(),
            ProbingTask::Content => 20,
            _ => 2,
        }
    }
}

impl std::str::FromStr for ProbingTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbingTask::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown probing task `{s}`")))
    }
}

pub fn len_bucket(len: usize) -> Option<usize> {
    LEN_BUCKETS.iter().position(|b| b.contains(&len))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbingConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Render noise used for probe-time speech.
    pub tts_sigma: f64,
    pub seed: u64,
}

impl Default for ProbingConfig {
    fn default() -> Self {
        ProbingConfig {
            n_train: 10_000,
            n_valid: 1000,
            n_test: 1000,
            min_len: 4,
            max_len: 12,
            tts_sigma: 0.3,
            seed: 31,
        }
    }
}

/// Token sets the label rules refer to; disjoint, drawn from ordinary tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbingDesign {
    pub content: Vec<usize>,
    pub markers: [usize; 2],
    pub parity_class: Vec<usize>,
}

impl ProbingDesign {
    pub fn new(language: &BigramLanguage, seed: u64) -> Result<Self> {
        let mut pool = language.regular().to_vec();
        if pool.len() < 27 {
            return Err(Error::Capacity(format!("{} ordinary tokens, 27 needed", pool.len())));
        }
        pool.shuffle(&mut rng::stream(&[seed, 0xde]));
        Ok(ProbingDesign {
            content: pool[..20].to_vec(),
            markers: [pool[20], pool[21]],
            parity_class: pool[22..27].to_vec(),
        })
    }

    /// Ground-truth label of `tokens` for the token-rule tasks; `None` when
    /// the sentence is not a valid instance. SHIFT labels are not a function
    /// of the tokens alone and return `None`.
    pub fn label(&self, task: ProbingTask, tokens: &[usize]) -> Option<usize> {
        match task {
            ProbingTask::Len => len_bucket(tokens.len()),
            ProbingTask::Content => {
                let hits: Vec<usize> = tokens
                    .iter()
                    .filter_map(|t| self.content.iter().position(|c| c == t))
                    .collect();
                (hits.len() == 1).then(|| hits[0])
            }
            ProbingTask::Marker => {
                let has = |m: usize| tokens.contains(&m);
                match (has(self.markers[0]), has(self.markers[1])) {
                    (true, false) => Some(0),
                    (false, true) => Some(1),
                    _ => None,
                }
            }
            ProbingTask::Parity => {
                let n = tokens.iter().filter(|t| self.parity_class.contains(t)).count();
                (n == 1 || n == 2).then_some(n % 2)
            }
            ProbingTask::Shift => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbingExample {
    pub task: ProbingTask,
    pub tokens: Vec<usize>,
    /// Sentence before any perturbation; equals `tokens` except for swapped SHIFT items.
    pub source: Vec<usize>,
    pub label: usize,
    pub frames: Tensor<f64>,
    pub render_seed: u64,
}

#[derive(Clone, Debug)]
pub struct ProbingSplits {
    pub task: ProbingTask,
    pub train: Vec<ProbingExample>,
    pub valid: Vec<ProbingExample>,
    pub test: Vec<ProbingExample>,
}

struct Generator<'a> {
    task: ProbingTask,
    cfg: &'a ProbingConfig,
    design: &'a ProbingDesign,
    language: &'a BigramLanguage,
    acoustic: &'a AcousticModel,
    exclude: &'a HashSet<Vec<usize>>,
    seen: HashSet<Vec<usize>>,
    rng: ChaCha8Rng,
    counter: u64,
}

impl Generator<'_> {
    fn candidate(&mut self, want_swap: bool) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        let len = self.rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let source = self.language.sample(len, &mut self.rng);
        if self.task != ProbingTask::Shift {
            let label = self.design.label(self.task, &source)?;
            return Some((source.clone(), source, label));
        }
        if !want_swap {
            return Some((source.clone(), source, 0));
        }
        let spots: Vec<usize> = (0..len - 1).filter(|&i| source[i] != source[i + 1]).collect();
        let &i = spots.get(self.rng.random_range(0..spots.len().max(1)))?;
        let mut tokens = source.clone();
        tokens.swap(i, i + 1);
        Some((tokens, source, 1))
    }

    fn split(&mut self, n: usize) -> Result<Vec<ProbingExample>> {
        let k = self.task.n_classes();
        let quota: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        let mut filled = vec![0usize; k];
        let mut out = Vec::with_capacity(n);
        let cap = 400 * n + 10_000;
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > cap {
                return Err(Error::Capacity(format!(
                    "{} task: only {} of {n} balanced examples after {cap} draws",
                    self.task.name(),
                    out.len()
                )));
            }
            let want_swap = filled[1] < quota.get(1).copied().unwrap_or(0) && filled[0] >= filled[1];
            let Some((tokens, source, label)) = self.candidate(want_swap) else {
                continue;
            };
            if filled[label] >= quota[label] || self.exclude.contains(&tokens) || self.exclude.contains(&source) {
                continue;
            }
            if !self.seen.insert(tokens.clone()) {
                continue;
            }
            let render_seed = rng::mix(&[self.cfg.seed, self.task as u64, self.counter]);
            self.counter += 1;
            let frames = self
                .acoustic
                .render_with_sigma(&tokens, PROBE_SPEAKER, render_seed, self.cfg.tts_sigma)?;
            filled[label] += 1;
            out.push(ProbingExample {
                task: self.task,
                tokens,
                source,
                label,
                frames,
                render_seed,
            });
        }
        Ok(out)
    }
}

/// Class-balanced train/valid/test splits for `task`, disjoint from each
/// other and from `exclude`.
pub fn gen_probing_task(
    task: ProbingTask,
    cfg: &ProbingConfig,
    design: &ProbingDesign,
    language: &BigramLanguage,
    acoustic: &AcousticModel,
    exclude: &HashSet<Vec<usize>>,
) -> Result<ProbingSplits> {
    if cfg.min_len < 2 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid(format!(
            "probing length range [{}, {}]",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut g = Generator {
        task,
        cfg,
        design,
        language,
        acoustic,
        exclude,
        seen: HashSet::new(),
        rng: rng::stream(&[cfg.seed, 0x9b, task as u64]),
        counter: 0,
    };
    Ok(ProbingSplits {
        task,
        train: g.split(cfg.n_train)?,
        valid: g.split(cfg.n_valid)?,
        test: g.split(cfg.n_test)?,
    })
}

pub fn gen_probing_tasks(
    cfg: &ProbingConfig,
    language: &BigramLanguage,
    acoustic: &AcousticModel,
    exclude: &HashSet<Vec<usize>>,
) -> Result<(ProbingDesign, Vec<ProbingSplits>)> {
    let design = ProbingDesign::new(language, cfg.seed)?;
    let tasks = ProbingTask::ALL
        .iter()
        .map(|&t| gen_probing_task(t, cfg, &design, language, acoustic, exclude))
        .collect::<Result<_>>()?;
    Ok((design, tasks))
}
