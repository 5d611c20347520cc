//! Paired utterance/transcription corpora and their on-disk layout.
//!
//! ```text
//! <dir>/corpus.toml              generation config
//! <dir>/<split>/tokens.csv       one utterance per line, comma-separated ids
//! <dir>/<split>/frames.f32       all frames, little-endian f32, row-major
//! <dir>/<split>/frames.idx       one "rows,cols" line per utterance
//! <dir>/<split>/manifest.csv     id,speaker,render_seed,n_tokens,n_frames,tokens_path,frames_path,frame_offset
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::acoustic::{AcousticConfig, AcousticModel};
use crate::datagen::language::{BigramLanguage, LanguageConfig};
use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePair {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub frames: Tensor<f64>,
    pub speaker: u64,
    pub render_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Speakers shared by the train and valid splits.
    pub n_speakers: u64,
    /// Held-out speakers used only by the test split.
    pub n_test_speakers: u64,
    pub language: LanguageConfig,
    pub acoustic: AcousticConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            min_len: 4,
            max_len: 12,
            n_speakers: 24,
            n_test_speakers: 8,
            language: LanguageConfig::default(),
            acoustic: AcousticConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub language: BigramLanguage,
    pub acoustic: AcousticModel,
    pub train: Vec<UtterancePair>,
    pub valid: Vec<UtterancePair>,
    pub test: Vec<UtterancePair>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[UtterancePair] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Every transcription in any split.
    pub fn sentences(&self) -> HashSet<Vec<usize>> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s).iter().map(|p| p.tokens.clone()))
            .collect()
    }

    /// Re-renders a pair from its stored speaker and seed.
    pub fn rerender(&self, pair: &UtterancePair) -> Result<Tensor<f64>> {
        self.acoustic.render(&pair.tokens, pair.speaker, pair.render_seed)
    }
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid(format!(
            "empty sentence length range [{}, {}]",
            cfg.min_len, cfg.max_len
        )));
    }
    if cfg.n_speakers == 0 || cfg.n_test_speakers == 0 {
        return Err(Error::invalid("corpus needs at least one speaker per pool"));
    }
    let language = BigramLanguage::new(&cfg.language)?;
    let acoustic = AcousticModel::new(cfg.acoustic.clone(), cfg.language.vocab_size)?;
    let mut r = rng::stream(&[cfg.seed, 0xc0]);
    let mut seen = HashSet::new();
    let mut next_id = 0u64;
    let mut make = |n: usize, split: Split, r: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<UtterancePair>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(Error::Capacity(format!("could not draw {n} distinct sentences")));
            }
            let len = r.random_range(cfg.min_len..=cfg.max_len);
            let tokens = language.sample(len, r);
            if !seen.insert(tokens.clone()) {
                continue;
            }
            let speaker = match split {
                Split::Test => cfg.n_speakers + r.random_range(0..cfg.n_test_speakers),
                _ => r.random_range(0..cfg.n_speakers),
            };
            let render_seed = rng::mix(&[cfg.seed, next_id]);
            let frames = acoustic.render(&tokens, speaker, render_seed)?;
            out.push(UtterancePair {
                id: next_id,
                tokens,
                frames,
                speaker,
                render_seed,
            });
            next_id += 1;
        }
        Ok(out)
    };
    let train = make(cfg.n_train, Split::Train, &mut r)?;
    let valid = make(cfg.n_valid, Split::Valid, &mut r)?;
    let test = make(cfg.n_test, Split::Test, &mut r)?;
    Ok(Corpus {
        config: cfg.clone(),
        language,
        acoustic,
        train,
        valid,
        test,
    })
}

fn write_split(dir: &Path, pairs: &[UtterancePair]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tokens = BufWriter::new(fs::File::create(dir.join("tokens.csv"))?);
    let mut frames = BufWriter::new(fs::File::create(dir.join("frames.f32"))?);
    let mut idx = BufWriter::new(fs::File::create(dir.join("frames.idx"))?);
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.csv"))?);
    writeln!(
        manifest,
        "id,speaker,render_seed,n_tokens,n_frames,tokens_path,frames_path,frame_offset"
    )?;
    let mut offset = 0usize;
    for p in pairs {
        let line: Vec<String> = p.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(tokens, "{}", line.join(","))?;
        let (rows, cols) = p.frames.dims2();
        writeln!(idx, "{rows},{cols}")?;
        for &x in p.frames.data() {
            frames.write_all(&(x as f32).to_le_bytes())?;
        }
        writeln!(
            manifest,
            "{},{},{},{},{},tokens.csv,frames.f32,{}",
            p.id,
            p.speaker,
            p.render_seed,
            p.tokens.len(),
            rows,
            offset
        )?;
        offset += rows;
    }
    for w in [&mut tokens, &mut frames, &mut idx, &mut manifest] {
        w.flush()?;
    }
    Ok(())
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad {what} `{s}`")))
}

fn read_split(dir: &Path) -> Result<Vec<UtterancePair>> {
    let tokens = fs::read_to_string(dir.join("tokens.csv"))?;
    let idx = fs::read_to_string(dir.join("frames.idx"))?;
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let raw = fs::read(dir.join("frames.f32"))?;
    if raw.len() % 4 != 0 {
        return Err(Error::invalid("frames.f32 length not a multiple of 4"));
    }
    let floats: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut out = Vec::new();
    let mut pos = 0usize;
    let rows = tokens.lines().zip(idx.lines()).zip(manifest.lines().skip(1));
    for ((tok_line, idx_line), man_line) in rows {
        let toks = tok_line
            .split(',')
            .map(|s| parse_usize(s, "token"))
            .collect::<Result<Vec<_>>>()?;
        let (r, c) = idx_line
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("bad index line `{idx_line}`")))?;
        let (r, c) = (parse_usize(r, "rows")?, parse_usize(c, "cols")?);
        let fields: Vec<&str> = man_line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::invalid(format!("bad manifest line `{man_line}`")));
        }
        let n = r * c;
        if pos + n > floats.len() {
            return Err(Error::invalid("frames.f32 shorter than its index"));
        }
        out.push(UtterancePair {
            id: parse_usize(fields[0], "id")? as u64,
            speaker: parse_usize(fields[1], "speaker")? as u64,
            render_seed: fields[2].parse().map_err(|_| Error::invalid("bad render seed"))?,
            tokens: toks,
            frames: Tensor::matrix(r, c, floats[pos..pos + n].to_vec())?,
        });
        pos += n;
    }
    if pos != floats.len() {
        return Err(Error::invalid("frames.f32 longer than its index"));
    }
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = toml::to_string(&corpus.config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("corpus.toml"), cfg)?;
    for s in Split::ALL {
        write_split(&dir.join(s.name()), corpus.split(s))?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join("corpus.toml"))?;
    let config: CorpusConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let language = BigramLanguage::new(&config.language)?;
    let acoustic = AcousticModel::new(config.acoustic.clone(), config.language.vocab_size)?;
    Ok(Corpus {
        train: read_split(&dir.join("train"))?,
        valid: read_split(&dir.join("valid"))?,
        test: read_split(&dir.join("test"))?,
        config,
        language,
        acoustic,
    })
}
