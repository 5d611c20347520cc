//! The scenario × seed experiment matrix.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::corpus::Corpus;
use crate::error::{Error, Result};
use crate::training::scenario::{train_joint, JointOutcome, TeacherTargets, TrainScenario};
use crate::ModelBundle;

pub struct MatrixCell {
    pub scenario: String,
    pub seed: u64,
    /// A failed cell keeps its error message; the rest of the matrix still runs.
    pub outcome: std::result::Result<JointOutcome, String>,
}

/// Runs every scenario once per seed (the scenario's own `seed` field is
/// replaced). Cells are independent and may run concurrently; results come
/// back in scenario-major order. With `out`, each successful cell is written
/// to `out/<scenario>/<seed>/` and a summary to `out/matrix.csv`.
pub fn run_matrix(
    scenarios: &[TrainScenario],
    seeds: &[u64],
    corpus: &Corpus,
    teacher: &ModelBundle,
    asr: Option<&ModelBundle>,
    targets: &TeacherTargets,
    out: Option<&Path>,
) -> Result<Vec<MatrixCell>> {
    let mut ids = HashSet::new();
    if let Some(dup) = scenarios.iter().find(|s| !ids.insert(s.id.as_str())) {
        return Err(Error::invalid(format!("scenario `{}` listed twice", dup.id)));
    }
    let jobs: Vec<TrainScenario> = scenarios
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| TrainScenario { seed, ..s.clone() }))
        .collect();
    let cells: Vec<MatrixCell> = jobs
        .into_par_iter()
        .map(|sc| {
            let outcome = train_joint(&sc, corpus, teacher, asr, targets).and_then(|o| {
                if let Some(dir) = out {
                    o.write_run(&dir.join(&sc.id).join(sc.seed.to_string()))?;
                }
                Ok(o)
            });
            if let Err(e) = &outcome {
                log::warn!("cell {}/{} failed: {e}", sc.id, sc.seed);
            }
            MatrixCell {
                scenario: sc.id.clone(),
                seed: sc.seed,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("matrix.csv"), matrix_csv(&cells))?;
    }
    Ok(cells)
}

pub fn matrix_csv(cells: &[MatrixCell]) -> String {
    let mut s = String::from("scenario,seed,status,best_epoch,valid_ce,valid_l2,valid_total,initial_valid_l2\n");
    for c in cells {
        match &c.outcome {
            Ok(o) => {
                let (ce, l2, total) = o.best_valid();
                let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},ok,{},{},{},{},{}",
                    c.scenario,
                    c.seed,
                    o.best_epoch,
                    f(ce),
                    f(l2),
                    total,
                    f(o.initial_valid_l2())
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{},{},failed: {},,,,,", c.scenario, c.seed, e.replace(',', ";"));
            }
        }
    }
    s
}
