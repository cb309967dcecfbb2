//! Train-then-evaluate runs over toggle sets and seeds, shared by the
//! `ablate` command and the synthetic experiment.

use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{split_rare_common, word_counts, Dataset, Vocab};
use crate::error::Result;
use crate::eval::{evaluate, predict_all, MetricReport, PredictionSet, Predictor};
use crate::model::{prepare, DTsg, LossToggles, ModelConfig};
use crate::sampler::NegativeTable;
use crate::train::{train, TrainState};

/// Train, validation and test splits of one corpus.
#[derive(Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// Scores on the test split at R@1, IoU=0.5.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub all: f64,
    pub rare: f64,
    pub common: f64,
    pub seconds: f64,
}

/// Rows of the ablation table: backbone only, backbone with `L_sample`, each
/// biased model alone inside the branch, and everything.
pub fn default_toggle_sets() -> Vec<LossToggles> {
    let branch = |i: usize| {
        let mut t = LossToggles { debias: true, contras: true, ..LossToggles::backbone_only() };
        *[&mut t.bias1, &mut t.bias2, &mut t.bias3][i] = true;
        t
    };
    vec![
        LossToggles::backbone_only(),
        LossToggles { sample: true, ..LossToggles::backbone_only() },
        branch(0),
        branch(1),
        branch(2),
        LossToggles::all(),
    ]
}

/// Scores `preds` on `test`, adding `rare` and `common` splits when the
/// training split is known.
pub fn split_report(preds: &PredictionSet, train: Option<&Dataset>, test: &Dataset, cfg: &RunConfig) -> Result<MetricReport> {
    match train {
        Some(train) => {
            let (rare, common) = split_rare_common(test, &word_counts(train), cfg.data.rare_threshold);
            evaluate(preds, &[("all", test), ("rare", &rare), ("common", &common)], &cfg.eval.grid, cfg.eval.inclusive_iou)
        }
        None => evaluate(preds, &[("all", test)], &cfg.eval.grid, cfg.eval.inclusive_iou),
    }
}

/// Top-n predictions of any predictor on every sample of `test`.
pub fn predict_dataset(model: &dyn Predictor, vocab: &Vocab, mcfg: &ModelConfig, test: &Dataset, top_n: usize) -> Result<PredictionSet> {
    let samples = prepare(test, vocab, mcfg.max_query_len);
    predict_all(model, &samples, top_n, mcfg.decode_limit())
}

/// One training run with `toggles` and `seed` replacing the configured ones.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    splits: Splits,
    table: Option<&NegativeTable>,
    toggles: LossToggles,
    seed: u64,
) -> Result<(TrainState, MetricReport, RunResult)> {
    let t0 = Instant::now();
    let vocab = Vocab::from_dataset(splits.train);
    let model = DTsg::new(cfg.model.clone(), vocab, splits.train.feature_dim(), seed)?;
    let tcfg = crate::train::TrainConfig { toggles, seed, ..cfg.train.clone() };
    let state = train(model, splits.train, splits.val, table, &tcfg)?;
    let m = &state.model;
    let preds = predict_dataset(m, &m.vocab, &m.config, splits.test, cfg.eval.top_n)?;
    let report = split_report(&preds, Some(splits.train), splits.test, cfg)?;
    let r1 = |split| report.recall(split, 1, 0.5).unwrap_or(f64::NAN);
    let result = RunResult {
        label: toggles.label(),
        seed,
        best_epoch: state.best_epoch,
        epochs_run: state.log.len(),
        all: r1("all"),
        rare: r1("rare"),
        common: r1("common"),
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((state, report, result))
}

/// Seed-averaged R@1, IoU=0.5 of one toggle set.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&RunResult) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_all(&self) -> f64 {
        self.mean(|r| r.all)
    }

    pub fn mean_rare(&self) -> f64 {
        self.mean(|r| r.rare)
    }

    pub fn mean_common(&self) -> f64 {
        self.mean(|r| r.common)
    }
}

/// Runs every toggle set under every seed. `on_run` sees each result as soon
/// as it is available.
pub fn ablate(
    cfg: &RunConfig,
    splits: Splits,
    table: Option<&NegativeTable>,
    toggle_sets: &[LossToggles],
    seeds: &[u64],
    mut on_run: impl FnMut(&RunResult),
) -> Result<Vec<AblationRow>> {
    toggle_sets
        .iter()
        .map(|&toggles| {
            let mut runs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let needs_table = toggles.sample.then_some(table).flatten();
                let (_, _, r) = train_and_evaluate(cfg, splits, needs_table, toggles, seed)?;
                on_run(&r);
                runs.push(r);
            }
            Ok(AblationRow { label: toggles.label(), runs })
        })
        .collect()
}

/// `toggles,seeds,all,rare,common,rare_per_seed` with recall means in
/// percent and per-seed rare recalls joined by `;`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("toggles,seeds,all,rare,common,rare_per_seed\n");
    for r in rows {
        let per_seed: Vec<String> = r.runs.iter().map(|x| format!("{:.2}", x.rare)).collect();
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{}\n",
            r.label,
            r.runs.len(),
            r.mean_all(),
            r.mean_rare(),
            r.mean_common(),
            per_seed.join(";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggle_rows_cover_the_protocol() {
        let labels: Vec<String> = default_toggle_sets().iter().map(|t| t.label()).collect();
        assert_eq!(labels.len(), 6);
        assert_eq!(labels[0], "backbone");
        assert_eq!(labels[5], "all");
        for (i, l) in labels[2..5].iter().enumerate() {
            let t = LossToggles::parse(l).unwrap();
            let on = [t.bias1, t.bias2, t.bias3];
            assert_eq!(on.iter().filter(|&&b| b).count(), 1);
            assert!(on[i] && t.debias && t.contras && !t.sample);
        }
    }

    #[test]
    fn csv_has_one_row_per_set() {
        let run = |label: &str, rare| RunResult { label: label.into(), seed: 0, best_epoch: 1, epochs_run: 1, all: 50.0, rare, common: 60.0, seconds: 0.0 };
        let rows = vec![
            AblationRow { label: "backbone".into(), runs: vec![run("backbone", 10.0), run("backbone", 20.0)] },
            AblationRow { label: "all".into(), runs: vec![run("all", 30.0)] },
        ];
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "backbone,2,50.00,15.00,60.00,10.00;20.00");
    }
}
