//! The subcommands. Each one takes a resolved [`RunConfig`] and writes its
//! artifacts to disk; printing is left to the caller.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use scar_core::cmrs::{
    class_auroc, decompose_by_missingness, ledger_csv, ConditionResult, Decomposition, EvalPlans, Protocol,
    ReferenceModel, RobustnessSummary,
};
use scar_core::corpus::{generate_corpus, read_corpus, read_manifest, write_corpus, Corpus, Split};
use scar_core::inference::{linear_probe, prediction_csv, top1_accuracy, PredictionRow, ProbeResult, ZeroShotModel};
use scar_core::missingness::MaskKind;
use scar_core::model::Checkpoint;
use scar_core::training::{metrics_csv, train};
use scar_core::{Error, Result};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REFERENCE_FILE: &str = "reference.json";

/// Evaluation modes of `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    ZeroShot,
    Probe,
    Cmrs,
    Decompose,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::ZeroShot, Mode::Probe, Mode::Cmrs, Mode::Decompose];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zeroshot",
            Mode::Probe => "probe",
            Mode::Cmrs => "cmrs",
            Mode::Decompose => "decompose",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown mode {s:?}; valid: {}", names.join(", ")))
        })
    }
}

/// Files written by a command plus a human-readable summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

impl Outcome {
    fn write(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        fs::write(&path, contents)?;
        self.files.push(path);
        Ok(())
    }
}

// ----------------------------------------------------------------- gen

pub fn cmd_gen(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.out_dir()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(&corpus, dir)?;
    let mut out = Outcome::default();
    for split in Split::ALL {
        out.files.push(dir.join(format!("{}.jsonl", split.name())));
    }
    out.files.push(dir.join(scar_core::corpus::MANIFEST_FILE));
    out.summary = format!(
        "corpus: {} train / {} val / {} test records in {}\n",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(out)
}

/// The corpus a run uses: read from `corpus_dir` when set, otherwise
/// regenerated from the snapshot. Reading overwrites `cfg.corpus` with the
/// manifest's config so the snapshot stays exact.
pub fn load_corpus(cfg: &mut RunConfig) -> Result<Corpus> {
    match &cfg.corpus_dir {
        Some(dir) => {
            let manifest = read_manifest(dir)?;
            let corpus = read_corpus(dir)?;
            cfg.corpus = manifest.config;
            Ok(corpus)
        }
        None => generate_corpus(&cfg.corpus),
    }
}

// --------------------------------------------------------------- train

/// Trains `cfg.variant` and writes config snapshot, checkpoint and metrics.
pub fn cmd_train(mut cfg: RunConfig) -> Result<Outcome> {
    let dir = cfg.out_dir()?.to_path_buf();
    let corpus = load_corpus(&mut cfg)?;
    fs::create_dir_all(&dir)?;
    cfg.save(&dir)?;
    let variant = cfg.variant()?;
    log::info!("training {} for {} epochs", variant.name(), cfg.train.epochs);
    let result = train(&corpus, &cfg.model, &cfg.train, |_, _| Ok(()))?;

    let mut out = Outcome::default();
    out.files.push(dir.join(crate::config::CONFIG_FILE));
    Checkpoint::new(result.model.clone(), result.dims, result.steps, result.params).save(&dir.join(CHECKPOINT_FILE))?;
    out.files.push(dir.join(CHECKPOINT_FILE));
    out.write(dir.join(METRICS_FILE), &metrics_csv(&result.metrics))?;
    let last = result.metrics.last();
    if cfg.train.keep_best {
        log::info!("kept parameters from epoch {}", result.selected_epoch);
    }
    out.summary = format!(
        "{}: {} steps, final align {:.4}, mean gate {:.3}, val AUROC {}\n",
        variant.name(),
        result.steps,
        last.map(|m| m.l_align).unwrap_or(f64::NAN),
        last.map(|m| m.mean_gate).unwrap_or(f64::NAN),
        last.and_then(|m| m.val_auroc).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
    );
    Ok(out)
}

// ---------------------------------------------------------------- eval

/// A trained run loaded back from its directory.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub model: ZeroShotModel,
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::from_run_dir(dir)?;
        let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let corpus = load_corpus(&mut cfg)?;
        let model = ZeroShotModel::new(ckpt.params, ckpt.model_config, &cfg.corpus)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg,
            corpus,
            model,
        })
    }

    /// Reference model cached in the run directory, trained on first use.
    pub fn reference(&self) -> Result<ReferenceModel> {
        let path = self.dir.join(REFERENCE_FILE);
        if path.exists() {
            let cached = ReferenceModel::load(&path)?;
            if cached.config == self.cfg.reference {
                cached.check_quality()?;
                return Ok(cached);
            }
            log::info!("cached reference was built with another config; retraining");
        }
        log::info!("training reference model");
        let reference = ReferenceModel::train(&self.corpus, self.cfg.reference.clone())?;
        reference.check_quality()?;
        reference.save(&path)?;
        Ok(reference)
    }

    fn plans(&self, kinds: &[MaskKind]) -> Result<EvalPlans> {
        let reference = self.reference()?;
        EvalPlans::build(
            &self.corpus.test,
            self.cfg.geometry(),
            &reference,
            &self.cfg.eval.settings,
            kinds,
        )
    }

    fn method_name(&self) -> String {
        self.cfg
            .variant()
            .map(|v| v.name().to_string())
            .unwrap_or_else(|_| self.cfg.variant.clone())
    }
}

fn condition_slug(r: &ConditionResult) -> String {
    let p = match r.protocol {
        Protocol::Rand => "rand",
        Protocol::Hard => "hard",
    };
    format!("{}_{p}", r.kind.name())
}

/// Runs one evaluation mode on a run directory, writing into `out_dir`.
pub fn cmd_eval(run: &LoadedRun, mode: Mode, out_dir: &Path) -> Result<Outcome> {
    fs::create_dir_all(out_dir)?;
    let mut out = Outcome::default();
    let test = &run.corpus.test;
    let method = run.method_name();
    match mode {
        Mode::ZeroShot => {
            let preds = run.model.predict(test)?;
            let rows: Vec<PredictionRow> = test
                .iter()
                .zip(&preds)
                .map(|(r, p)| PredictionRow {
                    record_id: r.id.clone(),
                    mask_id: "none".into(),
                    scores: p.scores.clone(),
                })
                .collect();
            out.write(out_dir.join("predictions.csv"), &prediction_csv(&rows))?;
            let plans = run.plans(&[MaskKind::Joint])?;
            let d = decompose_by_missingness(&run.model, test, &plans, run.cfg.eval.settings.agreement)?;
            let summary = RobustnessSummary::from_decomposition(&d)
                .ok_or_else(|| Error::Contract("joint conditions missing from decomposition".into()))?;
            out.write(out_dir.join("zeroshot.csv"), &summary.csv(&method))?;
            let top1 = top1_accuracy(&preds, test);
            out.write(
                out_dir.join("zeroshot_clean.csv"),
                &format!("method,clean_auroc,top1_accuracy\n{method},{},{top1}\n", d.clean_auroc),
            )?;
            let text = format!(
                "{}\nclean AUROC {:.2}, top-1 prompt accuracy {:.3}\n",
                summary.render(&method),
                100.0 * d.clean_auroc,
                top1
            );
            out.write(out_dir.join("zeroshot.txt"), &text)?;
            out.summary = text;
        }
        Mode::Probe => {
            let results = linear_probe(
                &run.model.params,
                &run.model.model,
                &run.corpus.train,
                test,
                run.cfg.corpus.patch_length,
                &run.cfg.probe,
                run.cfg.seed,
            )?;
            let (csv, text) = probe_tables(&method, &results);
            out.write(out_dir.join("probe.csv"), &csv)?;
            out.write(out_dir.join("probe.txt"), &text)?;
            out.summary = text;
        }
        Mode::Cmrs => {
            let plans = run.plans(&[MaskKind::Joint])?;
            let d = decompose_by_missingness(&run.model, test, &plans, run.cfg.eval.settings.agreement)?;
            let mut csv = String::from("condition,cmrs,auroc,mean_impact,mean_severity\n");
            let mut text = format!("{method}\n");
            for r in &d.results {
                let slug = condition_slug(r);
                out.write(out_dir.join(format!("ledger_{slug}.csv")), &ledger_csv(&r.ledger))?;
                let c = r.cmrs.value().map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
                csv.push_str(&format!("{slug},{c},{},{},{}\n", r.auroc, r.mean_impact, r.mean_severity));
                text.push_str(&format!(
                    "{:<14} CMRS {:>9}  AUROC {:>6.2}  mean I {:.4}  mean S {:.4}\n",
                    format!("{}-{}", r.kind.name(), r.protocol.label()),
                    r.cmrs.to_string(),
                    100.0 * r.auroc,
                    r.mean_impact,
                    r.mean_severity
                ));
            }
            out.write(out_dir.join("cmrs.csv"), &csv)?;
            out.write(out_dir.join("cmrs.txt"), &text)?;
            out.summary = text;
        }
        Mode::Decompose => {
            let plans = run.plans(&run.cfg.eval.kinds)?;
            let d: Decomposition =
                decompose_by_missingness(&run.model, test, &plans, run.cfg.eval.settings.agreement)?;
            out.write(out_dir.join("decompose.csv"), &d.csv())?;
            let text = d.render_table(&method);
            out.write(out_dir.join("decompose.txt"), &text)?;
            out.summary = text;
        }
    }
    Ok(out)
}

fn probe_tables(method: &str, results: &[ProbeResult]) -> (String, String) {
    let mut csv = String::from("fraction_percent,train_records,auroc,skipped_classes\n");
    let mut text = format!("{:<28}", "Method");
    for r in results {
        text.push_str(&format!("{:>10}", format!("{}%", percent(r.fraction))));
    }
    text.push('\n');
    text.push_str(&format!("{method:<28}"));
    for r in results {
        let auroc = r.auroc.map(|v| v.to_string()).unwrap_or_default();
        let skipped: Vec<String> = r.skipped_classes.iter().map(|c| c.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{auroc},{}\n",
            percent(r.fraction),
            r.train_records,
            skipped.join(";")
        ));
        match r.auroc {
            Some(v) => text.push_str(&format!("{:>10.2}", 100.0 * v)),
            None => text.push_str(&format!("{:>10}", "-")),
        }
    }
    text.push('\n');
    (csv, text)
}

fn percent(fraction: f64) -> String {
    let p = 100.0 * fraction;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

// --------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda_cons: f64,
    pub lambda_mask: f64,
    pub per_class: Vec<Option<f64>>,
    pub average: f64,
}

/// Trains one model per `(λ_cons, λ_mask)` cell and scores zero-shot test
/// AUROC per class. Each cell keeps its own run directory under `out_dir`.
pub fn cmd_sweep(mut cfg: RunConfig) -> Result<(Outcome, Vec<SweepRow>)> {
    let dir = cfg.out_dir()?.to_path_buf();
    let corpus = load_corpus(&mut cfg)?;
    fs::create_dir_all(&dir)?;
    cfg.save(&dir)?;
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    for &lc in &cfg.sweep.lambda_cons {
        for &lm in &cfg.sweep.lambda_mask {
            let mut cell = cfg.clone();
            cell.train.lambda_cons = lc;
            cell.train.lambda_mask = lm;
            let cell_dir = dir.join(format!("lc{lc}_lm{lm}"));
            cell.out_dir = Some(cell_dir.clone());
            fs::create_dir_all(&cell_dir)?;
            cell.save(&cell_dir)?;
            log::info!("sweep cell lambda_cons={lc} lambda_mask={lm}");
            let result = train(&corpus, &cell.model, &cell.train, |_, _| Ok(()))?;
            fs::write(cell_dir.join(METRICS_FILE), metrics_csv(&result.metrics))?;
            let model = ZeroShotModel::new(result.params.clone(), result.model.clone(), &corpus.config)?;
            Checkpoint::new(result.model, result.dims, result.steps, result.params)
                .save(&cell_dir.join(CHECKPOINT_FILE))?;
            let preds = model.predict(&corpus.test)?;
            let k = corpus.config.num_classes;
            let per_class: Vec<Option<f64>> = (0..k)
                .map(|c| {
                    let s: Vec<f64> = preds.iter().map(|p| p.scores[c]).collect();
                    let l: Vec<u8> = corpus.test.iter().map(|r| r.labels[c]).collect();
                    class_auroc(&s, &l)
                })
                .collect();
            let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
            if defined.is_empty() {
                return Err(Error::Metric("no class has both label values in the test split".into()));
            }
            let average = defined.iter().sum::<f64>() / defined.len() as f64;
            rows.push(SweepRow {
                lambda_cons: lc,
                lambda_mask: lm,
                per_class,
                average,
            });
        }
    }
    let (csv, text) = sweep_tables(&rows);
    out.write(dir.join("sweep.csv"), &csv)?;
    out.write(dir.join("sweep.txt"), &text)?;
    out.summary = text;
    Ok((out, rows))
}

/// Index of the row with the highest average; the first wins ties.
pub fn best_row(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.is_none_or(|b| r.average > rows[b].average) {
            best = Some(i);
        }
    }
    best
}

pub fn sweep_tables(rows: &[SweepRow]) -> (String, String) {
    let k = rows.first().map(|r| r.per_class.len()).unwrap_or(0);
    let best = best_row(rows);
    let mut csv = String::from("lambda_cons,lambda_mask");
    let mut text = format!("{:>8}{:>8}", "λ_cons", "λ_mask");
    for c in 0..k {
        csv.push_str(&format!(",class_{c}"));
        text.push_str(&format!("{:>10}", format!("class {c}")));
    }
    csv.push_str(",average,best\n");
    text.push_str(&format!("{:>10}\n", "Average"));
    for (i, r) in rows.iter().enumerate() {
        let mark = Some(i) == best;
        csv.push_str(&format!("{},{}", r.lambda_cons, r.lambda_mask));
        text.push_str(&format!("{:>8}{:>8}", r.lambda_cons, r.lambda_mask));
        for v in &r.per_class {
            csv.push_str(&format!(",{}", v.map(|x| x.to_string()).unwrap_or_default()));
            text.push_str(&match v {
                Some(x) => format!("{:>10.2}", 100.0 * x),
                None => format!("{:>10}", "-"),
            });
        }
        csv.push_str(&format!(",{},{}\n", r.average, u8::from(mark)));
        let avg = format!("{:.2}{}", 100.0 * r.average, if mark { "*" } else { "" });
        text.push_str(&format!("{avg:>10}\n"));
    }
    text.push_str("* best average\n");
    (csv, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lc: f64, lm: f64, avg: f64) -> SweepRow {
        SweepRow {
            lambda_cons: lc,
            lambda_mask: lm,
            per_class: vec![Some(avg), None],
            average: avg,
        }
    }

    #[test]
    fn best_cell_is_the_max_average() {
        let rows = vec![row(0.5, 0.5, 0.7), row(0.5, 1.0, 0.9), row(1.0, 0.5, 0.9), row(1.0, 1.0, 0.6)];
        assert_eq!(best_row(&rows), Some(1));
        let (csv, text) = sweep_tables(&rows);
        assert_eq!(csv.lines().next().unwrap(), "lambda_cons,lambda_mask,class_0,class_1,average,best");
        assert_eq!(csv.lines().filter(|l| l.ends_with(",1")).count(), 1);
        assert!(text.contains("Average"));
        assert_eq!(text.matches("90.00*").count(), 1);
    }

    #[test]
    fn modes_parse_and_list_names_on_error() {
        assert_eq!("probe".parse::<Mode>().unwrap(), Mode::Probe);
        let err = "nope".parse::<Mode>().unwrap_err().to_string();
        assert!(err.contains("zeroshot") && err.contains("decompose"));
    }

    #[test]
    fn probe_table_uses_percent_headers() {
        let results: Vec<ProbeResult> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&f| ProbeResult {
                fraction: f,
                train_records: 10,
                auroc: Some(0.75),
                skipped_classes: vec![],
            })
            .collect();
        let (csv, text) = probe_tables("m", &results);
        let firsts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(firsts, ["1", "10", "100"]);
        assert!(text.contains("1%") && text.contains("100%"));
    }
}
