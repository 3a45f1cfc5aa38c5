//! End-to-end run: cohort generation, linkage, dataset assembly, corruption
//! estimation and the repeated benchmark, with every artifact written to one
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{save_examples, save_records};
use crate::error::{Error, Result};
use crate::eval::{calibrate_noise, repeated_benchmark, summarize, BenchmarkConfig, BenchmarkOutcome, CalibrationOptions, MethodSummary, MetricResult, RepeatResult};
use crate::linkage::{classifiable_newborns, link_accuracy, match_newborns, LinkAccuracy, DEFAULT_MAX_L1_MINUTES, DEFAULT_MAX_PER_MOTHER};
use crate::noise::{estimate_corruption_matrix, CorruptionMatrix};
use crate::svg;
use crate::synth::{build_datasets, generate_cohort, CohortSummary, SynthConfig};
use crate::train::Method;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_TARGET_LABEL_ACCURACY: f64 = 0.72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkageConfig {
    pub max_per_mother: usize,
    pub max_l1_minutes: i64,
}

impl Default for LinkageConfig {
    fn default() -> Self {
        LinkageConfig {
            max_per_mother: DEFAULT_MAX_PER_MOTHER,
            max_l1_minutes: DEFAULT_MAX_L1_MINUTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub synth: SynthConfig,
    pub linkage: LinkageConfig,
    pub benchmark: BenchmarkConfig,
    /// When set, the newborn misclassification rate is calibrated so that
    /// heuristic links reach this label accuracy before the cohort is drawn.
    pub calibrate_target: Option<f64>,
    pub calibration: CalibrationOptions,
    /// Write mean ROC and PR curves as SVG.
    pub curves: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            synth: SynthConfig::default(),
            linkage: LinkageConfig::default(),
            benchmark: BenchmarkConfig::default(),
            calibrate_target: Some(DEFAULT_TARGET_LABEL_ACCURACY),
            calibration: CalibrationOptions::default(),
            curves: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "config",
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// One seed drives both the cohort and the benchmark splits.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.benchmark.base_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("expected {CONFIG_VERSION}, found {}", self.version),
            ));
        }
        self.synth.validate()?;
        self.benchmark.validate()?;
        if self.linkage.max_per_mother == 0 {
            return Err(Error::config("max_per_mother", "must be at least 1"));
        }
        if self.linkage.max_l1_minutes < 0 {
            return Err(Error::config("max_l1_minutes", "must be non-negative"));
        }
        if let Some(t) = self.calibrate_target {
            if !(t > 0.5 && t <= 1.0) {
                return Err(Error::config("calibrate_target", "must be in (0.5, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub synth: SynthConfig,
    pub cohort: CohortSummary,
    pub link_accuracy: LinkAccuracy,
    pub calibrated_accuracy: Option<f64>,
    pub sizes: (usize, usize, usize),
    pub c_hat: CorruptionMatrix,
    pub benchmark: BenchmarkOutcome,
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Runs every stage and writes its artifacts under `out_dir`, which must
/// already exist. Failures are tagged with the stage that raised them.
pub fn run_pipeline(config: &RunConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    if !out_dir.is_dir() {
        return Err(Error::config("out", format!("{} is not a directory", out_dir.display())));
    }
    let mut synth = config.synth.clone();
    let mut calibrated_accuracy = None;
    if let Some(target) = config.calibrate_target {
        let cal = calibrate_noise(target, &synth, &config.calibration).map_err(Error::at_stage("calibrate"))?;
        synth.clerical_noise = cal.noise;
        calibrated_accuracy = Some(cal.label_accuracy);
    }
    write(out_dir.join("config.json"), &RunConfig { synth: synth.clone(), ..config.clone() }.to_json())?;

    let cohort = generate_cohort(&synth).map_err(Error::at_stage("synth"))?;
    save_records(&cohort.mothers, &cohort.vocab, out_dir.join("mothers.jsonl"))?;
    save_records(&cohort.newborns, &cohort.vocab, out_dir.join("newborns.jsonl"))?;
    cohort.truth.save(out_dir.join("truth.tsv"))?;
    cohort.vocab.save(out_dir.join("vocab.txt"))?;

    let eligible = classifiable_newborns(&cohort.newborns, &cohort.vocab).map_err(Error::at_stage("link"))?;
    let links = match_newborns(
        &cohort.mothers,
        &eligible,
        config.linkage.max_per_mother,
        config.linkage.max_l1_minutes,
    );
    let accuracy = link_accuracy(&links, &cohort.newborns, &cohort.vocab, &cohort.truth).map_err(Error::at_stage("link"))?;
    links.save(out_dir.join("links.tsv"))?;

    let datasets = build_datasets(&cohort.mothers, &cohort.newborns, &links, &cohort.vocab, &synth)
        .map_err(Error::at_stage("build_datasets"))?;
    save_examples(&datasets.d_star, &cohort.vocab, out_dir.join("d_star.jsonl"))?;
    save_examples(&datasets.d_tilde, &cohort.vocab, out_dir.join("d_tilde.jsonl"))?;
    save_examples(&datasets.d_prime, &cohort.vocab, out_dir.join("d_prime.jsonl"))?;

    let c_hat = estimate_corruption_matrix(&datasets.d_prime).map_err(Error::at_stage("estimate-c"))?;
    c_hat.save(out_dir.join("c_hat.csv"))?;

    let bench = repeated_benchmark(&datasets, cohort.vocab.size(), &config.benchmark)
        .map_err(Error::at_stage("benchmark"))?;
    write_benchmark(&bench, out_dir, config.curves)?;

    let outcome = PipelineOutcome {
        synth,
        cohort: cohort.summary(),
        link_accuracy: accuracy,
        calibrated_accuracy,
        sizes: (datasets.d_star.len(), datasets.d_tilde.len(), datasets.d_prime.len()),
        c_hat,
        benchmark: bench,
    };
    write(out_dir.join("summary.txt"), &outcome.summary_text())?;
    Ok(outcome)
}

/// Writes `report.csv`, `raw.csv` and, optionally, mean-curve SVGs.
pub fn write_benchmark(bench: &BenchmarkOutcome, out_dir: &Path, curves: bool) -> Result<()> {
    write(out_dir.join("report.csv"), &bench.report.to_csv())?;
    write(out_dir.join("raw.csv"), &bench.raw_csv())?;
    if curves {
        let label = |v: Vec<(Method, Vec<(f64, f64)>)>| -> Vec<(String, Vec<(f64, f64)>)> {
            v.into_iter().map(|(m, p)| (m.name().to_string(), p)).collect()
        };
        let roc = svg::line_chart("Mean ROC curve", "false positive rate", "true positive rate", &label(bench.mean_curves("roc")));
        let pr = svg::line_chart("Mean precision-recall curve", "recall", "precision", &label(bench.mean_curves("pr")));
        write(out_dir.join("roc.svg"), &roc)?;
        write(out_dir.join("pr.svg"), &pr)?;
    }
    Ok(())
}

impl PipelineOutcome {
    pub fn summary_text(&self) -> String {
        let c = &self.c_hat.entries;
        let mut s = format!(
            "mothers {} (preterm {}), newborns {}\n\
             links {} over {} mothers, pair accuracy {:.4}, label accuracy {:.4}\n\
             clean {} / noisy {} / overlap {}\n\
             c_hat [[{:.4}, {:.4}], [{:.4}, {:.4}]]\n\
             misclassified_newborn_rate {:.6}\n",
            self.cohort.mothers,
            self.cohort.preterm_mothers,
            self.cohort.newborns,
            self.link_accuracy.n_links,
            self.link_accuracy.n_mothers,
            self.link_accuracy.pair_accuracy,
            self.link_accuracy.label_accuracy,
            self.sizes.0,
            self.sizes.1,
            self.sizes.2,
            c[0][0],
            c[0][1],
            c[1][0],
            c[1][1],
            self.synth.clerical_noise.misclassified_newborn_rate,
        );
        if let Some(a) = self.calibrated_accuracy {
            s.push_str(&format!("calibrated label accuracy {a:.4}\n"));
        }
        s.push_str(&format!("benchmark fingerprint {}\n", self.benchmark.report.fingerprint));
        s.push_str(&format_table(&self.benchmark.report.rows));
        s
    }
}

/// Aligned table of mean ± std in percentage points.
pub fn format_table(rows: &[MethodSummary]) -> String {
    let width = rows.iter().map(|r| r.method.display_name().len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>15}  {:>15}\n", "method", "AUC", "PR-AUC");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>15}  {:>15}\n",
            r.method.display_name(),
            format!("{:.2} ± {:.2}", 100.0 * r.auc_mean, 100.0 * r.auc_std),
            format!("{:.2} ± {:.2}", 100.0 * r.prauc_mean, 100.0 * r.prauc_std),
        ));
    }
    out
}

/// Reads a per-repeat raw CSV back into results. Only the test metric
/// columns are required; row numbers in errors count the header as row 1.
pub fn read_raw_csv(path: impl AsRef<Path>) -> Result<Vec<RepeatResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h,
        _ => return Err(Error::EmptyDataset(format!("{} has no header", path.display()))),
    };
    let columns: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        columns
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| err(1, format!("missing column `{name}`")))
    };
    let (i_rep, i_method, i_auc, i_pr) = (col("repeat")?, col("method")?, col("auc")?, col("pr_auc")?);
    let i_pos = col("n_pos").ok();
    let i_neg = col("n_neg").ok();
    let mut out = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(err(row, format!("expected {} fields, found {}", columns.len(), fields.len())));
        }
        let num = |j: usize, what: &str| -> Result<f64> {
            let v: f64 = fields[j]
                .trim()
                .parse()
                .map_err(|_| err(row, format!("bad {what} `{}`", fields[j])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(row, format!("{what} {v} outside [0, 1]")));
            }
            Ok(v)
        };
        let count = |j: Option<usize>| -> Result<usize> {
            j.map_or(Ok(0), |j| {
                fields[j]
                    .trim()
                    .parse()
                    .map_err(|_| err(row, format!("bad count `{}`", fields[j])))
            })
        };
        out.push(RepeatResult {
            repeat: fields[i_rep]
                .trim()
                .parse()
                .map_err(|_| err(row, format!("bad repeat `{}`", fields[i_rep])))?,
            method: fields[i_method].trim().parse().map_err(|e: Error| err(row, e.to_string()))?,
            test: MetricResult {
                auc: num(i_auc, "auc")?,
                pr_auc: num(i_pr, "pr_auc")?,
                n_pos: count(i_pos)?,
                n_neg: count(i_neg)?,
            },
            validation: None,
            c_hat: None,
            resamples: 0,
            roc: Vec::new(),
            pr: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no rows", path.display())));
    }
    Ok(out)
}

/// Per-method summaries of a raw file, methods in first-seen order.
pub fn summarize_raw(raw: &[RepeatResult]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = Vec::new();
    for r in raw {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    summarize(raw, &methods)
}

/// Per-metric dot plots for a summary: `(file stem, svg)`.
pub fn metric_svgs(rows: &[MethodSummary]) -> Vec<(&'static str, String)> {
    let pick = |f: fn(&MethodSummary) -> (f64, f64)| -> Vec<(String, f64, f64)> {
        rows.iter()
            .map(|r| {
                let (m, s) = f(r);
                (r.method.name().to_string(), m, s)
            })
            .collect()
    };
    vec![
        ("auc", svg::dot_plot("AUC by method", "AUC", &pick(|r| (r.auc_mean, r.auc_std)))),
        ("prauc", svg::dot_plot("PR-AUC by method", "PR-AUC", &pick(|r| (r.prauc_mean, r.prauc_std)))),
    ]
}
