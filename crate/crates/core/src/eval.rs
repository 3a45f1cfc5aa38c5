//! Ranking metrics, repeated-split benchmarking and calibration of the
//! clerical noise model to a target link-label accuracy.
//!
//! Preterm is the positive class throughout; the score of an example is the
//! model's preterm probability.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Label, LabeledExample};
use crate::error::{Error, Result};
use crate::linkage::{classifiable_newborns, link_accuracy, match_newborns, DEFAULT_MAX_L1_MINUTES, DEFAULT_MAX_PER_MOTHER};
use crate::net::{init_params, predict, Dims};
use crate::noise::{estimate_corruption_matrix, CorruptionMatrix};
use crate::synth::{generate_cohort, ClericalNoiseModel, Datasets, SynthConfig};
use crate::train::{train, Method, TrainConfig};
use crate::{par, rng};

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, then grouped into runs of equal score.
/// Each group is `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[Label]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = f64::NAN;
    for i in idx {
        if groups.is_empty() || scores[i] != last {
            groups.push((0, 0));
            last = scores[i];
        }
        let g = groups.last_mut().unwrap();
        match labels[i] {
            Label::Preterm => g.0 += 1,
            Label::FullTerm => g.1 += 1,
        }
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic: concordant
/// positive/negative pairs plus half the tied pairs, over all pairs.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let n_pos: u64 = groups.iter().map(|g| g.0).sum();
    let n_neg: u64 = groups.iter().map(|g| g.1).sum();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    // walk from the lowest score upwards, counting negatives strictly below
    let mut neg_below = 0u64;
    let mut concordant = 0u64;
    let mut tied = 0u64;
    for &(p, n) in groups.iter().rev() {
        concordant += p * neg_below;
        tied += p * n;
        neg_below += n;
    }
    Ok((2 * concordant + tied) as f64 / (2 * n_pos * n_neg) as f64)
}

/// Average precision: precision at each distinct score threshold weighted by
/// the recall gained there. Tied scores form a single threshold.
pub fn pr_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let n_pos: u64 = groups.iter().map(|g| g.0).sum();
    if n_pos == 0 {
        return Err(Error::Metric("PR-AUC needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in groups {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (p as f64 / n_pos as f64);
        }
    }
    Ok(ap)
}

/// ROC points `(fpr, tpr)` from (0,0) to (1,1), one per distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Vec<(f64, f64)> {
    let groups = tie_groups(scores, labels);
    let n_pos = groups.iter().map(|g| g.0).sum::<u64>().max(1) as f64;
    let n_neg = groups.iter().map(|g| g.1).sum::<u64>().max(1) as f64;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in groups {
        tp += p;
        fp += n;
        pts.push((fp as f64 / n_neg, tp as f64 / n_pos));
    }
    pts
}

/// Precision-recall points `(recall, precision)`, one per distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[Label]) -> Vec<(f64, f64)> {
    let groups = tie_groups(scores, labels);
    let n_pos = groups.iter().map(|g| g.0).sum::<u64>().max(1) as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut pts = Vec::with_capacity(groups.len());
    for (p, n) in groups {
        tp += p;
        fp += n;
        pts.push((tp as f64 / n_pos, tp as f64 / (tp + fp) as f64));
    }
    pts
}

/// Resamples a monotone curve on an even grid of `n` points over [0, 1]:
/// the largest y reached at or beyond each x. ROC curves are read as step
/// functions and PR curves as interpolated precision.
pub fn resample_curve(points: &[(f64, f64)], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = i as f64 / (n - 1) as f64;
            points
                .iter()
                .filter(|p| p.0 >= x - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auc: f64,
    pub pr_auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn evaluate(scores: &[f64], labels: &[Label]) -> Result<MetricResult> {
    Ok(MetricResult {
        auc: auc(scores, labels)?,
        pr_auc: pr_auc(scores, labels)?,
        n_pos: labels.iter().filter(|&&l| l == Label::Preterm).count(),
        n_neg: labels.iter().filter(|&&l| l == Label::FullTerm).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub repeats: usize,
    /// Train, validation and test fractions of the clean set.
    pub split_fractions: (f64, f64, f64),
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            repeats: 20,
            split_fractions: (0.7, 0.15, 0.15),
            base_seed: 0,
            methods: Method::ALL.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        let (a, b, c) = self.split_fractions;
        if [a, b, c].iter().any(|&x| !x.is_finite() || x <= 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_fractions", "must be positive and sum to 1"));
        }
        self.train.validate()
    }
}

/// One method on one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub repeat: usize,
    pub method: Method,
    pub test: MetricResult,
    pub validation: Option<MetricResult>,
    /// Corruption matrix estimated from the repeat's training-side overlap.
    pub c_hat: Option<CorruptionMatrix>,
    pub resamples: usize,
    pub roc: Vec<f64>,
    pub pr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub prauc_mean: f64,
    pub prauc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<MethodSummary>,
    pub repeats: usize,
    pub fingerprint: String,
}

impl BenchmarkReport {
    pub fn row(&self, m: Method) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,auc_mean,auc_std,prauc_mean,prauc_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.method, r.auc_mean, r.auc_std, r.prauc_mean, r.prauc_std
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: BenchmarkReport,
    pub raw: Vec<RepeatResult>,
}

pub const RAW_HEADER: &str = "repeat,method,auc,pr_auc,val_auc,val_pr_auc,n_pos,n_neg,c_pre_to_pre,c_pre_to_full,c_full_to_pre,c_full_to_full,resamples";

impl BenchmarkOutcome {
    pub fn raw_csv(&self) -> String {
        let mut out = String::from(RAW_HEADER);
        out.push('\n');
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.raw {
            let c = r.c_hat.map(|c| c.entries);
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{},{},{},{},{},{},{}\n",
                r.repeat,
                r.method,
                r.test.auc,
                r.test.pr_auc,
                opt(r.validation.map(|v| v.auc)),
                opt(r.validation.map(|v| v.pr_auc)),
                r.test.n_pos,
                r.test.n_neg,
                opt(c.map(|c| c[0][0])),
                opt(c.map(|c| c[0][1])),
                opt(c.map(|c| c[1][0])),
                opt(c.map(|c| c[1][1])),
                r.resamples,
            ));
        }
        out
    }

    /// Mean ROC (`"roc"`) or PR (`"pr"`) curve per method over repeats, on an
    /// even grid.
    pub fn mean_curves(&self, which: &str) -> Vec<(Method, Vec<(f64, f64)>)> {
        let methods: Vec<Method> = self.report.rows.iter().map(|r| r.method).collect();
        methods
            .into_iter()
            .map(|m| {
                let curves: Vec<&Vec<f64>> = self
                    .raw
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| if which == "roc" { &r.roc } else { &r.pr })
                    .collect();
                let n = curves.first().map_or(0, |c| c.len());
                let pts = (0..n)
                    .map(|i| {
                        let x = i as f64 / (n - 1).max(1) as f64;
                        (x, curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
                    })
                    .collect();
                (m, pts)
            })
            .collect()
    }
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(raw: &[RepeatResult], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&m| {
            let aucs: Vec<f64> = raw.iter().filter(|r| r.method == m).map(|r| r.test.auc).collect();
            let prs: Vec<f64> = raw.iter().filter(|r| r.method == m).map(|r| r.test.pr_auc).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            let (prauc_mean, prauc_std) = mean_std(&prs);
            MethodSummary {
                method: m,
                auc_mean,
                auc_std,
                prauc_mean,
                prauc_std,
            }
        })
        .collect()
}

const CURVE_POINTS: usize = 101;
const MAX_RESAMPLES: usize = 100;

struct RepeatContext {
    train: Vec<LabeledExample>,
    validation: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    noisy: Vec<LabeledExample>,
    c_hat: Result<CorruptionMatrix>,
    init_seed: u64,
    train_seed: u64,
    resamples: usize,
}

fn has_both_classes(examples: &[LabeledExample]) -> bool {
    let pos = examples.iter().filter(|e| e.clean_label == Some(Label::Preterm)).count();
    pos > 0 && pos < examples.len()
}

/// Train, validation and test partitions plus the number of test redraws.
pub type Split = (Vec<LabeledExample>, Vec<LabeledExample>, Vec<LabeledExample>, usize);

/// Seeded split of the clean set. The test partition is redrawn with derived
/// seeds until it holds both classes.
pub fn split_clean(d_star: &[LabeledExample], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    use rand::seq::SliceRandom;
    let n = d_star.len();
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = (fractions.1 * n as f64).round() as usize;
    if n_train == 0 || n_train + n_val >= n {
        return Err(Error::EmptyDataset(format!("clean set of {n} examples is too small to split")));
    }
    for attempt in 0..MAX_RESAMPLES {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag("split"), attempt as u64]));
        let pick = |r: std::ops::Range<usize>| -> Vec<LabeledExample> { order[r].iter().map(|&i| d_star[i].clone()).collect() };
        let test = pick(n_train + n_val..n);
        if has_both_classes(&test) {
            return Ok((pick(0..n_train), pick(n_train..n_train + n_val), test, attempt));
        }
    }
    Err(Error::EmptyDataset("no split with both classes in the test set".into()))
}

fn prepare_repeat(d: &Datasets, config: &BenchmarkConfig, repeat: usize) -> Result<RepeatContext> {
    let seed = rng::derive(config.base_seed, &[rng::tag("repeat"), repeat as u64]);
    let (train, validation, test, resamples) = split_clean(&d.d_star, config.split_fractions, seed)?;
    let held_out: HashSet<&str> = validation
        .iter()
        .chain(&test)
        .map(|e| e.record.patient_id.as_str())
        .collect();
    let noisy: Vec<LabeledExample> = d
        .d_tilde
        .iter()
        .filter(|e| !held_out.contains(e.record.patient_id.as_str()))
        .cloned()
        .collect();
    let overlap: Vec<LabeledExample> = train.iter().filter(|e| e.is_overlap()).cloned().collect();
    Ok(RepeatContext {
        c_hat: estimate_corruption_matrix(&overlap),
        train,
        validation,
        test,
        noisy,
        init_seed: rng::derive(seed, &[rng::tag("init")]),
        train_seed: rng::derive(seed, &[rng::tag("train")]),
        resamples,
    })
}

fn scores_and_labels(examples: &[LabeledExample], params: &crate::net::ModelParams) -> Result<(Vec<f64>, Vec<Label>)> {
    let probs = predict(examples, params)?;
    let labels = examples
        .iter()
        .map(|e| e.clean_label.expect("held-out examples carry clean labels"))
        .collect();
    Ok((probs.iter().map(|p| p[0]).collect(), labels))
}

fn run_job(ctx: &RepeatContext, repeat: usize, method: Method, config: &BenchmarkConfig, vocab_size: usize) -> Result<RepeatResult> {
    let c_hat = match (&ctx.c_hat, method.needs_correction()) {
        (Ok(c), _) => Some(*c),
        (Err(e), true) => return Err(Error::EmptyDataset(format!("repeat {repeat}: {e}"))),
        (Err(_), false) => None,
    };
    let tc = TrainConfig {
        method,
        seed: ctx.train_seed,
        ..config.train.clone()
    };
    let dims = Dims::new(vocab_size, tc.d_emb, tc.d_hidden)?;
    let params = init_params(dims, ctx.init_seed);
    let outcome = train(params, &ctx.train, &ctx.noisy, c_hat.as_ref(), &tc)?;
    let (scores, labels) = scores_and_labels(&ctx.test, &outcome.params)?;
    let test = evaluate(&scores, &labels)?;
    let validation = if has_both_classes(&ctx.validation) {
        let (vs, vl) = scores_and_labels(&ctx.validation, &outcome.params)?;
        Some(evaluate(&vs, &vl)?)
    } else {
        None
    };
    Ok(RepeatResult {
        repeat,
        method,
        test,
        validation,
        c_hat,
        resamples: ctx.resamples,
        roc: resample_curve(&roc_curve(&scores, &labels), CURVE_POINTS),
        pr: resample_curve(&pr_curve(&scores, &labels), CURVE_POINTS),
    })
}

/// Trains and scores every method on `repeats` seeded splits of the clean
/// set. Noisy examples are always in the training pool except those whose
/// clean side was held out. Repeats and methods run in parallel; the result
/// depends only on the inputs.
pub fn repeated_benchmark(datasets: &Datasets, vocab_size: usize, config: &BenchmarkConfig) -> Result<BenchmarkOutcome> {
    config.validate()?;
    let contexts = par::map_range(config.repeats, |r| prepare_repeat(datasets, config, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Method)> = (0..config.repeats)
        .flat_map(|r| config.methods.iter().map(move |&m| (r, m)))
        .collect();
    let raw = par::map(&jobs, |&(r, m)| run_job(&contexts[r], r, m, config, vocab_size))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let fingerprint = format!(
        "{:016x}",
        rng::tag(&format!(
            "{}|{}|{}|{}|{}",
            serde_json::to_string(config).expect("config serializes"),
            datasets.d_star.len(),
            datasets.d_tilde.len(),
            datasets.d_prime.len(),
            vocab_size
        ))
    );
    Ok(BenchmarkOutcome {
        report: BenchmarkReport {
            rows: summarize(&raw, &config.methods),
            repeats: config.repeats,
            fingerprint,
        },
        raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub seeds: usize,
    /// Stop once the mean label accuracy is this close to the target.
    pub tolerance: f64,
    pub max_steps: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            seeds: 5,
            tolerance: 0.005,
            max_steps: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub noise: ClericalNoiseModel,
    pub label_accuracy: f64,
    /// `(misclassified_newborn_rate, mean label accuracy)` per evaluation.
    pub trace: Vec<(f64, f64)>,
}

/// Mean heuristic-link label accuracy over `seeds` cohorts derived from `config.seed`.
pub fn mean_label_accuracy(config: &SynthConfig, seeds: &[u64]) -> Result<f64> {
    let accs = par::map(seeds, |&s| -> Result<f64> {
        let cfg = SynthConfig {
            seed: s,
            ..config.clone()
        };
        let cohort = generate_cohort(&cfg)?;
        let eligible = classifiable_newborns(&cohort.newborns, &cohort.vocab)?;
        let links = match_newborns(&cohort.mothers, &eligible, DEFAULT_MAX_PER_MOTHER, DEFAULT_MAX_L1_MINUTES);
        Ok(link_accuracy(&links, &cohort.newborns, &cohort.vocab, &cohort.truth)?.label_accuracy)
    });
    let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn calibration_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive(base, &[rng::tag("calibrate"), i])).collect()
}

/// Bisection on the newborn misclassification rate, other noise channels
/// fixed, until the mean label accuracy of heuristic links hits the target.
pub fn calibrate_noise(target: f64, config: &SynthConfig, opts: &CalibrationOptions) -> Result<CalibrationOutcome> {
    if !(target > 0.5 && target <= 1.0) {
        return Err(Error::config("target_label_accuracy", "must be in (0.5, 1]"));
    }
    config.validate()?;
    let seeds = calibration_seeds(config.seed, opts.seeds.max(1));
    let mut trace = Vec::new();
    let mut eval_at = |rate: f64| -> Result<f64> {
        let mut cfg = config.clone();
        cfg.clerical_noise.misclassified_newborn_rate = rate;
        let acc = mean_label_accuracy(&cfg, &seeds)?;
        trace.push((rate, acc));
        Ok(acc)
    };
    let with_rate = |rate: f64| ClericalNoiseModel {
        misclassified_newborn_rate: rate,
        ..config.clerical_noise
    };

    let (mut lo, mut hi) = (0.0, 0.5);
    let acc_lo = eval_at(lo)?;
    if (acc_lo - target).abs() <= opts.tolerance {
        return Ok(CalibrationOutcome {
            noise: with_rate(lo),
            label_accuracy: acc_lo,
            trace,
        });
    }
    if acc_lo < target {
        return Err(Error::Calibration(format!(
            "target {target} unreachable: accuracy is {acc_lo:.4} even without misclassification"
        )));
    }
    let acc_hi = eval_at(hi)?;
    if acc_hi > target {
        return Err(Error::Calibration(format!(
            "target {target} unreachable: accuracy is still {acc_hi:.4} at rate {hi}"
        )));
    }
    for _ in 0..opts.max_steps {
        let mid = 0.5 * (lo + hi);
        let acc = eval_at(mid)?;
        if (acc - target).abs() <= opts.tolerance {
            return Ok(CalibrationOutcome {
                noise: with_rate(mid),
                label_accuracy: acc,
                trace,
            });
        }
        if acc > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "no convergence in {} steps; bracket [{lo:.6}, {hi:.6}]",
        opts.max_steps
    )))
}
