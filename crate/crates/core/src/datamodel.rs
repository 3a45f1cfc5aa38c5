//! Domain types shared by every stage: vocabularies, visits, patient records,
//! labels and labeled examples, plus the cohort-definition rules and the
//! line-delimited JSON record format.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: i64 = 1440;

/// Days between the prediction time point and delivery.
pub const DEFAULT_PREDICTION_PERIOD_DAYS: i64 = 90;

/// Subjects with fewer visits than this after truncation are excluded.
pub const DEFAULT_MIN_VISITS: usize = 2;

/// A diagnosis code and its position in a [`CodeVocabulary`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosisCode {
    pub code: String,
    pub index: u32,
}

/// Ordered set of ICD-9-style code strings; a code's index is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeVocabulary {
    codes: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl CodeVocabulary {
    pub fn new(codes: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::config("vocabulary", format!("empty code at index {i}")));
            }
            if lookup.insert(c.clone(), i as u32).is_some() {
                return Err(Error::config("vocabulary", format!("duplicate code `{c}`")));
            }
        }
        Ok(CodeVocabulary { codes, lookup })
    }

    pub fn size(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Result<u32> {
        self.lookup
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownCode(code.to_string()))
    }

    pub fn code(&self, index: u32) -> Result<&str> {
        self.codes
            .get(index as usize)
            .map(String::as_str)
            .ok_or(Error::CodeOutOfRange {
                index,
                size: self.codes.len(),
            })
    }

    pub fn entries(&self) -> impl Iterator<Item = DiagnosisCode> + '_ {
        self.codes.iter().enumerate().map(|(i, c)| DiagnosisCode {
            code: c.clone(),
            index: i as u32,
        })
    }

    /// Code strings for a set of indices, in index order.
    pub fn codes_of<'a>(&'a self, set: &BTreeSet<u32>) -> Result<Vec<&'a str>> {
        set.iter().map(|&i| self.code(i)).collect()
    }

    /// Reads a vocabulary file: one code per line, line number = index.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let codes: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        CodeVocabulary::new(codes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for c in &self.codes {
            out.push_str(c);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// One encounter. Times are minutes since the cohort epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub day: i64,
    pub codes: BTreeSet<u32>,
    pub t_adm: i64,
    pub t_dis: i64,
}

impl Visit {
    pub fn new(codes: BTreeSet<u32>, t_adm: i64, t_dis: i64) -> Self {
        debug_assert!(t_adm <= t_dis);
        Visit {
            day: day_of(t_adm),
            codes,
            t_adm,
            t_dis,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.t_adm > self.t_dis {
            return Err(format!("t_adm {} after t_dis {}", self.t_adm, self.t_dis));
        }
        if self.codes.is_empty() {
            return Err("visit without codes".into());
        }
        if self.day != day_of(self.t_adm) {
            return Err(format!("day {} inconsistent with t_adm {}", self.day, self.t_adm));
        }
        Ok(())
    }
}

pub fn day_of(minutes: i64) -> i64 {
    minutes.div_euclid(MINUTES_PER_DAY)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Mother,
    Newborn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub hospital_id: String,
    pub role: Role,
    pub visits: Vec<Visit>,
    /// Delivery day for mothers, birth encounter day for newborns.
    pub delivery_day: Option<i64>,
}

impl PatientRecord {
    /// The visit on `delivery_day`: the delivery encounter of a mother or the
    /// birth encounter of a newborn.
    pub fn delivery_visit(&self) -> Option<&Visit> {
        let day = self.delivery_day?;
        self.visits.iter().find(|v| v.day == day)
    }

    /// Union of code indices over all visits.
    pub fn all_codes(&self) -> BTreeSet<u32> {
        self.visits.iter().flat_map(|v| v.codes.iter().copied()).collect()
    }
}

/// Delivery outcome. The index order (Preterm first) is used by every matrix
/// and probability vector in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Preterm = 0,
    #[serde(rename = "fullterm")]
    FullTerm = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Preterm, Label::FullTerm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        match i {
            0 => Label::Preterm,
            1 => Label::FullTerm,
            _ => panic!("label index {i} out of range"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Preterm => "preterm",
            Label::FullTerm => "fullterm",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Preterm => Label::FullTerm,
            Label::FullTerm => Label::Preterm,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "preterm" => Ok(Label::Preterm),
            "fullterm" => Ok(Label::FullTerm),
            _ => Err(format!("unknown label `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryClass {
    Preterm,
    FullTerm,
    Ambiguous,
}

impl DeliveryClass {
    pub fn label(self) -> Option<Label> {
        match self {
            DeliveryClass::Preterm => Some(Label::Preterm),
            DeliveryClass::FullTerm => Some(Label::FullTerm),
            DeliveryClass::Ambiguous => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewbornClass {
    Preterm,
    FullTerm,
    Unknown,
}

impl NewbornClass {
    pub fn label(self) -> Option<Label> {
        match self {
            NewbornClass::Preterm => Some(Label::Preterm),
            NewbornClass::FullTerm => Some(Label::FullTerm),
            NewbornClass::Unknown => None,
        }
    }
}

fn is_preterm_delivery_code(c: &str) -> bool {
    c.starts_with("644.2") || c == "640.01"
}

fn is_fullterm_delivery_code(c: &str) -> bool {
    matches!(c, "650" | "649.8" | "652.5") || c.starts_with("645")
}

/// Delivery class of a mother's encounter. Preterm criteria win over
/// full-term criteria; anything matching neither list is ambiguous.
pub fn classify_delivery<'a, I>(codes: I) -> DeliveryClass
where
    I: IntoIterator<Item = &'a str>,
{
    let mut fullterm = false;
    for c in codes {
        if is_preterm_delivery_code(c) {
            return DeliveryClass::Preterm;
        }
        fullterm |= is_fullterm_delivery_code(c);
    }
    if fullterm {
        DeliveryClass::FullTerm
    } else {
        DeliveryClass::Ambiguous
    }
}

fn is_preterm_newborn_code(c: &str) -> bool {
    if c.starts_with("765.0") || c.starts_with("765.1") {
        return true;
    }
    // 765.21 .. 765.28: fifth digit gives completed weeks below 37
    matches!(c.strip_prefix("765.2"), Some(d) if d.len() == 1 && ("1"..="8").contains(&d))
}

/// Prematurity class of a newborn's birth encounter. 765.29 (37+ weeks) is
/// full-term; 765.20 (weeks unspecified) carries no information.
pub fn classify_newborn<'a, I>(codes: I) -> NewbornClass
where
    I: IntoIterator<Item = &'a str>,
{
    let mut fullterm = false;
    for c in codes {
        if is_preterm_newborn_code(c) {
            return NewbornClass::Preterm;
        }
        fullterm |= c == "765.29";
    }
    if fullterm {
        NewbornClass::FullTerm
    } else {
        NewbornClass::Unknown
    }
}

/// Merges visits that fall on the same day: codes are unioned, admission is
/// the earliest and discharge the latest.
pub fn merge_same_day(record: &PatientRecord) -> PatientRecord {
    let mut visits = record.visits.clone();
    visits.sort_by_key(|v| (v.day, v.t_adm));
    let mut merged: Vec<Visit> = Vec::with_capacity(visits.len());
    for v in visits {
        match merged.last_mut() {
            Some(last) if last.day == v.day => {
                last.codes.extend(v.codes);
                last.t_adm = last.t_adm.min(v.t_adm);
                last.t_dis = last.t_dis.max(v.t_dis);
            }
            _ => merged.push(v),
        }
    }
    PatientRecord {
        visits: merged,
        ..record.clone()
    }
}

/// Keeps only the visits on or before `delivery_day - period_days`.
pub fn truncate_at_prediction_point(
    record: &PatientRecord,
    period_days: i64,
) -> Result<PatientRecord> {
    let delivery = record
        .delivery_day
        .ok_or_else(|| Error::MissingDelivery(record.patient_id.clone()))?;
    if period_days < 0 {
        return Err(Error::config("prediction_period_days", "must be non-negative"));
    }
    let cutoff = delivery - period_days;
    Ok(PatientRecord {
        visits: record
            .visits
            .iter()
            .filter(|v| v.day <= cutoff)
            .cloned()
            .collect(),
        ..record.clone()
    })
}

pub fn apply_min_visit_filter(examples: Vec<LabeledExample>, min_visits: usize) -> Vec<LabeledExample> {
    examples
        .into_iter()
        .filter(|e| e.record.visits.len() >= min_visits)
        .collect()
}

/// A (truncated) mother record with a clean label, a noisy label, or both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub record: PatientRecord,
    pub clean_label: Option<Label>,
    pub noisy_label: Option<Label>,
}

impl LabeledExample {
    pub fn is_clean(&self) -> bool {
        self.clean_label.is_some()
    }

    pub fn is_noisy(&self) -> bool {
        self.noisy_label.is_some()
    }

    pub fn is_overlap(&self) -> bool {
        self.clean_label.is_some() && self.noisy_label.is_some()
    }

    /// Visit code sets in time order, the network's input.
    pub fn sequence(&self) -> Vec<Vec<u32>> {
        self.record
            .visits
            .iter()
            .map(|v| v.codes.iter().copied().collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitLine {
    day: i64,
    codes: Vec<String>,
    t_adm: i64,
    t_dis: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    patient_id: String,
    hospital_id: String,
    role: Role,
    delivery_day: Option<i64>,
    visits: Vec<VisitLine>,
    clean_label: Option<Label>,
    noisy_label: Option<Label>,
}

fn to_line(ex: &LabeledExample, vocab: &CodeVocabulary) -> Result<RecordLine> {
    let r = &ex.record;
    let visits = r
        .visits
        .iter()
        .map(|v| {
            Ok(VisitLine {
                day: v.day,
                codes: vocab.codes_of(&v.codes)?.into_iter().map(String::from).collect(),
                t_adm: v.t_adm,
                t_dis: v.t_dis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordLine {
        patient_id: r.patient_id.clone(),
        hospital_id: r.hospital_id.clone(),
        role: r.role,
        delivery_day: r.delivery_day,
        visits,
        clean_label: ex.clean_label,
        noisy_label: ex.noisy_label,
    })
}

fn from_line(line: RecordLine, vocab: &CodeVocabulary) -> std::result::Result<LabeledExample, String> {
    let mut visits = Vec::with_capacity(line.visits.len());
    for v in line.visits {
        let codes = v
            .codes
            .iter()
            .map(|c| vocab.index_of(c).map_err(|e| e.to_string()))
            .collect::<std::result::Result<BTreeSet<u32>, String>>()?;
        let visit = Visit {
            day: v.day,
            codes,
            t_adm: v.t_adm,
            t_dis: v.t_dis,
        };
        visit.check()?;
        visits.push(visit);
    }
    if line.role == Role::Newborn && visits.len() != 1 {
        return Err(format!("newborn {} must have exactly one visit", line.patient_id));
    }
    Ok(LabeledExample {
        record: PatientRecord {
            patient_id: line.patient_id,
            hospital_id: line.hospital_id,
            role: line.role,
            visits,
            delivery_day: line.delivery_day,
        },
        clean_label: line.clean_label,
        noisy_label: line.noisy_label,
    })
}

/// Writes labeled examples, one JSON object per line.
pub fn save_examples(
    examples: &[LabeledExample],
    vocab: &CodeVocabulary,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = to_line(ex, vocab)?;
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_examples(path: impl AsRef<Path>, vocab: &CodeVocabulary) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(from_line(parsed, vocab).map_err(parse_err)?);
    }
    Ok(out)
}

/// Writes records with null labels.
pub fn save_records(records: &[PatientRecord], vocab: &CodeVocabulary, path: impl AsRef<Path>) -> Result<()> {
    let examples: Vec<LabeledExample> = records
        .iter()
        .map(|r| LabeledExample {
            record: r.clone(),
            clean_label: None,
            noisy_label: None,
        })
        .collect();
    save_examples(&examples, vocab, path)
}

pub fn load_records(path: impl AsRef<Path>, vocab: &CodeVocabulary) -> Result<Vec<PatientRecord>> {
    Ok(load_examples(path, vocab)?.into_iter().map(|e| e.record).collect())
}
