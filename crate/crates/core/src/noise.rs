//! Class-conditional label noise: estimating the 2x2 corruption matrix from
//! examples carrying both labels, sampling noise through it, and the
//! loss-correction product.
//!
//! Orientation: `entries[i][j] = p(noisy = j | clean = i)`, rows indexed by the
//! clean label. The noisy-label posterior of a clean posterior `p` is therefore
//! the transpose product `q = Cᵀ p`.

use std::path::Path;

use rand::Rng as _;

use crate::datamodel::{Label, LabeledExample};
use crate::error::{Error, Result};
use crate::rng;

/// Floor added to probabilities before taking a log.
pub const LOG_EPS: f64 = 1e-7;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionMatrix {
    pub entries: [[f64; 2]; 2],
    /// Support counts `counts[i][j] = #{clean = i, noisy = j}`; zero when the
    /// matrix was given rather than estimated.
    pub counts: [[u64; 2]; 2],
}

impl CorruptionMatrix {
    pub fn identity() -> Self {
        CorruptionMatrix {
            entries: [[1.0, 0.0], [0.0, 1.0]],
            counts: [[0; 2]; 2],
        }
    }

    pub fn new(entries: [[f64; 2]; 2]) -> Result<Self> {
        for (i, row) in entries.iter().enumerate() {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::config("corruption_matrix", format!("row {i} has entries outside [0, 1]")));
            }
            if (row[0] + row[1] - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::config("corruption_matrix", format!("row {i} does not sum to 1")));
            }
        }
        Ok(CorruptionMatrix {
            entries,
            counts: [[0; 2]; 2],
        })
    }

    pub fn from_counts(counts: [[u64; 2]; 2]) -> Result<Self> {
        let mut entries = [[0.0; 2]; 2];
        for i in 0..2 {
            let n = counts[i][0] + counts[i][1];
            if n == 0 {
                return Err(Error::EmptyClass(Label::from_index(i).as_str()));
            }
            for j in 0..2 {
                entries[i][j] = counts[i][j] as f64 / n as f64;
            }
        }
        Ok(CorruptionMatrix { entries, counts })
    }

    pub fn get(&self, clean: Label, noisy: Label) -> f64 {
        self.entries[clean.index()][noisy.index()]
    }

    /// Each diagonal entry exceeds the off-diagonal entry of its row.
    pub fn is_diagonally_dominant(&self) -> bool {
        self.entries[0][0] > self.entries[0][1] && self.entries[1][1] > self.entries[1][0]
    }

    pub fn to_csv(&self) -> String {
        let e = &self.entries;
        let n = &self.counts;
        format!(
            "pre_to_pre,pre_to_full,full_to_pre,full_to_full,n_pre_to_pre,n_pre_to_full,n_full_to_pre,n_full_to_full\n\
             {:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            e[0][0], e[0][1], e[1][0], e[1][1], n[0][0], n[0][1], n[1][0], n[1][1]
        )
    }

    /// Parses [`to_csv`](Self::to_csv) output. When support counts are present
    /// the entries are recomputed from them exactly; otherwise the printed
    /// entries are renormalized per row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::config("corruption_matrix", m.to_string());
        let row = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .nth(1)
            .ok_or_else(|| bad("missing value row"))?;
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 4 && fields.len() != 8 {
            return Err(bad("expected 4 entries optionally followed by 4 counts"));
        }
        if fields.len() == 8 {
            let c: Vec<u64> = fields[4..]
                .iter()
                .map(|f| f.parse::<u64>().map_err(|_| bad("invalid count")))
                .collect::<Result<_>>()?;
            if c.iter().any(|&x| x > 0) {
                return Self::from_counts([[c[0], c[1]], [c[2], c[3]]]);
            }
        }
        let v: Vec<f64> = fields[..4]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("invalid entry")))
            .collect::<Result<_>>()?;
        let mut entries = [[v[0], v[1]], [v[2], v[3]]];
        for r in entries.iter_mut() {
            let s = r[0] + r[1];
            if s <= 0.0 {
                return Err(bad("row sums to zero"));
            }
            r[0] /= s;
            r[1] = 1.0 - r[0];
        }
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Row-normalized confusion counts between clean (rows) and noisy (columns)
/// labels over examples that carry both.
pub fn estimate_corruption_matrix(d_prime: &[LabeledExample]) -> Result<CorruptionMatrix> {
    let mut counts = [[0u64; 2]; 2];
    for ex in d_prime {
        match (ex.clean_label, ex.noisy_label) {
            (Some(c), Some(n)) => counts[c.index()][n.index()] += 1,
            _ => return Err(Error::MissingLabel(ex.record.patient_id.clone())),
        }
    }
    CorruptionMatrix::from_counts(counts)
}

/// Draws a noisy label for each input independently through `c`.
pub fn apply_class_conditional_noise(labels: &[Label], c: &CorruptionMatrix, seed: u64) -> Vec<Label> {
    let mut rng = rng::stream(seed, &[rng::tag("class-conditional-noise")]);
    labels
        .iter()
        .map(|&l| {
            let u: f64 = rng.random();
            if u < c.entries[l.index()][0] {
                Label::Preterm
            } else {
                Label::FullTerm
            }
        })
        .collect()
}

/// Noisy-label posterior `q_j = Σ_i p_i C_ij`.
pub fn corrected_probabilities(p: [f64; 2], c: &CorruptionMatrix) -> [f64; 2] {
    let e = &c.entries;
    [p[0] * e[0][0] + p[1] * e[1][0], p[0] * e[0][1] + p[1] * e[1][1]]
}
