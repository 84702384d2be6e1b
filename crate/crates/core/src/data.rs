//! Dataset schema, CSV ingestion, normalization between the generator's
//! standardized space and the estimator's absolute space, seeded train/test
//! splitting, and a bundled synthetic corpus generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::special::{truncnorm_mean, truncnorm_sample, truncnorm_var};
use crate::rng::SeedRng;

/// Ordered route-characteristic attributes with the per-attribute mean and
/// standard deviation used for z-score normalization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributeSchema {
    names: Vec<String>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

/// `(name, mean, std)` of the nine canonical route attributes.
pub const ROUTE_ATTRIBUTES: [(&str, f64, f64); 9] = [
    ("Route average intersection time", 0.18, 0.07),
    ("Route length detour", 1.11, 0.21),
    ("Route time detour", 1.08, 0.17),
    ("Route links per km", 4.42, 2.21),
    ("Route city node percentage", 0.10, 0.19),
    ("Route percentage delay", 1.85, 0.61),
    ("Route highway percentage", 0.71, 0.29),
    ("Route left turn percentage", 0.11, 0.09),
    ("Route operating cost", 1.06, 0.39),
];

impl AttributeSchema {
    pub fn new(names: Vec<String>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if names.len() != means.len() || names.len() != stds.len() || names.is_empty() {
            return Err(Error::Schema("schema vectors must have equal nonzero length".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate attribute name {n:?}")));
            }
        }
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Schema("every attribute std must be > 0".into()));
        }
        Ok(AttributeSchema { names, means, stds })
    }

    /// The canonical nine-attribute schema with its published statistics.
    pub fn canonical() -> Self {
        let names = ROUTE_ATTRIBUTES.iter().map(|(n, _, _)| n.to_string()).collect();
        let means = ROUTE_ATTRIBUTES.iter().map(|(_, m, _)| *m).collect();
        let stds = ROUTE_ATTRIBUTES.iter().map(|(_, _, s)| *s).collect();
        AttributeSchema::new(names, means, stds).unwrap()
    }

    /// Canonical names with normalization constants re-estimated from the
    /// training split of `corpus`.
    pub fn from_train_split(corpus: &Corpus, names: Vec<String>) -> Result<Self> {
        let train = corpus.train_rows();
        if train.is_empty() {
            return Err(Error::Schema("empty training split".into()));
        }
        let dim = train[0].len();
        if names.len() != dim {
            return Err(Error::Schema("name count does not match row width".into()));
        }
        let n = train.len() as f64;
        let mut means = vec![0.0; dim];
        for row in &train {
            for (m, v) in means.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m /= n;
        }
        let mut vars = vec![0.0; dim];
        for row in &train {
            for ((s, v), m) in vars.iter_mut().zip(row.iter()).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let stds: Vec<f64> = vars.iter().map(|v| (v / n).sqrt()).collect();
        if stds.iter().any(|s| *s <= 0.0) {
            return Err(Error::Schema("an attribute is constant on the training split".into()));
        }
        AttributeSchema::new(names, means, stds)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Image of absolute zero in normalized space, one per attribute. The
    /// non-negative absolute orthant maps exactly onto `[lower, inf)`.
    pub fn normalized_lower_bounds(&self) -> Vec<f64> {
        self.means.iter().zip(&self.stds).map(|(m, s)| -m / s).collect()
    }

    /// z-score of one absolute-space row.
    pub fn normalize_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.len() {
            return Err(Error::shape(format!(
                "normalize: row width {} vs schema {}",
                row.len(),
                self.len()
            )));
        }
        Ok(row
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// Inverse z-score, clamped at absolute zero from below.
    pub fn denormalize_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.len() {
            return Err(Error::shape(format!(
                "denormalize: row width {} vs schema {}",
                row.len(),
                self.len()
            )));
        }
        Ok(row
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (m + s * v).max(0.0))
            .collect())
    }
}

/// Rows of chosen-alternative attribute vectors in absolute space, with an
/// optional train/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    rows: Vec<Vec<f64>>,
    is_train: Option<Vec<bool>>,
}

impl Corpus {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Corpus { rows, is_train: None }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn split_assignment(&self) -> Option<&[bool]> {
        self.is_train.as_deref()
    }

    /// Deterministic shuffle-then-cut split: the first
    /// `floor(len * train_fraction)` shuffled rows become the training split.
    pub fn split(&mut self, train_fraction: f64, seed: u64) -> Result<()> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must be in (0, 1), got {train_fraction}"
            )));
        }
        let n = self.rows.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::child_rng(seed, 0x5911_7);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let train_n = (n as f64 * train_fraction).floor() as usize;
        let mut is_train = vec![false; n];
        for &idx in order.iter().take(train_n) {
            is_train[idx] = true;
        }
        self.is_train = Some(is_train);
        Ok(())
    }

    pub fn train_rows(&self) -> Vec<Vec<f64>> {
        match &self.is_train {
            Some(mask) => self
                .rows
                .iter()
                .zip(mask)
                .filter(|(_, t)| **t)
                .map(|(r, _)| r.clone())
                .collect(),
            None => self.rows.clone(),
        }
    }

    pub fn test_rows(&self) -> Vec<Vec<f64>> {
        match &self.is_train {
            Some(mask) => self
                .rows
                .iter()
                .zip(mask)
                .filter(|(_, t)| !**t)
                .map(|(r, _)| r.clone())
                .collect(),
            None => Vec::new(),
        }
    }
}

// ── CSV ──────────────────────────────────────────────────────────────

/// Serializes `v` with 17 significant digits, enough to round-trip `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a corpus as UTF-8 CSV with a header row.
pub fn write_csv(path: &Path, schema: &AttributeSchema, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    out.push_str(&schema.names().join(","));
    out.push('\n');
    for row in corpus.rows() {
        if row.len() != schema.len() {
            return Err(Error::shape("corpus row width differs from schema"));
        }
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{}", format_value(*v));
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a corpus, matching header names against the schema order-insensitively
/// and validating that every value is numeric and non-negative.
pub fn load_csv(path: &Path, schema: &AttributeSchema) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty csv file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut position = vec![usize::MAX; schema.len()];
    for (col_idx, col) in columns.iter().enumerate() {
        match schema.index_of(col) {
            Some(attr_idx) => {
                if position[attr_idx] != usize::MAX {
                    return Err(Error::Schema(format!("duplicate column {col:?}")));
                }
                position[attr_idx] = col_idx;
            }
            None => return Err(Error::Schema(format!("unknown column {col:?}"))),
        }
    }
    for (attr_idx, pos) in position.iter().enumerate() {
        if *pos == usize::MAX {
            return Err(Error::Schema(format!(
                "missing column {:?}",
                schema.names()[attr_idx]
            )));
        }
    }
    let mut rows = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Data(format!(
                "row {}: expected {} cells, found {}",
                line_no + 2,
                columns.len(),
                cells.len()
            )));
        }
        let mut row = vec![0.0; schema.len()];
        for (attr_idx, &col_idx) in position.iter().enumerate() {
            let cell = cells[col_idx];
            let value: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {}, column {:?}: cannot parse {cell:?} as a number",
                    line_no + 2,
                    schema.names()[attr_idx]
                ))
            })?;
            if value < 0.0 {
                return Err(Error::Data(format!(
                    "row {}, column {:?}: negative value {value}",
                    line_no + 2,
                    schema.names()[attr_idx]
                )));
            }
            row[attr_idx] = value;
        }
        rows.push(row);
    }
    Ok(Corpus::new(rows))
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// Mixture shape shared by every attribute: three clusters with fixed
/// weights, cluster offsets in units of the per-attribute scale, and a
/// within-cluster standard deviation tied to the target spread.
const CLUSTER_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
const CLUSTER_OFFSETS: [f64; 3] = [-1.2, 0.3, 2.2];
const WITHIN_STD_FRACTION: f64 = 0.35;

/// Location/scale of one attribute's calibrated mixture. Component `k` is
/// `Normal(shift + scale * CLUSTER_OFFSETS[k], within^2)` truncated to
/// `[0, inf)`.
#[derive(Debug, Clone, Copy)]
pub struct CalibratedAttribute {
    pub shift: f64,
    pub scale: f64,
    pub within: f64,
}

impl CalibratedAttribute {
    fn component_mean(&self, k: usize) -> f64 {
        self.shift + self.scale * CLUSTER_OFFSETS[k]
    }

    /// Closed-form post-truncation mixture mean and standard deviation.
    fn moments(&self) -> (f64, f64) {
        let mut mean = 0.0;
        let mut second = 0.0;
        for k in 0..3 {
            let m = self.component_mean(k);
            let e = truncnorm_mean(m, self.within, 0.0);
            let v = truncnorm_var(m, self.within, 0.0);
            mean += CLUSTER_WEIGHTS[k] * e;
            second += CLUSTER_WEIGHTS[k] * (v + e * e);
        }
        (mean, (second - mean * mean).max(0.0).sqrt())
    }
}

/// Solves for the shift/scale that make the truncated mixture hit the target
/// mean and standard deviation, by damped Newton on the closed-form moments.
pub fn calibrate_attribute(target_mean: f64, target_std: f64) -> Result<CalibratedAttribute> {
    let within = WITHIN_STD_FRACTION * target_std;
    let mut t = target_mean;
    let mut c = 0.7 * target_std;
    let residual = |t: f64, c: f64| -> (f64, f64) {
        let cal = CalibratedAttribute { shift: t, scale: c, within };
        let (m, s) = cal.moments();
        (m - target_mean, s - target_std)
    };
    let norm = |r: (f64, f64)| (r.0 / target_std).hypot(r.1 / target_std);
    let mut r = residual(t, c);
    for _ in 0..200 {
        if norm(r) < 1e-10 {
            break;
        }
        // finite-difference Jacobian
        let h = 1e-6 * target_std.max(1e-6);
        let rt = residual(t + h, c);
        let rc = residual(t, c + h);
        let j = [
            [(rt.0 - r.0) / h, (rc.0 - r.0) / h],
            [(rt.1 - r.1) / h, (rc.1 - r.1) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return Err(Error::Numerical(
                "singular Jacobian while calibrating the synthetic mixture".into(),
            ));
        }
        let dt = (r.0 * j[1][1] - r.1 * j[0][1]) / det;
        let dc = (r.1 * j[0][0] - r.0 * j[1][0]) / det;
        // damped step, keeping the scale positive
        let mut step = 1.0;
        loop {
            let t_new = t - step * dt;
            let c_new = (c - step * dc).max(1e-3 * target_std);
            let r_new = residual(t_new, c_new);
            if norm(r_new) < norm(r) || step < 1e-4 {
                t = t_new;
                c = c_new;
                r = r_new;
                break;
            }
            step *= 0.5;
        }
    }
    if norm(r) > 1e-6 {
        return Err(Error::Numerical(format!(
            "mixture calibration did not converge for target ({target_mean}, {target_std}); residual {:?}",
            r
        )));
    }
    Ok(CalibratedAttribute { shift: t, scale: c, within })
}

/// Generates a synthetic corpus in absolute space.
///
/// Each row draws one cluster from the shared weights, then every attribute
/// independently from that cluster's truncated normal. The per-attribute
/// mixtures are calibrated so the marginal mean/std match the canonical
/// schema statistics after truncation.
pub fn synth_corpus(n: usize, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::param("synthetic corpus needs at least one row"));
    }
    let schema = AttributeSchema::canonical();
    let calibrated: Vec<CalibratedAttribute> = schema
        .means()
        .iter()
        .zip(schema.stds())
        .map(|(m, s)| calibrate_attribute(*m, *s))
        .collect::<Result<_>>()?;
    let mut rng = crate::rng::child_rng(seed, 0xC0425);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let du: f64 = rng.gen();
        let cluster = if du < CLUSTER_WEIGHTS[0] {
            0
        } else if du < CLUSTER_WEIGHTS[0] + CLUSTER_WEIGHTS[1] {
            1
        } else {
            2
        };
        let row: Vec<f64> = calibrated
            .iter()
            .map(|cal| truncnorm_sample(cal.component_mean(cluster), cal.within, 0.0, &mut rng))
            .collect();
        rows.push(row);
    }
    Ok(Corpus::new(rows))
}
