//! Panel data model, CSV ingestion and validation, and the treated-cell
//! masking that defines the matrix-completion problem.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Column-name mapping for long-format panel CSV files. Covariate columns
/// are discovered by prefix.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub unit: String,
    pub group: String,
    pub time: String,
    pub count: String,
    pub population: String,
    pub treated: String,
    pub covariate_prefix: String,
    pub smoothed: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            group: "group".into(),
            time: "time".into(),
            count: "count".into(),
            population: "population".into(),
            treated: "treated".into(),
            covariate_prefix: "cov_".into(),
            smoothed: "smoothed".into(),
        }
    }
}

/// A complete unit x time panel of counts, populations (person-year
/// offsets), covariates, and an absorbing treatment mask. Immutable after
/// construction and safe to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    unit_ids: Vec<String>,
    group_of_unit: Vec<String>,
    time_labels: Vec<i64>,
    counts: Vec<f64>,
    populations: Vec<f64>,
    covariates: Vec<f64>,
    covariate_names: Vec<String>,
    treated: Vec<bool>,
    smoothed: bool,
}

impl PanelData {
    /// Builds and validates a panel from row-major grids.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        unit_ids: Vec<String>,
        group_of_unit: Vec<String>,
        time_labels: Vec<i64>,
        counts: Vec<f64>,
        populations: Vec<f64>,
        covariates: Vec<f64>,
        covariate_names: Vec<String>,
        treated: Vec<bool>,
        smoothed: bool,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let t = time_labels.len();
        let p = covariate_names.len();
        if group_of_unit.len() != n
            || counts.len() != n * t
            || populations.len() != n * t
            || treated.len() != n * t
            || covariates.len() != n * t * p
        {
            return Err(Error::InvalidArgument("panel grid dimensions disagree".into()));
        }
        let panel = Self {
            unit_ids,
            group_of_unit,
            time_labels,
            counts,
            populations,
            covariates,
            covariate_names,
            treated,
            smoothed,
        };
        panel.validate()?;
        Ok(panel)
    }

    fn validate(&self) -> Result<()> {
        let (n, t) = (self.n_units(), self.n_times());
        for i in 0..n {
            for j in 0..t {
                let pop = self.population(i, j);
                if !(pop > 0.0) {
                    return Err(Error::NonPositivePopulation {
                        unit: self.unit_ids[i].clone(),
                        time: self.time_labels[j],
                        value: pop,
                    });
                }
                let y = self.count(i, j);
                if !y.is_finite() || y < 0.0 || (!self.smoothed && y.fract() != 0.0) {
                    return Err(Error::NonIntegerCount {
                        unit: self.unit_ids[i].clone(),
                        time: self.time_labels[j],
                        value: y,
                    });
                }
            }
            let mut seen_treated = false;
            for j in 0..t {
                let flag = self.treated(i, j);
                if seen_treated && !flag {
                    return Err(Error::StaircaseViolation {
                        unit: self.unit_ids[i].clone(),
                        time: self.time_labels[j],
                    });
                }
                seen_treated |= flag;
            }
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariate grid has non-finite values".into()));
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn group_of_unit(&self) -> &[String] {
        &self.group_of_unit
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn is_smoothed(&self) -> bool {
        self.smoothed
    }

    #[inline]
    fn idx(&self, i: usize, t: usize) -> usize {
        i * self.n_times() + t
    }

    #[inline]
    pub fn count(&self, i: usize, t: usize) -> f64 {
        self.counts[self.idx(i, t)]
    }

    #[inline]
    pub fn population(&self, i: usize, t: usize) -> f64 {
        self.populations[self.idx(i, t)]
    }

    #[inline]
    pub fn treated(&self, i: usize, t: usize) -> bool {
        self.treated[self.idx(i, t)]
    }

    #[inline]
    pub fn covariate(&self, i: usize, t: usize, p: usize) -> f64 {
        self.covariates[(i * self.n_times() + t) * self.n_covariates() + p]
    }

    /// Returns a copy with the counts grid replaced (used by pre-smoothing
    /// and effect injection in simulations). Counts may be continuous when
    /// `smoothed` is set.
    pub fn with_counts(&self, counts: Vec<f64>, smoothed: bool) -> Result<Self> {
        Self::new(
            self.unit_ids.clone(),
            self.group_of_unit.clone(),
            self.time_labels.clone(),
            counts,
            self.populations.clone(),
            self.covariates.clone(),
            self.covariate_names.clone(),
            self.treated.clone(),
            smoothed,
        )
    }

    /// First treated time index per unit, if any.
    pub fn first_treated_time(&self, i: usize) -> Option<usize> {
        (0..self.n_times()).find(|&t| self.treated(i, t))
    }

    /// Number of treated cells.
    pub fn n_treated_cells(&self) -> usize {
        self.treated.iter().filter(|&&w| w).count()
    }

    /// Time indices at which at least one unit is treated, ascending.
    pub fn treated_time_indices(&self) -> Vec<usize> {
        (0..self.n_times())
            .filter(|&t| (0..self.n_units()).any(|i| self.treated(i, t)))
            .collect()
    }

    /// Writes the panel in the long-format CSV schema. `header_comment`
    /// lines, when given, are emitted first prefixed by `# `.
    pub fn write_csv(&self, path: &Path, schema: &CsvSchema, header_comment: Option<&str>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        if let Some(comment) = header_comment {
            for line in comment.lines() {
                writeln!(file, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec![
            schema.unit.clone(),
            schema.group.clone(),
            schema.time.clone(),
            schema.count.clone(),
            schema.population.clone(),
            schema.treated.clone(),
            schema.smoothed.clone(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_units() {
            for t in 0..self.n_times() {
                let mut rec = vec![
                    self.unit_ids[i].clone(),
                    self.group_of_unit[i].clone(),
                    self.time_labels[t].to_string(),
                    format_count(self.count(i, t)),
                    format_float(self.population(i, t)),
                    if self.treated(i, t) { "1".into() } else { "0".into() },
                    if self.smoothed { "1".into() } else { "0".into() },
                ];
                for p in 0..self.n_covariates() {
                    rec.push(format_float(self.covariate(i, t, p)));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn format_count(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

fn format_float(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// A panel plus the observed mask: `observed = NOT treated`. Methods see
/// only observed cells; the treated cells are the matrix-completion target.
#[derive(Debug, Clone)]
pub struct MaskedPanel {
    panel: PanelData,
    observed: Vec<bool>,
}

impl MaskedPanel {
    pub fn panel(&self) -> &PanelData {
        &self.panel
    }

    #[inline]
    pub fn observed(&self, i: usize, t: usize) -> bool {
        self.observed[i * self.panel.n_times() + t]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn n_masked(&self) -> usize {
        self.observed.len() - self.n_observed()
    }

    /// Returns a copy with one additional cell masked. Used for held-out
    /// diagnostics; the treated-cell mask is always a subset of the result.
    pub fn with_cell_masked(&self, i: usize, t: usize) -> MaskedPanel {
        let mut observed = self.observed.clone();
        observed[i * self.panel.n_times() + t] = false;
        MaskedPanel {
            panel: self.panel.clone(),
            observed,
        }
    }

    /// Masked cells in row-major order; the canonical ordering used by
    /// predictive draws and exports.
    pub fn masked_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for i in 0..self.panel.n_units() {
            for t in 0..self.panel.n_times() {
                if !self.observed(i, t) {
                    cells.push((i, t));
                }
            }
        }
        cells
    }
}

/// Masks every treated cell: the observed grid is the complement of the
/// treatment set. Counts, populations, and covariates pass through
/// untouched.
pub fn mask_treated(panel: &PanelData) -> MaskedPanel {
    let observed = (0..panel.n_units())
        .flat_map(|i| (0..panel.n_times()).map(move |t| (i, t)))
        .map(|(i, t)| !panel.treated(i, t))
        .collect();
    MaskedPanel {
        panel: panel.clone(),
        observed,
    }
}

/// Drops units whose pre-treatment case sum is at or below `min_cases`.
/// Untreated units are scored on their full period.
pub fn min_pretreatment_filter(panel: &PanelData, min_cases: u64) -> Result<PanelData> {
    let keep: Vec<usize> = (0..panel.n_units())
        .filter(|&i| {
            let end = panel.first_treated_time(i).unwrap_or(panel.n_times());
            let total: f64 = (0..end).map(|t| panel.count(i, t)).sum();
            total > min_cases as f64
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::AllUnitsDropped { threshold: min_cases });
    }
    let t = panel.n_times();
    let p = panel.n_covariates();
    let mut counts = Vec::with_capacity(keep.len() * t);
    let mut populations = Vec::with_capacity(keep.len() * t);
    let mut treated = Vec::with_capacity(keep.len() * t);
    let mut covariates = Vec::with_capacity(keep.len() * t * p);
    for &i in &keep {
        for j in 0..t {
            counts.push(panel.count(i, j));
            populations.push(panel.population(i, j));
            treated.push(panel.treated(i, j));
            for q in 0..p {
                covariates.push(panel.covariate(i, j, q));
            }
        }
    }
    PanelData::new(
        keep.iter().map(|&i| panel.unit_ids[i].clone()).collect(),
        keep.iter().map(|&i| panel.group_of_unit[i].clone()).collect(),
        panel.time_labels.clone(),
        counts,
        populations,
        covariates,
        panel.covariate_names.clone(),
        treated,
        panel.smoothed,
    )
}

/// Loads a long-format delimited panel file. Rows may arrive in any order;
/// the (unit, time) pairs must form a complete rectangle.
pub fn load_panel(path: &Path, schema: &CsvSchema) -> Result<PanelData> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(&path_str, 1, &e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(&path_str, 1, &format!("missing column `{name}`")))
    };
    let unit_col = col(&schema.unit)?;
    let group_col = col(&schema.group)?;
    let time_col = col(&schema.time)?;
    let count_col = col(&schema.count)?;
    let pop_col = col(&schema.population)?;
    let treated_col = col(&schema.treated)?;
    let smoothed_col = headers.iter().position(|h| h == schema.smoothed);
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with(&schema.covariate_prefix))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    struct Row {
        group: String,
        count: f64,
        population: f64,
        treated: bool,
        smoothed: bool,
        covs: Vec<f64>,
    }

    let mut rows: HashMap<(String, i64), Row> = HashMap::new();
    let mut unit_order: Vec<String> = Vec::new();
    let mut times: BTreeSet<i64> = BTreeSet::new();

    for (line_no, record) in reader.records().enumerate() {
        let line = line_no + 2; // header is line 1
        let record = record.map_err(|e| parse_err(&path_str, line, &e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let unit = field(unit_col);
        let time: i64 = field(time_col)
            .parse()
            .map_err(|_| parse_err(&path_str, line, "time is not an integer"))?;
        let count: f64 = field(count_col)
            .parse()
            .map_err(|_| parse_err(&path_str, line, "count is not numeric"))?;
        let population: f64 = field(pop_col)
            .parse()
            .map_err(|_| parse_err(&path_str, line, "population is not numeric"))?;
        let treated = parse_bool(&field(treated_col))
            .ok_or_else(|| parse_err(&path_str, line, "treated flag is not boolean"))?;
        let smoothed = match smoothed_col {
            Some(c) => parse_bool(&field(c))
                .ok_or_else(|| parse_err(&path_str, line, "smoothed flag is not boolean"))?,
            None => false,
        };
        let covs = cov_cols
            .iter()
            .map(|(c, name)| {
                field(*c)
                    .parse::<f64>()
                    .map_err(|_| parse_err(&path_str, line, &format!("covariate `{name}` is not numeric")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !unit_order.contains(&unit) {
            unit_order.push(unit.clone());
        }
        times.insert(time);
        if rows
            .insert(
                (unit.clone(), time),
                Row {
                    group: field(group_col),
                    count,
                    population,
                    treated,
                    smoothed,
                    covs,
                },
            )
            .is_some()
        {
            return Err(Error::DuplicateCell { unit, time });
        }
    }

    let time_labels: Vec<i64> = times.into_iter().collect();
    let n = unit_order.len();
    let t = time_labels.len();
    if n == 0 || t == 0 {
        return Err(parse_err(&path_str, 1, "no data rows"));
    }
    let p = cov_cols.len();
    let mut counts = Vec::with_capacity(n * t);
    let mut populations = Vec::with_capacity(n * t);
    let mut treated = Vec::with_capacity(n * t);
    let mut covariates = Vec::with_capacity(n * t * p);
    let mut groups = Vec::with_capacity(n);
    let mut smoothed = false;
    for unit in &unit_order {
        let mut group = String::new();
        for &time in &time_labels {
            let row = rows.remove(&(unit.clone(), time)).ok_or_else(|| Error::MissingCell {
                unit: unit.clone(),
                time,
            })?;
            group = row.group;
            counts.push(row.count);
            populations.push(row.population);
            treated.push(row.treated);
            smoothed |= row.smoothed;
            covariates.extend(row.covs);
        }
        groups.push(group);
    }
    PanelData::new(
        unit_order,
        groups,
        time_labels,
        counts,
        populations,
        covariates,
        cov_cols.into_iter().map(|(_, name)| name).collect(),
        treated,
        smoothed,
    )
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Some(true),
        "0" | "false" | "f" | "no" => Some(false),
        _ => None,
    }
}

fn parse_err(path: &str, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.to_string(),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Small panel builder for tests: counts and treatment as row-major
    /// grids, unit ids "u0", "u1", ..., all populations equal.
    pub fn toy_panel(n: usize, t: usize, counts: &[f64], treated: &[bool], population: f64) -> PanelData {
        PanelData::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..n).map(|i| if i % 2 == 0 { "g0".into() } else { "g1".into() }).collect(),
            (1..=t as i64).collect(),
            counts.to_vec(),
            vec![population; n * t],
            vec![],
            vec![],
            treated.to_vec(),
            false,
        )
        .unwrap()
    }
}
