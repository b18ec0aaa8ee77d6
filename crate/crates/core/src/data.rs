//! Dataset schema, CSV ingestion and contrast specifications.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Dense column-major matrix of covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    /// Builds a matrix from column vectors. All columns must have `n_rows` entries.
    pub fn from_columns(n_rows: usize, columns: Vec<Vec<f64>>) -> Self {
        let n_cols = columns.len();
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for col in columns {
            assert_eq!(col.len(), n_rows, "column length mismatch");
            data.extend(col);
        }
        Self { n_rows, n_cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = vec![0.0; n_rows * n_cols];
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n_cols, "row length mismatch");
            for (j, v) in row.iter().enumerate() {
                data[j * n_rows + i] = *v;
            }
        }
        Self { n_rows, n_cols, data }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, data: vec![0.0; n_rows * n_cols] }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.n_rows + i]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n_cols).map(|j| self.get(i, j)).collect()
    }

    /// Copies the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for j in 0..self.n_cols {
            let col = self.col(j);
            data.extend(rows.iter().map(|&i| col[i]));
        }
        Self { n_rows: rows.len(), n_cols: self.n_cols, data }
    }

    /// Returns a copy with `extra` prepended as column 0.
    pub fn with_leading_column(&self, extra: &[f64]) -> Self {
        assert_eq!(extra.len(), self.n_rows);
        let mut data = Vec::with_capacity(self.data.len() + self.n_rows);
        data.extend_from_slice(extra);
        data.extend_from_slice(&self.data);
        Self { n_rows: self.n_rows, n_cols: self.n_cols + 1, data }
    }
}

/// Observation design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    RepeatedCrossSection,
    Panel,
}

/// Outcome storage; panel data is always held in wide form.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcomes {
    CrossSection { y: Vec<f64>, t: Vec<u8> },
    Panel { y_pre: Vec<f64>, y_post: Vec<f64> },
}

/// A validated, immutable dataset: one row per observation (cross-sections)
/// or per unit (panel).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcomes: Outcomes,
    d: Vec<f64>,
    m: Vec<f64>,
    m0: Option<Vec<Option<f64>>>,
    x: FeatureMatrix,
    covariate_names: Vec<String>,
    unit_id: Option<Vec<String>>,
}

impl Dataset {
    /// Repeated cross-section dataset.
    pub fn cross_section(
        y: Vec<f64>,
        d: Vec<f64>,
        m: Vec<f64>,
        t: Vec<u8>,
        x: FeatureMatrix,
    ) -> Result<Self, DataError> {
        let ds = Self {
            covariate_names: default_names(x.n_cols()),
            outcomes: Outcomes::CrossSection { y, t },
            d,
            m,
            m0: None,
            x,
            unit_id: None,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Panel dataset in wide form.
    pub fn panel(
        y_pre: Vec<f64>,
        y_post: Vec<f64>,
        d: Vec<f64>,
        m: Vec<f64>,
        x: FeatureMatrix,
    ) -> Result<Self, DataError> {
        let ds = Self {
            covariate_names: default_names(x.n_cols()),
            outcomes: Outcomes::Panel { y_pre, y_post },
            d,
            m,
            m0: None,
            x,
            unit_id: None,
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn with_pre_mediator(mut self, m0: Vec<Option<f64>>) -> Result<Self, DataError> {
        self.m0 = Some(m0);
        self.check()?;
        Ok(self)
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        self.covariate_names = names;
        self.check()?;
        Ok(self)
    }

    pub fn with_unit_ids(mut self, ids: Vec<String>) -> Result<Self, DataError> {
        self.unit_id = Some(ids);
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), DataError> {
        let n = self.d.len();
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        let lens_ok = self.m.len() == n
            && self.x.n_rows() == n
            && self.covariate_names.len() == self.x.n_cols()
            && self.m0.as_ref().is_none_or(|v| v.len() == n)
            && self.unit_id.as_ref().is_none_or(|v| v.len() == n)
            && match &self.outcomes {
                Outcomes::CrossSection { y, t } => y.len() == n && t.len() == n,
                Outcomes::Panel { y_pre, y_post } => y_pre.len() == n && y_post.len() == n,
            };
        if !lens_ok {
            return Err(DataError::LengthMismatch);
        }
        if let Outcomes::CrossSection { t, .. } = &self.outcomes {
            if let Some(i) = t.iter().position(|&v| v > 1) {
                return Err(DataError::InvalidPeriod { row: i });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn p(&self) -> usize {
        self.x.n_cols()
    }

    pub fn design(&self) -> Design {
        match self.outcomes {
            Outcomes::CrossSection { .. } => Design::RepeatedCrossSection,
            Outcomes::Panel { .. } => Design::Panel,
        }
    }

    pub fn outcomes(&self) -> &Outcomes {
        &self.outcomes
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn m0(&self) -> Option<&[Option<f64>]> {
        self.m0.as_deref()
    }

    pub fn x(&self) -> &FeatureMatrix {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn unit_ids(&self) -> Option<&[String]> {
        self.unit_id.as_deref()
    }

    /// Outcome Y_T (cross-sections) or post-period outcome Y_1 (panel).
    pub fn y(&self) -> &[f64] {
        match &self.outcomes {
            Outcomes::CrossSection { y, .. } => y,
            Outcomes::Panel { y_post, .. } => y_post,
        }
    }

    /// Period indicator, `None` for panel data.
    pub fn t(&self) -> Option<&[u8]> {
        match &self.outcomes {
            Outcomes::CrossSection { t, .. } => Some(t),
            Outcomes::Panel { .. } => None,
        }
    }

    /// Pre-period outcome Y_0, panel only.
    pub fn y_pre(&self) -> Option<&[f64]> {
        match &self.outcomes {
            Outcomes::CrossSection { .. } => None,
            Outcomes::Panel { y_pre, .. } => Some(y_pre),
        }
    }

    /// Returns a copy with rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let outcomes = match &self.outcomes {
            Outcomes::CrossSection { y, t } => Outcomes::CrossSection {
                y: pick(y),
                t: order.iter().map(|&i| t[i]).collect(),
            },
            Outcomes::Panel { y_pre, y_post } => Outcomes::Panel {
                y_pre: pick(y_pre),
                y_post: pick(y_post),
            },
        };
        Self {
            outcomes,
            d: pick(&self.d),
            m: pick(&self.m),
            m0: self.m0.as_ref().map(|v| order.iter().map(|&i| v[i]).collect()),
            x: self.x.select_rows(order),
            covariate_names: self.covariate_names.clone(),
            unit_id: self.unit_id.as_ref().map(|v| order.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Reshapes a panel dataset into repeated cross-sections with two rows per unit
    /// (t = 0 row first, then the t = 1 row).
    pub fn panel_to_long(&self) -> Option<Self> {
        let Outcomes::Panel { y_pre, y_post } = &self.outcomes else {
            return None;
        };
        let n = self.n();
        let mut order = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(2 * n);
        let mut t = Vec::with_capacity(2 * n);
        for i in 0..n {
            order.push(i);
            y.push(y_pre[i]);
            t.push(0);
            order.push(i);
            y.push(y_post[i]);
            t.push(1);
        }
        Some(Self {
            outcomes: Outcomes::CrossSection { y, t },
            d: order.iter().map(|&i| self.d[i]).collect(),
            m: order.iter().map(|&i| self.m[i]).collect(),
            m0: self.m0.as_ref().map(|v| order.iter().map(|&i| v[i]).collect()),
            x: self.x.select_rows(&order),
            covariate_names: self.covariate_names.clone(),
            unit_id: self.unit_id.as_ref().map(|v| order.iter().map(|&i| v[i].clone()).collect()),
        })
    }
}

fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Column-name mapping used by [`load_dataset`] and [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub y: String,
    pub d: String,
    pub m: String,
    pub t: String,
    pub x_prefix: String,
    pub unit_id: Option<String>,
    pub m0: Option<String>,
    pub y_pre: Option<String>,
    pub y_post: Option<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            y: "y".into(),
            d: "d".into(),
            m: "m".into(),
            t: "t".into(),
            x_prefix: "x".into(),
            unit_id: None,
            m0: None,
            y_pre: None,
            y_post: None,
        }
    }
}

impl Schema {
    /// Default names for wide-form panel files (`y_pre`, `y_post`, `unit`).
    pub fn panel_wide() -> Self {
        Self {
            unit_id: Some("unit".into()),
            y_pre: Some("y_pre".into()),
            y_post: Some("y_post".into()),
            ..Self::default()
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn column(&self, name: &str) -> Result<usize, DataError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    fn cell<'a>(&'a self, row: usize, col: usize) -> Option<&'a str> {
        self.rows[row].get(col).map(str::trim).filter(|s| !s.is_empty())
    }

    /// Parses a mandatory numeric column; empty cells are collected and reported together.
    fn numeric(&self, col: usize) -> Result<Vec<f64>, DataError> {
        let mut out = Vec::with_capacity(self.rows.len());
        let mut missing = Vec::new();
        for r in 0..self.rows.len() {
            match self.cell(r, col) {
                None => {
                    missing.push(r);
                    out.push(f64::NAN);
                }
                Some(s) => out.push(parse_number(s, r, &self.header[col])?),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(DataError::MissingValues { column: self.header[col].clone(), rows: missing })
        }
    }

    fn optional_numeric(&self, col: usize) -> Result<Vec<Option<f64>>, DataError> {
        (0..self.rows.len())
            .map(|r| self.cell(r, col).map(|s| parse_number(s, r, &self.header[col])).transpose())
            .collect()
    }
}

fn parse_number(s: &str, row: usize, column: &str) -> Result<f64, DataError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumericCell { row, column: column.to_string() }),
    }
}

fn parse_period(v: f64, row: usize) -> Result<u8, DataError> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(DataError::InvalidPeriod { row })
    }
}

/// Reads a header-bearing CSV table into a validated [`Dataset`].
///
/// Panel input is accepted in wide form (schema names `y_pre` and `y_post`)
/// or long form (two rows per unit distinguished by `t`); long form is
/// converted to wide, taking `m0` from the pre-period row's mediator and the
/// covariates from the pre-period row.
pub fn load_dataset<R: Read>(source: R, schema: &Schema, design: Design) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(source);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let rows = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DataError::Csv(e.to_string()))?;
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let table = Table { header, rows };

    let x_cols: Vec<usize> = table
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.len() > schema.x_prefix.len() && h.starts_with(&schema.x_prefix))
        .map(|(j, _)| j)
        .collect();
    let covariate_names: Vec<String> = x_cols.iter().map(|&j| table.header[j].clone()).collect();

    let d_col = table.column(&schema.d)?;
    let m_col = table.column(&schema.m)?;
    let wide_panel = design == Design::Panel
        && schema.y_pre.as_deref().is_some_and(|c| table.header.iter().any(|h| h == c))
        && schema.y_post.as_deref().is_some_and(|c| table.header.iter().any(|h| h == c));

    let d = table.numeric(d_col)?;
    let m = table.numeric(m_col)?;
    let x_columns = x_cols.iter().map(|&j| table.numeric(j)).collect::<Result<Vec<_>, _>>()?;
    let m0 = match &schema.m0 {
        Some(name) => Some(table.optional_numeric(table.column(name)?)?),
        None => None,
    };
    let unit_ids: Option<Vec<String>> = match &schema.unit_id {
        Some(name) => match table.column(name) {
            Ok(j) => Some(
                (0..table.rows.len())
                    .map(|r| table.cell(r, j).unwrap_or("").to_string())
                    .collect(),
            ),
            Err(e) if design == Design::Panel && !wide_panel => return Err(e),
            Err(_) => None,
        },
        None => None,
    };

    match design {
        Design::RepeatedCrossSection => {
            let y = table.numeric(table.column(&schema.y)?)?;
            let t_raw = table.numeric(table.column(&schema.t)?)?;
            let t = t_raw
                .iter()
                .enumerate()
                .map(|(r, &v)| parse_period(v, r))
                .collect::<Result<Vec<_>, _>>()?;
            let x = FeatureMatrix::from_columns(d.len(), x_columns);
            let mut ds = Dataset::cross_section(y, d, m, t, x)?.with_covariate_names(covariate_names)?;
            if let Some(m0) = m0 {
                ds = ds.with_pre_mediator(m0)?;
            }
            if let Some(ids) = unit_ids {
                ds = ds.with_unit_ids(ids)?;
            }
            Ok(ds)
        }
        Design::Panel if wide_panel => {
            let y_pre = table.numeric(table.column(schema.y_pre.as_deref().unwrap_or("y_pre"))?)?;
            let y_post = table.numeric(table.column(schema.y_post.as_deref().unwrap_or("y_post"))?)?;
            let x = FeatureMatrix::from_columns(d.len(), x_columns);
            let mut ds = Dataset::panel(y_pre, y_post, d, m, x)?.with_covariate_names(covariate_names)?;
            if let Some(m0) = m0 {
                ds = ds.with_pre_mediator(m0)?;
            }
            if let Some(ids) = unit_ids {
                ds = ds.with_unit_ids(ids)?;
            }
            Ok(ds)
        }
        Design::Panel => {
            let ids = unit_ids.ok_or_else(|| DataError::MissingColumn("unit_id".into()))?;
            let y = table.numeric(table.column(&schema.y)?)?;
            let t_raw = table.numeric(table.column(&schema.t)?)?;
            long_to_wide(&ids, &y, &t_raw, &d, &m, &x_columns, covariate_names)
        }
    }
}

fn long_to_wide(
    ids: &[String],
    y: &[f64],
    t_raw: &[f64],
    d: &[f64],
    m: &[f64],
    x_columns: &[Vec<f64>],
    covariate_names: Vec<String>,
) -> Result<Dataset, DataError> {
    // unit -> (pre row, post row), kept in order of first appearance
    let mut slots: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pairs: Vec<(String, Option<usize>, Option<usize>)> = Vec::new();
    for (r, id) in ids.iter().enumerate() {
        let period = parse_period(t_raw[r], r)?;
        let k = *slots.entry(id.as_str()).or_insert_with(|| {
            pairs.push((id.clone(), None, None));
            pairs.len() - 1
        });
        let slot = if period == 0 { &mut pairs[k].1 } else { &mut pairs[k].2 };
        if slot.is_some() {
            return Err(DataError::InconsistentPanelUnit(id.clone()));
        }
        *slot = Some(r);
    }
    let mut y_pre = Vec::with_capacity(pairs.len());
    let mut y_post = Vec::with_capacity(pairs.len());
    let mut d_w = Vec::with_capacity(pairs.len());
    let mut m_w = Vec::with_capacity(pairs.len());
    let mut m0_w = Vec::with_capacity(pairs.len());
    let mut pre_rows = Vec::with_capacity(pairs.len());
    let mut unit = Vec::with_capacity(pairs.len());
    for (id, pre, post) in &pairs {
        let (Some(pre), Some(post)) = (*pre, *post) else {
            return Err(DataError::InconsistentPanelUnit(id.clone()));
        };
        y_pre.push(y[pre]);
        y_post.push(y[post]);
        d_w.push(d[post]);
        m_w.push(m[post]);
        m0_w.push(Some(m[pre]));
        pre_rows.push(pre);
        unit.push(id.clone());
    }
    let x = FeatureMatrix::from_columns(
        pairs.len(),
        x_columns.iter().map(|c| pre_rows.iter().map(|&r| c[r]).collect()).collect(),
    );
    Dataset::panel(y_pre, y_post, d_w, m_w, x)?
        .with_covariate_names(covariate_names)?
        .with_pre_mediator(m0_w)?
        .with_unit_ids(unit)
}

/// Writes a dataset as CSV under `schema`. Panel data is written in wide
/// form. Numbers use the shortest representation that parses back to the
/// identical `f64`.
pub fn write_dataset<W: Write>(ds: &Dataset, schema: &Schema, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = Vec::new();
    if ds.unit_id.is_some() {
        header.push(schema.unit_id.clone().unwrap_or_else(|| "unit".into()));
    }
    match ds.design() {
        Design::RepeatedCrossSection => {
            header.push(schema.y.clone());
            header.push(schema.t.clone());
        }
        Design::Panel => {
            header.push(schema.y_pre.clone().unwrap_or_else(|| "y_pre".into()));
            header.push(schema.y_post.clone().unwrap_or_else(|| "y_post".into()));
        }
    }
    header.push(schema.d.clone());
    header.push(schema.m.clone());
    if ds.m0.is_some() {
        header.push(schema.m0.clone().unwrap_or_else(|| "m0".into()));
    }
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header).map_err(|e| DataError::Csv(e.to_string()))?;

    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        record.clear();
        if let Some(ids) = &ds.unit_id {
            record.push(ids[i].clone());
        }
        match &ds.outcomes {
            Outcomes::CrossSection { y, t } => {
                record.push(y[i].to_string());
                record.push(t[i].to_string());
            }
            Outcomes::Panel { y_pre, y_post } => {
                record.push(y_pre[i].to_string());
                record.push(y_post[i].to_string());
            }
        }
        record.push(ds.d[i].to_string());
        record.push(ds.m[i].to_string());
        if let Some(m0) = &ds.m0 {
            record.push(m0[i].map(|v| v.to_string()).unwrap_or_default());
        }
        for j in 0..ds.p() {
            record.push(ds.x.get(i, j).to_string());
        }
        w.write_record(&record).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}
