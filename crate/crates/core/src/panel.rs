//! Multi-stage observational data.
//!
//! A [`Panel`] holds `n` trajectories `(X_1, A_1, ..., X_K, A_K, Y)` as named
//! real columns. The stage layout fixes which columns are observed at which
//! stage, and therefore which columns a model term may reference.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A product of one or more named columns, written `x1` or `a1:x11`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term(Vec<String>);

impl Term {
    pub fn factors(&self) -> &[String] {
        &self.0
    }

    /// Terms are compared as sets of factors, so `a1:x1` equals `x1:a1`.
    fn canonical(&self) -> Vec<&str> {
        let mut f: Vec<&str> = self.0.iter().map(String::as_str).collect();
        f.sort_unstable();
        f
    }

    pub fn same_as(&self, other: &Term) -> bool {
        self.canonical() == other.canonical()
    }
}

impl FromStr for Term {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let factors: Vec<String> = s
            .split([':', '*'])
            .map(|f| f.trim().to_string())
            .collect();
        if factors.iter().any(String::is_empty) {
            return Err(Error::InvalidSpec(format!("malformed term `{s}`")));
        }
        Ok(Term(factors))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(":"))
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a list of term strings.
pub fn terms(list: &[&str]) -> Result<Vec<Term>> {
    list.iter().map(|s| s.parse()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLayout {
    /// Columns first recorded at this stage (baseline covariates for stage 1).
    pub covariates: Vec<String>,
    pub treatment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelLayout {
    #[serde(default = "default_id")]
    pub id: String,
    pub stages: Vec<StageLayout>,
    #[serde(default = "default_outcome")]
    pub outcome: String,
}

fn default_id() -> String {
    "id".into()
}

fn default_outcome() -> String {
    "y".into()
}

impl PanelLayout {
    pub fn new(stages: Vec<StageLayout>) -> Self {
        Self {
            id: default_id(),
            stages,
            outcome: default_outcome(),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidSpec("layout has no stages".into()));
        }
        let mut seen = HashSet::new();
        for name in std::iter::once(&self.id)
            .chain(std::iter::once(&self.outcome))
            .chain(self.data_columns().iter())
        {
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidSpec(format!("column `{name}` declared twice")));
            }
        }
        Ok(())
    }

    /// Covariate and treatment columns in declaration order:
    /// `X_1, A_1, X_2, A_2, ..., X_K, A_K`.
    pub fn data_columns(&self) -> Vec<String> {
        self.stages
            .iter()
            .flat_map(|s| s.covariates.iter().cloned().chain(std::iter::once(s.treatment.clone())))
            .collect()
    }

    /// Columns available to a decision maker at stage `k` (0-based):
    /// `H_k = (X_1, A_1, ..., A_{k-1}, X_k)`.
    pub fn history(&self, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        for (j, s) in self.stages.iter().enumerate().take(k + 1) {
            out.extend(s.covariates.iter().cloned());
            if j < k {
                out.push(s.treatment.clone());
            }
        }
        out
    }

    /// `(H_K, A_K)`: everything observed before the outcome.
    pub fn full_history(&self) -> Vec<String> {
        self.data_columns()
    }

    /// CSV header for a panel with this layout.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec![self.id.clone()];
        h.extend(self.data_columns());
        h.push(self.outcome.clone());
        h
    }
}

/// Checks that every factor of every term is among `allowed`.
pub fn check_terms(terms: &[Term], allowed: &[String], what: &str) -> Result<()> {
    let allowed: HashSet<&str> = allowed.iter().map(String::as_str).collect();
    for t in terms {
        if let Some(f) = t.factors().iter().find(|f| !allowed.contains(f.as_str())) {
            return Err(Error::InvalidSpec(format!(
                "{what} term `{t}` references `{f}`, which is not available there"
            )));
        }
    }
    Ok(())
}

/// A rectangular table of named real columns, as read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn new(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.1.len());
        let mut index = HashMap::new();
        for (i, (name, col)) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate column `{name}`")));
            }
        }
        let (names, columns) = columns.into_iter().unzip();
        Ok(Self { names, columns, index })
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.columns[i].as_slice())
    }

    pub fn require(&self, names: &[String]) -> Result<()> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !self.index.contains_key(n.as_str()))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::SchemaMismatch(missing))
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds or replaces a column.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if !self.columns.is_empty() && values.len() != self.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.nrows()
            )));
        }
        match self.index.get(name) {
            Some(&i) => self.columns[i] = values,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.columns.push(values);
            }
        }
        Ok(())
    }

    /// Reads a headed CSV of numeric cells. Errors name the 1-based line.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let row = e.position().map_or(0, |p| p.line() as usize);
                Error::MalformedRow { row, message: e.to_string() }
            })?;
            let row = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != names.len() {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("expected {} fields, found {}", names.len(), rec.len()),
                });
            }
            for (j, cell) in rec.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::MalformedRow {
                    row,
                    message: format!("column `{}`: cannot parse `{cell}` as a number", names[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::MalformedRow {
                        row,
                        message: format!("column `{}`: non-finite value", names[j]),
                    });
                }
                columns[j].push(v);
            }
        }
        Table::new(names.into_iter().zip(columns).collect())
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        for i in 0..self.nrows() {
            wtr.write_record(self.columns.iter().map(|c| c[i].to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Validated multi-stage data set. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    layout: PanelLayout,
    ids: Vec<i64>,
    table: Table,
    y: Vec<f64>,
}

impl Panel {
    /// Builds a panel from a table holding the layout's id, data and outcome columns.
    /// Extra columns are dropped.
    pub fn from_table(table: &Table, layout: PanelLayout) -> Result<Self> {
        layout.validate()?;
        table.require(&layout.header())?;
        let n = table.nrows();
        if n == 0 {
            return Err(Error::InvalidSpec("panel has no rows".into()));
        }
        let ids = table
            .column(&layout.id)
            .unwrap_or_default()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.fract() == 0.0 && v.abs() < 9.0e15 {
                    Ok(v as i64)
                } else {
                    Err(Error::MalformedRow {
                        row: i + 2,
                        message: format!("id `{v}` is not an integer"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for s in &layout.stages {
            let a = table.column(&s.treatment).unwrap_or_default();
            if let Some(i) = a.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::MalformedRow {
                    row: i + 2,
                    message: format!("treatment `{}` must be 0 or 1, got {}", s.treatment, a[i]),
                });
            }
        }
        let data = layout.data_columns();
        let columns = data
            .iter()
            .map(|name| (name.clone(), table.column(name).unwrap_or_default().to_vec()))
            .collect();
        let y = table.column(&layout.outcome).unwrap_or_default().to_vec();
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::MalformedRow { row: i + 2, message: "non-finite outcome".into() });
        }
        Ok(Self {
            layout,
            ids,
            table: Table::new(columns)?,
            y,
        })
    }

    /// Builds a panel from explicit columns; ids default to `1..=n`.
    pub fn from_columns(layout: PanelLayout, columns: Vec<(String, Vec<f64>)>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        let mut all = vec![(layout.id.clone(), (1..=n).map(|i| i as f64).collect())];
        all.extend(columns);
        all.push((layout.outcome.clone(), y));
        Self::from_table(&Table::new(all)?, layout)
    }

    pub fn read_csv<R: Read>(reader: R, layout: PanelLayout) -> Result<Self> {
        Self::from_table(&Table::from_csv(reader)?, layout)
    }

    /// Writes `id, X_1.., A_1, ..., A_K, y`. Values use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.layout.header())?;
        let data = self.layout.data_columns();
        let cols: Vec<&[f64]> = data.iter().map(|c| self.table.column(c).unwrap_or_default()).collect();
        for i in 0..self.n() {
            let mut rec = Vec::with_capacity(cols.len() + 2);
            rec.push(self.ids[i].to_string());
            rec.extend(cols.iter().map(|c| c[i].to_string()));
            rec.push(self.y[i].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn layout(&self) -> &PanelLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_stages(&self) -> usize {
        self.layout.n_stages()
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.table
            .column(name)
            .ok_or_else(|| Error::SchemaMismatch(vec![name.to_string()]))
    }

    /// Treatment at stage `k` (0-based).
    pub fn treatment(&self, k: usize) -> &[f64] {
        self.table.column(&self.layout.stages[k].treatment).unwrap_or_default()
    }

    pub fn term_values(&self, term: &Term) -> Result<Vec<f64>> {
        let mut out = vec![1.0; self.n()];
        for f in term.factors() {
            for (o, v) in out.iter_mut().zip(self.column(f)?) {
                *o *= v;
            }
        }
        Ok(out)
    }

    /// Bootstrap-style row selection; rows may repeat.
    pub fn select(&self, rows: &[usize]) -> Panel {
        Panel {
            layout: self.layout.clone(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            table: self.table.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    /// Same covariates and treatments with a new outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Panel> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch("outcome length".into()));
        }
        Ok(Panel { y, ..self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout2() -> PanelLayout {
        PanelLayout::new(vec![
            StageLayout { covariates: vec!["x11".into(), "x12".into()], treatment: "a1".into() },
            StageLayout { covariates: vec!["x2".into()], treatment: "a2".into() },
        ])
    }

    #[test]
    fn history_follows_declaration_order() {
        let l = layout2();
        assert_eq!(l.history(0), vec!["x11", "x12"]);
        assert_eq!(l.history(1), vec!["x11", "x12", "a1", "x2"]);
        assert_eq!(l.full_history(), vec!["x11", "x12", "a1", "x2", "a2"]);
        assert_eq!(l.header(), vec!["id", "x11", "x12", "a1", "x2", "a2", "y"]);
    }

    #[test]
    fn term_parsing() {
        let t: Term = "a1 : x11".parse().unwrap();
        assert_eq!(t.factors(), &["a1".to_string(), "x11".to_string()]);
        assert!(t.same_as(&"x11*a1".parse().unwrap()));
        assert!("a1::x".parse::<Term>().is_err());
        assert_eq!(t.to_string(), "a1:x11");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let csv = "id,x11,x12,a1,x2,a2,y\n1,0.1,-2.5,1,0.3333333333333333,0,1e-3\n2,1,2,0,3,1,-4.25\n";
        let p = Panel::read_csv(csv.as_bytes(), layout2()).unwrap();
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let q = Panel::read_csv(out.as_slice(), layout2()).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.term_values(&"a1:x12".parse().unwrap()).unwrap(), vec![-2.5, 0.0]);
    }

    #[test]
    fn malformed_row_is_named() {
        let csv = "id,x11,x12,a1,x2,a2,y\n1,0.1,-2.5,1,0.3,0,1\n2,1,oops,0,3,1,-4\n";
        match Panel::read_csv(csv.as_bytes(), layout2()) {
            Err(Error::MalformedRow { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("x12"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_columns_listed() {
        let csv = "id,x11,a1,y\n1,0,1,2\n";
        match Panel::read_csv(csv.as_bytes(), layout2()) {
            Err(Error::SchemaMismatch(m)) => assert_eq!(m, vec!["x12", "x2", "a2"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let csv = "id,x11,x12,a1,x2,a2,y\n1,0,0,2,0,0,1\n";
        assert!(matches!(
            Panel::read_csv(csv.as_bytes(), layout2()),
            Err(Error::MalformedRow { row: 2, .. })
        ));
    }
}
