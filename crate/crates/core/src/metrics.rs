//! Fidelity of a synthetic table to a real one.
//!
//! Shape averages a per-column marginal score: `1 - TV` for categorical columns
//! and `1 - KS` on the raw values for numeric ones. Trend averages, over column
//! pairs, `1 - |assoc_real - assoc_synth| / 2` where the association is Pearson
//! correlation, Cramér's V or the correlation ratio depending on the column kinds.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::ks_two_sample;
use crate::tabular::{parse_number, ColumnKind, ColumnSchema, Table, TableSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub shape: f64,
    pub trend: Option<f64>,
    pub per_column: BTreeMap<String, f64>,
    pub per_pair: BTreeMap<String, f64>,
}

enum Column {
    Categorical(Vec<String>),
    Numeric(Vec<f64>),
}

fn extract(table: &Table, schema: &TableSchema, c: usize) -> Result<Column> {
    let col: &ColumnSchema = &schema.columns[c];
    match col.kind {
        ColumnKind::Categorical => Ok(Column::Categorical(table.column(c).map(str::to_owned).collect())),
        ColumnKind::Numeric => table
            .column(c)
            .enumerate()
            .map(|(row, cell)| {
                if cell.trim().is_empty() {
                    return Err(Error::MissingNumeric { column: col.name.clone(), row });
                }
                parse_number(cell)
                    .ok_or_else(|| Error::MalformedNumeric { column: col.name.clone(), value: cell.to_owned() })
            })
            .collect::<Result<Vec<_>>>()
            .map(Column::Numeric),
    }
}

fn frequencies(values: &[String]) -> HashMap<&str, f64> {
    let mut f = HashMap::new();
    for v in values {
        *f.entry(v.as_str()).or_insert(0.0) += 1.0 / values.len() as f64;
    }
    f
}

fn total_variation(a: &[String], b: &[String]) -> f64 {
    let (fa, fb) = (frequencies(a), frequencies(b));
    let only_b: f64 = fb.iter().filter(|(k, _)| !fa.contains_key(*k)).map(|(_, p)| p).sum();
    let shared: f64 = fa.iter().map(|(k, p)| (p - fb.get(k).copied().unwrap_or(0.0)).abs()).sum();
    (0.5 * (shared + only_b)).min(1.0)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn index_categories(values: &[String]) -> (Vec<usize>, usize) {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let idx = values
        .iter()
        .map(|v| {
            let next = ids.len();
            *ids.entry(v.as_str()).or_insert(next)
        })
        .collect();
    (idx, ids.len())
}

/// Cramér's V without bias correction.
fn cramers_v(x: &[String], y: &[String]) -> f64 {
    let (xi, r) = index_categories(x);
    let (yi, c) = index_categories(y);
    if r < 2 || c < 2 {
        return 0.0;
    }
    let n = x.len() as f64;
    let mut table = vec![0.0; r * c];
    let (mut rows, mut cols) = (vec![0.0; r], vec![0.0; c]);
    for (&a, &b) in xi.iter().zip(&yi) {
        table[a * c + b] += 1.0;
        rows[a] += 1.0;
        cols[b] += 1.0;
    }
    let mut chi2 = 0.0;
    for a in 0..r {
        for b in 0..c {
            let expected = rows[a] * cols[b] / n;
            chi2 += (table[a * c + b] - expected).powi(2) / expected;
        }
    }
    (chi2 / (n * (r.min(c) - 1) as f64)).sqrt().clamp(0.0, 1.0)
}

/// Correlation ratio of a numeric column grouped by a categorical one.
fn correlation_ratio(groups: &[String], values: &[f64]) -> f64 {
    let (gi, k) = index_categories(groups);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut sums, mut counts) = (vec![0.0; k], vec![0.0; k]);
    for (&g, &v) in gi.iter().zip(values) {
        sums[g] += v;
        counts[g] += 1.0;
    }
    let between: f64 = sums.iter().zip(&counts).map(|(s, c)| c * (s / c - mean).powi(2)).sum();
    let total: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if total == 0.0 {
        return 0.0;
    }
    (between / total).sqrt().clamp(0.0, 1.0)
}

fn association(a: &Column, b: &Column) -> f64 {
    match (a, b) {
        (Column::Numeric(x), Column::Numeric(y)) => pearson(x, y),
        (Column::Categorical(x), Column::Categorical(y)) => cramers_v(x, y),
        (Column::Categorical(g), Column::Numeric(v)) | (Column::Numeric(v), Column::Categorical(g)) => {
            correlation_ratio(g, v)
        }
    }
}

fn prepare(real: &Table, synth: &Table, schema: &TableSchema) -> Result<(Vec<Column>, Vec<Column>)> {
    schema.check_header(real)?;
    schema.check_header(synth)?;
    if real.rows.is_empty() || synth.rows.is_empty() {
        return Err(Error::invalid("both tables need at least one row"));
    }
    let cols = |t: &Table| (0..schema.len()).map(|c| extract(t, schema, c)).collect::<Result<Vec<_>>>();
    Ok((cols(real)?, cols(synth)?))
}

fn column_scores(real: &[Column], synth: &[Column]) -> Vec<f64> {
    real.iter()
        .zip(synth)
        .map(|pair| match pair {
            (Column::Categorical(a), Column::Categorical(b)) => 1.0 - total_variation(a, b),
            (Column::Numeric(a), Column::Numeric(b)) => 1.0 - ks_two_sample(a, b),
            _ => unreachable!("both tables are read with the same schema"),
        })
        .collect()
}

fn pair_scores(real: &[Column], synth: &[Column]) -> Vec<((usize, usize), f64)> {
    let n = real.len();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| {
            let diff = (association(&real[i], &real[j]) - association(&synth[i], &synth[j])).abs();
            ((i, j), 1.0 - diff / 2.0)
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn shape_score(real: &Table, synth: &Table, schema: &TableSchema) -> Result<f64> {
    let (r, s) = prepare(real, synth, schema)?;
    Ok(mean(column_scores(&r, &s).into_iter()))
}

pub fn trend_score(real: &Table, synth: &Table, schema: &TableSchema) -> Result<f64> {
    if schema.len() < 2 {
        return Err(Error::invalid("trend needs at least two columns"));
    }
    let (r, s) = prepare(real, synth, schema)?;
    Ok(mean(pair_scores(&r, &s).into_iter().map(|(_, v)| v)))
}

/// Shape, trend and their per-column / per-pair components. Trend is absent
/// for single-column tables. Pair keys are `"a|b"` in schema order.
pub fn fidelity_report(real: &Table, synth: &Table, schema: &TableSchema) -> Result<FidelityReport> {
    let (r, s) = prepare(real, synth, schema)?;
    let name = |c: usize| schema.columns[c].name.clone();
    let cols = column_scores(&r, &s);
    let pairs = pair_scores(&r, &s);
    Ok(FidelityReport {
        shape: mean(cols.iter().copied()),
        trend: (!pairs.is_empty()).then(|| mean(pairs.iter().map(|(_, v)| *v))),
        per_column: cols.iter().enumerate().map(|(c, v)| (name(c), *v)).collect(),
        per_pair: pairs.iter().map(|((i, j), v)| (format!("{}|{}", name(*i), name(*j)), *v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tabular::infer_schema;

    fn table(header: &[&str], rows: Vec<Vec<String>>) -> Table {
        Table::new(header.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    fn mixed(rows: &[(&str, f64, f64)]) -> Table {
        table(
            &["c", "x", "y"],
            rows.iter().map(|(c, x, y)| vec![c.to_string(), x.to_string(), y.to_string()]).collect(),
        )
    }

    #[test]
    fn identical_tables_score_one() {
        let t = mixed(&[("a", 1.0, 2.0), ("b", 2.0, 1.0), ("a", 3.0, 5.0), ("c", 0.5, 0.0)]);
        let s = infer_schema(&t, 4).unwrap();
        assert_eq!(shape_score(&t, &t, &s).unwrap(), 1.0);
        assert_eq!(trend_score(&t, &t, &s).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_categories_score_zero() {
        let real = table(&["c"], vec![vec!["a".into()], vec!["b".into()]]);
        let synth = table(&["c"], vec![vec!["x".into()], vec!["y".into()]]);
        let schema = TableSchema { columns: infer_schema(&real, 2).unwrap().columns };
        let report = fidelity_report(&real, &synth, &schema).unwrap();
        assert_eq!(report.per_column["c"], 0.0);
        assert_eq!(report.trend, None);
        assert!(trend_score(&real, &synth, &schema).is_err());
    }

    #[test]
    fn correlated_vs_independent_pair() {
        let real = table(&["x", "y"], (1..=4).map(|i| vec![i.to_string(), (2 * i).to_string()]).collect());
        // exactly uncorrelated with 1, 2, 3, 4
        let synth = table(
            &["x", "y"],
            [(1, 1), (2, -1), (3, -1), (4, 1)].iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect(),
        );
        let s = infer_schema(&real, 4).unwrap();
        assert!((trend_score(&real, &synth, &s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn association_conventions() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        let g: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        assert!((correlation_ratio(&g, &[1.0, 1.0, 5.0, 5.0]) - 1.0).abs() < 1e-12);
        assert_eq!(correlation_ratio(&g, &[2.0; 4]), 0.0);
        let h: Vec<String> = ["x", "x", "y", "y"].iter().map(|s| s.to_string()).collect();
        assert!((cramers_v(&g, &h) - 1.0).abs() < 1e-12);
        assert_eq!(cramers_v(&g, &vec!["z".to_string(); 4]), 0.0);
    }

    #[test]
    fn schema_mismatch() {
        let t = mixed(&[("a", 1.0, 2.0)]);
        let other = table(&["c", "x"], vec![vec!["a".into(), "1".into()]]);
        let s = infer_schema(&t, 4).unwrap();
        assert!(shape_score(&t, &other, &s).is_err());
    }

    fn arb_rows() -> impl Strategy<Value = Vec<(String, f64, f64)>> {
        prop::collection::vec(
            (prop::sample::select(vec!["a", "b", "c"]).prop_map(str::to_owned), -20i32..20, -20i32..20)
                .prop_map(|(c, x, y)| (c, x as f64, y as f64 / 4.0)),
            2..30,
        )
    }

    fn to_table(rows: &[(String, f64, f64)]) -> Table {
        mixed(&rows.iter().map(|(c, x, y)| (c.as_str(), *x, *y)).collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn range_symmetry_and_permutation(a in arb_rows(), b in arb_rows(), shift in 0usize..30) {
            let (ta, tb) = (to_table(&a), to_table(&b));
            let schema = infer_schema(&ta, 4).unwrap();
            let shape = shape_score(&ta, &tb, &schema).unwrap();
            let trend = trend_score(&ta, &tb, &schema).unwrap();
            prop_assert!((0.0..=1.0).contains(&shape) && (0.0..=1.0).contains(&trend));
            prop_assert!((shape - shape_score(&tb, &ta, &schema).unwrap()).abs() < 1e-12);
            prop_assert!((trend - trend_score(&tb, &ta, &schema).unwrap()).abs() < 1e-12);

            let mut rotated = b.clone();
            let k = shift % rotated.len();
            rotated.rotate_left(k);
            let tr = to_table(&rotated);
            prop_assert!((shape - shape_score(&ta, &tr, &schema).unwrap()).abs() < 1e-9);
            prop_assert!((trend - trend_score(&ta, &tr, &schema).unwrap()).abs() < 1e-9);
        }
    }
}
