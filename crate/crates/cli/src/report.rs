//! Merging per-seed metric CSVs into `mean ± std` tables.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// A row of either an evaluation report or an ablation table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MetricRow {
    #[serde(default)]
    pub variant: Option<String>,
    pub method: String,
    pub landscape: String,
    pub seed: u64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SR_M")]
    pub sr_m: f64,
    pub mc_at_080: f64,
    pub entropy: f64,
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<MetricRow>, CliError> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn two_places(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// `"0.99 ± 0.01"`.
pub fn format_mean_std(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{} ± {}", two_places(m), two_places(s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub method: String,
    pub landscape: String,
    pub seeds: usize,
    #[serde(rename = "SR")]
    pub sr: String,
    #[serde(rename = "SR_M")]
    pub sr_m: String,
    pub mc_at_080: String,
    pub entropy: String,
}

/// Groups by `(variant, method, landscape)` in first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.variant.clone().unwrap_or_default(),
            r.method.clone(),
            r.landscape.clone(),
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&MetricRow) -> f64| format_mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                seeds: g.len(),
                sr: col(|r| r.sr),
                sr_m: col(|r| r.sr_m),
                mc_at_080: col(|r| r.mc_at_080),
                entropy: col(|r| r.entropy),
                variant: key.0,
                method: key.1,
                landscape: key.2,
            }
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], out: &mut Vec<u8>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The same table as Markdown.
pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| variant | method | landscape | seeds | SR | SR_M | mc@0.8 | entropy |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.variant, r.method, r.landscape, r.seeds, r.sr, r.sr_m, r.mc_at_080, r.entropy
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_seed_example() {
        assert_eq!(format_mean_std(&[0.98, 1.0, 1.0]), "0.99 ± 0.01");
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(format_mean_std(&[-0.001, 0.001]), "0.00 ± 0.00");
    }

    #[test]
    fn groups_eval_and_ablation_rows() {
        let eval = "method,landscape,seed,SR,SR_M,mc_at_080,entropy\n\
                    RES[BMD],G1,0,0.98,0.98,4,1\nRES[BMD],G1,1,1,1,4,1\nDSRL,G1,0,1,0.25,1,0\n";
        let abl = "variant,method,landscape,seed,SR,SR_M,mc_at_080,entropy\n\
                   full,RES[BMD],G1,0,1,1,4,1\n";
        let mut rows = read_rows(eval.as_bytes()).unwrap();
        rows.extend(read_rows(abl.as_bytes()).unwrap());
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].seeds, s[0].sr.as_str()), (2, "0.99 ± 0.01"));
        assert_eq!(s[1].mc_at_080, "1.00 ± 0.00");
        assert_eq!(s[2].variant, "full");
    }
}
