//! Score-table rendering in Markdown and CSV.
//!
//! Three table layouts are supported: a two-column method/BLEU comparison,
//! the five-column Char-BLEU layout (Model Variant, Trained on, Tested on,
//! Without MLM, With MLM), and a wide per-configuration table carrying all
//! three metrics on both test sets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub bleu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharBleuRow {
    pub variant: String,
    pub trained_on: String,
    pub tested_on: String,
    pub without_mlm: f64,
    pub with_mlm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharBleuTable {
    pub title: String,
    pub rows: Vec<CharBleuRow>,
}

/// One configuration row of the wide results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullRow {
    pub configuration: String,
    pub model: String,
    pub epoch: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullTable {
    pub title: String,
    /// Column headers for the numeric score columns, in row order.
    pub score_columns: Vec<String>,
    pub rows: Vec<FullRow>,
}

/// Everything the `report` command renders.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportInput {
    #[serde(default)]
    pub comparison: Option<ComparisonTable>,
    #[serde(default)]
    pub char_bleu_tables: Vec<CharBleuTable>,
    #[serde(default)]
    pub full_table: Option<FullTable>,
}

/// `f64` with shortest round-trip formatting, so stored values like 80.966
/// render exactly as written.
fn num(x: f64) -> String {
    format!("{x}")
}

pub fn render_markdown(input: &ReportInput) -> String {
    let mut out = String::new();
    if let Some(table) = &input.comparison {
        out.push_str(&format!("## {}\n\n", table.title));
        out.push_str("| Method | BLEU Score |\n|---|---|\n");
        for row in &table.rows {
            out.push_str(&format!("| {} | {} |\n", row.method, num(row.bleu)));
        }
        out.push('\n');
    }
    for table in &input.char_bleu_tables {
        out.push_str(&format!("## {}\n\n", table.title));
        out.push_str("| Model Variant | Trained on | Tested on | Without MLM | With MLM |\n|---|---|---|---|---|\n");
        for row in &table.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                row.variant,
                row.trained_on,
                row.tested_on,
                num(row.without_mlm),
                num(row.with_mlm)
            ));
        }
        out.push('\n');
    }
    if let Some(table) = &input.full_table {
        out.push_str(&format!("## {}\n\n", table.title));
        out.push_str("| Configuration | Model | Epoch |");
        for col in &table.score_columns {
            out.push_str(&format!(" {col} |"));
        }
        out.push('\n');
        out.push_str("|---|---|---|");
        out.push_str(&"---|".repeat(table.score_columns.len()));
        out.push('\n');
        for row in &table.rows {
            out.push_str(&format!("| {} | {} | {} |", row.configuration, row.model, row.epoch));
            for s in &row.scores {
                out.push_str(&format!(" {} |", num(*s)));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// CSV renderings, one `(file stem, contents)` per table present.
pub fn render_csv(input: &ReportInput) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(table) = &input.comparison {
        let mut csv = String::from("method,bleu\n");
        for row in &table.rows {
            csv.push_str(&format!("{},{}\n", csv_field(&row.method), num(row.bleu)));
        }
        out.push(("comparison".to_string(), csv));
    }
    for (i, table) in input.char_bleu_tables.iter().enumerate() {
        let mut csv = String::from("variant,trained_on,tested_on,without_mlm,with_mlm\n");
        for row in &table.rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&row.variant),
                csv_field(&row.trained_on),
                csv_field(&row.tested_on),
                num(row.without_mlm),
                num(row.with_mlm)
            ));
        }
        out.push((format!("char_bleu_{}", i + 1), csv));
    }
    if let Some(table) = &input.full_table {
        let mut csv = String::from("configuration,model,epoch");
        for col in &table.score_columns {
            csv.push_str(&format!(",{}", csv_field(col)));
        }
        csv.push('\n');
        for row in &table.rows {
            csv.push_str(&format!("{},{},{}", csv_field(&row.configuration), csv_field(&row.model), csv_field(&row.epoch)));
            for s in &row.scores {
                csv.push_str(&format!(",{}", num(*s)));
            }
            csv.push('\n');
        }
        out.push(("full_results".to_string(), csv));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A single Char-BLEU table row in Markdown, for appending one evaluation
/// result to a report by hand.
pub fn metric_row_markdown(variant: &str, trained_on: &str, tested_on: &str, without_mlm: Option<f64>, with_mlm: Option<f64>) -> String {
    let fmt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "–".to_string());
    format!("| {variant} | {trained_on} | {tested_on} | {} | {} |", fmt(without_mlm), fmt(with_mlm))
}
