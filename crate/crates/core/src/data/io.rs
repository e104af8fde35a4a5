use std::collections::HashMap;
use std::path::Path;

use super::{preprocess, Month, PanelDataset, PreprocessConfig, QualityReport, RawPanel, RawRow, TransformCode};
use crate::error::{Error, Result};

pub const PANEL_FILE: &str = "panel.csv";
pub const MACRO_FILE: &str = "macro.csv";
pub const TRANSFORM_FILE: &str = "transforms.csv";

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_err(path: &Path, line: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        row: line as usize,
        column: column.to_string(),
        message: message.into(),
    }
}

fn opt_f64(path: &Path, line: u64, column: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, column, format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, column, "non-finite value"));
    }
    Ok(Some(v))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Read the characteristics CSV, macro CSV and optional transform map.
pub fn read_raw_panel(chars: &Path, macros: &Path, transforms: Option<&Path>) -> Result<RawPanel> {
    let mut rdr = open(chars)?;
    let header = rdr.headers()?.clone();
    let expected = ["stock_id", "month", "excess_return", "mktcap"];
    if header.len() < 4 || header.iter().take(4).ne(expected.iter().copied()) {
        return Err(parse_err(
            chars,
            1,
            "header",
            "expected stock_id,month,excess_return,mktcap,<characteristics>",
        ));
    }
    let char_names: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(parse_err(chars, line, "*", "wrong number of fields"));
        }
        let stock_id = rec[0]
            .parse()
            .map_err(|_| parse_err(chars, line, "stock_id", format!("not an integer: {:?}", &rec[0])))?;
        let month: Month = rec[1]
            .parse()
            .map_err(|e: Error| parse_err(chars, line, "month", e.to_string()))?;
        let excess_return = opt_f64(chars, line, "excess_return", &rec[2])?
            .ok_or_else(|| parse_err(chars, line, "excess_return", "missing target"))?;
        let mktcap = opt_f64(chars, line, "mktcap", &rec[3])?;
        let vals = rec
            .iter()
            .skip(4)
            .zip(&char_names)
            .map(|(s, name)| opt_f64(chars, line, name, s))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RawRow {
            stock_id,
            month,
            excess_return,
            mktcap,
            chars: vals,
        });
    }

    let mut rdr = open(macros)?;
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("month") {
        return Err(parse_err(macros, 1, "header", "expected month,<macro series>"));
    }
    let macro_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut macro_rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(parse_err(macros, line, "*", "wrong number of fields"));
        }
        let month: Month = rec[0]
            .parse()
            .map_err(|e: Error| parse_err(macros, line, "month", e.to_string()))?;
        let vals = rec
            .iter()
            .skip(1)
            .zip(&macro_names)
            .map(|(s, name)| opt_f64(macros, line, name, s))
            .collect::<Result<Vec<_>>>()?;
        macro_rows.push((month, vals));
    }

    let mut codes: HashMap<String, TransformCode> = HashMap::new();
    if let Some(path) = transforms {
        let mut rdr = open(path)?;
        let header = rdr.headers()?.clone();
        if header.iter().ne(["series", "transform_code"]) {
            return Err(parse_err(path, 1, "header", "expected series,transform_code"));
        }
        for rec in rdr.records() {
            let rec = rec?;
            let line = line_of(&rec);
            let code = rec[1]
                .parse()
                .map_err(|e: Error| parse_err(path, line, "transform_code", e.to_string()))?;
            codes.insert(rec[0].to_string(), code);
        }
    }
    let transforms = macro_names
        .iter()
        .map(|n| codes.get(n).copied().unwrap_or(TransformCode::Level))
        .collect();

    Ok(RawPanel {
        char_names,
        rows,
        macro_names,
        macro_rows,
        transforms,
    })
}

pub fn load_panel(
    chars: &Path,
    macros: &Path,
    transforms: Option<&Path>,
    cfg: &PreprocessConfig,
) -> Result<(PanelDataset, QualityReport)> {
    let raw = read_raw_panel(chars, macros, transforms)?;
    preprocess(&raw, cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Write `panel.csv`, `macro.csv` and `transforms.csv` into `dir`.
pub fn write_raw_panel(raw: &RawPanel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = writer(&dir.join(PANEL_FILE))?;
    let mut header = vec!["stock_id".to_string(), "month".into(), "excess_return".into(), "mktcap".into()];
    header.extend(raw.char_names.iter().cloned());
    w.write_record(&header)?;
    for r in &raw.rows {
        let mut rec = vec![
            r.stock_id.to_string(),
            r.month.to_string(),
            r.excess_return.to_string(),
            fmt_opt(r.mktcap),
        ];
        rec.extend(r.chars.iter().map(|v| fmt_opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(PANEL_FILE), e))?;

    let mut w = writer(&dir.join(MACRO_FILE))?;
    let mut header = vec!["month".to_string()];
    header.extend(raw.macro_names.iter().cloned());
    w.write_record(&header)?;
    for (m, vals) in &raw.macro_rows {
        let mut rec = vec![m.to_string()];
        rec.extend(vals.iter().map(|v| fmt_opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(MACRO_FILE), e))?;

    let mut w = writer(&dir.join(TRANSFORM_FILE))?;
    w.write_record(["series", "transform_code"])?;
    for (n, c) in raw.macro_names.iter().zip(&raw.transforms) {
        w.write_record([n.as_str(), c.name()])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(TRANSFORM_FILE), e))?;
    Ok(())
}

/// Persist a preprocessed panel; reload it with `PreprocessConfig::passthrough`.
pub fn save_panel(ds: &PanelDataset, dir: &Path) -> Result<()> {
    write_raw_panel(&ds.to_raw(), dir)
}
