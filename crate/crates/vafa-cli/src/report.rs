//! Deterministic report serialization: a minimal ordered JSON writer and
//! fixed-column CSV rows.
//!
//! Floats use Rust's shortest round-trip formatting, so identical numbers
//! always serialize to identical bytes; non-finite values are forbidden
//! (use `Json::Null` via `opt_num`). report.json carries no timestamps or
//! wall-clock fields, which keeps re-runs byte-identical.

use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub enum Json {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<Json>),
    Obj(Vec<(String, Json)>),
}

impl Json {
    pub fn obj() -> Json {
        Json::Obj(Vec::new())
    }

    pub fn push(&mut self, key: &str, value: Json) -> &mut Json {
        match self {
            Json::Obj(fields) => fields.push((key.to_string(), value)),
            _ => panic!("push on non-object"),
        }
        self
    }

    pub fn opt_num(v: Option<f64>) -> Json {
        match v {
            Some(x) => Json::Num(x),
            None => Json::Null,
        }
    }

    pub fn num_arr(values: &[f64]) -> Json {
        Json::Arr(values.iter().map(|&v| Json::Num(v)).collect())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }

    fn write(&self, out: &mut String, indent: usize) {
        match self {
            Json::Null => out.push_str("null"),
            Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Json::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Json::Num(v) => {
                assert!(v.is_finite(), "non-finite {v} in report; use opt_num");
                let _ = write!(out, "{v}");
            }
            Json::Str(s) => write_escaped(out, s),
            Json::Arr(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push(' ');
                    item.write(out, indent);
                }
                out.push_str(" ]");
            }
            Json::Obj(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push_str("{\n");
                let pad = "  ".repeat(indent + 1);
                for (i, (k, v)) in fields.iter().enumerate() {
                    out.push_str(&pad);
                    write_escaped(out, k);
                    out.push_str(": ");
                    v.write(out, indent + 1);
                    if i + 1 < fields.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                out.push_str(&"  ".repeat(indent));
                out.push('}');
            }
        }
    }
}

fn write_escaped(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Fixed-column CSV writer. Column order is part of the artifact contract.
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        Csv { text: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, cells: &[CsvCell]) {
        assert_eq!(cells.len(), self.columns, "csv row width mismatch");
        let joined: Vec<String> = cells.iter().map(|c| c.render()).collect();
        self.text.push_str(&joined.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

pub enum CsvCell {
    Str(String),
    Int(i64),
    Num(f64),
    OptNum(Option<f64>),
}

impl CsvCell {
    fn render(&self) -> String {
        match self {
            CsvCell::Str(s) => {
                assert!(!s.contains(',') && !s.contains('\n'), "csv cell needs no quoting");
                s.clone()
            }
            CsvCell::Int(i) => i.to_string(),
            CsvCell::Num(v) => {
                assert!(v.is_finite());
                format!("{v}")
            }
            CsvCell::OptNum(Some(v)) => {
                assert!(v.is_finite());
                format!("{v}")
            }
            CsvCell::OptNum(None) => String::new(),
        }
    }
}
