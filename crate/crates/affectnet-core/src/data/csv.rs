//! Per-frame prediction/label CSV files.
//!
//! Fixed header, comma separation, no quoting. Label files may carry the
//! absent-annotation sentinel `-`; a task is present only when all of its
//! fields are (both valence and arousal, all eight action units). Prediction
//! files must be complete. Floats are written in shortest round-trip form,
//! so loading and re-writing a canonical file is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{NUM_AUS, NUM_EXPRESSIONS};
use crate::objectives::BatchLabels;

pub const CSV_HEADER: &str = "frame_id,valence,arousal,au0,au1,au2,au3,au4,au5,au6,au7,expr";

const FIELDS: usize = 12;

/// One annotated frame; `None` marks an absent task.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub frame_id: String,
    pub va: Option<(f32, f32)>,
    pub au: Option<[u8; NUM_AUS]>,
    pub expr: Option<usize>,
}

impl LabelRecord {
    pub(crate) fn from_labels(frame_id: &str, labels: &BatchLabels, i: usize) -> LabelRecord {
        LabelRecord {
            frame_id: frame_id.to_string(),
            va: labels.mask_va[i].then(|| (labels.va[i * 2], labels.va[i * 2 + 1])),
            au: labels.mask_au[i].then(|| {
                let mut out = [0u8; NUM_AUS];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = labels.au[i * NUM_AUS + k] as u8;
                }
                out
            }),
            expr: labels.mask_expr[i].then(|| labels.expr[i]),
        }
    }
}

/// One predicted frame: bounded valence/arousal, per-unit probabilities in
/// [0,1], a hard expression class.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub frame_id: String,
    pub valence: f32,
    pub arousal: f32,
    pub au_scores: [f32; NUM_AUS],
    pub expr: usize,
}

struct Ctx<'a> {
    path: &'a str,
    line: usize,
}

impl Ctx<'_> {
    fn err(&self, message: String) -> Error {
        Error::Csv {
            path: self.path.to_string(),
            line: self.line,
            message,
        }
    }
}

fn split_line<'a>(ctx: &Ctx, line: &'a str) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != FIELDS {
        return Err(ctx.err(format!(
            "expected {FIELDS} fields, got {}",
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_bounded(ctx: &Ctx, name: &str, raw: &str, lo: f32, hi: f32) -> Result<f32> {
    let value: f32 = raw
        .parse()
        .map_err(|_| ctx.err(format!("field {name}: '{raw}' is not a number")))?;
    if !value.is_finite() || value < lo || value > hi {
        return Err(ctx.err(format!(
            "field {name}: {value} outside [{lo},{hi}]"
        )));
    }
    Ok(value)
}

fn parse_expr(ctx: &Ctx, raw: &str) -> Result<usize> {
    let value: usize = raw
        .parse()
        .map_err(|_| ctx.err(format!("field expr: '{raw}' is not a class index")))?;
    if value >= NUM_EXPRESSIONS {
        return Err(ctx.err(format!(
            "field expr: {value} outside [0,{}]",
            NUM_EXPRESSIONS - 1
        )));
    }
    Ok(value)
}

fn read_rows(path: &Path) -> Result<(String, Vec<(usize, String)>)> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Csv {
            path: display,
            line: 1,
            message: "empty file".into(),
        });
    };
    if header != CSV_HEADER {
        return Err(Error::Csv {
            path: display,
            line: 1,
            message: format!("header must be exactly '{CSV_HEADER}'"),
        });
    }
    let rows = lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    Ok((display, rows))
}

fn check_unique(ctx: &Ctx, seen: &mut std::collections::HashSet<String>, id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(ctx.err("empty frame_id".into()));
    }
    if !seen.insert(id.to_string()) {
        return Err(ctx.err(format!("duplicate frame_id '{id}'")));
    }
    Ok(())
}

pub fn load_labels_csv(path: &Path) -> Result<Vec<LabelRecord>> {
    let (display, rows) = read_rows(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let ctx = Ctx {
            path: &display,
            line,
        };
        let f = split_line(&ctx, &row)?;
        check_unique(&ctx, &mut seen, f[0])?;

        let va = match (f[1], f[2]) {
            ("-", "-") => None,
            ("-", _) | (_, "-") => {
                return Err(ctx.err(
                    "valence and arousal must both be present or both '-'".into(),
                ))
            }
            (v, a) => Some((
                parse_bounded(&ctx, "valence", v, -1.0, 1.0)?,
                parse_bounded(&ctx, "arousal", a, -1.0, 1.0)?,
            )),
        };

        let au_fields = &f[3..3 + NUM_AUS];
        let absent = au_fields.iter().filter(|v| **v == "-").count();
        let au = match absent {
            0 => {
                let mut bits = [0u8; NUM_AUS];
                for (k, raw) in au_fields.iter().enumerate() {
                    bits[k] = match *raw {
                        "0" => 0,
                        "1" => 1,
                        other => {
                            return Err(ctx.err(format!(
                                "field au{k}: '{other}' is not 0 or 1"
                            )))
                        }
                    };
                }
                Some(bits)
            }
            n if n == NUM_AUS => None,
            _ => {
                return Err(ctx.err(
                    "action units must all be present or all '-'".into(),
                ))
            }
        };

        let expr = match f[11] {
            "-" => None,
            raw => Some(parse_expr(&ctx, raw)?),
        };

        if va.is_none() && au.is_none() && expr.is_none() {
            return Err(ctx.err("row has no annotated task".into()));
        }
        out.push(LabelRecord {
            frame_id: f[0].to_string(),
            va,
            au,
            expr,
        });
    }
    Ok(out)
}

pub fn load_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let (display, rows) = read_rows(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let ctx = Ctx {
            path: &display,
            line,
        };
        let f = split_line(&ctx, &row)?;
        check_unique(&ctx, &mut seen, f[0])?;
        let valence = parse_bounded(&ctx, "valence", f[1], -1.0, 1.0)?;
        let arousal = parse_bounded(&ctx, "arousal", f[2], -1.0, 1.0)?;
        let mut au_scores = [0.0f32; NUM_AUS];
        for (k, s) in au_scores.iter_mut().enumerate() {
            *s = parse_bounded(&ctx, &format!("au{k}"), f[3 + k], 0.0, 1.0)?;
        }
        let expr = parse_expr(&ctx, f[11])?;
        out.push(PredictionRecord {
            frame_id: f[0].to_string(),
            valence,
            arousal,
            au_scores,
            expr,
        });
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.frame_id);
        match r.va {
            Some((v, a)) => {
                let _ = write!(out, ",{v},{a}");
            }
            None => out.push_str(",-,-"),
        }
        match r.au {
            Some(bits) => {
                for b in bits {
                    let _ = write!(out, ",{b}");
                }
            }
            None => out.push_str(&",-".repeat(NUM_AUS)),
        }
        match r.expr {
            Some(e) => {
                let _ = writeln!(out, ",{e}");
            }
            None => out.push_str(",-\n"),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{}", r.frame_id, r.valence, r.arousal);
        for s in r.au_scores {
            let _ = write!(out, ",{s}");
        }
        let _ = writeln!(out, ",{}", r.expr);
    }
    fs::write(path, out)?;
    Ok(())
}
