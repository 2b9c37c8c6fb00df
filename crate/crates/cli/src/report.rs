//! Report emission: JSON with 17-significant-digit reals, RFC-4180 CSV
//! tables with LF line endings, and two-column plot series. Output is fully
//! deterministic: object keys are sorted (serde_json's BTreeMap backend) and
//! every float is written through one formatter.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde_json::ser::Formatter;
use serde_json::Value;

use crate::CliError;

/// serde_json formatter that prints every real with 17 significant digits
/// (one leading digit plus 16 after the point in scientific notation), so
/// round-tripping a report reproduces the exact f64 bit patterns.
struct Sig17;

impl Formatter for Sig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// JSON value for a float; infinities and NaN have no JSON number form, so
/// they are spelled out as strings (the counterexample sweeps report
/// overflow to +inf deliberately).
pub fn float(v: f64) -> Value {
    if v.is_finite() {
        serde_json::Number::from_f64(v).map(Value::Number).unwrap()
    } else if v.is_nan() {
        Value::String("nan".into())
    } else if v > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

pub fn floats<I: IntoIterator<Item = f64>>(vs: I) -> Value {
    Value::Array(vs.into_iter().map(float).collect())
}

/// Optional float for report fields that may be absent (errored sweep rows).
pub fn opt_float(v: Option<f64>) -> Value {
    v.map(float).unwrap_or(Value::Null)
}

/// CSV cell with the same 17-significant-digit convention; empty for None.
pub fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn open_sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => Ok(Box::new(File::create(p)?)),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

/// Writes the report JSON (trailing newline) to `--out` or stdout.
pub fn write_json(value: &Value, out: Option<&Path>) -> Result<(), CliError> {
    let mut sink = open_sink(out)?;
    let mut ser = serde_json::Serializer::with_formatter(&mut sink, Sig17);
    serde::Serialize::serialize(value, &mut ser)
        .map_err(|e| CliError::Io(io::Error::other(e)))?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Writes an RFC-4180 table (LF line endings). Header and rows are joined
/// with commas; the cells this tool emits never need quoting.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut sink = File::create(path)?;
    sink.write_all(header.join(",").as_bytes())?;
    sink.write_all(b"\n")?;
    for row in rows {
        sink.write_all(row.join(",").as_bytes())?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes a two-column plot series (abscissa, ordinate), space-separated.
pub fn write_plot(path: &Path, series: &[(f64, Option<f64>)]) -> Result<(), CliError> {
    let mut sink = File::create(path)?;
    for (x, y) in series {
        match y {
            Some(y) => writeln!(sink, "{x:.16e} {y:.16e}")?,
            None => writeln!(sink, "{x:.16e} nan")?,
        }
    }
    Ok(())
}
