//! Closed-loop trace CSV files.
//!
//! Header `k,t,x1,...,xn,u1,...,um,V,E,V_so,K_z,dV,dVso`; reals use 17
//! significant digits, absent metrics are empty fields.

use rticert::coupled::ClosedLoopTrace;
use rticert::kv::format_value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Option<f64>,
    pub e: Option<f64>,
    pub v_so: Option<f64>,
    pub k_z: Option<f64>,
    pub dv: Option<f64>,
    pub dvso: Option<f64>,
}

pub fn header(nx: usize, nu: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "t".to_string()];
    h.extend((1..=nx).map(|i| format!("x{i}")));
    h.extend((1..=nu).map(|i| format!("u{i}")));
    h.extend(["V", "E", "V_so", "K_z", "dV", "dVso"].map(String::from));
    h
}

pub fn rows_of(trace: &ClosedLoopTrace) -> Vec<CsvRow> {
    trace
        .rows
        .iter()
        .map(|r| CsvRow {
            k: r.k,
            t: r.t,
            x: r.x.as_slice().to_vec(),
            u: r.u.as_slice().to_vec(),
            v: r.v,
            e: r.e,
            v_so: r.v_so,
            k_z: r.k_z,
            dv: r.dv,
            dvso: r.dvso,
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

pub fn write_rows(nx: usize, nu: usize, rows: &[CsvRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Runtime(format!("csv: {e}"));
    w.write_record(header(nx, nu)).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.k.to_string(), format_value(r.t)];
        rec.extend(r.x.iter().map(|v| format_value(*v)));
        rec.extend(r.u.iter().map(|v| format_value(*v)));
        rec.extend([r.v, r.e, r.v_so, r.k_z, r.dv, r.dvso].map(opt));
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

pub fn write_trace(trace: &ClosedLoopTrace) -> Result<String, CliError> {
    write_rows(trace.nx, trace.nu, &rows_of(trace))
}

/// Parses a trace file; returns `(nx, nu, rows)`.
pub fn parse(text: &str) -> Result<(usize, usize, Vec<CsvRow>), CliError> {
    let bad = |msg: String| CliError::Runtime(format!("trace csv: {msg}"));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let head: Vec<String> = reader.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    let nx = head.iter().filter(|h| h.starts_with('x')).count();
    let nu = head.iter().filter(|h| h.starts_with('u')).count();
    if head != header(nx, nu) {
        return Err(bad(format!("unexpected header {}", head.join(","))));
    }
    let real = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
    let maybe = |s: &str| if s.is_empty() { Ok(None) } else { real(s).map(Some) };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f: Vec<&str> = rec.iter().collect();
        let k = f[0].parse().map_err(|_| bad(format!("`{}` is not a step index", f[0])))?;
        let m = 2 + nx + nu;
        rows.push(CsvRow {
            k,
            t: real(f[1])?,
            x: f[2..2 + nx].iter().map(|s| real(s)).collect::<Result<_, _>>()?,
            u: f[2 + nx..m].iter().map(|s| real(s)).collect::<Result<_, _>>()?,
            v: maybe(f[m])?,
            e: maybe(f[m + 1])?,
            v_so: maybe(f[m + 2])?,
            k_z: maybe(f[m + 3])?,
            dv: maybe(f[m + 4])?,
            dvso: maybe(f[m + 5])?,
        });
    }
    Ok((nx, nu, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<CsvRow> {
        vec![
            CsvRow {
                k: 0,
                t: 0.0,
                x: vec![0.1 + 0.2, -1e-300],
                u: vec![2.0],
                v: Some(1.0 / 3.0),
                e: Some(0.0),
                v_so: None,
                k_z: Some(0.25),
                dv: Some(-7.5),
                dvso: None,
            },
            CsvRow {
                k: 1,
                t: 0.0012,
                x: vec![0.0, 0.0],
                u: vec![0.0],
                v: Some(0.0),
                e: Some(0.0),
                v_so: None,
                k_z: None,
                dv: None,
                dvso: None,
            },
        ]
    }

    #[test]
    fn header_is_fixed() {
        assert_eq!(header(2, 1).join(","), "k,t,x1,x2,u1,V,E,V_so,K_z,dV,dVso");
    }

    #[test]
    fn round_trip_is_exact() {
        let text = write_rows(2, 1, &sample()).unwrap();
        let (nx, nu, rows) = parse(&text).unwrap();
        assert_eq!((nx, nu), (2, 1));
        assert_eq!(rows, sample());
        assert!(text.lines().nth(2).unwrap().ends_with(",,,,"));
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(parse("a,b\n1,2\n").is_err());
        let text = write_rows(2, 1, &sample()).unwrap().replace("2.5000000000000000e-1", "zz");
        assert!(parse(&text).is_err());
    }
}
