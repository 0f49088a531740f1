//! Delimited data files: header `t,y1,...,yd`, one observation per row.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use odebvm::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t: Vec<f64>,
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn states(&self) -> usize {
        self.y.ncols()
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(parse_err(e.position().map_or(1, |p| p.line() as usize), e.to_string())),
        None => return Err(parse_err(1, "empty file; expected header t,y1,...")),
    };
    if header.get(0) != Some("t") {
        return Err(parse_err(1, format!("header must start with 't', found {:?}", header.get(0).unwrap_or(""))));
    }
    let d = header.len() - 1;
    if d == 0 {
        return Err(parse_err(1, "header has no response columns"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("y{}", j + 1) {
            return Err(parse_err(1, format!("column {} must be named y{}, found {name:?}", j + 2, j + 1)));
        }
    }
    let mut t = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        let mut vals = Vec::with_capacity(d + 1);
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("field {} is not a number: {field:?}", k + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("field {} is not finite", k + 1)));
            }
            vals.push(v);
        }
        t.push(vals[0]);
        rows.extend_from_slice(&vals[1..]);
    }
    if t.is_empty() {
        return Err(parse_err(2, "no observations"));
    }
    let n = t.len();
    Ok(Dataset { t, y: DMatrix::from_row_slice(n, d, &rows) })
}

pub fn write_dataset<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["t".to_string()];
    header.extend((1..=data.states()).map(|j| format!("y{j}")));
    w.write_record(&header).map_err(to_io)?;
    for (i, ti) in data.t.iter().enumerate() {
        let mut rec = vec![ti.to_string()];
        rec.extend(data.y.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let data = Dataset {
            t: vec![0.125, 0.375, 0.625],
            y: DMatrix::from_row_slice(3, 2, &[1.0, 0.1 + 0.2, -3.5e-9, 2.0, 1.0 / 3.0, 7.0]),
        };
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        assert!(buf.starts_with(b"t,y1,y2\n"));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = read_dataset("t,y1\n0.1,1\n0.2,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = read_dataset("t,y1\n0.1,1\n0.2,1,4\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = read_dataset("0.1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = read_dataset("t,y2\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = read_dataset("t,y1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
    }
}
