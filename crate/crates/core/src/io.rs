//! Sample-set files: CSV with one point per row, and a little-endian binary
//! format (`ERSAMPLE` magic, `u64` dimension, `u64` count, then the points
//! as `f64` values in row-major order).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::PointMatrix;

pub const BINARY_MAGIC: &[u8; 8] = b"ERSAMPLE";

pub fn write_csv<W: Write>(points: &PointMatrix, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in points.rows() {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<PointMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut dim = None;
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = i + 1;
        if *dim.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim.unwrap_or(0), rec.len()),
            });
        }
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
    }
    let dim = dim.ok_or(Error::Parse {
        line: 0,
        message: "no data rows".into(),
    })?;
    PointMatrix::new(dim, data)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_binary<W: Write>(points: &PointMatrix, mut out: W) -> Result<()> {
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&(points.dim() as u64).to_le_bytes())?;
    out.write_all(&(points.len() as u64).to_le_bytes())?;
    for v in points.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<PointMatrix> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: "bad magic number".into(),
        });
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let d = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(n.saturating_mul(d).min(1 << 28));
    for _ in 0..n * d {
        input.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    PointMatrix::new(d, data)
}

/// Reads either format, choosing by the `.csv` extension.
pub fn read_points(path: &Path) -> Result<PointMatrix> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    if path.extension().is_some_and(|e| e == "csv") {
        read_csv(file)
    } else {
        read_binary(file)
    }
}

/// Writes either format, choosing by the `.csv` extension.
pub fn write_points(points: &PointMatrix, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if path.extension().is_some_and(|e| e == "csv") {
        write_csv(points, file)
    } else {
        write_binary(points, file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> PointMatrix {
        PointMatrix::from_rows(&[vec![1.5, -2.0, 1e-300], vec![0.1, 3.0, -7.25]]).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_csv(&pts(), &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), pts());
    }

    #[test]
    fn binary_round_trip() {
        let mut buf = Vec::new();
        write_binary(&pts(), &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 6 * 8);
        assert_eq!(read_binary(buf.as_slice()).unwrap(), pts());
        buf[0] = b'X';
        assert!(matches!(read_binary(buf.as_slice()), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_errors_carry_lines() {
        let err = read_csv("1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        assert!(matches!(read_csv("".as_bytes()), Err(Error::Parse { .. })));
    }
}
