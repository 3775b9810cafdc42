//! Session log CSV, one row per tick.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{Position, TickRecord};
use crate::error::{CoreError, Result};

pub const SESSION_LOG_HEADER: [&str; 11] = [
    "t",
    "human_x",
    "human_y",
    "human_active",
    "robot_x",
    "robot_y",
    "mixed_x",
    "mixed_y",
    "nelbo",
    "epochs",
    "wall_ms",
];

pub struct SessionLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> SessionLogWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(SESSION_LOG_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &TickRecord) -> Result<()> {
        let (hx, hy) = match r.human {
            Some([x, y]) => (x.to_string(), y.to_string()),
            None => (String::new(), String::new()),
        };
        self.inner.write_record([
            r.t.to_string(),
            hx,
            hy,
            u8::from(r.human_active).to_string(),
            r.robot[0].to_string(),
            r.robot[1].to_string(),
            r.mixed[0].to_string(),
            r.mixed[1].to_string(),
            r.nelbo.to_string(),
            r.epochs.to_string(),
            r.wall_ms.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(path: &Path, row: usize, name: &str, cell: &str) -> Result<T> {
    cell.trim().parse().map_err(|_| CoreError::Data {
        path: path.to_path_buf(),
        row,
        message: format!("bad {name} `{cell}`"),
    })
}

/// Reads a session log written by [`SessionLogWriter`].
pub fn read_session_log<R: Read>(input: R, path: &Path) -> Result<Vec<TickRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(SESSION_LOG_HEADER.iter().copied()) {
        return Err(CoreError::Data {
            path: PathBuf::from(path),
            row: 1,
            message: format!("expected header `{}`", SESSION_LOG_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let c = |j: usize| rec.get(j).unwrap_or("");
        let human: Option<Position> = if c(1).is_empty() {
            None
        } else {
            Some([parse(path, row, "human_x", c(1))?, parse(path, row, "human_y", c(2))?])
        };
        let active: u8 = parse(path, row, "human_active", c(3))?;
        out.push(TickRecord {
            t: parse(path, row, "t", c(0))?,
            human,
            human_active: active != 0,
            robot: [parse(path, row, "robot_x", c(4))?, parse(path, row, "robot_y", c(5))?],
            mixed: [parse(path, row, "mixed_x", c(6))?, parse(path, row, "mixed_y", c(7))?],
            nelbo: parse(path, row, "nelbo", c(8))?,
            epochs: parse(path, row, "epochs", c(9))?,
            wall_ms: parse(path, row, "wall_ms", c(10))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_roundtrip_is_exact() {
        let records = vec![
            TickRecord {
                t: 0,
                robot: [0.1, -0.2],
                human: None,
                human_active: false,
                mixed: [0.1, -0.2],
                nelbo: 12.345678901234567,
                epochs: 0,
                wall_ms: 0.5,
            },
            TickRecord {
                t: 1,
                robot: [1.0 / 3.0, -0.25],
                human: Some([0.7, 0.6]),
                human_active: true,
                mixed: [0.2, -0.15],
                nelbo: 1e-300,
                epochs: 30,
                wall_ms: 7.25,
            },
        ];
        let mut buf = Vec::new();
        {
            let mut w = SessionLogWriter::new(&mut buf).unwrap();
            for r in &records {
                w.write(r).unwrap();
            }
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,human_x,human_y,human_active,robot_x,robot_y,mixed_x,mixed_y,nelbo,epochs,wall_ms\n"));
        let back = read_session_log(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, records);
    }
}
