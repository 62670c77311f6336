//! Long-format CSV: one row per (participant, decision point) with header
//! `id,t,I,A,M,Y,X1,...,Xd`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Dataset, TimePoint, Trajectory};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 6] = ["id", "t", "I", "A", "M", "Y"];

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(ds, std::io::BufWriter::new(file))
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::csv(1, e.to_string()))?
        .clone();
    if header.len() < FIXED_COLUMNS.len()
        || header.iter().zip(FIXED_COLUMNS).any(|(h, want)| h != want)
    {
        return Err(Error::csv(
            1,
            format!(
                "malformed header: expected `id,t,I,A,M,Y[,X1,...]`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let dim = header.len() - FIXED_COLUMNS.len();
    for (j, h) in header.iter().skip(FIXED_COLUMNS.len()).enumerate() {
        if h != format!("X{}", j + 1) {
            return Err(Error::csv(
                1,
                format!("malformed header: column `{h}` should be `X{}`", j + 1),
            ));
        }
    }

    struct Pending {
        rows: HashMap<usize, TimePoint>,
        y: f64,
        y_line: usize,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let mut horizon = 0usize;

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::csv(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |j: usize| -> Result<f64> {
            let cell = &rec[j];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::csv(
                        line,
                        format!("non-numeric cell `{cell}` in column {}", &header[j]),
                    )
                })
        };
        let binary = |j: usize| -> Result<bool> {
            match num(j)? {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(Error::csv(
                    line,
                    format!("column {} must be 0 or 1, got {v}", &header[j]),
                )),
            }
        };
        let id = rec[0].to_string();
        let t: usize = rec[1].parse().ok().filter(|&t| t >= 1).ok_or_else(|| {
            Error::csv(
                line,
                format!("time index `{}` is not a positive integer", &rec[1]),
            )
        })?;
        let point = TimePoint::new(
            (0..dim)
                .map(|j| num(FIXED_COLUMNS.len() + j))
                .collect::<Result<_>>()?,
            binary(2)?,
            binary(3)?,
            num(4)?,
        );
        let y = num(5)?;
        horizon = horizon.max(t);

        let entry = pending.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Pending {
                rows: HashMap::new(),
                y,
                y_line: line,
            }
        });
        if entry.y != y {
            return Err(Error::csv(
                line,
                format!(
                    "inconsistent distal outcome for id `{id}`: {y} here, {} on line {}",
                    entry.y, entry.y_line
                ),
            ));
        }
        if entry.rows.insert(t, point).is_some() {
            return Err(Error::csv(
                line,
                format!("duplicate time point (id={id}, t={t})"),
            ));
        }
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut p = pending.remove(&id).expect("id recorded on first sighting");
        let mut points = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            match p.rows.remove(&t) {
                Some(pt) => points.push(pt),
                None => {
                    return Err(Error::csv(
                        0,
                        format!("missing time point (id={id}, t={t})"),
                    ));
                }
            }
        }
        trajectories.push(Trajectory::new(id, points, p.y));
    }
    Ok(Dataset::new(trajectories))
}

pub fn write_csv<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let dim = ds.covariate_dim();
    let mut header = FIXED_COLUMNS.join(",");
    for j in 1..=dim {
        header.push_str(&format!(",X{j}"));
    }
    writeln!(w, "{header}")?;
    for tr in &ds.trajectories {
        for (k, p) in tr.points.iter().enumerate() {
            write!(
                w,
                "{},{},{},{},{},{}",
                tr.id,
                k + 1,
                u8::from(p.eligible),
                u8::from(p.treated),
                p.mediator,
                tr.y
            )?;
            for x in &p.x {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "id,t,I,A,M,Y,X1\n\
        a,1,1,1,0.5,2.0,0.1\n\
        a,2,1,0,0.0,2.0,0.2\n\
        a,3,0,0,1.0,2.0,0.3\n\
        b,2,1,1,1.5,-1.0,0.0\n\
        b,1,1,0,0.5,-1.0,1.0\n\
        b,3,1,1,2.5,-1.0,2.0\n";

    #[test]
    fn reads_well_formed_file() {
        let ds = read_csv(GOOD.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.horizon(), 3);
        assert_eq!(ds.covariate_dim(), 1);
        let b = &ds.trajectories[1];
        assert_eq!(b.id, "b");
        assert_eq!(b.at(1).x, vec![1.0]);
        assert!(b.at(2).treated);
        assert!(!ds.trajectories[0].at(3).eligible);
    }

    #[test]
    fn crlf_accepted() {
        let crlf = GOOD.replace('\n', "\r\n");
        assert_eq!(
            read_csv(crlf.as_bytes()).unwrap(),
            read_csv(GOOD.as_bytes()).unwrap()
        );
    }

    #[test]
    fn inconsistent_outcome_rejected() {
        let bad = GOOD.replace("a,2,1,0,0.0,2.0", "a,2,1,0,0.0,2.5");
        let err = read_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("inconsistent distal outcome"), "{err}");
    }

    #[test]
    fn missing_time_point_rejected() {
        let bad = GOOD.replace("a,2,1,0,0.0,2.0,0.2\n", "");
        let err = read_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("missing time point"), "{err}");
        assert!(err.contains("id=a, t=2"), "{err}");
    }

    #[test]
    fn malformed_inputs_rejected() {
        let header = GOOD.replace("id,t,I,A,M,Y,X1", "id,t,A,I,M,Y,X1");
        assert!(read_csv(header.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("malformed header"));
        let cell = GOOD.replace("0.5,2.0,0.1", "abc,2.0,0.1");
        assert!(read_csv(cell.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("non-numeric"));
        let dup = format!("{GOOD}a,1,1,1,0.5,2.0,0.1\n");
        assert!(read_csv(dup.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn round_trip() {
        let ds = read_csv(GOOD.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), ds);
    }
}
