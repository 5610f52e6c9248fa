//! CSV ingestion and number formatting shared by the commands.
//!
//! Data files carry the header `x_0..x_{dx-1}, z_0..z_{dz-1}, y`; covariate
//! files carry only the `x_*` columns. All numbers are written with 17
//! significant digits so that reading them back reproduces the exact f64.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::core::Dataset;
use crate::error::{Error, Result};

/// Format a float with 17 significant digits (exact f64 round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Ingestion {
        row,
        message: format!("column '{column}' has non-numeric value '{raw}'"),
    })
}

/// Split a data header into (x columns, z columns) after validating the
/// `x_*, z_*, y` layout.
fn validate_data_header(header: &[String]) -> Result<(usize, usize)> {
    let d_x = header.iter().take_while(|h| h.starts_with("x_")).count();
    let d_z = header.iter().skip(d_x).take_while(|h| h.starts_with("z_")).count();
    let expected: Vec<String> = (0..d_x)
        .map(|j| format!("x_{j}"))
        .chain((0..d_z).map(|j| format!("z_{j}")))
        .chain(std::iter::once("y".to_string()))
        .collect();
    if d_x == 0 || d_z == 0 || header != expected.as_slice() {
        return Err(Error::Ingestion {
            row: 0,
            message: format!(
                "header must be x_0..x_{{dx-1}}, z_0..z_{{dz-1}}, y; got [{}]",
                header.join(", ")
            ),
        });
    }
    Ok((d_x, d_z))
}

/// Read a (x, z, y) dataset from CSV.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?;
    let header: Vec<String> =
        reader.headers().map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
    if header.is_empty() || header == [""] {
        return Err(Error::Ingestion { row: 0, message: "file is empty".into() });
    }
    let (d_x, d_z) = validate_data_header(&header)?;

    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Ingestion { row, message: e.to_string() })?;
        if record.len() != d_x + d_z + 1 {
            return Err(Error::Ingestion {
                row,
                message: format!("expected {} cells, found {}", d_x + d_z + 1, record.len()),
            });
        }
        for j in 0..d_x {
            xs.push(parse_cell(&record[j], row, &header[j])?);
        }
        for j in 0..d_z {
            zs.push(parse_cell(&record[d_x + j], row, &header[d_x + j])?);
        }
        ys.push(parse_cell(&record[d_x + d_z], row, "y")?);
    }
    if ys.is_empty() {
        return Err(Error::Ingestion { row: 0, message: "no data rows".into() });
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, d_x), xs)
        .map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?;
    let z = Array2::from_shape_vec((n, d_z), zs)
        .map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?;
    Dataset::new(x, z, Array1::from_vec(ys))
}

/// Read covariate rows (`x_*` columns) from CSV. An empty or header-only
/// file yields a 0-row matrix of width `expected_dim`.
pub fn read_covariates_csv(path: &Path, expected_dim: usize) -> Result<Array2<f64>> {
    let raw = std::fs::read_to_string(path)?;
    if raw.trim().is_empty() {
        return Ok(Array2::zeros((0, expected_dim)));
    }
    let mut reader = csv::Reader::from_reader(raw.as_bytes());
    let header: Vec<String> =
        reader.headers().map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
    let expected: Vec<String> = (0..expected_dim).map(|j| format!("x_{j}")).collect();
    if header != expected.as_slice() {
        return Err(Error::InvalidInput(format!(
            "covariate header [{}] does not match the model's {expected_dim} dimensions",
            header.join(", ")
        )));
    }
    let mut cells = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Ingestion { row, message: e.to_string() })?;
        if record.len() != expected_dim {
            return Err(Error::Ingestion {
                row,
                message: format!("expected {} cells, found {}", expected_dim, record.len()),
            });
        }
        for j in 0..expected_dim {
            cells.push(parse_cell(&record[j], row, &header[j])?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, expected_dim), cells)
        .map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })
}

/// Write a dataset as CSV (used by the examples and tests).
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Persistence(e.to_string()))?;
    let header: Vec<String> = (0..data.x().ncols())
        .map(|j| format!("x_{j}"))
        .chain((0..data.z().ncols()).map(|j| format!("z_{j}")))
        .chain(std::iter::once("y".to_string()))
        .collect();
    writer.write_record(&header).map_err(|e| Error::Persistence(e.to_string()))?;
    for i in 0..data.len() {
        let record: Vec<String> = data
            .x()
            .row(i)
            .iter()
            .chain(data.z().row(i).iter())
            .chain(std::iter::once(&data.y()[i]))
            .map(|&v| fmt_f64(v))
            .collect();
        writer.write_record(&record).map_err(|e| Error::Persistence(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tmpdir();
        let path = dir.path().join("data.csv");
        let data = Dataset::new(
            array![[0.1], [std::f64::consts::PI]],
            array![[1.0, -2.0], [0.5, 1e-17]],
            array![3.0, -4.5],
        )
        .unwrap();
        write_dataset_csv(&path, &data).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back.x()[[1, 0]], std::f64::consts::PI);
        assert_eq!(back.z()[[1, 1]], 1e-17);
        assert_eq!(back.y()[1], -4.5);
    }

    #[test]
    fn non_numeric_cell_names_the_row() {
        let dir = tmpdir();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x_0,z_0,y\n1.0,2.0,3.0\n1.0,oops,3.0\n").unwrap();
        match read_dataset_csv(&path) {
            Err(Error::Ingestion { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("oops"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_an_ingestion_error() {
        let dir = tmpdir();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "x_0,z_0,y\n1.0,2.0,3.0\n1.0,2.0\n").unwrap();
        assert!(matches!(read_dataset_csv(&path), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn empty_file_is_an_ingestion_error() {
        let dir = tmpdir();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_dataset_csv(&path), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn wrong_header_order_is_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("order.csv");
        std::fs::write(&path, "z_0,x_0,y\n1.0,2.0,3.0\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());
    }

    #[test]
    fn empty_covariate_file_yields_zero_rows() {
        let dir = tmpdir();
        let path = dir.path().join("queries.csv");
        std::fs::write(&path, "").unwrap();
        let m = read_covariates_csv(&path, 1).unwrap();
        assert_eq!(m.nrows(), 0);
        assert_eq!(m.ncols(), 1);
    }

    #[test]
    fn covariate_dimension_mismatch_is_invalid_input() {
        let dir = tmpdir();
        let path = dir.path().join("queries.csv");
        std::fs::write(&path, "x_0,x_1\n1.0,2.0\n").unwrap();
        assert!(matches!(read_covariates_csv(&path, 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn fmt_f64_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -7.25, std::f64::consts::E] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
