//! Feature matrix file formats: headerless CSV and a little-endian binary
//! layout for large inputs, plus a content-sniffing reader.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{Domain, FeatureSet};

/// Leading bytes of the binary feature format.
pub const FEATURE_MAGIC: [u8; 8] = *b"VRSFEAT1";

/// Reads a headerless CSV of reals, one example per row.
pub fn read_features_csv(path: impl AsRef<Path>, domain: Domain) -> Result<FeatureSet> {
    let file = File::open(path)?;
    read_features_csv_from(BufReader::new(file), domain)
}

fn read_features_csv_from(reader: impl Read, domain: Domain) -> Result<FeatureSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i as u64 + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(record.len());
        for field in record.iter() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a real number: {field:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value: {field:?}"),
                });
            }
            row.push(value);
        }
        rows.push(row);
    }
    FeatureSet::from_rows(rows, domain)
}

/// Writes a headerless CSV of reals, one example per row.
pub fn write_features_csv(path: impl AsRef<Path>, features: &FeatureSet) -> Result<()> {
    let file = File::create(path)?;
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    for row in features.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&fields).map_err(io_from_csv)?;
    }
    wtr.flush()?;
    Ok(())
}

fn io_from_csv(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidFeatures(format!("csv write failed: {other:?}")),
    }
}

/// Writes the binary feature format: magic, u64 row and column counts, then
/// row-major f64 values, all little-endian.
pub fn write_features_binary(path: impl AsRef<Path>, features: &FeatureSet) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_u64::<LittleEndian>(features.len() as u64)?;
    w.write_u64::<LittleEndian>(features.dim() as u64)?;
    for row in features.rows() {
        for &v in row {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the binary feature format.
pub fn read_features_binary(path: impl AsRef<Path>, domain: Domain) -> Result<FeatureSet> {
    let file = File::open(path)?;
    read_features_binary_from(BufReader::new(file), domain)
}

fn read_features_binary_from(mut r: impl Read, domain: Domain) -> Result<FeatureSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::InvalidFeatures(
            "binary feature file has wrong magic bytes".into(),
        ));
    }
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let total = rows.checked_mul(cols).ok_or_else(|| {
        Error::InvalidFeatures(format!("declared shape {rows}x{cols} overflows"))
    })?;
    let mut data = vec![0f64; total];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    let array = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::InvalidFeatures(format!("bad shape: {e}")))?;
    FeatureSet::new(array, domain)
}

/// Reads a feature file in either format, deciding by the leading bytes.
pub fn read_features(path: impl AsRef<Path>, domain: Domain) -> Result<FeatureSet> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let mut head = [0u8; 8];
    let got = read_up_to(&mut file, &mut head)?;
    drop(file);
    if got == 8 && head == FEATURE_MAGIC {
        read_features_binary(path, domain)
    } else {
        read_features_csv(path, domain)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}
