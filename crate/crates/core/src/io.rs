//! File formats: delimited text for columns, observations and tables, and a
//! small versioned little-endian binary container for covariances, CVT
//! specs, grid states and 3-D fields.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::covariance::{CvtSpec, VerticalCovariance};
use crate::error::{Error, Result};
use crate::thermo::AtmosColumn;
use crate::toy_model::GridState;
use crate::var1d::LightningObservation;

pub const FORMAT_VERSION: u32 = 1;
pub const COVARIANCE_MAGIC: &[u8; 8] = b"LTDACOV\0";
pub const CVT_MAGIC: &[u8; 8] = b"LTDACVT\0";
pub const GRID_MAGIC: &[u8; 8] = b"LTDAGRD\0";
pub const FIELD_MAGIC: &[u8; 8] = b"LTDAFLD\0";

#[derive(Debug, Serialize, Deserialize)]
struct ColumnRow {
    pressure_pa: f64,
    temperature_k: f64,
    mixing_ratio_kgkg: f64,
    height_m: f64,
}

pub fn write_column_csv<W: Write>(column: &AtmosColumn<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for k in 0..column.n_levels() {
        w.serialize(ColumnRow {
            pressure_pa: column.pressure()[k],
            temperature_k: column.temperature()[k],
            mixing_ratio_kgkg: column.mixing_ratio()[k],
            height_m: column.height()[k],
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Surface-first rows; the header is required.
pub fn read_column_csv<R: Read>(input: R) -> Result<AtmosColumn<f64>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let (mut p, mut t, mut q, mut z) = (vec![], vec![], vec![], vec![]);
    for row in r.deserialize::<ColumnRow>() {
        let row = row?;
        p.push(row.pressure_pa);
        t.push(row.temperature_k);
        q.push(row.mixing_ratio_kgkg);
        z.push(row.height_m);
    }
    AtmosColumn::new(p, t, q, z)
}

pub fn load_column(path: &Path) -> Result<AtmosColumn<f64>> {
    read_column_csv(File::open(path)?)
}

pub fn save_column(column: &AtmosColumn<f64>, path: &Path) -> Result<()> {
    write_column_csv(column, File::create(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    i: usize,
    j: usize,
    time_min: f64,
    flash_rate: f64,
}

/// Rows of `i,j,time_min,flash_rate`. Every observation gets `sigma0`.
pub fn read_observations_csv<R: Read>(input: R, sigma0: f64) -> Result<Vec<LightningObservation>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize::<ObservationRow>() {
        let row = row?;
        let obs = LightningObservation { sigma0, ..LightningObservation::new(row.i, row.j, row.flash_rate, row.time_min) };
        obs.validate()?;
        out.push(obs);
    }
    Ok(out)
}

pub fn write_observations_csv<W: Write>(obs: &[LightningObservation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for o in obs {
        w.serialize(ObservationRow { i: o.i, j: o.j, time_min: o.time_min, flash_rate: o.flash_rate })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_observations(path: &Path, sigma0: f64) -> Result<Vec<LightningObservation>> {
    read_observations_csv(File::open(path)?, sigma0)
}

pub fn save_observations(obs: &[LightningObservation], path: &Path) -> Result<()> {
    write_observations_csv(obs, File::create(path)?)
}

/// Forecast-difference samples, one headerless row of level values each.
pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    r.deserialize::<Vec<f64>>().map(|row| Ok(row?)).collect()
}

pub fn write_samples_csv<W: Write>(samples: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in samples {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    fn header(inner: W, magic: &[u8; 8]) -> Result<Self> {
        let mut w = Self { inner };
        w.inner.write_all(magic)?;
        w.inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        Ok(w)
    }
    fn count(&mut self, n: usize) -> Result<()> {
        self.inner.write_all(&(n as u64).to_le_bytes())?;
        Ok(())
    }
    fn values<'a>(&mut self, v: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for x in v {
            self.inner.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    fn header(inner: R, magic: &[u8; 8]) -> Result<Self> {
        let mut r = Self { inner };
        let mut found = [0u8; 8];
        r.inner.read_exact(&mut found)?;
        if &found != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&found)
            )));
        }
        let mut v = [0u8; 4];
        r.inner.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        Ok(r)
    }
    fn count(&mut self) -> Result<usize> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("count overflows usize".into()))
    }
    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?];
        self.inner.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }
    fn end(mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after container payload".into())),
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Magic, version, n_levels, n_modes (= n_levels), then the covariance
/// matrix row-major.
pub fn write_covariance<W: Write>(cov: &VerticalCovariance, out: W) -> Result<()> {
    let n = cov.n_levels();
    let mut w = BinWriter::header(out, COVARIANCE_MAGIC)?;
    w.count(n)?;
    w.count(n)?;
    w.values(&row_major(cov.matrix()))?;
    w.finish()
}

pub fn read_covariance<R: Read>(input: R) -> Result<VerticalCovariance> {
    let mut r = BinReader::header(input, COVARIANCE_MAGIC)?;
    let n = r.count()?;
    let m = r.count()?;
    if m != n {
        return Err(Error::Format(format!("covariance container with {n} levels but {m} modes")));
    }
    let data = r.values(n * n)?;
    r.end()?;
    VerticalCovariance::from_matrix(DMatrix::from_row_slice(n, n, &data))
}

/// Magic, version, n_levels, n_modes, filter passes, then the vertical
/// square root (n_levels x n_modes row-major), the horizontal lengthscale
/// and the per-level variance scale.
pub fn write_cvt<W: Write>(spec: &CvtSpec, out: W) -> Result<()> {
    spec.validate()?;
    let mut w = BinWriter::header(out, CVT_MAGIC)?;
    w.count(spec.n_levels())?;
    w.count(spec.n_modes())?;
    w.count(spec.filter_passes)?;
    w.values(&row_major(&spec.vertical_sqrt))?;
    w.values(&[spec.horizontal_lengthscale])?;
    w.values(&spec.variance_scale)?;
    w.finish()
}

pub fn read_cvt<R: Read>(input: R) -> Result<CvtSpec> {
    let mut r = BinReader::header(input, CVT_MAGIC)?;
    let n = r.count()?;
    let m = r.count()?;
    let passes = r.count()?;
    let sqrt = r.values(n * m)?;
    let lengthscale = r.values(1)?[0];
    let variance_scale = r.values(n)?;
    r.end()?;
    let spec = CvtSpec {
        vertical_sqrt: DMatrix::from_row_slice(n, m, &sqrt),
        horizontal_lengthscale: lengthscale,
        filter_passes: passes,
        variance_scale,
    };
    spec.validate()?;
    Ok(spec)
}

/// Magic, version, n_levels, ny, nx, pressure, height, temperature and
/// mixing ratio (level, y, x order).
pub fn write_grid<W: Write>(state: &GridState, out: W) -> Result<()> {
    let (nl, ny, nx) = state.shape();
    let mut w = BinWriter::header(out, GRID_MAGIC)?;
    w.count(nl)?;
    w.count(ny)?;
    w.count(nx)?;
    w.values(state.pressure())?;
    w.values(state.height())?;
    w.values(state.temperature.iter())?;
    w.values(state.mixing_ratio.iter())?;
    w.finish()
}

pub fn read_grid<R: Read>(input: R) -> Result<GridState> {
    let mut r = BinReader::header(input, GRID_MAGIC)?;
    let (nl, ny, nx) = (r.count()?, r.count()?, r.count()?);
    let pressure = r.values(nl)?;
    let height = r.values(nl)?;
    let size = nl * ny * nx;
    let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
    let temperature = Array3::from_shape_vec((nl, ny, nx), r.values(size)?).map_err(shape_err)?;
    let mixing_ratio = Array3::from_shape_vec((nl, ny, nx), r.values(size)?).map_err(shape_err)?;
    r.end()?;
    GridState::new(pressure, height, temperature, mixing_ratio)
}

/// Magic, version, three dimensions, then the values in logical order.
pub fn write_field<W: Write>(field: &Array3<f64>, out: W) -> Result<()> {
    let (a, b, c) = field.dim();
    let mut w = BinWriter::header(out, FIELD_MAGIC)?;
    w.count(a)?;
    w.count(b)?;
    w.count(c)?;
    w.values(field.iter())?;
    w.finish()
}

pub fn read_field<R: Read>(input: R) -> Result<Array3<f64>> {
    let mut r = BinReader::header(input, FIELD_MAGIC)?;
    let (a, b, c) = (r.count()?, r.count()?, r.count()?);
    let data = r.values(a * b * c)?;
    r.end()?;
    Array3::from_shape_vec((a, b, c), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_with<T: ?Sized>(value: &T, path: &Path, write: impl Fn(&T, BufWriter<File>) -> Result<()>) -> Result<()> {
    write(value, BufWriter::new(File::create(path)?))
}

pub fn load_with<T>(path: &Path, read: impl Fn(BufReader<File>) -> Result<T>) -> Result<T> {
    read(BufReader::new(File::open(path)?))
}

pub fn save_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
