//! On-disk tensor format and preview rendering.
//!
//! The cube container is self-describing: magic `FCUB`, a u16 format
//! version, a u16 rank (always 3), three u64 little-endian dimensions, and
//! a row-major band-fastest payload of little-endian 64-bit floats.
//! Write-then-read round trips are bitwise identity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fresco_core::tensor::SpectralCube;
use ndarray::{Array2, Array3};

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"FCUB";
pub const FORMAT_VERSION: u16 = 1;

pub fn write_tensor(path: &Path, cube: &SpectralCube) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let (rows, cols, bands) = cube.dim();
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&3u16.to_le_bytes()).map_err(io_err)?;
    for d in [rows, cols, bands] {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    let data = cube.data().as_slice().expect("cube payload is contiguous");
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::usage(format!("i/o failure: {e}"))
}

pub fn read_tensor(path: &Path) -> Result<SpectralCube, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    let size = file
        .metadata()
        .map(|m| m.len())
        .map_err(|e| CliError::usage(format!("cannot stat {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, 0, path)?;
    if &magic != MAGIC {
        return Err(CliError::usage(format!(
            "{}: bad magic {:02x?} at byte offset 0 (expected {:02x?})",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let version = read_u16(&mut r, 4, path)?;
    if version != FORMAT_VERSION {
        return Err(CliError::usage(format!(
            "{}: unsupported format version {version} at byte offset 4",
            path.display()
        )));
    }
    let rank = read_u16(&mut r, 6, path)?;
    if rank != 3 {
        return Err(CliError::usage(format!(
            "{}: rank {rank} at byte offset 6 (only rank 3 is supported)",
            path.display()
        )));
    }
    let mut dims = [0u64; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut buf = [0u8; 8];
        read_exact_at(&mut r, &mut buf, 8 + 8 * i as u64, path)?;
        *d = u64::from_le_bytes(buf);
    }
    // Overflow and size checks before any allocation.
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| {
            CliError::usage(format!(
                "{}: dimensions {dims:?} overflow the element count",
                path.display()
            ))
        })?;
    let payload = count.checked_mul(8).ok_or_else(|| {
        CliError::usage(format!("{}: payload size overflows", path.display()))
    })?;
    let expected = 32u64.checked_add(payload).ok_or_else(|| {
        CliError::usage(format!("{}: file size overflows", path.display()))
    })?;
    if expected != size {
        return Err(CliError::usage(format!(
            "{}: declared dimensions {dims:?} need {expected} bytes but the file has {size}",
            path.display()
        )));
    }

    let mut data = vec![0.0f64; count as usize];
    let mut buf = [0u8; 8];
    for (i, v) in data.iter_mut().enumerate() {
        read_exact_at(&mut r, &mut buf, 32 + 8 * i as u64, path)?;
        *v = f64::from_le_bytes(buf);
    }
    let array = Array3::from_shape_vec((dims[0] as usize, dims[1] as usize, dims[2] as usize), data)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    SpectralCube::from_array(array)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, path: &Path) -> Result<(), CliError> {
    r.read_exact(buf).map_err(|_| {
        CliError::usage(format!(
            "{}: truncated at byte offset {offset} (expected {} more bytes)",
            path.display(),
            buf.len()
        ))
    })
}

fn read_u16<R: Read>(r: &mut R, offset: u64, path: &Path) -> Result<u16, CliError> {
    let mut buf = [0u8; 2];
    read_exact_at(r, &mut buf, offset, path)?;
    Ok(u16::from_le_bytes(buf))
}

/// Stores a matrix as a single-band cube.
pub fn write_matrix(path: &Path, matrix: &Array2<f64>) -> Result<(), CliError> {
    let (rows, cols) = matrix.dim();
    let mut data = Array3::zeros((rows, cols, 1));
    data.index_axis_mut(ndarray::Axis(2), 0).assign(matrix);
    let cube = SpectralCube::from_array(data)
        .map_err(|e| CliError::usage(format!("matrix payload: {e}")))?;
    write_tensor(path, &cube)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, CliError> {
    let cube = read_tensor(path)?;
    if cube.bands() != 1 {
        return Err(CliError::usage(format!(
            "{}: expected a single-band matrix file, got {} bands",
            path.display(),
            cube.bands()
        )));
    }
    Ok(cube.band(0))
}

/// Stacked abundance maps as one cube (material as the band axis) plus the
/// endmember matrix (bands x materials).
pub fn write_abundances(
    dir: &Path,
    stem: &str,
    maps: &[Array2<f64>],
    endmembers: &[ndarray::Array1<f64>],
) -> Result<(), CliError> {
    let (rows, cols) = maps[0].dim();
    let mut stack = Array3::zeros((rows, cols, maps.len()));
    for (r, m) in maps.iter().enumerate() {
        stack.index_axis_mut(ndarray::Axis(2), r).assign(m);
    }
    let cube = SpectralCube::from_array(stack)
        .map_err(|e| CliError::usage(format!("abundance payload: {e}")))?;
    write_tensor(&dir.join(format!("{stem}_abundances.fcub")), &cube)?;
    let bands = endmembers[0].len();
    let mut ends = Array2::zeros((bands, endmembers.len()));
    for (r, c) in endmembers.iter().enumerate() {
        ends.column_mut(r).assign(c);
    }
    write_matrix(&dir.join(format!("{stem}_endmembers.fcub")), &ends)
}

pub fn read_abundances(
    maps_path: &Path,
    endmembers_path: &Path,
) -> Result<fresco_core::tensor::AbundanceSet, CliError> {
    let stack = read_tensor(maps_path)?;
    let ends = read_matrix(endmembers_path)?;
    let r = stack.bands();
    if ends.ncols() != r {
        return Err(CliError::usage(format!(
            "{} has {r} materials but {} has {}",
            maps_path.display(),
            endmembers_path.display(),
            ends.ncols()
        )));
    }
    let maps: Vec<Array2<f64>> = (0..r).map(|k| stack.band(k)).collect();
    let endmembers: Vec<ndarray::Array1<f64>> = (0..r).map(|k| ends.column(k).to_owned()).collect();
    fresco_core::tensor::AbundanceSet::new(maps, endmembers)
        .map_err(|e| CliError::usage(format!("abundance payload: {e}")))
}

/// 8-bit binary PPM preview from three chosen bands, each stretched to its
/// own [min, max] range.
pub fn write_ppm(path: &Path, cube: &SpectralCube, bands: (usize, usize, usize)) -> Result<(), CliError> {
    let (rows, cols, nbands) = cube.dim();
    for b in [bands.0, bands.1, bands.2] {
        if b >= nbands {
            return Err(CliError::usage(format!(
                "preview band {b} out of range (cube has {nbands})"
            )));
        }
    }
    let mut channels = Vec::new();
    for b in [bands.0, bands.1, bands.2] {
        let band = cube.band(b);
        let min = band.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = band.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (max - min).max(1e-12);
        channels.push((band, min, span));
    }
    let file = File::create(path)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{cols} {rows}\n255\n").map_err(io_err)?;
    for i in 0..rows {
        for j in 0..cols {
            for (band, min, span) in &channels {
                let v = ((band[[i, j]] - min) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                w.write_all(&[v]).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Reads the forced-zero pattern: either the literal `banding` shorthand
/// (the complement of the uniform banded response support) or a text file
/// with one `row col` pair per line.
pub fn read_omega(spec: &str, k_m: usize, k_h: usize) -> Result<Vec<(usize, usize)>, CliError> {
    if spec == "banding" {
        let p = fresco_core::degrade::build_pm(k_h, k_m)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let mut omega = Vec::new();
        for i in 0..k_m {
            for j in 0..k_h {
                if p[[i, j]] == 0.0 {
                    omega.push((i, j));
                }
            }
        }
        return Ok(omega);
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| CliError::usage(format!("cannot read zero pattern {spec}: {e}")))?;
    let mut omega = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize, CliError> {
            tok.ok_or_else(|| {
                CliError::usage(format!("{spec}:{}: expected `row col`", lineno + 1))
            })?
            .parse()
            .map_err(|_| CliError::usage(format!("{spec}:{}: expected integers", lineno + 1)))
        };
        let row = parse(parts.next())?;
        let col = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(CliError::usage(format!(
                "{spec}:{}: trailing tokens after `row col`",
                lineno + 1
            )));
        }
        omega.push((row, col));
    }
    Ok(omega)
}
