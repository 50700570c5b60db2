//! OBJ and PFM writers/readers.
//!
//! OBJ: ASCII `v`/`f` records with 1-based indices; per-vertex colors, when
//! present, extend each `v` line (the common viewer extension).
//!
//! PFM (grayscale): `Pf\n<width> <height>\n-1.0\n` followed by f32 rows,
//! bottom-up, little-endian (the negative scale marks endianness). Invalid
//! pixels are stored as 0, which is outside the valid-depth domain.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DepthMap, EvalError, Mesh};

pub fn export_obj(mesh: &Mesh, path: &Path) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    if let Some(colors) = &mesh.colors {
        assert_eq!(colors.len(), mesh.vertices.len());
        for (v, c) in mesh.vertices.iter().zip(colors) {
            writeln!(w, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]).map_err(io)?;
        }
    } else {
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2]).map_err(io)?;
        }
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn export_pfm(depth: &DepthMap, path: &Path) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(w, "Pf\n{} {}\n-1.0\n", depth.width, depth.height).map_err(io)?;
    // Bottom-up rows.
    for i in (0..depth.height).rev() {
        for j in 0..depth.width {
            let v = if depth.is_valid(i, j) { depth.at(i, j) as f32 } else { 0.0_f32 };
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn import_pfm(path: &Path) -> Result<DepthMap, EvalError> {
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;

    // Header: three whitespace-separated tokens after the magic.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, EvalError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EvalError::BadPfm("truncated header".into()));
        }
        // Exactly one whitespace char terminates the final header token.
        pos += 1;
        Ok(String::from_utf8_lossy(&bytes[start..pos - 1]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "Pf" {
        return Err(EvalError::BadPfm(format!("magic {magic:?}, expected \"Pf\" (grayscale)")));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| EvalError::BadPfm("bad width".into()))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| EvalError::BadPfm("bad height".into()))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| EvalError::BadPfm("bad scale".into()))?;
    if width == 0 || height == 0 {
        return Err(EvalError::BadPfm("zero dimension".into()));
    }
    let little_endian = scale < 0.0;
    let need = width * height * 4;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(EvalError::BadPfm(format!("payload {} bytes, need {need}", data.len())));
    }

    let mut depths = vec![0.0f64; width * height];
    for row in 0..height {
        // PFM rows are bottom-up.
        let i = height - 1 - row;
        for j in 0..width {
            let off = (row * width + j) * 4;
            let raw: [u8; 4] = data[off..off + 4].try_into().unwrap();
            let v = if little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            depths[i * width + j] = v as f64;
        }
    }
    Ok(DepthMap::new(width, height, depths))
}
