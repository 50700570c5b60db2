//! Scene checkpoints: a small named-array binary container.
//!
//! Layout: magic `TDPT`, version u32, array count u32, then per array a
//! length-prefixed name, dtype tag (0 = f64), ndim u8, dims as u64, and the
//! row-major little-endian f64 payload. Arrays are written in a fixed order
//! so identical scenes serialize byte-identically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffmath::DTensor;

use super::{EncodingConfig, Mlp, PlaneParams, SceneError, SceneModel};

const MAGIC: &[u8; 4] = b"TDPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn write_array(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F64, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_scene(path: &Path, scene: &SceneModel) -> Result<(), SceneError> {
    let io = |e: std::io::Error| SceneError::Checkpoint(format!("{}: {e}", path.display()));
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
        ("channels".into(), vec![1], vec![scene.channels as f64]),
        (
            "enc".into(),
            vec![3],
            vec![scene.encoding.num_bands as f64, scene.encoding.include_raw as u8 as f64, scene.encoding.alpha],
        ),
        ("barrier".into(), vec![2], vec![scene.barrier_z_min, scene.barrier_beta]),
        ("plane.n".into(), vec![3], scene.plane.normal_raw.to_vec()),
        ("plane.d".into(), vec![1], vec![scene.plane.d_p]),
    ];
    for (tag, mlp) in [("img", &scene.image_mlp), ("depth", &scene.depth_mlp)] {
        for (l, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
            arrays.push((format!("{tag}.w{l}"), w.shape().to_vec(), w.data().to_vec()));
            arrays.push((format!("{tag}.b{l}"), b.shape().to_vec(), b.data().to_vec()));
        }
    }

    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, shape, data) in &arrays {
        write_array(&mut w, name, shape, data).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn load_scene(path: &Path) -> Result<SceneModel, SceneError> {
    let io = |e: std::io::Error| SceneError::Checkpoint(format!("{}: {e}", path.display()));
    let bad = |msg: &str| SceneError::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);

    let magic = read_exact_buf(&mut r, 4).map_err(io)?;
    if magic != MAGIC {
        return Err(bad("not a TDPT checkpoint"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version > VERSION {
        return Err(bad(&format!("checkpoint version {version} is newer than supported {VERSION}")));
    }
    let count = read_u32(&mut r).map_err(io)? as usize;

    let mut arrays: BTreeMap<String, DTensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(io)? as usize;
        let name = String::from_utf8(read_exact_buf(&mut r, name_len).map_err(io)?)
            .map_err(|_| bad("array name is not UTF-8"))?;
        let head = read_exact_buf(&mut r, 2).map_err(io)?;
        if head[0] != DTYPE_F64 {
            return Err(bad(&format!("unsupported dtype {} for {name}", head[0])));
        }
        let ndim = head[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = read_exact_buf(&mut r, 8).map_err(io)?;
            shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact_buf(&mut r, numel * 8).map_err(io)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = DTensor::new(shape, data).map_err(|e| bad(&format!("array {name}: {e}")))?;
        arrays.insert(name, t);
    }

    let need = |name: &str| arrays.get(name).ok_or_else(|| bad(&format!("missing array {name}")));
    let enc = need("enc")?.data().to_vec();
    let barrier = need("barrier")?.data().to_vec();
    let plane_n = need("plane.n")?.data().to_vec();
    let channels = need("channels")?.data()[0] as usize;
    let d_p = need("plane.d")?.data()[0];

    let read_mlp = |tag: &str| -> Result<Mlp, SceneError> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut l = 0;
        while let Some(w) = arrays.get(&format!("{tag}.w{l}")) {
            let b = arrays
                .get(&format!("{tag}.b{l}"))
                .ok_or_else(|| bad(&format!("missing array {tag}.b{l}")))?;
            weights.push(w.clone());
            biases.push(b.clone());
            l += 1;
        }
        if weights.is_empty() {
            return Err(bad(&format!("no layers for MLP {tag}")));
        }
        Ok(Mlp { weights, biases })
    };

    Ok(SceneModel {
        image_mlp: read_mlp("img")?,
        depth_mlp: read_mlp("depth")?,
        plane: PlaneParams { normal_raw: [plane_n[0], plane_n[1], plane_n[2]], d_p },
        encoding: EncodingConfig { num_bands: enc[0] as usize, include_raw: enc[1] != 0.0, alpha: enc[2] },
        channels,
        barrier_z_min: barrier[0],
        barrier_beta: barrier[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{color_at, init_scene, ModelConfig};

    #[test]
    fn round_trip_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.tdpt");
        let mut scene = init_scene(&ModelConfig::default(), 4, 17);
        scene.encoding.alpha = 3.25;
        scene.plane.normal_raw = [0.1, 0.2, 0.97];
        save_scene(&path, &scene).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(loaded.channels, 4);
        assert_eq!(loaded.encoding, scene.encoding);
        assert_eq!(loaded.plane, scene.plane);
        assert_eq!(loaded.barrier_beta, scene.barrier_beta);
        for l in 0..scene.image_mlp.weights.len() {
            assert_eq!(loaded.image_mlp.weights[l], scene.image_mlp.weights[l]);
            assert_eq!(loaded.image_mlp.biases[l], scene.image_mlp.biases[l]);
        }
        let k = crate::camera::Intrinsics { fx: 10.0, fy: 10.0, cx: 4.0, cy: 4.0, width: 8, height: 8 };
        assert_eq!(color_at(&loaded, &k, (2.0, 3.0)), color_at(&scene, &k, (2.0, 3.0)));
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tdpt"), dir.path().join("b.tdpt"));
        let scene = init_scene(&ModelConfig::default(), 3, 3);
        save_scene(&p1, &scene).unwrap();
        save_scene(&p2, &scene).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_future_version_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tdpt");
        std::fs::write(&path, b"TDPT\x02\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load_scene(&path).unwrap_err();
        assert!(err.to_string().contains("newer"));
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(load_scene(&path).is_err());
    }
}
