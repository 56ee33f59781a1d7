//! Versioned binary checkpoint. Every integer and float is little-endian.
//!
//! ```text
//! magic        8 bytes  "QGCNCKPT"
//! version      u32      1
//! skeleton     u32 length + UTF-8 skeleton hash
//! config       u32 length + UTF-8 JSON of the network config
//! parameters   u32 count, then per tensor:
//!                u32 name length, UTF-8 name, u32 rows, u32 cols, rows*cols f64 row-major
//! buffers      same layout as parameters (batch-norm running statistics)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{ParamStore, QgcnConfig, QgcnError, QgcnModel};
use crate::skeleton::Skeleton;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QGCNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Names, strings and tensors above this size are rejected as corrupt.
const MAX_LEN: u32 = 1 << 28;

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_store(w: &mut impl Write, store: &ParamStore) -> io::Result<()> {
    put_u32(w, store.len() as u32)?;
    for (name, t) in store.iter() {
        put_str(w, name)?;
        put_u32(w, t.nrows() as u32)?;
        put_u32(w, t.ncols() as u32)?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint(model: &QgcnModel, w: &mut impl Write) -> Result<(), QgcnError> {
    let config = serde_json::to_string(model.config()).map_err(|e| QgcnError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_str(w, model.skeleton_hash())?;
    put_str(w, &config)?;
    put_store(w, model.params())?;
    put_store(w, model.buffers())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32, QgcnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: io::Error) -> QgcnError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        QgcnError::Checkpoint("truncated file".into())
    } else {
        QgcnError::Io(e)
    }
}

fn get_len(r: &mut impl Read) -> Result<usize, QgcnError> {
    let n = get_u32(r)?;
    if n > MAX_LEN {
        return Err(QgcnError::Checkpoint(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn get_str(r: &mut impl Read) -> Result<String, QgcnError> {
    let n = get_len(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| QgcnError::Checkpoint("invalid UTF-8".into()))
}

fn get_store(r: &mut impl Read) -> Result<ParamStore, QgcnError> {
    let count = get_len(r)?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let name = get_str(r)?;
        let rows = get_len(r)?;
        let cols = get_len(r)?;
        if rows.saturating_mul(cols) > MAX_LEN as usize {
            return Err(QgcnError::Checkpoint(format!("{name}: implausible shape {rows}x{cols}")));
        }
        let mut data = vec![0.0; rows * cols];
        let mut b = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut b).map_err(truncated)?;
            *v = f64::from_le_bytes(b);
        }
        let t = Array2::from_shape_vec((rows, cols), data).expect("length matches shape");
        store.insert(name, t);
    }
    Ok(store)
}

/// Reads a checkpoint written for `skeleton`.
pub fn read_checkpoint(r: &mut impl Read, skeleton: &Skeleton) -> Result<QgcnModel, QgcnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(QgcnError::Checkpoint("not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(QgcnError::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = get_str(r)?;
    if hash != skeleton.hash() {
        return Err(QgcnError::Checkpoint(format!(
            "written for skeleton {hash}, got {} ({})",
            skeleton.hash(),
            skeleton.name()
        )));
    }
    let config: QgcnConfig =
        serde_json::from_str(&get_str(r)?).map_err(|e| QgcnError::Checkpoint(format!("config: {e}")))?;
    let params = get_store(r)?;
    let buffers = get_store(r)?;
    let mut model = QgcnModel::new(skeleton, config)?;
    model.load_state(params, buffers)?;
    Ok(model)
}

pub fn save_checkpoint(model: &QgcnModel, path: &Path) -> Result<(), QgcnError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, skeleton: &Skeleton) -> Result<QgcnModel, QgcnError> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice(), skeleton)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let skel = Skeleton::toy5();
        let mut config = QgcnConfig::toy();
        config.seed = 42;
        let model = QgcnModel::new(&skel, config).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&mut buf.as_slice(), &skel).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.buffers(), model.buffers());
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn rejects_corruption() {
        let skel = Skeleton::toy5();
        let model = QgcnModel::new(&skel, QgcnConfig::toy()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice(), &skel), Err(QgcnError::Checkpoint(_))));

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_checkpoint(&mut bad.as_slice(), &skel).is_err());

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &short[..], &skel), Err(QgcnError::Checkpoint(_))));

        assert!(read_checkpoint(&mut buf.as_slice(), &Skeleton::major_part()).is_err());
    }
}
