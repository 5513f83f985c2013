use std::fs;
use std::io::Write;
use std::path::Path;

use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SBCK";
const VERSION: u32 = 1;

/// Serializes named tensors: magic, version, then one record per tensor
/// (`u32` name length, name, `u32` rank, `u64` extents, `f64` payload), all
/// little-endian.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.count() * 8 + store.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(
                path,
                format!("{name}: implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::format(path, format!("{name}: bad extents {shape:?}")))?;
        let data: Vec<f64> = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = if rank == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?
        };
        if store.get(&name).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
        store.insert(name, t);
    }
    Ok(store)
}

/// Writes to a temporary file in the same directory, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Elementwise mean of every named tensor over the last `k` stores.
pub fn average_stores(stores: &[ParamStore], k: usize) -> Result<ParamStore> {
    if k == 0 || stores.len() < k {
        return Err(Error::invalid(
            "average_checkpoints",
            format!("need {k} checkpoints, have {}", stores.len()),
        ));
    }
    let last = &stores[stores.len() - k..];
    let first = &last[0];
    let mut out = ParamStore::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0; t.numel()];
        for s in last {
            let other = s.get(name).ok_or_else(|| {
                Error::invalid("average_checkpoints", format!("missing tensor {name}"))
            })?;
            if other.shape() != t.shape() {
                return Err(Error::shape(
                    "average_checkpoints",
                    t.shape(),
                    other.shape(),
                ));
            }
            for (a, v) in acc.iter_mut().zip(other.data()) {
                *a += v;
            }
        }
        let inv = k as f64;
        let data: Vec<f64> = acc.into_iter().map(|a| a / inv).collect();
        let avg = if t.rank() == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(t.shape().to_vec(), data)?
        };
        out.insert(name, avg);
    }
    for s in last {
        if s.len() != first.len() {
            return Err(Error::invalid(
                "average_checkpoints",
                "checkpoints hold different tensor names",
            ));
        }
    }
    Ok(out)
}

/// Loads `paths` and averages the last `k`. Optimizer state is dropped.
pub fn average_checkpoints(paths: &[impl AsRef<Path>], k: usize) -> Result<ParamStore> {
    if k == 0 || paths.len() < k {
        return Err(Error::invalid(
            "average_checkpoints",
            format!("need {k} checkpoints, have {}", paths.len()),
        ));
    }
    let stores = paths[paths.len() - k..]
        .iter()
        .map(|p| {
            let mut s = load_checkpoint(p.as_ref())?;
            s.split_off_prefix(super::OPTIM_PREFIX);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    average_stores(&stores, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x.sbck");
        assert!(decode_checkpoint(b"NOPE\x01\0\0\0", p).is_err());
        assert!(decode_checkpoint(b"SBCK\x02\0\0\0", p).is_err());
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(&[1.0, 2.0]));
        let bytes = encode_checkpoint(&s);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
        assert_eq!(decode_checkpoint(&bytes, p).unwrap(), s);
    }

    #[test]
    fn three_way_mean_by_hand() {
        let mk = |v: [f64; 2]| {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::vector(&v));
            s
        };
        let stores = [mk([1.0, -2.0]), mk([2.0, 4.0]), mk([6.0, 1.0])];
        let avg = average_stores(&stores, 3).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[3.0, 1.0]);
        let avg2 = average_stores(&stores, 2).unwrap();
        assert_eq!(avg2.get("w").unwrap().data(), &[4.0, 2.5]);
        assert!(average_stores(&stores, 4).is_err());
    }
}
