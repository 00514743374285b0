//! Binary checkpoint format.
//!
//! Layout: magic `DTDN`, format version `u32`, manifest length `u32` +
//! manifest JSON (config, version, seed, config hash), array count `u32`,
//! then per array: name (`u32` length + UTF-8), dtype tag (`0x01` = f64),
//! rank `u8`, dims as `u32`, and the values as little-endian `f64`. All
//! integers are little-endian. Loading rebuilds the network from the
//! embedded config and overwrites every parameter bit-exactly, so a loaded
//! network reproduces the saved one's outputs bit for bit.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_network, fnv1a64, Network, NetworkConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DTDN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0x01;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    config_hash: u64,
    config: NetworkConfig,
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);

    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        seed: net.seed(),
        config_hash: net.config_hash(),
        config: net.config().clone(),
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::checkpoint(format!("manifest: {e}")))?;
    w.write_u32::<LittleEndian>(manifest_json.len() as u32)?;
    w.write_all(&manifest_json)?;

    let shapes = net.param_shapes();
    w.write_u32::<LittleEndian>(shapes.len() as u32)?;
    let mut arrays: Vec<(String, Vec<f64>)> = Vec::with_capacity(shapes.len());
    net.visit_params(|name, vals| arrays.push((name.to_string(), vals.to_vec())));
    for ((name, shape), (aname, vals)) in shapes.iter().zip(&arrays) {
        debug_assert_eq!(name, aname);
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(DTYPE_F64)?;
        w.write_u8(shape.len() as u8)?;
        for d in shape {
            w.write_u32::<LittleEndian>(*d as u32)?;
        }
        debug_assert_eq!(vals.len(), shape.iter().product::<usize>());
        for v in vals {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::checkpoint("file truncated before magic"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint("bad magic bytes (not a checkpoint)"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::checkpoint("file truncated before version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {version} not supported (expected {CHECKPOINT_VERSION})"
        )));
    }

    let manifest_len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::checkpoint("file truncated before manifest"))? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::checkpoint("file truncated inside manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.version != version {
        return Err(Error::checkpoint("manifest version disagrees with header"));
    }

    // Integrity gate: the stored hash must match the embedded config.
    let canon = serde_json::to_string(&manifest.config)
        .map_err(|e| Error::checkpoint(format!("manifest config: {e}")))?;
    if fnv1a64(canon.as_bytes()) != manifest.config_hash {
        return Err(Error::checkpoint("config hash mismatch (checkpoint from a different config)"));
    }

    let mut net = build_network(&manifest.config)?;
    let expected = net.param_shapes();
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::checkpoint("file truncated before array count"))?
        as usize;
    if count != expected.len() {
        return Err(Error::checkpoint(format!(
            "checkpoint stores {count} arrays but config implies {}",
            expected.len()
        )));
    }

    let mut arrays: Vec<(String, Vec<f64>)> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::checkpoint("file truncated before array name"))?
            as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::checkpoint("file truncated inside array name"))?;
        let stored_name = String::from_utf8(name_bytes)
            .map_err(|_| Error::checkpoint("array name is not UTF-8"))?;
        if &stored_name != name {
            return Err(Error::checkpoint(format!(
                "array `{stored_name}` does not match expected `{name}`"
            )));
        }
        let dtype =
            r.read_u8().map_err(|_| Error::checkpoint("file truncated before dtype tag"))?;
        if dtype != DTYPE_F64 {
            return Err(Error::checkpoint(format!("unsupported dtype tag {dtype:#x}")));
        }
        let rank = r.read_u8().map_err(|_| Error::checkpoint("file truncated before rank"))?;
        if rank as usize != shape.len() {
            return Err(Error::checkpoint(format!(
                "array `{name}` has rank {rank}, expected {}",
                shape.len()
            )));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(
                r.read_u32::<LittleEndian>()
                    .map_err(|_| Error::checkpoint("file truncated inside shape"))?
                    as usize,
            );
        }
        if &dims != shape {
            return Err(Error::checkpoint(format!(
                "array `{name}` has shape {dims:?}, config implies {shape:?}"
            )));
        }
        let mut vals = vec![0.0f64; dims.iter().product()];
        for v in vals.iter_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|_| Error::checkpoint("file truncated inside array data"))?;
        }
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::checkpoint(format!("array `{name}` contains non-finite values")));
        }
        arrays.push((stored_name, vals));
    }

    let mut idx = 0;
    net.visit_params_mut(|name, dst| {
        let (aname, vals) = &arrays[idx];
        debug_assert_eq!(name, aname);
        dst.copy_from_slice(vals);
        idx += 1;
    });
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::ClipMode;
    use crate::network::seven_layer_config;
    use crate::rng::Rng;
    use crate::seq::FeatureSeq;

    fn tiny_net() -> Network {
        let mut cfg = seven_layer_config(3, 4, 5, 1, ClipMode::LatencyControlled, 9);
        cfg.layers.truncate(2);
        cfg.layers[1].stride = 3;
        build_network(&cfg).unwrap()
    }

    #[test]
    fn round_trip_reproduces_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dtdn");
        let mut net = tiny_net();
        // Live predictor weights so the deformable path is exercised.
        let mut rng = Rng::seeded(5);
        net.predictor_params_mut(1)
            .unwrap()
            .weights_mut()
            .iter_mut()
            .for_each(|w| *w = rng.uniform(-0.5, 0.5));

        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let x = FeatureSeq::random_normal(3, 17, &mut rng);
        let a = net.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dtdn");
        save_checkpoint(&tiny_net(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [2usize, 9, 40, bytes.len() - 5] {
            let short = &bytes[..cut];
            let tpath = dir.path().join("short.dtdn");
            std::fs::write(&tpath, short).unwrap();
            let err = load_checkpoint(&tpath).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut={cut}: {err}");
        }
    }

    #[test]
    fn tampered_config_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dtdn");
        save_checkpoint(&tiny_net(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Flip a digit inside the manifest's config_hash field.
        let text_start = 12; // magic + version + manifest length
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest =
            String::from_utf8(bytes[text_start..text_start + manifest_len].to_vec()).unwrap();
        let pos = manifest.find("\"config_hash\":").unwrap() + "\"config_hash\":".len();
        let digit = text_start + pos;
        bytes[digit] = if bytes[digit] == b'1' { b'2' } else { b'1' };
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dtdn");
        save_checkpoint(&tiny_net(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
