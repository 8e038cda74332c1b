//! Flat binary serialization of model weights.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "HYDRAWTS" | version u32
//! image_size, patch_size, depth, dim, heads, classes: u32 each
//! per layer: variant u8, q map u8, q +ln u8, k map u8, k +ln u8, heads u32
//! n_params u32
//! per param: name_len u32, name bytes, rank u32, dims u32..., values f64...
//! ```
//!
//! Training hyperparameters are not stored; loading restores the
//! architecture with default training settings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{AttentionLayerSpec, Variant};
use crate::kernels::{FeatureMap, FeatureMapSpec, KernelPair};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"HYDRAWTS";
const VERSION: u32 = 1;

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Msa => 0,
        Variant::Mla => 1,
        Variant::Hydra => 2,
        Variant::AftSimple => 3,
        Variant::PolyNl => 4,
    }
}

fn variant_from_code(c: u8) -> Result<Variant> {
    Ok(match c {
        0 => Variant::Msa,
        1 => Variant::Mla,
        2 => Variant::Hydra,
        3 => Variant::AftSimple,
        4 => Variant::PolyNl,
        other => return Err(Error::Format(format!("unknown variant code {other}"))),
    })
}

fn map_code(m: FeatureMap) -> u8 {
    FeatureMap::ALL.iter().position(|&x| x == m).unwrap() as u8
}

fn map_from_code(c: u8) -> Result<FeatureMap> {
    FeatureMap::ALL
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown feature map code {c}")))
}

pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.depth,
        cfg.dim,
        cfg.heads,
        cfg.classes,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for spec in &cfg.layer_specs {
        w.write_all(&[
            variant_code(spec.variant),
            map_code(spec.kernel_pair.q.map),
            spec.kernel_pair.q.post_layer_norm as u8,
            map_code(spec.kernel_pair.k.map),
            spec.kernel_pair.k.post_layer_norm as u8,
        ])?;
        w.write_all(&(spec.heads as u32).to_le_bytes())?;
    }
    w.write_all(&(params.items.len() as u32).to_le_bytes())?;
    for (name, tensor) in &params.items {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &value in tensor.data() {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("weights file truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut c = Cursor {
        r: BufReader::new(File::open(path)?),
    };
    if c.bytes(8)? != MAGIC {
        return Err(Error::Format("not a model weights file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported weights version {version}"
        )));
    }
    let image_size = c.u32()? as usize;
    let patch_size = c.u32()? as usize;
    let depth = c.u32()? as usize;
    let dim = c.u32()? as usize;
    let heads = c.u32()? as usize;
    let classes = c.u32()? as usize;

    let mut cfg = ModelConfig::new(depth, dim, heads, patch_size, image_size, classes)?;
    let tokens = cfg.tokens();
    let mut layer_specs = Vec::with_capacity(depth);
    for _ in 0..depth {
        let variant = variant_from_code(c.u8()?)?;
        let q = FeatureMapSpec {
            map: map_from_code(c.u8()?)?,
            post_layer_norm: c.u8()? != 0,
        };
        let k = FeatureMapSpec {
            map: map_from_code(c.u8()?)?,
            post_layer_norm: c.u8()? != 0,
        };
        let layer_heads = c.u32()? as usize;
        layer_specs.push(AttentionLayerSpec::new(
            variant,
            layer_heads,
            KernelPair { q, k },
            tokens,
            dim,
        ));
    }
    cfg.layer_specs = layer_specs;
    cfg.validate()?;

    let n_params = c.u32()? as usize;
    let mut items = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(c.bytes(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let rank = c.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Format(format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(c.f64()?);
        }
        items.push((
            name,
            Tensor::from_vec(shape, data)
                .map_err(|e| Error::Format(format!("bad tensor payload: {e}")))?,
        ));
    }
    Ok((cfg, ModelParams { items }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::toymodel::ScheduleStrategy;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cfg = ModelConfig::new(2, 8, 2, 4, 8, 2)
            .unwrap()
            .with_schedule(ScheduleStrategy::Back, 1, KernelPair::cosine())
            .unwrap();
        let mut rng = SeededRng::new(21);
        let params = ModelParams::init(&cfg, &mut rng);

        save_model(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_model(&path).unwrap();

        assert_eq!(cfg2.depth, cfg.depth);
        assert_eq!(cfg2.layer_specs.len(), 2);
        assert_eq!(cfg2.layer_specs[1].variant, Variant::Hydra);
        assert_eq!(params2.items.len(), params.items.len());
        for ((n1, t1), (n2, t2)) in params.items.iter().zip(&params2.items) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }

        // inference must be bit-identical through the round trip
        let mut img_rng = SeededRng::new(5);
        let img = img_rng.uniform_matrix(8, 8, 0.0, 1.0);
        assert_eq!(
            super::super::predict_logits(&cfg, &params, &img).unwrap(),
            super::super::predict_logits(&cfg2, &params2, &img).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTAMODEL").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }
}
