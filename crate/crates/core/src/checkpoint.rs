//! Binary checkpoint container: magic "CDIRA1", config hash and canonical
//! config text, epoch, master seed, normalization stats, named little-endian
//! f32 parameter arrays, the fitted cluster model, and a trailing CRC32 over
//! the payload. Save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::backbone::NormStats;
use crate::cluster::ClusterModel;
use crate::error::{CdiraError, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CDIRA1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u32,
    pub epoch: u32,
    pub seed: u64,
    pub config_text: String,
    pub norm: NormStats,
    pub params: Vec<(String, Tensor)>,
    pub cluster: Option<ClusterModel>,
}

impl Checkpoint {
    pub fn from_model(
        model: &ModelParams,
        cluster: Option<ClusterModel>,
        epoch: u32,
        seed: u64,
        config_hash: u32,
        config_text: String,
    ) -> Checkpoint {
        Checkpoint {
            config_hash,
            epoch,
            seed,
            config_text,
            norm: model.norm,
            params: model
                .store
                .iter()
                .map(|(_, name, tensor)| (name.to_string(), tensor.clone()))
                .collect(),
            cluster,
        }
    }

    /// Rebuild a model from stored arrays. The caller supplies the configs
    /// (normally parsed from the embedded config text); every parameter the
    /// fresh model expects must be present with a matching shape.
    pub fn into_model(
        &self,
        backbone_cfg: crate::backbone::BackboneConfig,
        head_cfg: crate::model::HeadConfig,
    ) -> Result<ModelParams> {
        let mut model = ModelParams::new(backbone_cfg, head_cfg, self.seed)?;
        if let Some((_, fc2_b)) = self.params.iter().find(|(n, _)| n == "domain.fc2.b") {
            model.add_domain_head(fc2_b.len(), self.seed)?;
        }
        model.norm = self.norm;
        for (name, tensor) in &self.params {
            let id = model.store.lookup(name).ok_or_else(|| {
                CdiraError::Checkpoint(format!("unexpected parameter {name:?} for this config"))
            })?;
            if model.store.tensor(id).shape() != tensor.shape() {
                return Err(CdiraError::Checkpoint(format!(
                    "parameter {name:?} shape {:?} does not match config shape {:?}",
                    tensor.shape(),
                    model.store.tensor(id).shape()
                )));
            }
            *model.store.tensor_mut(id) = tensor.clone();
        }
        // every live parameter must have been overwritten
        if model.store.len() != self.params.len() {
            return Err(CdiraError::Checkpoint(format!(
                "checkpoint has {} arrays but the config expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CdiraError::Checkpoint("truncated checkpoint".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.u32(ck.config_hash);
    w.u32(ck.epoch);
    w.u64(ck.seed);
    w.bytes(ck.config_text.as_bytes());
    for c in 0..3 {
        w.f32(ck.norm.mean[c]);
    }
    for c in 0..3 {
        w.f32(ck.norm.std[c]);
    }
    w.u32(ck.params.len() as u32);
    for (name, tensor) in &ck.params {
        w.bytes(name.as_bytes());
        w.u32(tensor.shape().len() as u32);
        for &d in tensor.shape() {
            w.u32(d as u32);
        }
        for &v in tensor.data() {
            w.f32(v);
        }
    }
    match &ck.cluster {
        None => w.buf.push(0),
        Some(cm) => {
            w.buf.push(1);
            w.u32(cm.k_star as u32);
            w.u32(cm.cols as u32);
            for &v in &cm.centers {
                w.f32(v);
            }
            w.u32(cm.silhouette_by_k.len() as u32);
            for &(k, s) in &cm.silhouette_by_k {
                w.u32(k as u32);
                w.f32(s);
            }
            w.u64(cm.seed);
        }
    }

    let crc = crc32fast::hash(&w.buf);
    let mut file = Vec::with_capacity(MAGIC.len() + w.buf.len() + 4);
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&w.buf);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read(path)?;
    if raw.len() < MAGIC.len() + 4 || &raw[..MAGIC.len()] != MAGIC {
        return Err(CdiraError::Checkpoint(format!(
            "{path:?} is not a checkpoint (bad magic)"
        )));
    }
    let payload = &raw[MAGIC.len()..raw.len() - 4];
    let stored_crc = u32::from_le_bytes(raw[raw.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(CdiraError::Checkpoint(format!(
            "crc mismatch: stored 0x{stored_crc:08x}, computed 0x{crc:08x}"
        )));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let config_hash = r.u32()?;
    let epoch = r.u32()?;
    let seed = r.u64()?;
    let config_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| CdiraError::Checkpoint("config text is not utf-8".to_string()))?;
    let mut norm = NormStats::identity();
    for c in 0..3 {
        norm.mean[c] = r.f32()?;
    }
    for c in 0..3 {
        norm.std[c] = r.f32()?;
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| CdiraError::Checkpoint("parameter name is not utf-8".to_string()))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let cluster = match r.take(1)?[0] {
        0 => None,
        1 => {
            let k_star = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut centers = Vec::with_capacity(k_star * cols);
            for _ in 0..k_star * cols {
                centers.push(r.f32()?);
            }
            let n_scores = r.u32()? as usize;
            let mut silhouette_by_k = Vec::with_capacity(n_scores);
            for _ in 0..n_scores {
                let k = r.u32()? as usize;
                let s = r.f32()?;
                silhouette_by_k.push((k, s));
            }
            let cseed = r.u64()?;
            Some(ClusterModel {
                k_star,
                cols,
                centers,
                silhouette_by_k,
                seed: cseed,
            })
        }
        other => {
            return Err(CdiraError::Checkpoint(format!(
                "bad cluster flag {other}"
            )))
        }
    };
    if r.pos != payload.len() {
        return Err(CdiraError::Checkpoint("trailing bytes in checkpoint".to_string()));
    }
    Ok(Checkpoint {
        config_hash,
        epoch,
        seed,
        config_text,
        norm,
        params,
        cluster,
    })
}

/// Guard used by consumers: hash must match unless explicitly forced.
pub fn check_config_hash(ck: &Checkpoint, expected: u32, force: bool) -> Result<()> {
    if ck.config_hash != expected && !force {
        return Err(CdiraError::Checkpoint(format!(
            "config hash 0x{:08x} does not match checkpoint 0x{:08x} (use force to override)",
            expected, ck.config_hash
        )));
    }
    Ok(())
}
