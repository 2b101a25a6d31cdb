use std::path::Path;

use capt_mgde::{MgdeParams, MgdeVars};
use capt_numerics::binio::{ByteReader, ByteWriter, FormatError};
use capt_numerics::{normalized, GradRecord, Gradients, Tensor};
use capt_sample::{AdapterParams, AdapterVars};
use sha2::{Digest, Sha256};

use crate::{Result, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything the trained pipeline needs at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub adapter: AdapterParams,
    pub mgde: MgdeParams,
    /// Mean training α; the CLS readout does not depend on it.
    pub inference_alpha: f64,
    pub use_sam: bool,
    pub use_mgde: bool,
    pub seed: u64,
    pub encoder_checksum: String,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub adapter: AdapterVars,
    pub mgde: MgdeVars,
}

impl ModelParams {
    /// Adapter tensors then MGDE tensors, in tape registration order.
    pub fn register(&self, rec: &mut GradRecord) -> Result<ModelVars> {
        let adapter = self.adapter.register(rec, "adapter.");
        let mgde = self.mgde.register(rec, "mgde.")?;
        Ok(ModelVars { adapter, mgde })
    }

    /// Overwrites parameters from a flat list in registration order.
    pub fn set_flat(&mut self, flat: &[Tensor]) -> Result<()> {
        let mut it = flat.iter();
        let mut next = |dst: &mut Tensor| -> Result<()> {
            let src = it
                .next()
                .ok_or_else(|| TrainError::Contract("flat parameter list too short".into()))?;
            if src.shape() != dst.shape() {
                return Err(TrainError::Contract(format!(
                    "flat parameter shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            Ok(())
        };
        for t in self.adapter.tensors_mut() {
            next(t)?;
        }
        next(&mut self.mgde.router.wr)?;
        for ex in self.mgde.experts.iter_mut() {
            for t in ex.tensors_mut() {
                next(t)?;
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, vars: &ModelVars, grads: &Gradients, lr: f64, mgde_lr: f64) {
        if self.use_sam {
            self.adapter.sgd_step(&vars.adapter, grads, lr);
        }
        if self.use_mgde {
            self.mgde.sgd_step(&vars.mgde, grads, mgde_lr);
        }
    }

    /// Unit-norm D-dim feature before the MGDE and projection.
    pub fn readout(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let r = if self.use_sam {
            self.adapter.cls_readout(tokens)?
        } else {
            tokens.row(0).to_vec()
        };
        Ok(normalized(&r))
    }

    /// Final d-dim feature: normalize(P · (f + MGDE(f))).
    pub fn inference_feature(&self, tokens: &Tensor, projection: &Tensor) -> Result<Vec<f64>> {
        let f = self.readout(tokens)?;
        let h = if self.use_mgde {
            let (m, _) = self.mgde.route_and_fuse(&f)?;
            f.iter().zip(&m).map(|(a, b)| a + b).collect()
        } else {
            f
        };
        let g: Vec<f64> = (0..projection.rows())
            .map(|i| projection.row(i).iter().zip(&h).map(|(p, x)| p * x).sum())
            .collect();
        Ok(normalized(&g))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.seed);
        w.str(&self.encoder_checksum);
        w.f64(self.inference_alpha);
        w.u8(self.use_sam as u8);
        w.u8(self.use_mgde as u8);
        self.adapter.write(&mut w);
        self.mgde.write(&mut w);
        let mut out = w.finish();
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Layout: magic, version, payload, then a SHA-256 of everything before it.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
            return Err(r.error("checkpoint too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = ByteReader::new(body);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(FormatError {
                offset: body.len(),
                message: "checksum mismatch".into(),
            });
        }
        let seed = r.u64()?;
        let encoder_checksum = r.str()?;
        let inference_alpha = r.f64()?;
        let mut flag = || -> std::result::Result<bool, FormatError> {
            match r.u8()? {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(r.error(format!("bad flag byte {b}"))),
            }
        };
        let use_sam = flag()?;
        let use_mgde = flag()?;
        let adapter = AdapterParams::read(&mut r)?;
        let mgde = MgdeParams::read(&mut r)?;
        if mgde.width() != adapter.width() {
            return Err(r.error("adapter and expert widths differ"));
        }
        if !inference_alpha.is_finite() {
            return Err(r.error("non-finite inference alpha"));
        }
        r.finish()?;
        Ok(Self {
            adapter,
            mgde,
            inference_alpha,
            use_sam,
            use_mgde,
            seed,
            encoder_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|source| TrainError::Format {
            path: path.to_path_buf(),
            source,
        })
    }
}
