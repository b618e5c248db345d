//! Versioned binary container of named parameter arrays plus a JSON echo of
//! the configuration that produced them. Byte layout in docs/formats.md.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Vocab;
use crate::error::{CoeError, Result};
use crate::model::{CoeModel, ModelConfig, PARAM_NAMES};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"COECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Configuration echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Decoder output alphabet, BOS and EOS included.
    pub vocab: Vec<String>,
    /// Free-form metadata such as the training phase and its config.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_model(model: &CoeModel, meta: CheckpointMeta) -> Self {
        let arrays = model
            .named_params()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect();
        Self { meta, arrays }
    }

    pub fn to_model(&self) -> Result<CoeModel> {
        let names: Vec<&str> = self.arrays.iter().map(|(n, _)| n.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(CoeError::Checkpoint(format!(
                "unexpected parameter arrays {names:?}, expected {PARAM_NAMES:?}"
            )));
        }
        let model = CoeModel::from_params(
            self.meta.model.num_layers,
            self.arrays.iter().map(|(_, m)| m.clone()).collect(),
        )?;
        let want = self.meta.model;
        let dims = model.decoder.dims()?;
        if model.egm.num_queries() != want.num_queries
            || model.egm.d_v() != want.d_v
            || model.egm.d_l() != want.d_l
            || dims != want.decoder_dims()
        {
            return Err(CoeError::Checkpoint(
                "parameter shapes disagree with the stored model config".into(),
            ));
        }
        Ok(model)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let body = self
            .meta
            .vocab
            .get(2..)
            .ok_or_else(|| CoeError::Checkpoint("vocabulary lacks BOS/EOS".into()))?;
        let v = Vocab::new(body)?;
        if v.tokens() != self.meta.vocab.as_slice() {
            return Err(CoeError::Checkpoint("stored vocabulary is not canonical".into()));
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let echo = serde_json::to_vec(&self.meta)
            .map_err(|e| CoeError::Checkpoint(format!("config echo: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        out.extend_from_slice(&echo);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CoeError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CoeError::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let raw = r.u64()?;
        let echo_len = r.len(raw)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(echo_len)?)
            .map_err(|e| CoeError::Checkpoint(format!("config echo: {e}")))?;
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CoeError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(CoeError::Checkpoint(format!("{name}: {ndim}-d arrays unsupported")));
            }
            let (raw_rows, raw_cols) = (r.u64()?, r.u64()?);
            let rows = usize::try_from(raw_rows).map_err(|_| CoeError::Checkpoint(format!("{name}: bad shape")))?;
            let cols = usize::try_from(raw_cols).map_err(|_| CoeError::Checkpoint(format!("{name}: bad shape")))?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| CoeError::Checkpoint(format!("{name}: truncated data")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Matrix::new(rows, cols, data)?));
        }
        if r.remaining() != 0 {
            return Err(CoeError::Checkpoint("trailing bytes after last array".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CoeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoeError::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| CoeError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(CoeError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&self, v: u64) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.remaining())
            .ok_or_else(|| CoeError::Checkpoint("length field exceeds file size".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample() -> (CoeModel, Checkpoint) {
        let vocab = Vocab::for_protocol(8, &["yes", "no"]).unwrap();
        let cfg = ModelConfig {
            num_queries: 2,
            num_layers: 2,
            d_v: 5,
            d_l: 3,
            d_embed: 4,
            d_pos: 2,
            hidden: 6,
            max_len: 10,
            vocab: vocab.len(),
            egm_init_scale: 0.1,
        };
        let model = CoeModel::init(&cfg, &mut Rng::new(3)).unwrap();
        let meta = CheckpointMeta {
            model: cfg,
            vocab: vocab.tokens().to_vec(),
            extra: serde_json::json!({"phase": "sft"}),
        };
        let ck = Checkpoint::from_model(&model, meta);
        (model, ck)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), model);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        back.vocab().unwrap();
    }

    #[test]
    fn rejects_corruption() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut newer = bytes.clone();
        newer[8] = 2;
        let err = Checkpoint::from_bytes(&newer).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        for cut in [0, 10, 30, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn shape_mismatch_with_config_is_reported() {
        let (_, mut ck) = sample();
        ck.meta.model.hidden = 7;
        assert!(matches!(ck.to_model(), Err(CoeError::Checkpoint(_))));
    }
}
