//! On-disk dataset layout. See docs/formats.md for the schemas.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::templates::TemplateKind;
use super::world::WorldSpec;
use super::{generate_dataset, DatagenConfig, Dataset, DatasetMeta, Split, TrainingSample};
use crate::egm::FrameFeatures;
use crate::error::{CoeError, Result};
use crate::numerics::Matrix;
use crate::protocol::FrameSet;
use crate::reward::RewardReference;

pub const FEATURE_MAGIC: [u8; 8] = *b"COEFEAT\0";
pub const FEATURE_VERSION: u32 = 1;

pub const SFT_FILE: &str = "sft.jsonl";
pub const RL_FILE: &str = "rl.jsonl";
pub const RL_REF_FILE: &str = "rl_ref.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.bin";

/// Fully annotated record (SFT and eval splits).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FullRecord {
    sample_id: u64,
    split: Split,
    template: TemplateKind,
    question: String,
    key_frame_indices: Vec<usize>,
    reasoning_guidance: String,
    answer: String,
    n_frames: usize,
    fps: f64,
    world: WorldSpec,
}

/// RL prompt: the question and a pointer into the feature sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRecord {
    sample_id: u64,
    question: String,
    n_frames: usize,
    fps: f64,
    features: String,
}

/// Withheld RL ground truth, read only for reward computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceRecord {
    sample_id: u64,
    template: TemplateKind,
    key_frame_indices: Vec<usize>,
    reasoning_guidance: String,
    answer: String,
    world: WorldSpec,
}

fn full_record(s: &TrainingSample) -> FullRecord {
    FullRecord {
        sample_id: s.sample_id,
        split: s.split,
        template: s.template,
        question: s.question.clone(),
        key_frame_indices: s.key_frames.indices().to_vec(),
        reasoning_guidance: s.reasoning_guidance.clone(),
        answer: s.answer.clone(),
        n_frames: s.n_frames(),
        fps: s.features.fps,
        world: s.world.clone(),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| CoeError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| CoeError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| CoeError::io(path, e))?;
    }
    w.flush().map_err(|e| CoeError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CoeError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| CoeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoeError::json(path, e))?);
    }
    Ok(out)
}

/// Writes the sidecar: header `(magic, version u32, D_v u32, count u64)`
/// then per record `(sample_id u64, N u32, N·D_v f64)`, all little-endian.
pub fn write_features(path: &Path, records: &[(u64, &Matrix)]) -> Result<()> {
    let d_v = records.first().map_or(0, |(_, m)| m.cols());
    let io = |e| CoeError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&FEATURE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(d_v as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for (id, m) in records {
        if m.cols() != d_v {
            return Err(CoeError::Schema(format!(
                "sample {id} has feature width {}, expected {d_v}",
                m.cols()
            )));
        }
        w.write_all(&id.to_le_bytes()).map_err(io)?;
        w.write_all(&(m.rows() as u32).to_le_bytes()).map_err(io)?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<HashMap<u64, Matrix>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CoeError::io(path, e))?;
    let mut cur = Cursor { buf: &bytes, pos: 0, path };
    if cur.take(8)? != FEATURE_MAGIC {
        return Err(CoeError::Schema(format!("{}: bad magic", path.display())));
    }
    let version = cur.u32()?;
    if version != FEATURE_VERSION {
        return Err(CoeError::Schema(format!(
            "{}: feature file version {version}, expected {FEATURE_VERSION}",
            path.display()
        )));
    }
    let d_v = cur.u32()? as usize;
    let count = cur.u64()?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let id = cur.u64()?;
        let n = cur.u32()? as usize;
        let mut data = Vec::with_capacity(n * d_v);
        for _ in 0..n * d_v {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
        }
        if out.insert(id, Matrix::new(n, d_v, data)?).is_some() {
            return Err(CoeError::Schema(format!("{}: duplicate sample {id}", path.display())));
        }
    }
    if cur.pos != bytes.len() {
        return Err(CoeError::Schema(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(CoeError::Schema(format!("{}: truncated", self.path.display())));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Generates the dataset for `cfg` and writes it under `out_dir`.
pub fn emit_dataset(cfg: &DatagenConfig, out_dir: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| CoeError::io(out_dir, e))?;
    let meta_path = out_dir.join(META_FILE);
    let meta = serde_json::to_string_pretty(&ds.meta).map_err(|e| CoeError::json(&meta_path, e))?;
    fs::write(&meta_path, meta).map_err(|e| CoeError::io(&meta_path, e))?;

    write_jsonl(&out_dir.join(SFT_FILE), ds.sft.iter().map(full_record))?;
    write_jsonl(&out_dir.join(EVAL_FILE), ds.eval.iter().map(full_record))?;
    write_jsonl(
        &out_dir.join(RL_FILE),
        ds.rl.iter().map(|s| PromptRecord {
            sample_id: s.sample_id,
            question: s.question.clone(),
            n_frames: s.n_frames(),
            fps: s.features.fps,
            features: FEATURES_FILE.into(),
        }),
    )?;
    write_jsonl(
        &out_dir.join(RL_REF_FILE),
        ds.rl.iter().map(|s| ReferenceRecord {
            sample_id: s.sample_id,
            template: s.template,
            key_frame_indices: s.key_frames.indices().to_vec(),
            reasoning_guidance: s.reasoning_guidance.clone(),
            answer: s.answer.clone(),
            world: s.world.clone(),
        }),
    )?;
    let feats: Vec<(u64, &Matrix)> = ds.all().map(|s| (s.sample_id, &s.features.features)).collect();
    write_features(&out_dir.join(FEATURES_FILE), &feats)?;
    Ok(ds)
}

fn take_features(
    feats: &mut HashMap<u64, Matrix>,
    id: u64,
    n_frames: usize,
    fps: f64,
) -> Result<FrameFeatures> {
    let m = feats
        .remove(&id)
        .ok_or_else(|| CoeError::Schema(format!("no features for sample {id}")))?;
    if m.rows() != n_frames {
        return Err(CoeError::Schema(format!(
            "sample {id}: {} feature rows, record says {n_frames}",
            m.rows()
        )));
    }
    FrameFeatures::new(m, fps)
}

fn from_full(r: FullRecord, split: Split, feats: &mut HashMap<u64, Matrix>) -> Result<TrainingSample> {
    if r.split != split {
        return Err(CoeError::Schema(format!(
            "sample {} is tagged {:?} but stored in the {split:?} file",
            r.sample_id, r.split
        )));
    }
    Ok(TrainingSample {
        sample_id: r.sample_id,
        split,
        template: r.template,
        features: take_features(feats, r.sample_id, r.n_frames, r.fps)?,
        key_frames: FrameSet::new(r.key_frame_indices, r.fps, r.n_frames),
        question: r.question,
        reasoning_guidance: r.reasoning_guidance,
        answer: r.answer,
        world: r.world,
    })
}

/// Reads a dataset written by [`emit_dataset`]. RL prompts are joined with
/// their withheld references so the reward can be computed.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| CoeError::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| CoeError::json(&meta_path, e))?;
    if meta.format_version != 1 {
        return Err(CoeError::Schema(format!(
            "dataset format version {} is not supported",
            meta.format_version
        )));
    }
    let mut feats = read_features(&dir.join(FEATURES_FILE))?;

    let sft = read_jsonl::<FullRecord>(&dir.join(SFT_FILE))?
        .into_iter()
        .map(|r| from_full(r, Split::Sft, &mut feats))
        .collect::<Result<Vec<_>>>()?;
    let eval = read_jsonl::<FullRecord>(&dir.join(EVAL_FILE))?
        .into_iter()
        .map(|r| from_full(r, Split::Eval, &mut feats))
        .collect::<Result<Vec<_>>>()?;

    let mut refs: HashMap<u64, ReferenceRecord> = read_jsonl::<ReferenceRecord>(&dir.join(RL_REF_FILE))?
        .into_iter()
        .map(|r| (r.sample_id, r))
        .collect();
    let mut rl = Vec::new();
    for p in read_jsonl::<PromptRecord>(&dir.join(RL_FILE))? {
        let r = refs
            .remove(&p.sample_id)
            .ok_or_else(|| CoeError::Schema(format!("no reference for RL sample {}", p.sample_id)))?;
        rl.push(TrainingSample {
            sample_id: p.sample_id,
            split: Split::Rl,
            template: r.template,
            features: take_features(&mut feats, p.sample_id, p.n_frames, p.fps)?,
            key_frames: FrameSet::new(r.key_frame_indices, p.fps, p.n_frames),
            question: p.question,
            reasoning_guidance: r.reasoning_guidance,
            answer: r.answer,
            world: r.world,
        });
    }
    if let Some(id) = refs.keys().next() {
        return Err(CoeError::Schema(format!("reference {id} has no RL prompt")));
    }
    Ok(Dataset { meta, sft, rl, eval })
}

/// The reward-relevant part of any annotated record: `sft.jsonl`,
/// `eval.jsonl` and `rl_ref.jsonl` lines all qualify.
#[derive(Debug, Deserialize)]
struct LooseReference {
    sample_id: u64,
    key_frame_indices: Vec<usize>,
    answer: String,
    n_frames: Option<usize>,
    fps: Option<f64>,
    world: Option<WorldSpec>,
}

/// Reads reward references keyed by sample id.
pub fn read_reward_references(path: &Path) -> Result<HashMap<u64, RewardReference>> {
    let mut out = HashMap::new();
    for r in read_jsonl::<LooseReference>(path)? {
        let (n, fps) = match (r.n_frames, r.fps, &r.world) {
            (Some(n), Some(fps), _) => (n, fps),
            (_, _, Some(w)) => (w.n_frames, w.fps),
            _ => {
                return Err(CoeError::Schema(format!(
                    "{}: sample {} has neither n_frames/fps nor a world",
                    path.display(),
                    r.sample_id
                )))
            }
        };
        let reference = RewardReference {
            key_frames: FrameSet::new(r.key_frame_indices, fps, n),
            answer: r.answer,
        };
        if out.insert(r.sample_id, reference).is_some() {
            return Err(CoeError::Schema(format!(
                "{}: duplicate sample {}",
                path.display(),
                r.sample_id
            )));
        }
    }
    Ok(out)
}
