//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! magic        8 bytes  "QPICKPT\0"
//! version      u32      1
//! count        u32      number of tensors
//! count × {
//!   name_len   u32
//!   name       UTF-8 bytes
//!   rank       u32
//!   dims       rank × u32
//!   data       prod(dims) × f32 LE, row-major
//! }
//! blob_len     u32
//! blob         UTF-8 JSON: {"config": ..., "vocab": [...] | null, "metadata": {...}}
//! ```
//!
//! Tensor names follow the dotted scheme of the model registry, e.g.
//! `embeddings.token_table`, `encoder.layer.3.attention.W_q`,
//! `head.cnn.width2.filter17.weight`, `classifier.weight`. Linear weights are
//! stored `[in, out]` (applied as `x·W + b`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::ModelConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::layout::param_specs;
use crate::params::ParamRegistry;
use crate::pipelines::ParaphraseModel;
use crate::tokenizer::Vocab;

pub const MAGIC: [u8; 8] = *b"QPICKPT\0";
pub const VERSION: u32 = 1;

/// Free-form run information stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: Option<u64>,
    pub epoch: Option<usize>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct Blob {
    config: ModelConfig,
    vocab: Option<Vec<String>>,
    metadata: CheckpointMeta,
}

/// Location of one tensor inside a checkpoint file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first data element.
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Everything in a checkpoint except the tensor data.
#[derive(Clone, Debug)]
pub struct CheckpointIndex {
    pub tensors: Vec<TensorEntry>,
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    pub meta: CheckpointMeta,
}

/// A model read back from disk.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: ParaphraseModel,
    pub vocab: Option<Vocab>,
    pub meta: CheckpointMeta,
}

fn ck_io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn put_u32(w: &mut impl Write, v: usize, what: &str) -> Result<(), std::io::Error> {
    let v = u32::try_from(v)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{what} {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())
}

pub fn save_checkpoint(
    model: &ParaphraseModel,
    vocab: Option<&Vocab>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io = ck_io(path);
    let mut w = BufWriter::new(File::create(path).map_err(&io)?);
    (|| -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(&mut w, model.params.len(), "tensor count")?;
        for (name, t) in model.params.iter() {
            put_u32(&mut w, name.len(), "name length")?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, t.ndim(), "rank")?;
            for &d in t.shape() {
                put_u32(&mut w, d, "dimension")?;
            }
            let data = t.data();
            let mut buf = Vec::with_capacity(4 * data.len());
            for &x in data.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    })()
    .map_err(&io)?;
    let blob = Blob {
        config: model.config.clone(),
        vocab: vocab.map(|v| v.tokens().to_vec()),
        metadata: meta.clone(),
    };
    let json = serde_json::to_vec(&blob).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    put_u32(&mut w, json.len(), "blob length").map_err(&io)?;
    w.write_all(&json).map_err(&io)?;
    w.flush().map_err(&io)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    pos: u64,
    len: u64,
}

impl<R: Read + Seek> Reader<R> {
    fn bytes(&mut self, n: u64, context: impl FnOnce() -> String) -> Result<Vec<u8>> {
        if self.pos + n > self.len {
            return Err(CheckpointError::Truncated { context: context() }.into());
        }
        let mut buf = vec![0u8; n as usize];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Truncated { context: "read".into() })?;
        self.pos += n;
        Ok(buf)
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<usize> {
        let b = self.bytes(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn skip(&mut self, n: u64, context: impl FnOnce() -> String) -> Result<()> {
        if self.pos + n > self.len {
            return Err(CheckpointError::Truncated { context: context() }.into());
        }
        self.inner
            .seek(SeekFrom::Current(n as i64))
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        self.pos += n;
        Ok(())
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    let file = File::open(path).map_err(ck_io(path))?;
    let len = file.metadata().map_err(ck_io(path))?.len();
    Ok(Reader {
        inner: BufReader::with_capacity(1 << 20, file),
        pos: 0,
        len,
    })
}

/// Reads the header, tensor directory and trailing blob without loading data.
pub fn read_index(path: impl AsRef<Path>) -> Result<CheckpointIndex> {
    let mut r = open(path.as_ref())?;
    let magic = r.bytes(8, || "magic".into())?;
    if magic != MAGIC {
        let mut m = [0u8; 8];
        m.copy_from_slice(&magic);
        return Err(CheckpointError::BadMagic(m).into());
    }
    let version = r.u32(|| "version".into())? as u32;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let count = r.u32(|| "tensor count".into())?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let name_len = r.u32(|| format!("name length of tensor {i}"))?;
        let name = String::from_utf8(r.bytes(name_len as u64, || format!("name of tensor {i}"))?)
            .map_err(|_| CheckpointError::Malformed(format!("tensor {i} name is not UTF-8")))?;
        let rank = r.u32(|| format!("rank of {name}"))?;
        let shape = (0..rank)
            .map(|_| r.u32(|| format!("shape of {name}")))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
        let offset = r.pos;
        r.skip(bytes, || format!("data of {name}"))?;
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateTensor(name).into());
        }
        tensors.push(TensorEntry { name, shape, offset });
    }
    let blob_len = r.u32(|| "metadata length".into())?;
    let blob = r.bytes(blob_len as u64, || "metadata".into())?;
    let blob: Blob = serde_json::from_slice(&blob).map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    let vocab = blob.vocab.map(Vocab::from_tokens).transpose()?;
    Ok(CheckpointIndex {
        tensors,
        config: blob.config,
        vocab,
        meta: blob.metadata,
    })
}

/// Outcome of loading into an existing model.
#[derive(Clone, Debug)]
pub struct LoadReport {
    pub index: CheckpointIndex,
    /// Tensors in the file that the model has no use for.
    pub extra: Vec<String>,
}

/// Copies every `relevant` tensor of `target` from the file; all of them must
/// be present with matching shapes. Returns relevant file tensors that
/// `target` lacks.
fn fill(
    path: &Path,
    index: &CheckpointIndex,
    target: &ParamRegistry,
    relevant: impl Fn(&str) -> bool,
) -> Result<Vec<String>> {
    let by_name: HashMap<&str, &TensorEntry> = index.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let wanted: Vec<(&str, &Tensor)> = target.iter().filter(|(n, _)| relevant(n)).collect();
    let missing: Vec<String> = wanted
        .iter()
        .filter(|(n, _)| !by_name.contains_key(n))
        .map(|(n, _)| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CheckpointError::MissingTensors(missing).into());
    }
    for (name, t) in &wanted {
        let e = by_name[name];
        if e.shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: t.shape().to_vec(),
                found: e.shape.clone(),
            }
            .into());
        }
    }
    let mut r = open(path)?;
    for (name, t) in &wanted {
        let e = by_name[name];
        r.inner.seek(SeekFrom::Start(e.offset)).map_err(ck_io(path))?;
        r.pos = e.offset;
        let raw = r.bytes(4 * e.numel() as u64, || format!("data of {name}"))?;
        t.update(|d| {
            for (x, b) in d.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        });
    }
    let extra: Vec<String> = index
        .tensors
        .iter()
        .filter(|e| relevant(&e.name) && target.get(&e.name).is_none())
        .map(|e| e.name.clone())
        .collect();
    if !extra.is_empty() {
        log::warn!(
            "{}: ignoring {} unknown tensors: {}",
            path.display(),
            extra.len(),
            extra.join(", ")
        );
    }
    Ok(extra)
}

/// Rebuilds the model described by the checkpoint's own config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let index = read_index(path)?;
    index.config.validate()?;
    let mut reg = ParamRegistry::new();
    for spec in param_specs(&index.config) {
        reg.insert(spec.name, Tensor::zeros(&spec.shape)?)?;
    }
    fill(path, &index, &reg, |_| true)?;
    let model = ParaphraseModel::from_registry(index.config.clone(), reg)?;
    Ok(LoadedCheckpoint {
        model,
        vocab: index.vocab,
        meta: index.meta,
    })
}

/// Overwrites every parameter of an existing model from the file, checking
/// shapes against the model rather than the file's config.
pub fn load_into(model: &ParaphraseModel, path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let index = read_index(path)?;
    let extra = fill(path, &index, &model.params, |_| true)?;
    Ok(LoadReport { index, extra })
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("encoder.")
}

/// Copies only the encoder (`embeddings.*`, `encoder.*`) into `model`; head
/// and classifier keep their values. Meant for externally converted weights.
pub fn load_pretrained_encoder(model: &ParaphraseModel, path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let index = read_index(path)?;
    let extra = fill(path, &index, &model.params, is_encoder_param)?;
    Ok(LoadReport { index, extra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HeadKind, Setup};
    use crate::encoder::ModelRng;
    use rand::SeedableRng;

    fn model(seed: u64, setup: Setup, head: HeadKind) -> ParaphraseModel {
        ParaphraseModel::new(ModelConfig::tiny(setup, head), &mut ModelRng::seed_from_u64(seed)).unwrap()
    }

    fn same_params(a: &ParamRegistry, b: &ParamRegistry) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data().iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(1, Setup::Siamese, HeadKind::Cnn);
        let vocab = Vocab::build(["a b c"], 1).unwrap();
        let meta = CheckpointMeta {
            seed: Some(1),
            epoch: Some(3),
            metrics: [("val_accuracy".to_string(), 0.5)].into(),
        };
        save_checkpoint(&m, Some(&vocab), &meta, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(same_params(&m.params, &loaded.model.params));
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.vocab.unwrap(), vocab);
        assert_eq!(loaded.model.config, m.config);
        assert_eq!(loaded.model.params.trainable_count(), m.params.trainable_count());
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &model(2, Setup::MatchedAggregation, HeadKind::MeanPool),
            None,
            &CheckpointMeta::default(),
            &path,
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::Truncated { .. })),
            "{err}"
        );
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &model(3, Setup::Siamese, HeadKind::MeanPool),
            None,
            &CheckpointMeta::default(),
            &path,
        )
        .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_index(&path),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion { found: 9, .. }))
        ));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_index(&path),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
    }

    #[test]
    fn wider_checkpoint_into_narrow_model_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut wide = ModelConfig::tiny(Setup::Siamese, HeadKind::Cnn);
        wide.encoder.embed_dim = 32;
        let wide = ParaphraseModel::new(wide, &mut ModelRng::seed_from_u64(4)).unwrap();
        save_checkpoint(&wide, None, &CheckpointMeta::default(), &path).unwrap();
        let narrow = model(4, Setup::Siamese, HeadKind::Cnn);
        match load_into(&narrow, &path) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => {
                assert_eq!(name, "embeddings.token_table")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_extra_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        // mean-pool file lacks the cnn filters, and its classifier is wider
        let mean = model(5, Setup::MatchedAggregation, HeadKind::MeanPool);
        save_checkpoint(&mean, None, &CheckpointMeta::default(), &path).unwrap();
        let cnn = model(6, Setup::MatchedAggregation, HeadKind::Cnn);
        match load_into(&cnn, &path) {
            Err(Error::Checkpoint(CheckpointError::MissingTensors(names))) => {
                assert!(names.iter().all(|n| n.starts_with("head.cnn")));
                assert_eq!(names.len(), 8);
            }
            other => panic!("unexpected {other:?}"),
        }
        // the encoder alone transfers, the rest of the file is ignored
        let before = cnn.params.get("classifier.weight").unwrap().to_vec();
        load_pretrained_encoder(&cnn, &path).unwrap();
        assert_eq!(
            cnn.params.get("embeddings.token_table").unwrap().to_vec(),
            mean.params.get("embeddings.token_table").unwrap().to_vec()
        );
        assert_eq!(cnn.params.get("classifier.weight").unwrap().to_vec(), before);
    }

    #[test]
    fn extra_tensors_are_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut deep = ModelConfig::tiny(Setup::Siamese, HeadKind::MeanPool);
        deep.encoder.num_layers = 3;
        deep.trainable_encoders = 3;
        let deep = ParaphraseModel::new(deep, &mut ModelRng::seed_from_u64(7)).unwrap();
        save_checkpoint(&deep, None, &CheckpointMeta::default(), &path).unwrap();
        let shallow = model(8, Setup::Siamese, HeadKind::MeanPool);
        let report = load_into(&shallow, &path).unwrap();
        assert_eq!(report.extra.len(), 16);
        assert!(report.extra.iter().all(|n| n.starts_with("encoder.layer.2.")));
        assert_eq!(
            shallow.params.get("encoder.layer.1.ffn.W_in").unwrap().to_vec(),
            deep.params.get("encoder.layer.1.ffn.W_in").unwrap().to_vec()
        );
    }
}
