//! Dataset, checkpoint, prompt and selection artifacts on disk. Each artifact
//! directory holds a `manifest.json` that lists the SHA-256 of every payload
//! file; loads verify those digests before decoding anything.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::data::{Dataset, Manifest, NormStats, OracleConfig, Sample};
use crate::networks::{NoiseTensor, PainePredictor, PredictorConfig, PromptEmbedding, StreamDims};
use crate::selection::SelectionResult;
use crate::training::{Checkpoint, Provenance, TrainConfig};

use super::{blob, PersistError, Result};

pub const SCHEMA_VERSION: u64 = 1;
pub const MANIFEST: &str = "manifest.json";

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> PersistError {
    PersistError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PersistError::Missing {
            path: path.display().to_string(),
        }),
        Err(e) => Err(io_err(path, e)),
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Collects an artifact directory's files and publishes them with one rename.
pub struct DirWriter {
    target: PathBuf,
    tmp: PathBuf,
    files: BTreeMap<String, String>,
}

impl DirWriter {
    /// Fails if `target` exists, unless `force` is set and it holds a manifest.
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() {
            if !(force && target.join(MANIFEST).is_file()) {
                return Err(PersistError::Usage(format!(
                    "{} already exists (use --force to replace an artifact directory)",
                    target.display()
                )));
            }
        }
        let tmp = temp_sibling(target);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
            files: BTreeMap::new(),
        })
    }

    pub fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.tmp.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.insert(name.to_string(), sha_hex(bytes));
        Ok(())
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.put(name, &blob::encode(t)?)
    }

    /// Writes the manifest (with the file digests under `files`) and publishes.
    pub fn finish<M: Serialize>(self, manifest: &M) -> Result<()> {
        let mut value = serde_json::to_value(manifest).map_err(|e| PersistError::Numeric(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .expect("manifests serialize to objects");
        obj.insert(
            "files".into(),
            serde_json::to_value(&self.files).expect("string map serializes"),
        );
        let text = serde_json::to_string_pretty(&value).expect("json value serializes") + "\n";
        let path = self.tmp.join(MANIFEST);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| io_err(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| io_err(&self.target, e))
    }
}

/// A loaded manifest plus digest-checked access to its payload files.
pub struct DirReader<M> {
    dir: PathBuf,
    pub manifest: M,
    files: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct Envelope {
    schema_version: u64,
    files: BTreeMap<String, String>,
}

impl<M: DeserializeOwned> DirReader<M> {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = read_file(&path)?;
        let label = path.display().to_string();
        let bad = |reason: String| PersistError::Format {
            path: label.clone(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| bad(e.to_string()))?;
        let env: Envelope = serde_json::from_value(value.clone()).map_err(|e| bad(e.to_string()))?;
        if env.schema_version != SCHEMA_VERSION {
            return Err(PersistError::Version {
                path: label,
                found: env.schema_version,
            });
        }
        let mut value = value;
        value.as_object_mut().expect("checked object").remove("files");
        let manifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            files: env.files,
        })
    }

    pub fn get(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let label = path.display().to_string();
        let expect = self.files.get(name).ok_or_else(|| PersistError::Format {
            path: self.dir.join(MANIFEST).display().to_string(),
            reason: format!("no digest listed for {name}"),
        })?;
        let bytes = read_file(&path)?;
        let got = sha_hex(&bytes);
        if &got != expect {
            return Err(PersistError::Integrity {
                path: label,
                reason: format!("sha256 {got} does not match manifest {expect}"),
            });
        }
        Ok(bytes)
    }

    pub fn get_tensor(&self, name: &str) -> Result<Tensor> {
        blob::decode(&self.get(name)?, &self.dir.join(name).display().to_string())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    schema_version: u64,
    prompt_streams: Vec<StreamDims>,
    noise_shape: [usize; 3],
    prompt_count: usize,
    noises_per_prompt: usize,
    sample_count: usize,
    oracle_digest: String,
    oracle: Option<OracleConfig>,
    generation_seed: Option<u64>,
    norm: Option<NormStats>,
    /// Prompt ids in order of first appearance; row `i` of each prompt blob.
    prompt_ids: Vec<u64>,
    /// Row of the prompt blobs used by each sample.
    sample_prompt: Vec<usize>,
}

fn prompt_file(stream: usize) -> String {
    format!("prompts.{stream}.pant")
}

const NOISES: &str = "noises.pant";
const SCORES: &str = "scores.pant";

pub fn save_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    let m = ds.manifest();
    let groups = ds.groups();
    let samples = ds.samples();
    let mut row_of = vec![0usize; samples.len()];
    for (row, (_, idx)) in groups.iter().enumerate() {
        idx.iter().for_each(|&i| row_of[i] = row);
    }
    let mut w = DirWriter::create(dir, force)?;
    for (si, s) in m.prompt_streams.iter().enumerate() {
        let mut data = Vec::with_capacity(groups.len() * s.tok * s.d_tok);
        for (_, idx) in &groups {
            data.extend_from_slice(samples[idx[0]].prompt.streams()[si].data());
        }
        let t = Tensor::new(vec![groups.len(), s.tok, s.d_tok], data)?;
        w.put_tensor(&prompt_file(si), &t)?;
    }
    let [c, h, wd] = m.noise_shape;
    let mut noise = Vec::with_capacity(samples.len() * c * h * wd);
    samples
        .iter()
        .for_each(|s| noise.extend_from_slice(s.noise.tensor().data()));
    w.put_tensor(NOISES, &Tensor::new(vec![samples.len(), c, h, wd], noise)?)?;
    w.put_tensor(SCORES, &Tensor::new(vec![samples.len()], ds.scores())?)?;
    w.finish(&DatasetManifest {
        schema_version: SCHEMA_VERSION,
        prompt_streams: m.prompt_streams.clone(),
        noise_shape: m.noise_shape,
        prompt_count: m.prompt_count,
        noises_per_prompt: m.noises_per_prompt,
        sample_count: samples.len(),
        oracle_digest: m.oracle_digest.clone(),
        oracle: m.oracle.clone(),
        generation_seed: m.generation_seed,
        norm: m.norm,
        prompt_ids: groups.iter().map(|(p, _)| *p).collect(),
        sample_prompt: row_of,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let r: DirReader<DatasetManifest> = DirReader::open(dir)?;
    let m = &r.manifest;
    let invalid = |reason: String| PersistError::Format {
        path: dir.join(MANIFEST).display().to_string(),
        reason,
    };
    let expect_shape = |name: &str, t: &Tensor, shape: Vec<usize>| {
        if t.shape() != shape.as_slice() {
            Err(PersistError::Format {
                path: dir.join(name).display().to_string(),
                reason: format!("shape {:?}, manifest implies {shape:?}", t.shape()),
            })
        } else {
            Ok(())
        }
    };
    let p = m.prompt_ids.len();
    let n = m.sample_count;
    if m.sample_prompt.len() != n {
        return Err(invalid(format!(
            "{} sample_prompt entries for {n} samples",
            m.sample_prompt.len()
        )));
    }
    if let Some(bad) = m.sample_prompt.iter().find(|&&row| row >= p) {
        return Err(invalid(format!("sample_prompt row {bad} out of range")));
    }
    let mut streams: Vec<Tensor> = Vec::new();
    for (si, s) in m.prompt_streams.iter().enumerate() {
        let t = r.get_tensor(&prompt_file(si))?;
        expect_shape(&prompt_file(si), &t, vec![p, s.tok, s.d_tok])?;
        streams.push(t);
    }
    let prompts: Vec<Arc<PromptEmbedding>> = (0..p)
        .map(|row| {
            let parts = m
                .prompt_streams
                .iter()
                .zip(&streams)
                .map(|(s, t)| {
                    let len = s.tok * s.d_tok;
                    Tensor::new(vec![s.tok, s.d_tok], t.data()[row * len..(row + 1) * len].to_vec())
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(Arc::new(PromptEmbedding::new(parts)?))
        })
        .collect::<Result<_>>()?;
    let [c, h, w] = m.noise_shape;
    let noises = r.get_tensor(NOISES)?;
    expect_shape(NOISES, &noises, vec![n, c, h, w])?;
    let scores = r.get_tensor(SCORES)?;
    expect_shape(SCORES, &scores, vec![n])?;
    let len = c * h * w;
    let samples = (0..n)
        .map(|i| {
            let row = m.sample_prompt[i];
            let t = Tensor::new(vec![c, h, w], noises.data()[i * len..(i + 1) * len].to_vec())?;
            Ok(Sample {
                prompt_id: m.prompt_ids[row],
                prompt: prompts[row].clone(),
                noise: NoiseTensor::new(t)?,
                score_raw: scores.data()[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        prompt_streams: m.prompt_streams.clone(),
        noise_shape: m.noise_shape,
        prompt_count: m.prompt_count,
        noises_per_prompt: m.noises_per_prompt,
        oracle_digest: m.oracle_digest.clone(),
        oracle: m.oracle.clone(),
        generation_seed: m.generation_seed,
        norm: m.norm,
    };
    Ok(Dataset::new(manifest, samples)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    schema_version: u64,
    predictor: PredictorConfig,
    norm: NormStats,
    train: TrainConfig,
    provenance: Provenance,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path, force: bool) -> Result<()> {
    let mut w = DirWriter::create(dir, force)?;
    let mut params = Vec::new();
    for (i, (name, t)) in ckpt.model.params().iter().enumerate() {
        let file = format!("param.{i:04}.pant");
        w.put_tensor(&file, t)?;
        params.push(ParamEntry {
            name: name.to_string(),
            file,
        });
    }
    w.finish(&CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        predictor: ckpt.model.config().clone(),
        norm: ckpt.norm,
        train: ckpt.train.clone(),
        provenance: ckpt.provenance.clone(),
        params,
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let r: DirReader<CheckpointManifest> = DirReader::open(dir)?;
    let m = &r.manifest;
    let named = m
        .params
        .iter()
        .map(|p| Ok((p.name.clone(), r.get_tensor(&p.file)?)))
        .collect::<Result<Vec<_>>>()?;
    let model = PainePredictor::from_named_tensors(m.predictor.clone(), named)?;
    Ok(Checkpoint {
        model,
        norm: m.norm,
        train: m.train.clone(),
        provenance: m.provenance.clone(),
    })
}

/// A prompt embedding file is its stream blobs back to back.
pub fn save_prompt(prompt: &PromptEmbedding, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    for s in prompt.streams() {
        blob::encode_into(s, &mut bytes)?;
    }
    write_atomic(path, &bytes)
}

pub fn load_prompt(path: &Path) -> Result<PromptEmbedding> {
    let label = path.display().to_string();
    let streams = blob::decode_all(&read_file(path)?, &label)?;
    PromptEmbedding::new(streams).map_err(|e| PersistError::Format {
        path: label,
        reason: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedEntry {
    pub rank: usize,
    pub candidate_index: usize,
    pub predicted_score_raw: f64,
    pub file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionManifest {
    pub schema_version: u64,
    pub checkpoint_digest: String,
    pub seed: u64,
    pub n: usize,
    pub selected: Vec<SelectedEntry>,
}

pub fn save_selection(res: &SelectionResult, dir: &Path, force: bool) -> Result<()> {
    let mut w = DirWriter::create(dir, force)?;
    let mut selected = Vec::new();
    for (rank, s) in res.selected.iter().enumerate() {
        let file = format!("noise.{rank:04}.pant");
        w.put_tensor(&file, s.noise.tensor())?;
        selected.push(SelectedEntry {
            rank,
            candidate_index: s.index,
            predicted_score_raw: s.predicted_score_raw,
            file,
        });
    }
    w.finish(&SelectionManifest {
        schema_version: SCHEMA_VERSION,
        checkpoint_digest: res.checkpoint_digest.clone(),
        seed: res.seed,
        n: res.n,
        selected,
    })
}

/// The manifest and noises of a saved selection.
pub fn load_selection(dir: &Path) -> Result<(SelectionManifest, Vec<NoiseTensor>)> {
    let r: DirReader<SelectionManifest> = DirReader::open(dir)?;
    let noises = r
        .manifest
        .selected
        .iter()
        .map(|s| Ok(NoiseTensor::new(r.get_tensor(&s.file)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((r.manifest, noises))
}

/// Reads a JSON config file with unknown keys rejected by the target type.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PersistError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
