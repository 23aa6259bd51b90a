use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::subject::{generate_subject, Mask, Subject, SynthConfig, LATENT_DIM};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "sghf-dataset/1";
const MAGIC: &[u8; 8] = b"SGHFSUBJ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    /// Fraction of label-1 subjects, rounded to the nearest count.
    pub positive_fraction: f64,
    /// Offset added to subject ids, so two datasets never share an id.
    #[serde(default)]
    pub id_offset: u64,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_subjects: 200,
            positive_fraction: 0.5,
            id_offset: 0,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub label: u8,
    pub file: String,
    pub volume_shape: Vec<usize>,
    pub patch_shape: Vec<usize>,
    pub n_patches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: DatasetConfig,
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        let n = config.n_subjects;
        let n_pos = (n as f64 * config.positive_fraction).round() as usize;
        if n == 0 || n_pos > n || !(0.0..=1.0).contains(&config.positive_fraction) {
            return Err(Error::Config(format!(
                "cannot draw {n} subjects with positive fraction {}",
                config.positive_fraction
            )));
        }
        let mut labels: Vec<u8> = (0..n).map(|i| (i < n_pos) as u8).collect();
        labels.shuffle(&mut rng::stream(seed, &[rng::label("labels")]));
        let subjects = labels
            .par_iter()
            .enumerate()
            .map(|(i, &l)| generate_subject(seed, config.id_offset + i as u64, l, &config.synth))
            .collect();
        Ok(Dataset {
            config: config.clone(),
            seed,
            subjects,
        })
    }

    pub fn ids(&self) -> Vec<u64> {
        self.subjects.iter().map(|s| s.id).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn index(&self) -> BTreeMap<u64, usize> {
        self.subjects.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }

    /// Subjects with the given ids, in the order given.
    pub fn select(&self, ids: &[u64]) -> Result<Vec<&Subject>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| &self.subjects[i])
                    .ok_or_else(|| Error::Data(format!("subject {id} not in dataset")))
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            subjects: self
                .subjects
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id,
                    label: s.label,
                    file: subject_file(s.id),
                    volume_shape: s.volume.shape().to_vec(),
                    patch_shape: s.patches.first().map_or(Vec::new(), |p| p.shape().to_vec()),
                    n_patches: s.patches.len(),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sub = dir.join("subjects");
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let manifest = self.manifest();
        for (s, entry) in self.subjects.iter().zip(&manifest.subjects) {
            let path = dir.join(&entry.file);
            fs::write(&path, encode_subject(s)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!(
                "{}: unsupported format {:?}",
                path.display(),
                manifest.format
            )));
        }
        let subjects = manifest
            .subjects
            .iter()
            .map(|entry| {
                let path = dir.join(&entry.file);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let s = decode_subject(&bytes)
                    .map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))?;
                if s.id != entry.id || s.label != entry.label {
                    return Err(Error::Data(format!(
                        "{}: header disagrees with manifest",
                        path.display()
                    )));
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            config: manifest.config,
            seed: manifest.seed,
            subjects,
        })
    }
}

fn subject_file(id: u64) -> String {
    format!("subjects/{id:06}.bin")
}

fn put_shape(buf: &mut Vec<u8>, shape: &[usize]) {
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_shape(buf, t.shape());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Layout: magic, id, label, latent, volume, mask (one byte per voxel),
/// patch count, patches. Every array is a rank + dims header followed by
/// row-major little-endian values.
fn encode_subject(s: &Subject) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&s.id.to_le_bytes());
    buf.push(s.label);
    for u in &s.latent {
        buf.extend_from_slice(&u.to_le_bytes());
    }
    put_tensor(&mut buf, &s.volume);
    put_shape(&mut buf, &s.mask.shape);
    buf.extend(s.mask.data.iter().map(|&b| b as u8));
    buf.extend_from_slice(&(s.patches.len() as u64).to_le_bytes());
    for p in &s.patches {
        put_tensor(&mut buf, p);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.bytes.len() < n {
            return Err("truncated file".into());
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn shape(&mut self) -> Result<Vec<usize>, String> {
        let rank = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(format!("implausible rank {rank}"));
        }
        (0..rank).map(|_| self.u64().map(|d| d as usize)).collect()
    }

    fn tensor(&mut self) -> Result<Tensor, String> {
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.bytes.len() {
            return Err("truncated array".into());
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<_, _>>()?;
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

fn decode_subject(bytes: &[u8]) -> Result<Subject, String> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err("not a subject file".into());
    }
    let id = r.u64()?;
    let label = r.take(1)?[0];
    if label > 1 {
        return Err(format!("label {label} out of range"));
    }
    let mut latent = [0.0; LATENT_DIM];
    for u in latent.iter_mut() {
        *u = r.f64()?;
    }
    let volume = r.tensor()?;
    let mask_shape = r.shape()?;
    let n: usize = mask_shape.iter().product();
    let mask = Mask {
        data: r.take(n)?.iter().map(|&b| b != 0).collect(),
        shape: mask_shape,
    };
    let count = r.u64()? as usize;
    let patches = (0..count).map(|_| r.tensor()).collect::<Result<_, _>>()?;
    if !r.bytes.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(Subject {
        id,
        label,
        volume,
        mask,
        patches,
        latent,
    })
}
