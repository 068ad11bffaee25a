use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::generate::{accent_profiles_for, CorpusConfig, CorpusSplit, Split};
use crate::corpus::render::build_prototypes;
use crate::corpus::vocab::Vocab;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FRAMES_VERSION: u32 = 1;

/// One line of the corpus manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub accent_id: String,
    pub split: String,
    pub text: String,
    pub frames_path: String,
}

/// Write frames as a little-endian fp64 blob with a (T, D, version) header.
pub fn write_frames(path: &Path, frames: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let t = frames.shape()[0] as u32;
    let d = frames.shape()[1] as u32;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&FRAMES_VERSION.to_le_bytes())?;
    for v in frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    let t = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != FRAMES_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "frames file {} has version {version}, expected {FRAMES_VERSION}",
            path.display()
        )));
    }
    let mut buf = vec![0u8; t * d * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[t, d], data)
}

/// Serialize a corpus: `manifest.jsonl` plus one frames file per utterance
/// under `frames/`.
pub fn write_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for split in [Split::Train, Split::Validation, Split::Test] {
        for accent in corpus.accents(split) {
            for utt in &accent.utterances {
                let rel = format!("frames/{}.bin", utt.id);
                write_frames(&dir.join(&rel), &utt.frames)?;
                let record = ManifestRecord {
                    id: utt.id.clone(),
                    accent_id: utt.accent_id.clone(),
                    split: split.name().to_string(),
                    text: utt.text.clone(),
                    frames_path: rel,
                };
                let line = serde_json::to_string(&record)
                    .map_err(|e| Error::Generation(format!("manifest encode: {e}")))?;
                manifest.write_all(line.as_bytes())?;
                manifest.write_all(b"\n")?;
            }
        }
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Generation(format!("manifest line {}: {e}", lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Load a corpus previously written by [`write_corpus`]. Frames come from
/// disk; prototypes, profiles and the lexicon are rebuilt from the config,
/// which fully determines them.
pub fn load_corpus(dir: &Path, config: &CorpusConfig) -> Result<CorpusSplit> {
    config.validate()?;
    let records = read_manifest(&dir.join("manifest.jsonl"))?;
    let prototypes = build_prototypes(config.master_seed, config.feature_dim)?;
    let lexicon = crate::corpus::generate::build_lexicon(config);
    let (train_profiles, val_profiles, test_profiles, voice) = accent_profiles_for(config)?;

    let mut corpus = CorpusSplit {
        config: config.clone(),
        lexicon,
        prototypes,
        voice,
        train: train_profiles
            .into_iter()
            .map(|profile| crate::corpus::AccentData {
                profile,
                utterances: Vec::new(),
            })
            .collect(),
        validation: val_profiles
            .into_iter()
            .map(|profile| crate::corpus::AccentData {
                profile,
                utterances: Vec::new(),
            })
            .collect(),
        test: test_profiles
            .into_iter()
            .map(|profile| crate::corpus::AccentData {
                profile,
                utterances: Vec::new(),
            })
            .collect(),
    };

    for record in records {
        let frames = read_frames(&dir.join(&record.frames_path))?;
        let target = Vocab.encode(&record.text)?;
        let utt = Utterance {
            id: record.id,
            text: record.text,
            frames,
            accent_id: record.accent_id.clone(),
            target,
        };
        let split = Split::parse(&record.split)?;
        let bucket = match split {
            Split::Train => &mut corpus.train,
            Split::Validation => &mut corpus.validation,
            Split::Test => &mut corpus.test,
        };
        let accent = bucket
            .iter_mut()
            .find(|a| a.profile.id == record.accent_id)
            .ok_or_else(|| {
                Error::Generation(format!(
                    "manifest references accent `{}` not derivable from the config",
                    record.accent_id
                ))
            })?;
        accent.utterances.push(utt);
    }
    Ok(corpus)
}

/// Path of the manifest inside a corpus directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
