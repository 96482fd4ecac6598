//! Sample sets on disk: one named-tensor file plus a JSON manifest.
//!
//! Clip files written by sampling use the same `"{name}/clip"` record naming,
//! so generated clips and labels can be paired by sample name.

use std::collections::BTreeMap;
use std::path::Path;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatures;
use crate::checkpoint::{read_tensors, write_tensors};
use crate::codec::{Clip, Geometry, Keypoint, PoseTrack};
use crate::error::{Error, Result};
use crate::synthdata::{SampleMeta, SynthSample};

pub const SAMPLES_FILE: &str = "samples.cvt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLIPS_FILE: &str = "clips.cvt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub name: String,
    pub text_ids: Vec<usize>,
    pub audio_rate: f64,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub geometry: Geometry,
    pub samples: Vec<ManifestRow>,
}

pub fn sample_name(s: &SynthSample) -> String {
    format!("{}-{:05}", s.meta.task, s.meta.index)
}

fn pose_tensor(p: &PoseTrack) -> Result<Tensor> {
    let data: Vec<f64> = p
        .keypoints
        .iter()
        .flat_map(|k| [k.x, k.y, if k.visible { 1.0 } else { 0.0 }])
        .collect();
    Ok(Tensor::new(vec![p.keypoints.len(), 3], data)?)
}

fn pose_from(t: &Tensor) -> PoseTrack {
    PoseTrack {
        keypoints: (0..t.shape()[0])
            .map(|i| {
                let r = t.row(i);
                Keypoint {
                    x: r[0],
                    y: r[1],
                    visible: r[2] != 0.0,
                }
            })
            .collect(),
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Result<String> {
    let v = serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes `samples` into `dir` (created if needed).
pub fn save_samples(dir: &Path, geo: &Geometry, samples: &[SynthSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len() * 5);
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let name = sample_name(s);
        records.push((format!("{name}/clip"), s.clip.frames.clone()));
        records.push((format!("{name}/ref_human"), s.ref_human.clone()));
        records.push((format!("{name}/ref_object"), s.ref_object.clone()));
        records.push((format!("{name}/audio"), s.audio.feats.clone()));
        records.push((format!("{name}/pose"), pose_tensor(&s.pose)?));
        rows.push(ManifestRow {
            name,
            text_ids: s.text_ids.clone(),
            audio_rate: s.audio.rate,
            meta: s.meta.clone(),
        });
    }
    write_tensors(&dir.join(SAMPLES_FILE), &records)?;
    let manifest = Manifest {
        geometry: *geo,
        samples: rows,
    };
    std::fs::write(dir.join(MANIFEST_FILE), pretty_json(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

/// Reads a sample set written by [`save_samples`].
pub fn load_samples(dir: &Path) -> Result<(Geometry, Vec<SynthSample>)> {
    let manifest = read_manifest(dir)?;
    let mut records: BTreeMap<String, Tensor> = read_tensors(&dir.join(SAMPLES_FILE))?.into_iter().collect();
    let mut take = |name: &str, part: &str| {
        records
            .remove(&format!("{name}/{part}"))
            .ok_or_else(|| Error::Format(format!("sample {name} lacks {part}")))
    };
    let mut out = Vec::with_capacity(manifest.samples.len());
    for row in &manifest.samples {
        let clip = Clip::new(take(&row.name, "clip")?, manifest.geometry.fps)?;
        out.push(SynthSample {
            clip,
            text_ids: row.text_ids.clone(),
            ref_human: take(&row.name, "ref_human")?,
            ref_object: take(&row.name, "ref_object")?,
            audio: AudioFeatures::new(take(&row.name, "audio")?, row.audio_rate)?,
            pose: pose_from(&take(&row.name, "pose")?),
            meta: row.meta.clone(),
        });
    }
    Ok((manifest.geometry, out))
}

/// Named generated clips with their optional decoded pseudo frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    pub clips: BTreeMap<String, (Clip, Vec<Clip>)>,
}

pub fn save_clips(dir: &Path, set: &ClipSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (name, (clip, pseudo)) in &set.clips {
        records.push((format!("{name}/clip"), clip.frames.clone()));
        for (k, p) in pseudo.iter().enumerate() {
            records.push((format!("{name}/pseudo.{k}"), p.frames.clone()));
        }
    }
    write_tensors(&dir.join(CLIPS_FILE), &records)
}

/// Reads `clips.cvt`, or the clips of a sample set when `dir` holds one.
pub fn load_clips(dir: &Path, fps: u32) -> Result<ClipSet> {
    let path = if dir.join(CLIPS_FILE).exists() {
        dir.join(CLIPS_FILE)
    } else {
        dir.join(SAMPLES_FILE)
    };
    let mut clips: BTreeMap<String, (Clip, Vec<Clip>)> = BTreeMap::new();
    let mut pseudo: BTreeMap<String, BTreeMap<usize, Clip>> = BTreeMap::new();
    for (rec, t) in read_tensors(&path)? {
        let Some((name, part)) = rec.split_once('/') else {
            return Err(Error::Format(format!("record {rec} has no sample prefix")));
        };
        if part == "clip" {
            clips.insert(name.to_string(), (Clip::new(t, fps)?, Vec::new()));
        } else if let Some(k) = part.strip_prefix("pseudo.") {
            let k: usize = k.parse().map_err(|_| Error::Format(format!("bad record {rec}")))?;
            pseudo.entry(name.to_string()).or_default().insert(k, Clip::new(t, fps)?);
        }
    }
    for (name, parts) in pseudo {
        if let Some(entry) = clips.get_mut(&name) {
            entry.1 = parts.into_values().collect();
        }
    }
    Ok(ClipSet { clips })
}
