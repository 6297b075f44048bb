//! Corpus directory layout:
//!
//! ```text
//! manifest.json          params, identities, sentence list
//! lexicon.svip           gloss trajectories
//! samples/00000.svip     joints, hands, conditions, video, reference
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusParams, Identity, PoseSequence, Sample};
use crate::checkpoint;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub id: usize,
    pub glosses: Vec<usize>,
    pub identity: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub params: CorpusParams,
    pub identities: Vec<Identity>,
    pub sentences: Vec<SentenceRecord>,
}

fn sample_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join("samples").join(format!("{id:05}.svip"))
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("samples"))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: corpus.params.seed,
        params: corpus.params.clone(),
        identities: corpus.identities.clone(),
        sentences: corpus
            .samples
            .iter()
            .enumerate()
            .map(|(id, s)| SentenceRecord {
                id,
                glosses: s.sentence.clone(),
                identity: s.identity,
                frames: s.poses.frames(),
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let lexicon: Vec<(String, crate::Tensor)> = corpus
        .gloss_trajectories
        .iter()
        .enumerate()
        .flat_map(|(g, p)| [(format!("gloss.{g}.joints"), p.joints.clone()), (format!("gloss.{g}.hands"), p.hands.clone())])
        .collect();
    checkpoint::write(&dir.join("lexicon.svip"), &lexicon)?;
    for (id, s) in corpus.samples.iter().enumerate() {
        checkpoint::write(
            &sample_path(dir, id),
            &[
                ("joints".into(), s.poses.joints.clone()),
                ("hands".into(), s.poses.hands.clone()),
                ("conditions".into(), s.conditions.clone()),
                ("video".into(), s.video.clone()),
                ("reference".into(), s.reference.clone()),
            ],
        )?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path, record: &SentenceRecord) -> Result<Sample> {
    let entries = checkpoint::read(&sample_path(dir, record.id))?;
    let get = |n: &str| checkpoint::find(&entries, n).cloned();
    let poses = PoseSequence::new(get("joints")?, get("hands")?)?;
    if poses.frames() != record.frames {
        return Err(Error::Format(format!(
            "sample {} has {} frames, manifest says {}",
            record.id,
            poses.frames(),
            record.frames
        )));
    }
    Ok(Sample {
        sentence: record.glosses.clone(),
        identity: record.identity,
        poses,
        conditions: get("conditions")?,
        video: get("video")?,
        reference: get("reference")?,
    })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::state(format!("corpus manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Compatibility(format!("corpus manifest version {}", manifest.version)));
    }
    manifest.params.validate()?;
    let lexicon = checkpoint::read(&dir.join("lexicon.svip"))?;
    let gloss_trajectories = (0..manifest.params.glosses)
        .map(|g| {
            PoseSequence::new(
                checkpoint::find(&lexicon, &format!("gloss.{g}.joints"))?.clone(),
                checkpoint::find(&lexicon, &format!("gloss.{g}.hands"))?.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = manifest
        .sentences
        .iter()
        .map(|r| read_sample(dir, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        params: manifest.params,
        gloss_trajectories,
        identities: manifest.identities,
        samples,
    })
}
