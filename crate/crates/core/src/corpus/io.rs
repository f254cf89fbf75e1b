use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::Utterance;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::san::REDUCTION;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"SYN2FEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 * 3;

static FEATURE_READS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of feature files read so far.
pub fn feature_reads() -> usize {
    FEATURE_READS.load(Ordering::Relaxed)
}

fn too_short(frames: usize) -> Error {
    Error::UtteranceTooShort {
        frames,
        min: REDUCTION,
    }
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::dim("write_features", features.shape(), &[0, 0]));
    }
    if features.rows() < REDUCTION {
        return Err(too_short(features.rows()));
    }
    let mut buf = Vec::with_capacity(HEADER + 8 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.last_dim() as u32).to_le_bytes());
    for x in features.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    FEATURE_READS.fetch_add(1, Ordering::Relaxed);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.to_owned(),
    };
    if bytes.len() < HEADER {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let word =
        |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    if word(8) != FEATURE_VERSION as usize {
        return Err(fail(8, "unsupported version"));
    }
    let (frames, d) = (word(12), word(16));
    if d == 0 {
        return Err(fail(16, "zero feature dimension"));
    }
    if frames < REDUCTION {
        return Err(too_short(frames));
    }
    let want = HEADER + 8 * frames * d;
    if bytes.len() != want {
        return Err(fail(
            bytes.len().min(want),
            "payload length does not match header",
        ));
    }
    let data = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::matrix(frames, d, data))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: usize,
    pub labels: Vec<usize>,
    pub features: PathBuf,
}

fn format_labels(labels: &[usize]) -> String {
    labels
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes `{dir}/feats/{id}.feat`, the transcript `{dir}/{name}.tsv` and the
/// manifest `{dir}/{name}.manifest`, whose lines are
/// `feature_path<TAB>transcript_path<TAB>utt_id` relative to `dir`.
pub fn write_corpus(dir: &Path, name: &str, utts: &[Utterance]) -> Result<PathBuf> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let transcript = format!("{name}.tsv");
    let mut tsv = String::new();
    let mut manifest = String::new();
    for u in utts {
        let rel = format!("feats/{}.feat", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        tsv.push_str(&format!(
            "{}\t{}\t{}\n",
            u.id,
            u.speaker,
            format_labels(&u.labels)
        ));
        manifest.push_str(&format!("{rel}\t{transcript}\t{}\n", u.id));
    }
    let write = |p: PathBuf, s: &str| -> Result<()> {
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(&p, e))
    };
    write(dir.join(&transcript), &tsv)?;
    let path = dir.join(format!("{name}.manifest"));
    write(path.clone(), &manifest)?;
    Ok(path)
}

fn parse_transcripts(path: &Path) -> Result<Vec<(String, usize, Vec<usize>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let fail = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: reason.to_owned(),
        };
        let line_len = line.len() + 1;
        if line.trim().is_empty() {
            offset += line_len;
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(id), Some(spk), Some(labels), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(fail("expected utt_id, speaker and labels"));
        };
        let speaker = spk.parse().map_err(|_| fail("speaker is not an integer"))?;
        let labels = labels
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| fail("label is not an integer"))?;
        out.push((id.to_owned(), speaker, labels));
        offset += line_len;
    }
    Ok(out)
}

/// Manifest entries joined with their transcripts; no feature files are
/// opened.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut transcripts: std::collections::HashMap<
        PathBuf,
        std::collections::HashMap<String, (usize, Vec<usize>)>,
    > = Default::default();
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_len = line.len() as u64 + 1;
        if line.trim().is_empty() {
            offset += line_len;
            continue;
        }
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [feat, tsv, id] = cols[..] else {
            return Err(fail(
                "expected feature path, transcript path and utt_id".into(),
            ));
        };
        let tsv = dir.join(tsv);
        if !transcripts.contains_key(&tsv) {
            let parsed = parse_transcripts(&tsv)?;
            transcripts.insert(
                tsv.clone(),
                parsed.into_iter().map(|(i, s, l)| (i, (s, l))).collect(),
            );
        }
        let (speaker, labels) = transcripts[&tsv]
            .get(id)
            .cloned()
            .ok_or_else(|| fail(format!("utterance {id} missing from transcript")))?;
        out.push(ManifestEntry {
            id: id.to_owned(),
            speaker,
            labels,
            features: dir.join(feat),
        });
        offset += line_len;
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Label sequences only.
pub fn read_transcripts(manifest: &Path) -> Result<Vec<Vec<usize>>> {
    Ok(read_manifest(manifest)?
        .into_iter()
        .map(|e| e.labels)
        .collect())
}

pub fn read_corpus(manifest: &Path, exec: Execution) -> Result<Vec<Utterance>> {
    let entries = read_manifest(manifest)?;
    exec.try_map(&entries, |e| {
        Ok(Utterance {
            id: e.id.clone(),
            speaker: e.speaker,
            features: read_features(&e.features)?,
            labels: e.labels.clone(),
        })
    })
}
