//! On-disk formats: JSON lines, the answer vocabulary, ROI fixtures,
//! checkpoints and text embedding tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use mvqa_core::graph::{BBox, Roi, RoiSet};
use mvqa_core::kg::KnowledgeGraph;
use mvqa_core::model::{CheckpointManifest, Model, TokenVocab};
use mvqa_core::numeric::Tensor;
use mvqa_core::qa::AnswerVocabulary;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Creates `path`, and its parent directories.
pub fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

/// One label per line, line index = class index.
pub fn write_vocabulary(path: &Path, vocab: &AnswerVocabulary) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for l in &vocab.labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocabulary(path: &Path) -> Result<AnswerVocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let labels: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
    let counts = vec![0; labels.len()];
    Ok(AnswerVocabulary::from_labels(labels, counts))
}

/// JSON half of an ROI fixture; features live in a sidecar of `n × d_o`
/// little-endian `f32`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureHeader {
    pub image_id: String,
    pub study_id: String,
    pub n: usize,
    pub d_o: usize,
    /// `[x, y, w, h]`, normalized.
    pub boxes: Vec<[f64; 4]>,
    pub class_names: Vec<String>,
    /// Sidecar file name, relative to the header.
    #[serde(default)]
    pub features: Option<String>,
}

fn sidecar_name(image_id: &str) -> String {
    format!("{image_id}.f32")
}

/// Writes `{image_id}.json` and its sidecar into `dir`.
pub fn write_fixture(dir: &Path, rois: &RoiSet) -> Result<PathBuf> {
    let d_o = rois.feature_width();
    let header = FixtureHeader {
        image_id: rois.image_id.clone(),
        study_id: rois.study_id.clone(),
        n: rois.rois.len(),
        d_o,
        boxes: rois.rois.iter().map(|r| [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h]).collect(),
        class_names: rois.rois.iter().map(|r| r.class_name.clone()).collect(),
        features: Some(sidecar_name(&rois.image_id)),
    };
    let mut blob = Vec::with_capacity(4 * header.n * d_o);
    for r in &rois.rois {
        for &v in &r.feature {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = dir.join(format!("{}.json", rois.image_id));
    write_json(&json, &header)?;
    fs::write(dir.join(sidecar_name(&rois.image_id)), blob)?;
    Ok(json)
}

pub fn read_fixture(header_path: &Path) -> Result<RoiSet> {
    let h: FixtureHeader = read_json(header_path)?;
    ensure!(h.boxes.len() == h.n && h.class_names.len() == h.n, "{}: n does not match boxes/class_names", header_path.display());
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let side = dir.join(h.features.clone().unwrap_or_else(|| sidecar_name(&h.image_id)));
    let blob = fs::read(&side).with_context(|| format!("reading {}", side.display()))?;
    ensure!(blob.len() == 4 * h.n * h.d_o, "{}: expected {} feature bytes, found {}", side.display(), 4 * h.n * h.d_o, blob.len());
    let floats: Vec<f64> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let rois = (0..h.n)
        .map(|i| {
            let [x, y, w, hh] = h.boxes[i];
            Roi {
                bbox: BBox::new(x, y, w, hh),
                class_name: h.class_names[i].clone(),
                feature: floats[i * h.d_o..(i + 1) * h.d_o].to_vec(),
            }
        })
        .collect();
    let set = RoiSet { image_id: h.image_id, study_id: h.study_id, rois };
    set.validate().with_context(|| header_path.display().to_string())?;
    Ok(set)
}

/// Every `*.json` fixture in `dir`, sorted by file name.
pub fn read_fixture_dir(dir: &Path) -> Result<Vec<RoiSet>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_fixture(p)).collect()
}

/// First image per study; later images of a study are ignored.
pub fn fixtures_by_study(sets: Vec<RoiSet>) -> BTreeMap<String, RoiSet> {
    let mut out = BTreeMap::new();
    for s in sets {
        out.entry(s.study_id.clone()).or_insert(s);
    }
    out
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "weights.f32";
/// Knowledge graph the semantic graphs were built with, in the text format.
pub const CHECKPOINT_KG: &str = "knowledge_graph.txt";

/// Writes `manifest.json` and `weights.f32` into the directory `dir`.
pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, blob: &[u8]) -> Result<()> {
    write_json(&dir.join(CHECKPOINT_MANIFEST), manifest)?;
    fs::write(dir.join(CHECKPOINT_BLOB), blob).with_context(|| format!("writing {}", dir.display()))?;
    Ok(())
}

pub fn save_checkpoint_kg(dir: &Path, kg: &KnowledgeGraph) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CHECKPOINT_KG), kg.to_text()).with_context(|| format!("writing {}", dir.display()))?;
    Ok(())
}

/// The checkpoint's knowledge graph, or the bundled anatomical graph when
/// the checkpoint carries none.
pub fn load_checkpoint_kg(dir: &Path) -> Result<KnowledgeGraph> {
    let path = dir.join(CHECKPOINT_KG);
    if !path.exists() {
        return Ok(KnowledgeGraph::bundled_anatomical());
    }
    read_kg(&path)
}

pub fn read_kg(path: &Path) -> Result<KnowledgeGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    KnowledgeGraph::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Model)> {
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    let blob = fs::read(dir.join(CHECKPOINT_BLOB)).with_context(|| format!("reading weights in {}", dir.display()))?;
    let model = Model::from_checkpoint(&manifest, &blob).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
    Ok((manifest, model))
}

/// Reads a whitespace-separated `token v1 … vD` table (GloVe text layout)
/// into a `V × D` tensor aligned with `tokens`. Tokens missing from the file
/// keep rows drawn from `fallback`. Returns the table and the hit count.
pub fn read_embeddings(path: &Path, tokens: &TokenVocab, fallback: Tensor) -> Result<(Tensor, usize)> {
    let dim = fallback.cols();
    ensure!(fallback.rows() == tokens.len(), "fallback table has {} rows for {} tokens", fallback.rows(), tokens.len());
    let wanted: BTreeMap<&str, usize> = tokens.tokens().iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut table = fallback;
    let mut hits = 0;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let Some(&row) = wanted.get(word) else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}", path.display(), ln + 1))?;
        if values.len() != dim {
            bail!("{}:{}: {} values, expected {dim}", path.display(), ln + 1, values.len());
        }
        for (k, v) in values.into_iter().enumerate() {
            table.set(row, k, v);
        }
        hits += 1;
    }
    Ok((table, hits))
}
