//! Corpus ingestion, writer-disjoint splits, and balanced pair generation.
//!
//! A corpus is a flat collection of word-fragment images keyed by
//! `(writer_id, sample_index)`. Splits partition *writers*, never samples, so
//! evaluation always runs on writers the model has not seen.

pub mod synth;

use crate::error::{Error, Result};
use crate::imageops::RawImage;
use crate::seeds;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub use synth::synthesize_corpus;

/// One image fragment with its writer identity.
#[derive(Debug, Clone)]
pub struct HandwritingSample {
    pub writer_id: u32,
    pub sample_index: u32,
    pub image: RawImage,
    pub source_path: Option<PathBuf>,
}

/// Reference to a sample by its corpus key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SampleRef {
    pub writer_id: u32,
    pub sample_index: u32,
}

impl HandwritingSample {
    pub fn key(&self) -> SampleRef {
        SampleRef { writer_id: self.writer_id, sample_index: self.sample_index }
    }
}

/// An immutable set of samples, sorted by `(writer_id, sample_index)`.
#[derive(Debug, Clone)]
pub struct Corpus {
    samples: Vec<HandwritingSample>,
    name: String,
}

impl Corpus {
    /// Build a corpus from samples, enforcing the type invariants.
    pub fn new(mut samples: Vec<HandwritingSample>, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::EmptyCorpus(PathBuf::from(&name)));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if s.writer_id == 0 {
                return Err(Error::InvalidArgument("writer_id must be >= 1".into()));
            }
            if s.image.data.is_empty() {
                return Err(Error::InvalidArgument("sample image is empty".into()));
            }
            if !seen.insert(s.key()) {
                return Err(Error::DuplicateSample {
                    writer_id: s.writer_id,
                    sample_index: s.sample_index,
                });
            }
        }
        samples.sort_by_key(|s| (s.writer_id, s.sample_index));
        Ok(Self { samples, name })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[HandwritingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn writer_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.writer_id).collect()
    }

    /// Samples grouped by writer, in sorted order.
    pub fn by_writer(&self) -> BTreeMap<u32, Vec<&HandwritingSample>> {
        let mut map: BTreeMap<u32, Vec<&HandwritingSample>> = BTreeMap::new();
        for s in &self.samples {
            map.entry(s.writer_id).or_default().push(s);
        }
        map
    }

    pub fn get(&self, r: SampleRef) -> Option<&HandwritingSample> {
        self.samples
            .binary_search_by_key(&(r.writer_id, r.sample_index), |s| {
                (s.writer_id, s.sample_index)
            })
            .ok()
            .map(|i| &self.samples[i])
    }

    /// The samples belonging to the given writer set, in corpus order.
    pub fn restrict<'a>(&'a self, writers: &BTreeSet<u32>) -> Vec<&'a HandwritingSample> {
        self.samples.iter().filter(|s| writers.contains(&s.writer_id)).collect()
    }
}

/// Writer-disjoint partition: `train_writers` and `test_writers` never share
/// a writer id.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WriterSplit {
    pub train_writers: BTreeSet<u32>,
    pub test_writers: BTreeSet<u32>,
    pub train_fraction_of_train_writers: f64,
}

impl WriterSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train_writers.is_empty() || self.test_writers.is_empty() {
            return Err(Error::Split("both writer sets must be non-empty".into()));
        }
        if self.train_writers.intersection(&self.test_writers).next().is_some() {
            return Err(Error::Split("train and test writers overlap".into()));
        }
        Ok(())
    }
}

/// Split writers at `cutoff`: a seeded fraction of writers `<= cutoff` trains,
/// every writer `> cutoff` tests.
pub fn split_unseen_writers(
    corpus: &Corpus,
    train_writer_cutoff: u32,
    train_fraction: f64,
    seed: u64,
) -> Result<WriterSplit> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Split(format!(
            "train_fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let writers = corpus.writer_ids();
    let eligible: Vec<u32> = writers.iter().copied().filter(|&w| w <= train_writer_cutoff).collect();
    let test_writers: BTreeSet<u32> =
        writers.iter().copied().filter(|&w| w > train_writer_cutoff).collect();
    if eligible.is_empty() || test_writers.is_empty() {
        return Err(Error::Split(format!(
            "cutoff {train_writer_cutoff} leaves no writers on one side (corpus has {} writers)",
            writers.len()
        )));
    }

    let take = ((train_fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    let train_writers: BTreeSet<u32> = if take == eligible.len() {
        eligible.into_iter().collect()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "writer-subset", &[]));
        let mut shuffled = eligible;
        shuffled.shuffle(&mut rng);
        shuffled.into_iter().take(take).collect()
    };

    let split = WriterSplit {
        train_writers,
        test_writers,
        train_fraction_of_train_writers: train_fraction,
    };
    split.validate()?;
    Ok(split)
}

/// Balanced same/different-writer pairs with binary labels
/// (1 = same writer, 0 = different writers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(SampleRef, SampleRef, u8)>,
}

impl PairSet {
    pub fn pairs(&self) -> &[(SampleRef, SampleRef, u8)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All writer ids referenced by any side of any pair.
    pub fn writers(&self) -> BTreeSet<u32> {
        self.pairs
            .iter()
            .flat_map(|(a, b, _)| [a.writer_id, b.writer_id])
            .collect()
    }

    pub fn count_same(&self) -> usize {
        self.pairs.iter().filter(|(_, _, l)| *l == 1).count()
    }

    /// Write `known_path,questioned_path,label` rows. Synthetic samples have
    /// no file, so they serialize as `synthetic:<writer>:<index>`.
    pub fn write_csv(&self, corpus: &Corpus, path: &Path) -> Result<()> {
        let display = |r: &SampleRef| -> String {
            match corpus.get(*r).and_then(|s| s.source_path.clone()) {
                Some(p) => p.display().to_string(),
                None => format!("synthetic:{}:{}", r.writer_id, r.sample_index),
            }
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::BadManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        w.write_record(["known_path", "questioned_path", "label"])
            .and_then(|_| {
                for (k, q, label) in &self.pairs {
                    w.write_record([display(k), display(q), label.to_string()])?;
                }
                w.flush()?;
                Ok(())
            })
            .map_err(|e| Error::BadManifest { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Binary manifest: magic, format version, then fixed-width pair records.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        w.write_all(b"HVPR").map_err(io)?;
        w.write_u32::<LittleEndian>(PAIRSET_FORMAT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(self.pairs.len() as u64).map_err(io)?;
        for (k, q, label) in &self.pairs {
            w.write_u32::<LittleEndian>(k.writer_id).map_err(io)?;
            w.write_u32::<LittleEndian>(k.sample_index).map_err(io)?;
            w.write_u32::<LittleEndian>(q.writer_id).map_err(io)?;
            w.write_u32::<LittleEndian>(q.sample_index).map_err(io)?;
            w.write_u8(*label).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"HVPR" {
            return Err(Error::BadManifest {
                path: path.to_path_buf(),
                reason: "not a pair manifest (bad magic)".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != PAIRSET_FORMAT_VERSION {
            return Err(Error::BadManifest {
                path: path.to_path_buf(),
                reason: format!("unsupported pair manifest version {version}"),
            });
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let kw = r.read_u32::<LittleEndian>().map_err(io)?;
            let ks = r.read_u32::<LittleEndian>().map_err(io)?;
            let qw = r.read_u32::<LittleEndian>().map_err(io)?;
            let qs = r.read_u32::<LittleEndian>().map_err(io)?;
            let label = r.read_u8().map_err(io)?;
            pairs.push((
                SampleRef { writer_id: kw, sample_index: ks },
                SampleRef { writer_id: qw, sample_index: qs },
                label,
            ));
        }
        Ok(Self { pairs })
    }
}

pub const PAIRSET_FORMAT_VERSION: u32 = 1;

/// Emit every within-writer pair (label 1) plus an equal-count seeded sample
/// of cross-writer pairs (label 0), shuffled deterministically.
pub fn generate_pairs(corpus: &Corpus, writers: &BTreeSet<u32>, seed: u64) -> Result<PairSet> {
    let groups: Vec<(u32, Vec<SampleRef>)> = corpus
        .by_writer()
        .into_iter()
        .filter(|(w, _)| writers.contains(w))
        .map(|(w, ss)| (w, ss.iter().map(|s| s.key()).collect()))
        .collect();
    if groups.len() < 2 {
        return Err(Error::Pairing(format!(
            "need at least 2 writers with samples, got {}",
            groups.len()
        )));
    }
    for (w, ss) in &groups {
        if ss.len() < 2 {
            return Err(Error::Pairing(format!(
                "writer {w} has {} sample(s); same-writer pairs need at least 2",
                ss.len()
            )));
        }
    }

    let mut pairs: Vec<(SampleRef, SampleRef, u8)> = Vec::new();
    for (_, ss) in &groups {
        for i in 0..ss.len() {
            for j in i + 1..ss.len() {
                pairs.push((ss[i], ss[j], 1));
            }
        }
    }
    let n_same = pairs.len();

    let flat: Vec<SampleRef> = groups.iter().flat_map(|(_, ss)| ss.iter().copied()).collect();
    let total = flat.len();
    let same_capacity: usize = groups.iter().map(|(_, ss)| ss.len() * (ss.len() - 1) / 2).sum();
    let cross_capacity = total * (total - 1) / 2 - same_capacity;
    if cross_capacity < n_same {
        return Err(Error::Pairing(format!(
            "only {cross_capacity} cross-writer pairs available, need {n_same} to balance"
        )));
    }

    // Rejection-sample distinct cross-writer pairs; the candidate space is
    // far larger than the request in practice, so this terminates quickly.
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "cross-pairs", &[]));
    let mut chosen: HashSet<(usize, usize)> = HashSet::with_capacity(n_same);
    while chosen.len() < n_same {
        let a = rng.gen_range(0..total);
        let b = rng.gen_range(0..total);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        if a == b || flat[a].writer_id == flat[b].writer_id {
            continue;
        }
        chosen.insert((a, b));
    }
    let mut cross: Vec<(usize, usize)> = chosen.into_iter().collect();
    cross.sort_unstable();
    for (a, b) in cross {
        pairs.push((flat[a], flat[b], 0));
    }

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "pair-order", &[]));
    pairs.shuffle(&mut shuffle_rng);
    Ok(PairSet { pairs })
}

/// Load a corpus from an image directory, taking writer ids either from a
/// CSV manifest (`filename,writer_id,sample_index`, header required) or from
/// the `<writer>_<sample>.<ext>` filename pattern.
pub fn load_corpus(root: &Path, manifest: Option<&Path>) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let entries = match manifest {
        Some(m) => read_manifest(root, m)?,
        None => scan_directory(root)?,
    };
    if entries.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for (path, writer_id, sample_index) in entries {
        let image = decode_image(&path)?;
        samples.push(HandwritingSample {
            writer_id,
            sample_index,
            image,
            source_path: Some(path),
        });
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Corpus::new(samples, name)
}

fn decode_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let raw = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            RawImage::new(h as usize, w as usize, 1, g.into_raw())?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            RawImage::new(h as usize, w as usize, 3, rgb.into_raw())?
        }
    };
    Ok(raw)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn scan_directory(root: &Path) -> Result<Vec<(PathBuf, u32, u32)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let (writer_id, sample_index) = parse_stem(&stem).ok_or_else(|| Error::BadManifest {
                path: path.clone(),
                reason: "filename does not match <writer>_<sample> and no manifest given".into(),
            })?;
            out.push((path, writer_id, sample_index));
        }
    }
    out.sort();
    Ok(out)
}

fn parse_stem(stem: &str) -> Option<(u32, u32)> {
    let (w, s) = stem.split_once('_')?;
    Some((w.parse().ok()?, s.parse().ok()?))
}

fn read_manifest(root: &Path, manifest: &Path) -> Result<Vec<(PathBuf, u32, u32)>> {
    let mut rdr = csv::Reader::from_path(manifest).map_err(|e| Error::BadManifest {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::BadManifest { path: manifest.to_path_buf(), reason: e.to_string() })?
        .clone();
    let want = ["filename", "writer_id", "sample_index"];
    if headers.iter().take(3).map(str::trim).ne(want.iter().copied()) {
        return Err(Error::BadManifest {
            path: manifest.to_path_buf(),
            reason: format!("header must be `filename,writer_id,sample_index`, got `{headers:?}`"),
        });
    }
    let mut out = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::BadManifest {
            path: manifest.to_path_buf(),
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::BadManifest { path: manifest.to_path_buf(), reason };
        let filename = record.get(0).ok_or_else(|| bad(format!("row {line}: missing filename")))?;
        let writer_id: u32 = record
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("row {line}: bad writer_id")))?;
        let sample_index: u32 = record
            .get(2)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("row {line}: bad sample_index")))?;
        out.push((root.join(filename), writer_id, sample_index));
    }
    out.sort();
    Ok(out)
}
