//! Corpus model, file formats, sampling, and the synthetic generator.
//!
//! A corpus root holds four artifact kinds: `manifest.tsv` (videos, durations,
//! feature paths, splits), `vocab.tsv` (surface form, id, language; ids 0 and
//! 1 are the reserved [MASK] and [UNK] tokens under language `*`),
//! `subtitles.tsv` (timed, per-language token rows), and one `*.vfeat` file
//! per video (`VFEAT v1 M H` header, then M rows of H floats at 9 significant
//! digits). Loading validates everything eagerly and reports errors as
//! `path:line: message`.
//!
//! The clip sampler draws a window uniformly, picks one language uniformly
//! from the pool, and takes every subtitle segment overlapping the window in
//! time order; when nothing overlaps it falls back to the single segment
//! whose midpoint is nearest the window midpoint (ties go to the earlier
//! segment).
//!
//! The synthetic generator builds a K-language corpus whose languages share
//! no surface forms or token ids, so cross-lingual structure is learnable
//! only through the shared videos: each second of video shows one concept,
//! the feature row is that concept's prototype plus noise, and each language
//! renders the concept sequence in its own vocabulary block.

use crate::encoder::{TokenSequence, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

/// Reserved token ids.
pub const MASK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
/// Fraction of text tokens / video seconds noised for the intra-modal views.
pub const MASK_RATE: f64 = 0.05;

/// Canonical text form for every float this crate persists: 9 significant
/// digits, exponent notation. Parsing and re-formatting a value written this
/// way reproduces the same bytes, which makes save/load/save a fixed point.
pub fn fmt_float(v: f64) -> String {
    format!("{:.8e}", v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "pretrain" => Some(Split::Pretrain),
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub video_id: String,
    pub duration_sec: f64,
    /// Relative to the corpus root.
    pub feature_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleSegment {
    pub video_idx: usize,
    pub language: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub tokens: Vec<usize>,
}

/// Shared vocabulary. Ids are dense; each non-reserved id belongs to exactly
/// one language.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    surfaces: Vec<String>,
    language_of: Vec<Option<usize>>,
    by_surface: HashMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn id_of(&self, surface: &str) -> Option<usize> {
        self.by_surface.get(surface).copied()
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.surfaces[id]
    }

    /// None for the reserved tokens.
    pub fn language_of(&self, id: usize) -> Option<usize> {
        self.language_of[id]
    }
}

/// A fully validated corpus.
#[derive(Debug)]
pub struct CorpusManifest {
    pub root: PathBuf,
    /// Ordered language ids; index into this list is the language index used
    /// everywhere else.
    pub languages: Vec<String>,
    pub videos: Vec<VideoEntry>,
    pub vocab: Vocab,
    /// Width H shared by every feature file.
    pub feature_dim: usize,
    video_index: HashMap<String, usize>,
    subtitles: HashMap<(usize, usize), Vec<SubtitleSegment>>,
}

impl CorpusManifest {
    pub fn video_idx(&self, video_id: &str) -> Option<usize> {
        self.video_index.get(video_id).copied()
    }

    pub fn language_index(&self, name: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == name)
    }

    /// Subtitle segments of one (video, language), sorted by start time.
    pub fn segments(&self, video_idx: usize, language: usize) -> &[SubtitleSegment] {
        self.subtitles
            .get(&(video_idx, language))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Language indices with at least one segment for this video, ascending.
    pub fn languages_present(&self, video_idx: usize) -> Vec<usize> {
        (0..self.languages.len())
            .filter(|&l| !self.segments(video_idx, l).is_empty())
            .collect()
    }

    /// Video indices of one split, sorted by video_id.
    pub fn split_videos(&self, split: Split) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.videos.len())
            .filter(|&i| self.videos[i].split == split)
            .collect();
        v.sort_by(|&a, &b| self.videos[a].video_id.cmp(&self.videos[b].video_id));
        v
    }

    pub fn feature_file(&self, video_idx: usize) -> PathBuf {
        self.root.join(&self.videos[video_idx].feature_path)
    }

    /// Loads every feature file, indexed like `videos`.
    pub fn load_all_features(&self) -> Result<Vec<VideoFeatureSequence>> {
        (0..self.videos.len())
            .map(|i| load_video_features(&self.feature_file(i)))
            .collect()
    }
}

fn loc(path: &Path, line: usize, msg: impl AsRef<str>) -> Error {
    Error::Corpus(format!("{}:{}: {}", path.display(), line, msg.as_ref()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("{}: {}", path.display(), e)))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| loc(path, line, format!("bad {field} value {s:?}")))
}

/// Loads and eagerly validates a corpus root.
pub fn load_manifest(root: &Path) -> Result<CorpusManifest> {
    // manifest.tsv
    let mpath = root.join("manifest.tsv");
    let mlines = read_lines(&mpath)?;
    if mlines.first().map(|l| l.as_str()) != Some("video_id\tduration_sec\tfeature_path\tsplit") {
        return Err(loc(&mpath, 1, "bad or missing manifest header"));
    }
    let mut videos = Vec::new();
    let mut video_index = HashMap::new();
    for (i, line) in mlines.iter().enumerate().skip(1) {
        let n = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(loc(&mpath, n, format!("expected 4 columns, got {}", cols.len())));
        }
        let duration_sec = parse_f64(&mpath, n, "duration_sec", cols[1])?;
        if !(duration_sec > 0.0) || !duration_sec.is_finite() {
            return Err(loc(&mpath, n, format!("nonpositive duration {}", cols[1])));
        }
        let split = Split::parse(cols[3])
            .ok_or_else(|| loc(&mpath, n, format!("unknown split {:?}", cols[3])))?;
        if video_index.contains_key(cols[0]) {
            return Err(loc(&mpath, n, format!("duplicate video_id {:?}", cols[0])));
        }
        video_index.insert(cols[0].to_string(), videos.len());
        videos.push(VideoEntry {
            video_id: cols[0].to_string(),
            duration_sec,
            feature_path: cols[2].to_string(),
            split,
        });
    }
    if videos.is_empty() {
        return Err(loc(&mpath, 1, "manifest lists no videos"));
    }

    // vocab.tsv
    let vpath = root.join("vocab.tsv");
    let vlines = read_lines(&vpath)?;
    if vlines.first().map(|l| l.as_str()) != Some("token\tid\tlanguage") {
        return Err(loc(&vpath, 1, "bad or missing vocab header"));
    }
    let mut rows: Vec<(String, usize, String)> = Vec::new();
    for (i, line) in vlines.iter().enumerate().skip(1) {
        let n = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(loc(&vpath, n, format!("expected 3 columns, got {}", cols.len())));
        }
        if cols[0].is_empty() || cols[0].contains(' ') {
            return Err(loc(&vpath, n, format!("bad token surface {:?}", cols[0])));
        }
        let id: usize = cols[1]
            .parse()
            .map_err(|_| loc(&vpath, n, format!("bad id {:?}", cols[1])))?;
        rows.push((cols[0].to_string(), id, cols[2].to_string()));
    }
    let vocab_size = rows.len();
    let mut languages: Vec<String> = Vec::new();
    let mut surfaces = vec![String::new(); vocab_size];
    let mut language_of = vec![None; vocab_size];
    let mut by_surface = HashMap::new();
    let mut seen_ids = vec![false; vocab_size];
    for (i, (surface, id, lang)) in rows.iter().enumerate() {
        let n = i + 2;
        if *id >= vocab_size || seen_ids[*id] {
            return Err(loc(&vpath, n, format!("ids must be dense and unique; bad id {id}")));
        }
        seen_ids[*id] = true;
        if by_surface.insert(surface.clone(), *id).is_some() {
            return Err(loc(&vpath, n, format!("duplicate token {surface:?}")));
        }
        surfaces[*id] = surface.clone();
        if lang != "*" {
            let li = match languages.iter().position(|l| l == lang) {
                Some(li) => li,
                None => {
                    languages.push(lang.clone());
                    languages.len() - 1
                }
            };
            language_of[*id] = Some(li);
        }
    }
    if surfaces.first().map(|s| s.as_str()) != Some(MASK_TOKEN) || language_of[MASK_ID].is_some() {
        return Err(loc(&vpath, 1, format!("id {MASK_ID} must be {MASK_TOKEN} under language *")));
    }
    if surfaces.get(1).map(|s| s.as_str()) != Some(UNK_TOKEN) || language_of[UNK_ID].is_some() {
        return Err(loc(&vpath, 1, format!("id {UNK_ID} must be {UNK_TOKEN} under language *")));
    }
    if languages.is_empty() {
        return Err(loc(&vpath, 1, "vocabulary defines no languages"));
    }
    let vocab = Vocab { surfaces, language_of, by_surface };

    // subtitles.tsv
    let spath = root.join("subtitles.tsv");
    let slines = read_lines(&spath)?;
    if slines.first().map(|l| l.as_str())
        != Some("video_id\tlanguage\tstart_sec\tend_sec\ttokens")
    {
        return Err(loc(&spath, 1, "bad or missing subtitles header"));
    }
    let mut subtitles: HashMap<(usize, usize), Vec<SubtitleSegment>> = HashMap::new();
    for (i, line) in slines.iter().enumerate().skip(1) {
        let n = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(loc(&spath, n, format!("expected 5 columns, got {}", cols.len())));
        }
        let video_idx = *video_index
            .get(cols[0])
            .ok_or_else(|| loc(&spath, n, format!("unknown video_id {:?}", cols[0])))?;
        let language = languages
            .iter()
            .position(|l| l == cols[1])
            .ok_or_else(|| loc(&spath, n, format!("unknown language {:?}", cols[1])))?;
        let start_sec = parse_f64(&spath, n, "start_sec", cols[2])?;
        let end_sec = parse_f64(&spath, n, "end_sec", cols[3])?;
        if !(start_sec >= 0.0 && start_sec < end_sec) {
            return Err(loc(&spath, n, format!("bad segment times [{start_sec}, {end_sec})")));
        }
        if end_sec > videos[video_idx].duration_sec + 1e-9 {
            return Err(loc(&spath, n, format!(
                "segment ends at {end_sec} past video duration {}",
                videos[video_idx].duration_sec
            )));
        }
        let mut tokens = Vec::new();
        for surface in cols[4].split(' ') {
            match vocab.id_of(surface) {
                Some(id) => tokens.push(id),
                None => return Err(loc(&spath, n, format!("unknown token {surface:?}"))),
            }
        }
        if tokens.is_empty() {
            return Err(loc(&spath, n, "segment has no tokens"));
        }
        subtitles.entry((video_idx, language)).or_default().push(SubtitleSegment {
            video_idx,
            language,
            start_sec,
            end_sec,
            tokens,
        });
    }
    for ((vi, li), segs) in subtitles.iter_mut() {
        segs.sort_by(|a, b| a.start_sec.partial_cmp(&b.start_sec).unwrap());
        for w in segs.windows(2) {
            if w[1].start_sec < w[0].end_sec - 1e-9 {
                return Err(Error::Corpus(format!(
                    "{}: overlapping segments for video {} language {}: [{}, {}) and [{}, {})",
                    spath.display(),
                    videos[*vi].video_id,
                    languages[*li],
                    w[0].start_sec,
                    w[0].end_sec,
                    w[1].start_sec,
                    w[1].end_sec
                )));
            }
        }
    }

    // Every test video must be evaluable in every language.
    for (vi, v) in videos.iter().enumerate() {
        if v.split != Split::Test {
            continue;
        }
        for (li, lang) in languages.iter().enumerate() {
            if subtitles.get(&(vi, li)).map(|s| s.is_empty()).unwrap_or(true) {
                return Err(Error::Corpus(format!(
                    "test video {} has no caption in language {}",
                    v.video_id, lang
                )));
            }
        }
    }

    // Feature headers: files exist, one shared width, enough rows per video.
    let mut feature_dim = None;
    for (vi, v) in videos.iter().enumerate() {
        let fpath = root.join(&v.feature_path);
        let file = fs::File::open(&fpath)
            .map_err(|e| Error::Corpus(format!("{}: {}", fpath.display(), e)))?;
        let mut header = String::new();
        BufReader::new(file)
            .read_line(&mut header)
            .map_err(|e| Error::Corpus(format!("{}: {}", fpath.display(), e)))?;
        let (m, h) = parse_vfeat_header(&fpath, header.trim_end())?;
        let need = videos[vi].duration_sec.ceil() as usize;
        if m < need {
            return Err(Error::Corpus(format!(
                "{}: {} feature rows for {} seconds of video",
                fpath.display(),
                m,
                need
            )));
        }
        match feature_dim {
            None => feature_dim = Some(h),
            Some(prev) if prev != h => {
                return Err(Error::Corpus(format!(
                    "{}: feature width {} differs from {}",
                    fpath.display(),
                    h,
                    prev
                )))
            }
            _ => {}
        }
    }

    Ok(CorpusManifest {
        root: root.to_path_buf(),
        languages,
        videos,
        vocab,
        feature_dim: feature_dim.unwrap(),
        video_index,
        subtitles,
    })
}

fn parse_vfeat_header(path: &Path, line: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != 4 || parts[0] != "VFEAT" || parts[1] != "v1" {
        return Err(loc(path, 1, format!("bad feature header {line:?}")));
    }
    let m = parts[2]
        .parse()
        .map_err(|_| loc(path, 1, format!("bad row count {:?}", parts[2])))?;
    let h = parts[3]
        .parse()
        .map_err(|_| loc(path, 1, format!("bad width {:?}", parts[3])))?;
    if h == 0 {
        return Err(loc(path, 1, "feature width 0"));
    }
    Ok((m, h))
}

/// Reads one `VFEAT v1` file in full.
pub fn load_video_features(path: &Path) -> Result<VideoFeatureSequence> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(loc(path, 1, "empty feature file"));
    }
    let (m, h) = parse_vfeat_header(path, &lines[0])?;
    if lines.len() != m + 1 {
        return Err(loc(
            path,
            lines.len(),
            format!("expected {} data rows, found {}", m, lines.len() - 1),
        ));
    }
    let mut data = Vec::with_capacity(m * h);
    for (i, line) in lines.iter().enumerate().skip(1) {
        let n = i + 1;
        let vals: Vec<&str> = line.split(' ').collect();
        if vals.len() != h {
            return Err(loc(path, n, format!("expected {h} values, got {}", vals.len())));
        }
        for v in vals {
            let x = parse_f64(path, n, "feature", v)?;
            if !x.is_finite() {
                return Err(loc(path, n, format!("non-finite feature {v}")));
            }
            data.push(x);
        }
    }
    VideoFeatureSequence::new(m, h, data)
}

/// Writes one `VFEAT v1` file (9 significant digits per value, LF endings).
pub fn write_video_features(path: &Path, v: &VideoFeatureSequence) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "VFEAT v1 {} {}", v.rows, v.cols);
    for r in 0..v.rows {
        let row = &v.data[r * v.cols..(r + 1) * v.cols];
        let line: Vec<String> = row.iter().map(|&x| fmt_float(x)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    fs::write(path, out).map_err(|e| Error::Corpus(format!("{}: {}", path.display(), e)))
}

/// One sampled (window, language, transcript) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub video_idx: usize,
    pub t0: f64,
    pub t1: f64,
    pub language: usize,
    pub tokens: Vec<usize>,
    /// Feature rows covering the window: floor(t0) .. ceil(t1).
    pub row_start: usize,
    pub row_end: usize,
}

/// Transcript for a fixed window: tokens of every segment overlapping
/// [t0, t1) in time order; if none overlaps, the single segment whose
/// midpoint is nearest the window midpoint (earlier segment on ties).
pub fn transcript_for(
    manifest: &CorpusManifest,
    video_idx: usize,
    language: usize,
    t0: f64,
    t1: f64,
) -> Result<Vec<usize>> {
    let segs = manifest.segments(video_idx, language);
    if segs.is_empty() {
        return Err(Error::Sampling(format!(
            "video {} has no subtitles in language {}",
            manifest.videos[video_idx].video_id, manifest.languages[language]
        )));
    }
    let mut tokens = Vec::new();
    for s in segs {
        if s.start_sec < t1 && s.end_sec > t0 {
            tokens.extend_from_slice(&s.tokens);
        }
    }
    if tokens.is_empty() {
        let mid = (t0 + t1) / 2.0;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, s) in segs.iter().enumerate() {
            let d = ((s.start_sec + s.end_sec) / 2.0 - mid).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        tokens.extend_from_slice(&segs[best].tokens);
    }
    Ok(tokens)
}

/// Draws one clip: window first (two uniforms, or none when the video is not
/// longer than min_clip_sec), then the language, uniformly over the pool
/// languages this video actually has. Window draws come first so runs that
/// differ only in the language pool sample identical windows from the same
/// stream.
pub fn sample_clip(
    manifest: &CorpusManifest,
    video_idx: usize,
    rng: &mut Rng,
    min_clip_sec: f64,
    max_clip_sec: f64,
    language_pool: &[usize],
) -> Result<ClipSample> {
    let dur = manifest.videos[video_idx].duration_sec;
    let (t0, t1) = if dur <= min_clip_sec {
        (0.0, dur)
    } else {
        let t0 = rng.range(0.0, dur - min_clip_sec);
        let span = rng.range(min_clip_sec, max_clip_sec.min(dur - t0));
        (t0, t0 + span)
    };
    let present = manifest.languages_present(video_idx);
    let avail: Vec<usize> = present
        .iter()
        .copied()
        .filter(|l| language_pool.contains(l))
        .collect();
    if avail.is_empty() {
        return Err(Error::Sampling(format!(
            "video {} has no subtitles in the language pool",
            manifest.videos[video_idx].video_id
        )));
    }
    let language = avail[rng.below(avail.len())];
    let tokens = transcript_for(manifest, video_idx, language, t0, t1)?;
    Ok(ClipSample {
        video_idx,
        t0,
        t1,
        language,
        tokens,
        row_start: t0.floor() as usize,
        row_end: t1.ceil() as usize,
    })
}

/// Count of positions noised for a length-n input: round(rate*n) half-up,
/// never less than one, so a noised view always differs structurally.
pub fn mask_count(rate: f64, n: usize) -> usize {
    debug_assert!(rate > 0.0 && rate < 1.0);
    ((rate * n as f64 + 0.5).floor() as usize).max(1)
}

/// Replaces mask_count positions (uniform, without replacement) with the
/// reserved [MASK] id.
pub fn mask_text_tokens(x: &TokenSequence, rate: f64, rng: &mut Rng) -> TokenSequence {
    let mut tokens = x.tokens.clone();
    let k = mask_count(rate, tokens.len()).min(tokens.len());
    for pos in rng.choose_k(tokens.len(), k) {
        tokens[pos] = MASK_ID;
    }
    TokenSequence { language: x.language, tokens }
}

/// Zeroes mask_count feature rows (uniform, without replacement); the other
/// rows are copied bit for bit.
pub fn mask_video_rows(v: &VideoFeatureSequence, rate: f64, rng: &mut Rng) -> VideoFeatureSequence {
    let mut data = v.data.clone();
    let k = mask_count(rate, v.rows).min(v.rows);
    for row in rng.choose_k(v.rows, k) {
        for x in &mut data[row * v.cols..(row + 1) * v.cols] {
            *x = 0.0;
        }
    }
    VideoFeatureSequence { rows: v.rows, cols: v.cols, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// (x, v) pairs, one language per clip.
    Single,
    /// (x, v, y) triples with two distinct languages describing one window.
    Pivoted,
}

/// One training example as sampled from the corpus.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BatchItem {
    pub video_idx: usize,
    pub t0: f64,
    pub t1: f64,
    pub text: TokenSequence,
    pub features: VideoFeatureSequence,
    /// Second-language rendering of the same window (pivoted mode).
    pub second_text: Option<TokenSequence>,
}

/// Materializes one batch from distinct video indices. Each item consumes
/// the named stream `clip/e{epoch}/v{video_id}` of `seed`, so two runs with
/// the same seed pick identical windows regardless of pool composition.
#[allow(clippy::too_many_arguments)]
pub fn assemble_batch(
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    indices: &[usize],
    mode: BatchMode,
    language_pool: &[usize],
    min_clip_sec: f64,
    max_clip_sec: f64,
    max_text_len: usize,
    max_video_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<BatchItem>> {
    if indices.is_empty() {
        return Err(Error::Sampling("batch over an empty video set".into()));
    }
    let distinct: HashSet<usize> = indices.iter().copied().collect();
    if distinct.len() != indices.len() {
        return Err(Error::Sampling("batch repeats a video".into()));
    }
    let mut out = Vec::with_capacity(indices.len());
    for &vi in indices {
        let video_id = &manifest.videos[vi].video_id;
        let mut rng = Rng::stream(seed, &format!("clip/e{epoch}/v{video_id}"));
        let clip = sample_clip(manifest, vi, &mut rng, min_clip_sec, max_clip_sec, language_pool)?;
        let mut tokens = clip.tokens.clone();
        tokens.truncate(max_text_len);
        let text = TokenSequence { language: clip.language, tokens };
        let full = &features[vi];
        let row_end = clip.row_end.min(full.rows);
        let window = VideoFeatureSequence {
            rows: row_end - clip.row_start,
            cols: full.cols,
            data: full.data[clip.row_start * full.cols..row_end * full.cols].to_vec(),
        }
        .truncated(max_video_len);
        let second_text = match mode {
            BatchMode::Single => None,
            BatchMode::Pivoted => {
                let present = manifest.languages_present(vi);
                let others: Vec<usize> = present
                    .iter()
                    .copied()
                    .filter(|l| language_pool.contains(l) && *l != clip.language)
                    .collect();
                if others.is_empty() {
                    return Err(Error::Sampling(format!(
                        "pivoted batch needs two pool languages for video {video_id}"
                    )));
                }
                let y = others[rng.below(others.len())];
                let mut ytoks = transcript_for(manifest, vi, y, clip.t0, clip.t1)?;
                ytoks.truncate(max_text_len);
                Some(TokenSequence { language: y, tokens: ytoks })
            }
        };
        out.push(BatchItem {
            video_idx: vi,
            t0: clip.t0,
            t1: clip.t1,
            text,
            features: window,
            second_text,
        });
    }
    Ok(out)
}

/// Per-split video counts for the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub pretrain: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> SplitCounts {
        SplitCounts { pretrain: 200, train: 64, val: 32, test: 100 }
    }
}

/// Recipe for a synthetic corpus. Languages have disjoint vocabulary blocks
/// (token id = 2 + language_index * n_concepts + concept), every video second
/// shows one concept, and each language's caption renders the second-by-
/// second concepts of its segment in its own block. Same spec + seed gives
/// a byte-identical tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_languages")]
    pub languages: Vec<String>,
    #[serde(default = "default_n_concepts")]
    pub n_concepts: usize,
    #[serde(default)]
    pub videos: SplitCounts,
    /// Inclusive range of segments per video.
    #[serde(default = "default_segments_per_video")]
    pub segments_per_video: [usize; 2],
    /// Inclusive range of whole-second segment lengths.
    #[serde(default = "default_segment_len_sec")]
    pub segment_len_sec: [usize; 2],
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Per-second feature = concept prototype + Normal(0, noise_std^2).
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Chance that one token of a sentence is replaced by a random token of
    /// the same language, making captions imperfect descriptions.
    #[serde(default = "default_distractor_prob")]
    pub distractor_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_languages() -> Vec<String> {
    vec!["en".into(), "l2".into()]
}
fn default_n_concepts() -> usize {
    50
}
fn default_segments_per_video() -> [usize; 2] {
    [3, 6]
}
fn default_segment_len_sec() -> [usize; 2] {
    [4, 8]
}
fn default_feature_dim() -> usize {
    16
}
fn default_noise_std() -> f64 {
    0.1
}
fn default_distractor_prob() -> f64 {
    0.1
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            languages: default_languages(),
            n_concepts: default_n_concepts(),
            videos: SplitCounts::default(),
            segments_per_video: default_segments_per_video(),
            segment_len_sec: default_segment_len_sec(),
            feature_dim: default_feature_dim(),
            noise_std: default_noise_std(),
            distractor_prob: default_distractor_prob(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one language".into()));
        }
        let mut seen = HashSet::new();
        for l in &self.languages {
            if l.is_empty() || l == "*" || l.contains([' ', '\t']) || !seen.insert(l) {
                return Err(Error::Config(format!("bad or duplicate language id {l:?}")));
            }
        }
        if self.n_concepts < 2 {
            return Err(Error::Config("n_concepts must be at least 2".into()));
        }
        if self.videos.pretrain + self.videos.train + self.videos.val + self.videos.test == 0 {
            return Err(Error::Config("spec generates no videos".into()));
        }
        for (name, [lo, hi]) in [
            ("segments_per_video", self.segments_per_video),
            ("segment_len_sec", self.segment_len_sec),
        ] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("bad noise_std {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.distractor_prob) {
            return Err(Error::Config(format!("bad distractor_prob {}", self.distractor_prob)));
        }
        Ok(())
    }

    fn token_id(&self, language: usize, concept: usize) -> usize {
        2 + language * self.n_concepts + concept
    }

    fn surface(&self, language: usize, concept: usize) -> String {
        format!("{}w{:03}", self.languages[language], concept)
    }
}

fn draw_in(rng: &mut Rng, [lo, hi]: [usize; 2]) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Generates a corpus root and loads it back, so the returned manifest has
/// passed the same validation as any on-disk corpus.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_root: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let io = |e: std::io::Error| Error::Corpus(format!("{}: {}", out_root.display(), e));
    fs::create_dir_all(out_root.join("features")).map_err(io)?;

    // Concept prototypes, row by row.
    let mut grng = Rng::stream(spec.seed, "gen/concepts");
    let proto: Vec<f64> = (0..spec.n_concepts * spec.feature_dim)
        .map(|_| grng.normal(0.0, 1.0))
        .collect();

    let mut manifest = String::from("video_id\tduration_sec\tfeature_path\tsplit\n");
    let mut subtitles = String::from("video_id\tlanguage\tstart_sec\tend_sec\ttokens\n");

    let splits = [
        (Split::Pretrain, spec.videos.pretrain),
        (Split::Train, spec.videos.train),
        (Split::Val, spec.videos.val),
        (Split::Test, spec.videos.test),
    ];
    let mut next_video = 0usize;
    for (split, count) in splits {
        for _ in 0..count {
            let video_id = format!("v{next_video:05}");
            next_video += 1;
            let mut rng = Rng::stream(spec.seed, &format!("gen/video/{video_id}"));
            let n_segments = draw_in(&mut rng, spec.segments_per_video);

            // Segment boundaries, concepts, and features, in time order.
            let mut t = 0usize;
            let mut rows: Vec<f64> = Vec::new();
            let mut segments: Vec<(usize, usize, Vec<usize>)> = Vec::new();
            for _ in 0..n_segments {
                let len = draw_in(&mut rng, spec.segment_len_sec);
                let concepts: Vec<usize> =
                    (0..len).map(|_| rng.below(spec.n_concepts)).collect();
                for &c in &concepts {
                    for d in 0..spec.feature_dim {
                        let base = proto[c * spec.feature_dim + d];
                        rows.push(base + rng.normal(0.0, spec.noise_std));
                    }
                }
                segments.push((t, t + len, concepts));
                t += len;
            }
            let duration = t;

            // One sentence per (segment, language); a distractor sometimes
            // swaps one token within the language's own block.
            for (start, end, concepts) in &segments {
                for li in 0..spec.languages.len() {
                    let mut concept_seq = concepts.clone();
                    if rng.uniform() < spec.distractor_prob {
                        let pos = rng.below(concept_seq.len());
                        concept_seq[pos] = rng.below(spec.n_concepts);
                    }
                    let words: Vec<String> =
                        concept_seq.iter().map(|&c| spec.surface(li, c)).collect();
                    let _ = writeln!(
                        subtitles,
                        "{video_id}\t{}\t{}\t{}\t{}",
                        spec.languages[li],
                        fmt_float(*start as f64),
                        fmt_float(*end as f64),
                        words.join(" ")
                    );
                }
            }

            let feature_path = format!("features/{video_id}.vfeat");
            write_video_features(
                &out_root.join(&feature_path),
                &VideoFeatureSequence::new(duration, spec.feature_dim, rows)?,
            )?;
            let _ = writeln!(
                manifest,
                "{video_id}\t{}\t{feature_path}\t{}",
                fmt_float(duration as f64),
                split.name()
            );
        }
    }

    let mut vocab = String::from("token\tid\tlanguage\n");
    let _ = writeln!(vocab, "{MASK_TOKEN}\t{MASK_ID}\t*");
    let _ = writeln!(vocab, "{UNK_TOKEN}\t{UNK_ID}\t*");
    for li in 0..spec.languages.len() {
        for c in 0..spec.n_concepts {
            let _ = writeln!(vocab, "{}\t{}\t{}", spec.surface(li, c), spec.token_id(li, c), spec.languages[li]);
        }
    }

    fs::write(out_root.join("manifest.tsv"), manifest).map_err(io)?;
    fs::write(out_root.join("vocab.tsv"), vocab).map_err(io)?;
    fs::write(out_root.join("subtitles.tsv"), subtitles).map_err(io)?;
    load_manifest(out_root)
}
