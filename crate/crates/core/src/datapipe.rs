//! Deterministic, resumable streaming data pipeline: seeded source mixing
//! with a bounded shuffle buffer, byte-level chat tokenization with loss
//! masking, greedy packing, geometry-preserving augmentation, and a small
//! storage layer (local directory + in-memory LRU shim).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::training::Role;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Vocabulary: plain bytes occupy ids 0..255; special tokens follow.

pub const V_BYTES: usize = 256;
pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const IM_START: usize = 258;
pub const IM_END: usize = 259;
/// Placeholder id occupying each image token slot in a rendered chat.
pub const IMG: usize = 260;
pub const VOCAB_SIZE: usize = 261;

pub fn text_tokens(s: &str) -> Vec<usize> {
    s.bytes().map(|b| b as usize).collect()
}

/// Lossy inverse of [`text_tokens`]: byte tokens only, specials skipped.
pub fn tokens_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < V_BYTES).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

// ---------------------------------------------------------------------------
// ChatML rendering with per-token role labels.

/// One piece of a turn's content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    /// A resolvable image reference occupying `tokens` placeholder slots.
    Image { id: String, tokens: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub segments: Vec<Segment>,
}

impl Turn {
    pub fn text(role: &str, s: &str) -> Self {
        Turn { role: role.into(), segments: vec![Segment::Text(s.into())] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ChatExample {
    pub turns: Vec<Turn>,
}

fn role_label(role: &str) -> Result<Role> {
    match role {
        "system" => Ok(Role::System),
        "user" => Ok(Role::User),
        "assistant" => Ok(Role::Assistant),
        other => Err(Error::Invalid(format!("render_chat: unknown role {other:?}"))),
    }
}

/// Renders an example in ChatML framing: each turn is
/// `IM_START role \n content IM_END \n`. Labels drive loss masking:
/// assistant content is `Assistant`, the end markers of assistant turns are
/// `Special` (supervised), everything else is structural or prompt material
/// (`System` / `User`, masked). Image refs become `IMG` placeholder spans.
pub fn render_chat(ex: &ChatExample) -> Result<(Vec<usize>, Vec<Role>)> {
    if ex.turns.is_empty() {
        return Err(Error::Invalid("render_chat: no turns".into()));
    }
    let mut ids = Vec::new();
    let mut roles = Vec::new();
    for turn in &ex.turns {
        let label = role_label(&turn.role)?;
        let content_label = label;
        let push = |ids: &mut Vec<usize>, roles: &mut Vec<Role>, t: usize, r: Role| {
            ids.push(t);
            roles.push(r);
        };
        push(&mut ids, &mut roles, IM_START, Role::System);
        for t in text_tokens(&turn.role) {
            push(&mut ids, &mut roles, t, Role::System);
        }
        push(&mut ids, &mut roles, b'\n' as usize, Role::System);
        for seg in &turn.segments {
            match seg {
                Segment::Text(s) => {
                    for t in text_tokens(s) {
                        push(&mut ids, &mut roles, t, content_label);
                    }
                }
                Segment::Image { tokens, .. } => {
                    if *tokens == 0 {
                        return Err(Error::Invalid("render_chat: empty image span".into()));
                    }
                    for _ in 0..*tokens {
                        push(&mut ids, &mut roles, IMG, Role::System);
                    }
                }
            }
        }
        let end_label = if label == Role::Assistant { Role::Special } else { Role::System };
        push(&mut ids, &mut roles, IM_END, end_label);
        push(&mut ids, &mut roles, b'\n' as usize, end_label);
    }
    Ok((ids, roles))
}

/// Inverse of [`render_chat`] for round-trip checks: recovers the turn
/// texts (image spans reported as empty strings are skipped).
pub fn parse_chat(ids: &[usize]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        if ids[i] != IM_START {
            return Err(Error::Format("parse_chat: expected IM_START".into()));
        }
        i += 1;
        let hdr_end = ids[i..]
            .iter()
            .position(|&t| t == b'\n' as usize)
            .ok_or_else(|| Error::Format("parse_chat: unterminated header".into()))?;
        let role = tokens_text(&ids[i..i + hdr_end]);
        i += hdr_end + 1;
        let body_end = ids[i..]
            .iter()
            .position(|&t| t == IM_END)
            .ok_or_else(|| Error::Format("parse_chat: missing IM_END".into()))?;
        let text = tokens_text(&ids[i..i + body_end]);
        out.push((role, text));
        i += body_end + 1;
        if ids.get(i) == Some(&(b'\n' as usize)) {
            i += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Deterministic resumable streaming.

pub const STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    /// (source name, weight); weights are normalized internally.
    pub sources: Vec<(String, f32)>,
}

impl MixSpec {
    pub fn validate(&self) -> Result<Vec<f32>> {
        if self.sources.is_empty() {
            return Err(Error::Config("MixSpec: no sources".into()));
        }
        if self.sources.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("MixSpec: negative or non-finite weight".into()));
        }
        let sum: f32 = self.sources.iter().map(|(_, w)| w).sum();
        if sum <= 0.0 {
            return Err(Error::Config("MixSpec: weights sum to zero".into()));
        }
        Ok(self.sources.iter().map(|(_, w)| w / sum).collect())
    }
}

/// Complete, serializable position of the stream. Two equal states produce
/// identical futures; this is the resumption guarantee's foundation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StreamState {
    pub version: u32,
    pub seed: u64,
    pub weights: Vec<f32>,
    pub source_lens: Vec<usize>,
    /// Next unread index per source (monotone; wraps via modulo at read).
    pub cursors: Vec<u64>,
    /// Bounded shuffle buffer contents per source.
    pub buffers: Vec<Vec<u64>>,
    pub buffer_cap: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl StreamState {
    /// Order-sensitive FNV-1a digest of the shuffle buffers, for cheap
    /// drift detection in logs.
    pub fn buffer_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for buf in &self.buffers {
            for &v in buf {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Format(format!("StreamState: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let s: StreamState = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("StreamState: {e}")))?;
        if s.version != STREAM_VERSION {
            return Err(Error::Format(format!(
                "StreamState: version {} != {STREAM_VERSION}",
                s.version
            )));
        }
        Ok(s)
    }

    /// Stores the state inside a checkpoint tensor map.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(crate::checkpoint::bytes_to_tensor(&self.to_bytes()?))
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::from_bytes(&crate::checkpoint::tensor_to_bytes(t)?)
    }
}

/// Infinite deterministic stream over sources of known sizes. Items are
/// `(source index, example index)` pairs; resolving them to bytes is the
/// storage layer's concern.
#[derive(Debug, Clone)]
pub struct Stream {
    state: StreamState,
}

pub const DEFAULT_SHUFFLE_BUFFER: usize = 1024;

impl Stream {
    pub fn new(mix: &MixSpec, source_lens: &[usize], seed: u64, buffer_cap: usize) -> Result<Self> {
        let weights = mix.validate()?;
        if source_lens.len() != weights.len() {
            return Err(Error::Config("Stream: sources vs lens mismatch".into()));
        }
        if source_lens.iter().any(|&l| l == 0) {
            return Err(Error::Config("Stream: empty source".into()));
        }
        if buffer_cap == 0 {
            return Err(Error::Config("Stream: zero shuffle buffer".into()));
        }
        let mut state = StreamState {
            version: STREAM_VERSION,
            seed,
            weights,
            source_lens: source_lens.to_vec(),
            cursors: vec![0; source_lens.len()],
            buffers: vec![Vec::new(); source_lens.len()],
            buffer_cap,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        // Prefill each buffer up to capacity (bounded by the source epoch).
        for s in 0..source_lens.len() {
            let fill = buffer_cap.min(source_lens[s]);
            for _ in 0..fill {
                let idx = state.cursors[s] % source_lens[s] as u64;
                state.buffers[s].push(idx);
                state.cursors[s] += 1;
            }
        }
        Ok(Stream { state })
    }

    /// Resumes from a serialized state; the stream continues exactly as the
    /// original would have.
    pub fn resume(state: StreamState) -> Result<Self> {
        if state.version != STREAM_VERSION {
            return Err(Error::Format(format!(
                "Stream::resume: version {} != {STREAM_VERSION}",
                state.version
            )));
        }
        Ok(Stream { state })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn checkpoint(&self) -> StreamState {
        self.state.clone()
    }

    /// Next `(source, example index)` pair.
    pub fn next_item(&mut self) -> (usize, u64) {
        let st = &mut self.state;
        let source = {
            let mut u: f32 = st.rng.gen();
            let mut pick = st.weights.len() - 1;
            for (i, &w) in st.weights.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        let len = st.source_lens[source] as u64;
        let buf = &mut st.buffers[source];
        let slot = st.rng.gen_range(0..buf.len());
        let out = buf[slot];
        buf[slot] = st.cursors[source] % len;
        st.cursors[source] += 1;
        st.step += 1;
        (source, out)
    }
}

// ---------------------------------------------------------------------------
// Packing.

/// One tokenized, role-labeled example ready for packing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenExample {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

/// One packed training sequence of fixed length: example boundaries cover
/// the content region; the tail is PAD tokens labeled unsupervised.
#[derive(Debug, Clone)]
pub struct PackedSeq {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
    pub boundaries: Vec<usize>,
    /// Content ends here; everything after is padding.
    pub pad_from: usize,
}

/// Greedy first-fit packing into fixed `seq_len` sequences. With truncation
/// disabled, an example longer than `seq_len` is an error.
pub fn pack_examples(
    examples: &[TokenExample],
    seq_len: usize,
    truncate: bool,
) -> Result<Vec<PackedSeq>> {
    if seq_len == 0 {
        return Err(Error::Invalid("pack_examples: zero seq_len".into()));
    }
    let mut seqs: Vec<PackedSeq> = Vec::new();
    for ex in examples {
        if ex.ids.len() != ex.roles.len() {
            return Err(Error::Shape("pack_examples: ids/roles length".into()));
        }
        if ex.ids.is_empty() {
            return Err(Error::Invalid("pack_examples: empty example".into()));
        }
        let take = if ex.ids.len() > seq_len {
            if !truncate {
                return Err(Error::Invalid(format!(
                    "pack_examples: example of {} tokens exceeds seq_len {seq_len}",
                    ex.ids.len()
                )));
            }
            seq_len
        } else {
            ex.ids.len()
        };
        // First fit.
        let slot = seqs.iter_mut().find(|s| s.pad_from + take <= seq_len);
        let seq = match slot {
            Some(s) => s,
            None => {
                seqs.push(PackedSeq {
                    ids: Vec::with_capacity(seq_len),
                    roles: Vec::with_capacity(seq_len),
                    boundaries: vec![0],
                    pad_from: 0,
                });
                seqs.last_mut().unwrap()
            }
        };
        seq.ids.extend_from_slice(&ex.ids[..take]);
        seq.roles.extend_from_slice(&ex.roles[..take]);
        seq.pad_from += take;
        seq.boundaries.push(seq.pad_from);
    }
    for s in &mut seqs {
        while s.ids.len() < seq_len {
            s.ids.push(PAD);
            s.roles.push(Role::System);
        }
    }
    Ok(seqs)
}

/// Recovers the packed examples (in packing order) for round-trip checks.
pub fn unpack_examples(seqs: &[PackedSeq]) -> Vec<TokenExample> {
    let mut out = Vec::new();
    for s in seqs {
        for win in s.boundaries.windows(2) {
            out.push(TokenExample {
                ids: s.ids[win[0]..win[1]].to_vec(),
                roles: s.roles[win[0]..win[1]].to_vec(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Geometry-preserving augmentation.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomOp {
    /// Clockwise quarter turn.
    Rotate90,
    HFlip,
}

/// Axis-aligned box (x0, y0, x1, y1) with exclusive right/bottom edges, in
/// pixel units of an `[h, w, c]` image.
pub type BoxCoords = [f32; 4];

/// Applies a discrete geometric op to the image and transforms every box
/// exactly onto the moved pixel content.
pub fn augment_with_geometry(
    img: &Tensor,
    boxes: &[BoxCoords],
    op: GeomOp,
) -> Result<(Tensor, Vec<BoxCoords>)> {
    if img.shape().len() != 3 {
        return Err(Error::Shape("augment: expected [h, w, c] image".into()));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    for b in boxes {
        let [x0, y0, x1, y1] = *b;
        if !(0.0 <= x0 && x0 <= x1 && x1 <= w as f32 && 0.0 <= y0 && y0 <= y1 && y1 <= h as f32) {
            return Err(Error::Invalid(format!("augment: box {b:?} out of {w}x{h} bounds")));
        }
    }
    let at = |r: usize, col: usize, ch: usize| img.data()[(r * w + col) * c + ch];
    match op {
        GeomOp::HFlip => {
            let mut data = Vec::with_capacity(h * w * c);
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        data.push(at(r, w - 1 - col, ch));
                    }
                }
            }
            let out_boxes = boxes
                .iter()
                .map(|&[x0, y0, x1, y1]| [w as f32 - x1, y0, w as f32 - x0, y1])
                .collect();
            Ok((Tensor::new(vec![h, w, c], data)?, out_boxes))
        }
        GeomOp::Rotate90 => {
            // Pixel (r, col) of the source lands at (col, h-1-r) in the
            // [w, h] result.
            let mut data = vec![0.0f32; h * w * c];
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        data[(col * h + (h - 1 - r)) * c + ch] = at(r, col, ch);
                    }
                }
            }
            let out_boxes = boxes
                .iter()
                .map(|&[x0, y0, x1, y1]| [h as f32 - y1, x0, h as f32 - y0, x1])
                .collect();
            Ok((Tensor::new(vec![w, h, c], data)?, out_boxes))
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest + storage.

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub path: String,
    pub length: usize,
    pub modality: String,
}

pub fn write_manifest<P: AsRef<Path>>(path: P, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Backend-agnostic blob fetch; remote object stores are out of scope, a
/// local directory stands in.
pub trait Storage {
    fn fetch(&mut self, key: &str) -> Result<Vec<u8>>;
}

pub struct DirStorage {
    root: PathBuf,
}

impl DirStorage {
    pub fn new<P: Into<PathBuf>>(root: P) -> Self {
        DirStorage { root: root.into() }
    }
}

impl Storage for DirStorage {
    fn fetch(&mut self, key: &str) -> Result<Vec<u8>> {
        Ok(std::fs::read(self.root.join(key))?)
    }
}

/// In-memory LRU cache in front of any storage backend.
pub struct LruStorage<S: Storage> {
    inner: S,
    cap: usize,
    entries: HashMap<String, Vec<u8>>,
    order: Vec<String>, // most recent last
    pub hits: usize,
    pub misses: usize,
}

impl<S: Storage> LruStorage<S> {
    pub fn new(inner: S, cap: usize) -> Self {
        LruStorage { inner, cap: cap.max(1), entries: HashMap::new(), order: Vec::new(), hits: 0, misses: 0 }
    }

    fn touch(&mut self, key: &str) {
        if let Some(i) = self.order.iter().position(|k| k == key) {
            self.order.remove(i);
        }
        self.order.push(key.to_string());
    }
}

impl<S: Storage> Storage for LruStorage<S> {
    fn fetch(&mut self, key: &str) -> Result<Vec<u8>> {
        if let Some(v) = self.entries.get(key).cloned() {
            self.hits += 1;
            self.touch(key);
            return Ok(v);
        }
        self.misses += 1;
        let v = self.inner.fetch(key)?;
        if self.entries.len() >= self.cap {
            let evict = self.order.remove(0);
            self.entries.remove(&evict);
        }
        self.entries.insert(key.to_string(), v.clone());
        self.touch(key);
        Ok(v)
    }
}
