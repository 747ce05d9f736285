//! Session ingestion and tokenization.
//!
//! Session files are JSON: either an array of `{speaker, text}` turns, an
//! object with a `dialogue` array of turns, or — for pre-tokenized input —
//! a bare array of integer token ids. Dialogue turns are rendered as
//! `"Speaker: text\n"` and byte-tokenized (each byte is its own id, so the
//! vocabulary must cover 0–255); pre-tokenized arrays pass through after
//! range validation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Deserialize;

/// One conversational turn.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

/// A parsed session: an ordered, non-empty list of turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionDocument {
    pub turns: Vec<Turn>,
}

impl SessionDocument {
    /// Renders every turn as `"Speaker: text\n"`, concatenated.
    #[must_use]
    pub fn rendered(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            out.push_str(&turn.speaker);
            out.push_str(": ");
            out.push_str(&turn.text);
            out.push('\n');
        }
        out
    }
}

/// A token-id sequence plus a provenance note.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub ids: Vec<u32>,
    pub source: String,
}

impl TokenCorpus {
    /// 64-bit FNV-1a over the little-endian id bytes; stable across runs
    /// and platforms, used to prove two measurements consumed identical
    /// input.
    #[must_use]
    pub fn content_hash(&self) -> u64 {
        hash_ids(&self.ids)
    }
}

/// Errors reading or validating corpus inputs.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed session {path}: {reason}")]
    MalformedSession { path: PathBuf, reason: String },
    #[error("token id {id} outside vocabulary of {vocab} in {path}")]
    BadTokenId { id: i64, vocab: usize, path: PathBuf },
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_fold(h: u64, b: u8) -> u64 {
    (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
}

/// 64-bit FNV-1a over a byte stream.
#[must_use]
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| fnv_fold(h, b))
}

/// 64-bit FNV-1a over a token sequence's little-endian bytes.
#[must_use]
pub fn hash_ids(ids: &[u32]) -> u64 {
    ids.iter()
        .flat_map(|id| id.to_le_bytes())
        .fold(FNV_OFFSET, fnv_fold)
}

/// Reads one session file and returns its token ids.
pub fn tokenize_file(path: &Path, vocab: usize) -> Result<Vec<u32>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    tokenize_source(&text, path, vocab)
}

fn tokenize_source(text: &str, path: &Path, vocab: usize) -> Result<Vec<u32>, CorpusError> {
    let malformed = |reason: &str| CorpusError::MalformedSession {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;

    // A bare array of integers is a pre-tokenized sequence.
    if let serde_json::Value::Array(items) = &value {
        if !items.is_empty() && items.iter().all(serde_json::Value::is_number) {
            let mut ids = Vec::with_capacity(items.len());
            for item in items {
                let id = item
                    .as_i64()
                    .ok_or_else(|| malformed("token ids must be integers"))?;
                if id < 0 || id as u64 >= vocab as u64 {
                    return Err(CorpusError::BadTokenId {
                        id,
                        vocab,
                        path: path.to_path_buf(),
                    });
                }
                ids.push(id as u32);
            }
            return Ok(ids);
        }
    }

    let document = parse_session(&value).map_err(|reason| malformed(&reason))?;
    byte_tokenize(&document.rendered(), path, vocab)
}

fn parse_session(value: &serde_json::Value) -> Result<SessionDocument, String> {
    let turns_value = match value {
        serde_json::Value::Array(_) => value,
        serde_json::Value::Object(map) => map
            .get("dialogue")
            .ok_or("object form must contain a dialogue array")?,
        _ => return Err("expected a turn array or a dialogue object".to_string()),
    };
    let turns: Vec<Turn> = serde_json::from_value(turns_value.clone())
        .map_err(|e| format!("turns must be {{speaker, text}} objects: {e}"))?;
    if turns.is_empty() {
        return Err("dialogue has no turns".to_string());
    }
    if let Some(t) = turns.iter().find(|t| t.speaker.is_empty()) {
        return Err(format!("turn with empty speaker (text {:?})", t.text));
    }
    Ok(SessionDocument { turns })
}

fn byte_tokenize(rendered: &str, path: &Path, vocab: usize) -> Result<Vec<u32>, CorpusError> {
    if vocab < 256 {
        // Bytes map to their own ids, so a narrower vocabulary can reject
        // ordinary text; report the first out-of-range byte.
        if let Some(&b) = rendered.as_bytes().iter().find(|&&b| (b as usize) >= vocab) {
            return Err(CorpusError::BadTokenId {
                id: i64::from(b),
                vocab,
                path: path.to_path_buf(),
            });
        }
    }
    Ok(rendered.bytes().map(u32::from).collect())
}

/// Ingests session files in the given order, concatenating their token
/// sequences into one corpus.
pub fn ingest_sessions(paths: &[PathBuf], vocab: usize) -> Result<TokenCorpus, CorpusError> {
    let mut ids = Vec::new();
    for path in paths {
        ids.extend(tokenize_file(path, vocab)?);
    }
    Ok(TokenCorpus {
        ids,
        source: format!("{} session file(s)", paths.len()),
    })
}

/// Ingests every `.json` file in a directory, in lexicographic path order.
pub fn ingest_dir(dir: &Path, vocab: usize) -> Result<TokenCorpus, CorpusError> {
    let paths = session_paths(dir)?;
    let mut corpus = ingest_sessions(&paths, vocab)?;
    corpus.source = format!("directory {}", dir.display());
    Ok(corpus)
}

/// Lists the `.json` session files of a directory in lexicographic order.
pub fn session_paths(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// One token sequence per session file (used where per-session structure
/// matters, e.g. shift scoring).
pub fn session_sequences(dir: &Path, vocab: usize) -> Result<Vec<Vec<u32>>, CorpusError> {
    session_paths(dir)?
        .iter()
        .map(|p| tokenize_file(p, vocab))
        .collect()
}

/// Truncates or zero-pads a corpus to exactly `n` ids.
#[must_use]
pub fn prepare_sequence(corpus: &TokenCorpus, n: usize) -> Vec<u32> {
    assert!(n >= 1, "sequence length must be at least 1");
    let mut ids: Vec<u32> = corpus.ids.iter().copied().take(n).collect();
    ids.resize(n, 0);
    ids
}

// ===== Synthetic inputs =====

const SPEAKERS: [&str; 2] = ["Counselor", "Client"];
const WORDS: [&str; 24] = [
    "today", "we", "talked", "about", "progress", "and", "what", "feels", "hard", "lately",
    "perhaps", "noticing", "small", "changes", "helps", "you", "ground", "yourself", "when",
    "things", "shift", "between", "sessions", "slowly",
];

/// Deterministic dialogue generator for smoke corpora: alternating
/// speakers, word-salad text.
#[must_use]
pub fn synthetic_sessions(count: usize, turns_per_session: usize, seed: u64) -> Vec<SessionDocument> {
    let mut rng = crate::model::rng_for_seed(seed);
    (0..count)
        .map(|_| {
            let turns = (0..turns_per_session.max(1))
                .map(|t| {
                    let n_words = rng.gen_range(4..12);
                    let text = (0..n_words)
                        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                        .collect::<Vec<_>>()
                        .join(" ");
                    Turn {
                        speaker: SPEAKERS[t % 2].to_string(),
                        text,
                    }
                })
                .collect();
            SessionDocument { turns }
        })
        .collect()
}

/// Serialises synthetic sessions as JSON files (`session_00.json`, …) in a
/// directory, returning the paths written.
pub fn write_synthetic_sessions(
    dir: &Path,
    count: usize,
    turns_per_session: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, CorpusError> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let sessions = synthetic_sessions(count, turns_per_session, seed);
    let mut paths = Vec::with_capacity(sessions.len());
    for (i, session) in sessions.iter().enumerate() {
        let turns: Vec<serde_json::Value> = session
            .turns
            .iter()
            .map(|t| serde_json::json!({ "speaker": t.speaker, "text": t.text }))
            .collect();
        let path = dir.join(format!("session_{i:02}.json"));
        let body = serde_json::to_string_pretty(&serde_json::Value::Array(turns))
            .expect("serializable turns");
        std::fs::write(&path, body).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Deterministic uniform token stream for benchmarking without a session
/// directory.
#[must_use]
pub fn synthetic_tokens(len: usize, vocab: usize, seed: u64) -> TokenCorpus {
    let mut rng = crate::model::rng_for_seed(seed);
    let ids = (0..len)
        .map(|_| rng.gen_range(0..vocab as u32))
        .collect();
    TokenCorpus {
        ids,
        source: format!("synthetic:{len}"),
    }
}

/// A synthetic session with known shift ground truth: `segments` contiguous
/// token blocks, each drawn from one of `segments` disjoint id ranges. At
/// every block boundary a coin flip decides whether the range changes; the
/// flags record which boundaries truly shifted.
#[derive(Debug, Clone)]
pub struct ShiftGroundTruth {
    pub tokens: Vec<u32>,
    /// One flag per internal boundary (`segments − 1` entries).
    pub boundary_shifts: Vec<bool>,
}

/// Generates one ground-truth session. `vocab` is divided into `segments`
/// equal id ranges; blocks that shift jump to a different range.
#[must_use]
pub fn synthetic_shift_session(
    len: usize,
    segments: usize,
    vocab: usize,
    rng: &mut impl Rng,
) -> ShiftGroundTruth {
    assert!(segments >= 2, "need at least two segments");
    assert!(vocab >= 2 * segments, "vocabulary too small to split");
    assert!(len >= segments, "sequence shorter than segment count");
    let range_width = vocab / segments;
    let base = len / segments;
    let remainder = len % segments;
    let mut tokens = Vec::with_capacity(len);
    let mut boundary_shifts = Vec::with_capacity(segments - 1);
    let mut range = rng.gen_range(0..segments);
    for s in 0..segments {
        if s > 0 {
            let shift = rng.gen_bool(0.5);
            if shift {
                let mut next = rng.gen_range(0..segments - 1);
                if next >= range {
                    next += 1;
                }
                range = next;
            }
            boundary_shifts.push(shift);
        }
        let block_len = base + usize::from(s < remainder);
        let lo = (range * range_width) as u32;
        let hi = lo + range_width as u32;
        tokens.extend((0..block_len).map(|_| rng.gen_range(lo..hi)));
    }
    ShiftGroundTruth {
        tokens,
        boundary_shifts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn renders_single_turn_with_seventeen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "one.json",
            r#"[{"speaker": "Therapist", "text": "Hello"}]"#,
        );
        let ids = tokenize_file(&p, 256).unwrap();
        assert_eq!(ids.len(), 17, "\"Therapist: Hello\\n\" is 17 bytes");
        assert_eq!(ids[0], u32::from(b'T'));
        assert_eq!(*ids.last().unwrap(), u32::from(b'\n'));
    }

    #[test]
    fn dialogue_object_form_parses_too() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "obj.json",
            r#"{"dialogue": [{"speaker": "A", "text": "hi"}]}"#,
        );
        let ids = tokenize_file(&p, 256).unwrap();
        assert_eq!(ids.len(), "A: hi\n".len());
    }

    #[test]
    fn empty_dialogue_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "empty.json", "[]");
        assert!(matches!(
            tokenize_file(&p, 256),
            Err(CorpusError::MalformedSession { .. })
        ));
    }

    #[test]
    fn missing_fields_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.json", r#"[{"speaker": "A"}]"#);
        assert!(matches!(
            tokenize_file(&p, 256),
            Err(CorpusError::MalformedSession { .. })
        ));
    }

    #[test]
    fn pretokenized_passthrough_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "ids.json", "[5, 6, 7]");
        assert_eq!(tokenize_file(&p, 256).unwrap(), vec![5, 6, 7]);

        let q = write(dir.path(), "big.json", "[5, 300]");
        match tokenize_file(&q, 256) {
            Err(CorpusError::BadTokenId { id: 300, vocab: 256, .. }) => {}
            other => panic!("expected BadTokenId, got {other:?}"),
        }
        let r = write(dir.path(), "neg.json", "[-1]");
        assert!(matches!(
            tokenize_file(&r, 256),
            Err(CorpusError::BadTokenId { id: -1, .. })
        ));
    }

    #[test]
    fn directory_ingest_concatenates_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b.json", "[2]");
        write(dir.path(), "a.json", "[1]");
        write(dir.path(), "c.json", "[3]");
        write(dir.path(), "notes.txt", "ignored");
        let corpus = ingest_dir(dir.path(), 256).unwrap();
        assert_eq!(corpus.ids, vec![1, 2, 3]);
    }

    #[test]
    fn prepare_sequence_truncates_pads_and_passes_through() {
        let corpus = TokenCorpus {
            ids: vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0],
            source: String::new(),
        };
        assert_eq!(prepare_sequence(&corpus, 4), vec![9, 8, 7, 6]);
        assert_eq!(prepare_sequence(&corpus, 10), corpus.ids);
        let short = TokenCorpus {
            ids: vec![3, 4],
            source: String::new(),
        };
        assert_eq!(prepare_sequence(&short, 5), vec![3, 4, 0, 0, 0]);
    }

    #[test]
    fn content_hash_is_order_sensitive() {
        let a = TokenCorpus {
            ids: vec![1, 2, 3],
            source: String::new(),
        };
        let b = TokenCorpus {
            ids: vec![3, 2, 1],
            source: String::new(),
        };
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }

    #[test]
    fn synthetic_sessions_are_deterministic_and_parseable() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic_sessions(dir.path(), 3, 6, 42).unwrap();
        assert_eq!(paths.len(), 3);
        let corpus_a = ingest_dir(dir.path(), 256).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_synthetic_sessions(dir2.path(), 3, 6, 42).unwrap();
        let corpus_b = ingest_dir(dir2.path(), 256).unwrap();
        assert_eq!(corpus_a.ids, corpus_b.ids);
        assert!(!corpus_a.ids.is_empty());
    }

    #[test]
    fn shift_sessions_use_disjoint_ranges_per_flag() {
        let mut rng = crate::model::rng_for_seed(7);
        let gt = synthetic_shift_session(64, 4, 256, &mut rng);
        assert_eq!(gt.tokens.len(), 64);
        assert_eq!(gt.boundary_shifts.len(), 3);
        let block = |s: usize| &gt.tokens[s * 16..(s + 1) * 16];
        let range_of = |ids: &[u32]| ids.iter().map(|&i| i / 64).collect::<Vec<_>>();
        for s in 1..4 {
            let prev = range_of(block(s - 1));
            let cur = range_of(block(s));
            assert!(prev.iter().all(|&r| r == prev[0]), "block stays in range");
            if gt.boundary_shifts[s - 1] {
                assert_ne!(prev[0], cur[0], "flagged boundary must change ranges");
            } else {
                assert_eq!(prev[0], cur[0], "unflagged boundary keeps its range");
            }
        }
    }
}
