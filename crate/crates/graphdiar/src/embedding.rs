//! Segment/embedding data model and on-disk formats.
//!
//! A session is a list of speech segments, each carrying a fixed-dimensional
//! speaker embedding plus timing metadata and (for simulated or annotated
//! data) a ground-truth speaker label. Embeddings travel as a dense `N×D`
//! row-major matrix.
//!
//! Two formats live here:
//!
//! * the embedding file, a little-endian binary container with an explicit
//!   header, chosen so save/load round trips are bit-exact;
//! * RTTM, the line-oriented interchange format for diarization output,
//!   `SPEAKER <session> 1 <start> <dur> <NA> <NA> spk<k> <NA> <NA>`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

/// Leading magic bytes of an embedding file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"SPKEMB1\n";

/// Timing and identity of one speech segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMeta {
    pub session_id: String,
    /// Segment onset in seconds, nonnegative.
    pub start: f64,
    /// Segment length in seconds, strictly positive.
    pub duration: f64,
    /// Ground-truth speaker, when known.
    pub speaker: Option<usize>,
}

/// One session's embeddings: an `N×D` matrix with one [`SegmentMeta`] per row.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    vectors: Array2<f64>,
    meta: Vec<SegmentMeta>,
}

impl EmbeddingMatrix {
    /// Validates and wraps a matrix with its per-row metadata.
    ///
    /// Rejects: row/metadata count mismatch, zero columns, non-finite
    /// values, nonpositive durations, negative starts, session ids with
    /// whitespace (they would break both file formats), and segments that
    /// go backwards in time within one session.
    pub fn new(vectors: Array2<f64>, meta: Vec<SegmentMeta>) -> Result<Self> {
        if vectors.nrows() != meta.len() {
            return Err(Error::Config(format!(
                "matrix has {} rows but {} metadata entries",
                vectors.nrows(),
                meta.len()
            )));
        }
        if vectors.ncols() == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if let Some((idx, _)) = vectors.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite embedding value at flat index {idx}"
            )));
        }
        for (i, m) in meta.iter().enumerate() {
            if m.session_id.is_empty() || m.session_id.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "segment {i}: session id must be non-empty without whitespace"
                )));
            }
            if !(m.start.is_finite() && m.start >= 0.0) {
                return Err(Error::Config(format!("segment {i}: bad start {}", m.start)));
            }
            if !(m.duration.is_finite() && m.duration > 0.0) {
                return Err(Error::Config(format!(
                    "segment {i}: duration must be positive, got {}",
                    m.duration
                )));
            }
        }
        for i in 1..meta.len() {
            if meta[i].session_id == meta[i - 1].session_id && meta[i].start < meta[i - 1].start {
                return Err(Error::Config(format!(
                    "segments out of order: segment {i} starts at {} before {}",
                    meta[i].start,
                    meta[i - 1].start
                )));
            }
        }
        Ok(EmbeddingMatrix { vectors, meta })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn meta(&self) -> &[SegmentMeta] {
        &self.meta
    }

    /// Number of segments (rows).
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding dimension (columns).
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Ground-truth labels, if every segment carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.meta.iter().map(|m| m.speaker).collect()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.meta.iter().map(|m| m.duration).collect()
    }

    /// Largest deviation of any row norm from 1; cosine-mode inputs are
    /// expected to keep this within about 1e-6.
    pub fn max_unit_norm_violation(&self) -> f64 {
        self.vectors
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Binary same-speaker matrix: entry `(i,j)` is 1 iff segments `i` and `j`
/// belong to one speaker. Always symmetric with unit diagonal, and
/// block-diagonal under the permutation that sorts labels.
#[derive(Debug, Clone)]
pub struct GroundTruthAdjacency {
    values: Array2<u8>,
}

impl GroundTruthAdjacency {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_same(&self, i: usize, j: usize) -> bool {
        self.values[[i, j]] == 1
    }

    /// Entry as a float, for loss arithmetic.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]] as f64
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(|v| v as f64)
    }
}

/// Builds the same-speaker adjacency from integer labels.
pub fn adjacency_from_labels(labels: &[usize]) -> GroundTruthAdjacency {
    let n = labels.len();
    let values = Array2::from_shape_fn((n, n), |(i, j)| u8::from(labels[i] == labels[j]));
    GroundTruthAdjacency { values }
}

fn read_u32_le(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Writes an embedding file. The layout is `SPKEMB1\n`, `u32 N`, `u32 D`
/// (little-endian), `N·D` little-endian `f64` values row-major, then `N`
/// metadata lines `session_id<TAB>start<TAB>duration<TAB>label_or_-1`.
/// Floats in the metadata block use shortest round-trip formatting, so
/// [`load_embeddings`] reproduces the input exactly.
pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = m.len();
    let d = m.dim();
    let mut buf = Vec::with_capacity(16 + n * d * 8 + n * 32);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in m.vectors.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut text = String::new();
    for meta in &m.meta {
        let label = meta.speaker.map(|s| s as i64).unwrap_or(-1);
        writeln!(
            text,
            "{}\t{}\t{}\t{}",
            meta.session_id, meta.start, meta.duration, label
        )
        .expect("writing to a String cannot fail");
    }
    buf.extend_from_slice(text.as_bytes());
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Reads an embedding file written by [`save_embeddings`]. Parse failures
/// name the byte offset of the offending content.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 16 {
        return Err(parse_err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(parse_err(0, "bad magic, not an embedding file".into()));
    }
    let n = read_u32_le(&bytes, 8) as usize;
    let d = read_u32_le(&bytes, 12) as usize;
    if d == 0 {
        return Err(parse_err(12, "embedding dimension must be positive".into()));
    }
    let values_end = 16 + n * d * 8;
    if bytes.len() < values_end {
        return Err(parse_err(
            bytes.len(),
            format!("value block truncated: header promises {n}x{d} values"),
        ));
    }
    let mut values = Vec::with_capacity(n * d);
    for idx in 0..n * d {
        let off = 16 + idx * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(parse_err(off, format!("non-finite value {v}")));
        }
        values.push(v);
    }
    let vectors = Array2::from_shape_vec((n, d), values).expect("sized above");

    let mut meta = Vec::with_capacity(n);
    let mut offset = values_end;
    for row in 0..n {
        let rest = &bytes[offset..];
        let line_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(bytes.len(), format!("metadata row count mismatch: expected {n} lines, found {row}")))?;
        let line = std::str::from_utf8(&rest[..line_end])
            .map_err(|_| parse_err(offset, "metadata line is not UTF-8".into()))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                offset,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let start: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(offset, format!("bad start time {:?}", fields[1])))?;
        let duration: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(offset, format!("bad duration {:?}", fields[2])))?;
        let label: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(offset, format!("bad label {:?}", fields[3])))?;
        if label < -1 {
            return Err(parse_err(offset, format!("bad label {label}")));
        }
        meta.push(SegmentMeta {
            session_id: fields[0].to_string(),
            start,
            duration,
            speaker: (label >= 0).then_some(label as usize),
        });
        offset += line_end + 1;
    }
    if offset != bytes.len() {
        return Err(parse_err(
            offset,
            format!("metadata row count mismatch: trailing content after {n} lines"),
        ));
    }
    EmbeddingMatrix::new(vectors, meta).map_err(|e| parse_err(values_end, e.to_string()))
}

/// One parsed RTTM speaker line.
#[derive(Debug, Clone, PartialEq)]
pub struct RttmSegment {
    pub session_id: String,
    pub start: f64,
    pub duration: f64,
    pub speaker: usize,
}

/// Writes diarization output as RTTM, one `SPEAKER` line per segment, with
/// times formatted to millisecond precision and labels as `spk<k>`.
pub fn write_rttm(path: impl AsRef<Path>, meta: &[SegmentMeta], labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    if meta.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} segments but {} labels",
            meta.len(),
            labels.len()
        )));
    }
    let mut out = String::new();
    for (m, &label) in meta.iter().zip(labels) {
        writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> spk{} <NA> <NA>",
            m.session_id, m.start, m.duration, label
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(path, out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an RTTM file produced by [`write_rttm`]. Blank lines are skipped;
/// anything else must be a well-formed `SPEAKER` line with a `spk<k>` label.
pub fn read_rttm(path: impl AsRef<Path>) -> Result<Vec<RttmSegment>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        msg: "rttm file is not UTF-8".into(),
    })?;
    let mut segments = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset: line_offset as u64,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 || fields[0] != "SPEAKER" {
            return Err(parse_err("expected a 10-field SPEAKER line".into()));
        }
        let start: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad start {:?}", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(format!("bad duration {:?}", fields[4])))?;
        let speaker = fields[7]
            .strip_prefix("spk")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| parse_err(format!("bad speaker field {:?}", fields[7])))?;
        segments.push(RttmSegment {
            session_id: fields[1].to_string(),
            start,
            duration,
            speaker,
        });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn meta_row(session: &str, start: f64, speaker: Option<usize>) -> SegmentMeta {
        SegmentMeta {
            session_id: session.to_string(),
            start,
            duration: 1.5,
            speaker,
        }
    }

    fn sample_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) * 4.0 - 2.0
        };
        let vectors = Array2::from_shape_fn((n, d), |_| next());
        let meta = (0..n)
            .map(|i| meta_row("sess", i as f64 * 1.5, Some(i % 3)))
            .collect();
        EmbeddingMatrix::new(vectors, meta).unwrap()
    }

    #[test]
    fn adjacency_two_blocks() {
        let adj = adjacency_from_labels(&[0, 0, 1]);
        let want = [[1, 1, 0], [1, 1, 0], [0, 0, 1]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(adj.entry(i, j), want[i][j] as f64);
            }
        }
    }

    #[test]
    fn adjacency_singleton_and_uniform() {
        let adj = adjacency_from_labels(&[7]);
        assert_eq!(adj.n(), 1);
        assert!(adj.is_same(0, 0));

        let adj = adjacency_from_labels(&[4, 4, 4, 4, 4]);
        assert!((0..5).all(|i| (0..5).all(|j| adj.is_same(i, j))));
    }

    #[test]
    fn roundtrip_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.emb");
        let m = sample_matrix(10, 128, 99);
        save_embeddings(&m, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.dim(), 128);
        assert!(m
            .vectors()
            .iter()
            .zip(back.vectors().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(m.meta(), back.meta());
    }

    #[test]
    fn roundtrip_empty_and_singleton() {
        let dir = tempdir().unwrap();

        let empty = EmbeddingMatrix::new(Array2::zeros((0, 4)), vec![]).unwrap();
        let path = dir.path().join("empty.emb");
        save_embeddings(&empty, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 4);

        let single =
            EmbeddingMatrix::new(array![[0.5]], vec![meta_row("s", 0.0, None)]).unwrap();
        let path = dir.path().join("one.emb");
        save_embeddings(&single, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.vectors()[[0, 0]], 0.5);
        assert_eq!(back.meta()[0].speaker, None);
    }

    #[test]
    fn row_count_mismatch_is_a_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.emb");
        let m = sample_matrix(3, 2, 1);
        save_embeddings(&m, &path).unwrap();
        // append a fourth metadata line: header still says N=3
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(b"sess\t9.0\t1.5\t0\n");
        fs::write(&path, &bytes).unwrap();
        match load_embeddings(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("mismatch"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_name_offsets() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.emb");
        fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match load_embeddings(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }

        let m = sample_matrix(2, 3, 5);
        save_embeddings(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..20]).unwrap();
        match load_embeddings(&path) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, 20);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.emb");
        let m = sample_matrix(2, 2, 8);
        save_embeddings(&m, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // third value starts at 16 + 2*8
        let off = 16 + 16;
        bytes[off..off + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match load_embeddings(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, off as u64),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rttm_single_line_format() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.rttm");
        write_rttm(&path, &[meta_row("sess", 0.0, None)], &[0]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "SPEAKER sess 1 0.000 1.500 <NA> <NA> spk0 <NA> <NA>\n");

        write_rttm(&path, &[], &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn rttm_roundtrip_triples() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.rttm");
        let meta: Vec<SegmentMeta> = (0..7).map(|i| meta_row("mtg", i as f64 * 1.5, None)).collect();
        let labels = vec![0, 1, 0, 2, 2, 1, 0];
        write_rttm(&path, &meta, &labels).unwrap();
        let back = read_rttm(&path).unwrap();
        assert_eq!(back.len(), 7);
        for (i, seg) in back.iter().enumerate() {
            assert_eq!(seg.session_id, "mtg");
            assert_eq!(seg.start, meta[i].start);
            assert_eq!(seg.duration, meta[i].duration);
            assert_eq!(seg.speaker, labels[i]);
        }
    }

    #[test]
    fn rttm_label_mismatch_is_usage_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.rttm");
        let err = write_rttm(&path, &[meta_row("s", 0.0, None)], &[0, 1]);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn save_load_identity(n in 0usize..8, d in 1usize..6, seed in 0u64..500) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.emb");
            let m = sample_matrix(n, d, seed);
            save_embeddings(&m, &path).unwrap();
            let back = load_embeddings(&path).unwrap();
            prop_assert_eq!(m.meta(), back.meta());
            prop_assert!(m.vectors().iter().zip(back.vectors().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn adjacency_invariants(labels in proptest::collection::vec(0usize..5, 1..20)) {
            let adj = adjacency_from_labels(&labels);
            let n = labels.len();
            for i in 0..n {
                prop_assert!(adj.is_same(i, i));
                for j in 0..n {
                    prop_assert_eq!(adj.is_same(i, j), adj.is_same(j, i));
                    prop_assert_eq!(adj.is_same(i, j), labels[i] == labels[j]);
                }
            }
        }
    }
}
