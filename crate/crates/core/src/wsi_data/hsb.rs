//! HSB1 binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "HSB1" | version u32 = 1 | kind u32 | N u32 | d u32 | M-or-C u32
//! kind 0 (patch bundle): slide_id [len u32, utf-8] | N x (row i32, col i32) | N x d f32
//! kind 1 (prompt bank):  M x [len u32, utf-8 name] | M x d f32
//! kind 2 (question):     answer_label u32 | text [len u32, utf-8] | d f32
//! ```
//!
//! `N` is 0 for kinds 1 and 2. For kind 2 a missing text is written as
//! length 0, so an empty text and no text load identically (as `None`).
//! Features are stored as f32 and widened to f64 on load.

use std::fs;
use std::path::Path;

use super::{EmbeddingBundle, GridCoord, PromptBank, QuestionRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSB1";
pub const VERSION: u32 = 1;
pub const KIND_BUNDLE: u32 = 0;
pub const KIND_PROMPTS: u32 = 1;
pub const KIND_QUESTION: u32 = 2;

const HEADER_LEN: usize = 24;

struct Header {
    kind: u32,
    n: usize,
    dim: usize,
    m_or_c: usize,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| Error::validation("string longer than u32::MAX bytes"))?;
    push_u32(buf, len);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(format!("{what} {v} does not fit in u32")))
}

fn header(buf: &mut Vec<u8>, kind: u32, n: usize, dim: usize, m_or_c: usize) -> Result<()> {
    buf.extend_from_slice(MAGIC);
    push_u32(buf, VERSION);
    push_u32(buf, kind);
    push_u32(buf, to_u32(n, "patch count")?);
    push_u32(buf, to_u32(dim, "dimension")?);
    push_u32(buf, to_u32(m_or_c, "group/class count")?);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialises a bundle to its HSB1 byte image.
pub fn encode_bundle(bundle: &EmbeddingBundle) -> Result<Vec<u8>> {
    let n = bundle.n_patches();
    let d = bundle.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 + bundle.slide_id().len() + n * (8 + 4 * d));
    header(&mut buf, KIND_BUNDLE, n, d, 0)?;
    push_str(&mut buf, bundle.slide_id())?;
    for c in bundle.coords() {
        for v in [c.row, c.col] {
            let v = i32::try_from(v)
                .map_err(|_| Error::validation(format!("coordinate {v} exceeds i32::MAX")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_f32s(&mut buf, bundle.features());
    Ok(buf)
}

pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_bundle(bundle)?)
}

pub fn save_prompts(prompts: &PromptBank, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    header(&mut buf, KIND_PROMPTS, 0, prompts.dim(), prompts.len())?;
    for name in prompts.names() {
        push_str(&mut buf, name)?;
    }
    push_f32s(&mut buf, prompts.embeddings());
    write_file(path.as_ref(), &buf)
}

pub fn save_question(question: &QuestionRecord, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    header(&mut buf, KIND_QUESTION, 0, question.dim(), question.n_classes())?;
    push_u32(&mut buf, to_u32(question.answer_label(), "answer label")?);
    push_str(&mut buf, question.text().unwrap_or(""))?;
    push_f32s(&mut buf, question.embedding());
    write_file(path.as_ref(), &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < len {
            return Err(Error::Length {
                what,
                expected: len,
                found: remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &'static str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }

    fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }

    fn header(&mut self, expected_kind: u32) -> Result<Header> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"HSB1\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = self.u32("kind")?;
        if kind != expected_kind {
            return Err(Error::Format(format!(
                "file holds kind {kind}, expected kind {expected_kind}"
            )));
        }
        Ok(Header {
            kind,
            n: self.u32("patch count")? as usize,
            dim: self.u32("dimension")? as usize,
            m_or_c: self.u32("group/class count")? as usize,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an HSB1 patch bundle from bytes.
pub fn decode_bundle(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let mut r = Reader { bytes, pos: 0 };
    let h = r.header(KIND_BUNDLE)?;
    debug_assert_eq!(h.kind, KIND_BUNDLE);
    let slide_id = r.string("slide id")?;
    let mut coords = Vec::with_capacity(h.n);
    for i in 0..h.n {
        let row = r.i32("coordinates")?;
        let col = r.i32("coordinates")?;
        if row < 0 || col < 0 {
            return Err(Error::validation(format!(
                "negative coordinate ({row}, {col}) at patch {i}"
            )));
        }
        coords.push(GridCoord::new(row as u32, col as u32));
    }
    let features = r.f32s(h.n * h.dim, "feature payload")?;
    r.finish()?;
    EmbeddingBundle::new(slide_id, h.dim, features, coords)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    decode_bundle(&read_file(path.as_ref())?)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptBank> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let h = r.header(KIND_PROMPTS)?;
    let names = (0..h.m_or_c)
        .map(|_| r.string("prompt name"))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = r.f32s(h.m_or_c * h.dim, "prompt embeddings")?;
    r.finish()?;
    PromptBank::new(names, h.dim, embeddings)
}

pub fn load_question(path: impl AsRef<Path>) -> Result<QuestionRecord> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let h = r.header(KIND_QUESTION)?;
    let label = r.u32("answer label")? as usize;
    let text = r.string("question text")?;
    let embedding = r.f32s(h.dim, "question embedding")?;
    r.finish()?;
    QuestionRecord::new(
        embedding,
        label,
        h.m_or_c,
        if text.is_empty() { None } else { Some(text) },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> EmbeddingBundle {
        EmbeddingBundle::new(
            "slide-a",
            2,
            vec![0.5, -1.25, 3.0, 0.125],
            vec![GridCoord::new(0, 1), GridCoord::new(2, 0)],
        )
        .unwrap()
    }

    #[test]
    fn empty_bundle_is_header_plus_empty_id() {
        let b = EmbeddingBundle::new("", 8, vec![], vec![]).unwrap();
        let bytes = encode_bundle(&b).unwrap();
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[..4], b"HSB1");
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_bundle(&tiny_bundle()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = encode_bundle(&tiny_bundle()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_row_is_length_error() {
        let bytes = encode_bundle(&tiny_bundle()).unwrap();
        // drop the second feature row
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(decode_bundle(cut), Err(Error::Length { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_bundle(&tiny_bundle()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_payload_is_validation_error() {
        let mut bytes = encode_bundle(&tiny_bundle()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_bundle(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn prompts_and_question_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PromptBank::new(
            vec!["tumor".into(), "stroma".into()],
            2,
            vec![1.0, 0.0, 0.0, -1.0],
        )
        .unwrap();
        let q = QuestionRecord::new(vec![0.25, 0.5], 1, 3, Some("grade?".into())).unwrap();
        save_prompts(&p, dir.path().join("p.hsb")).unwrap();
        save_question(&q, dir.path().join("q.hsb")).unwrap();
        assert_eq!(load_prompts(dir.path().join("p.hsb")).unwrap(), p);
        assert_eq!(load_question(dir.path().join("q.hsb")).unwrap(), q);
        // loading with the wrong kind is refused
        assert!(matches!(
            load_bundle(dir.path().join("q.hsb")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        save_bundle(&b, dir.path().join("a.hsb")).unwrap();
        save_bundle(&b, dir.path().join("b.hsb")).unwrap();
        let a = fs::read(dir.path().join("a.hsb")).unwrap();
        let c = fs::read(dir.path().join("b.hsb")).unwrap();
        assert_eq!(a, c);
        assert_eq!(load_bundle(dir.path().join("a.hsb")).unwrap(), b);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_bundle("/nonexistent/dir/x.hsb").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.hsb"));
    }
}
