use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use super::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVEC";
const VERSION: u8 = 0x01;

const BIT_SPEAKER: u8 = 1 << 0;
const BIT_DOMAIN: u8 = 1 << 1;
const BIT_DURATION: u8 = 1 << 2;
const BIT_PARTITION: u8 = 1 << 3;

/// On-disk embedding formats.
///
/// `Binary` stores components as `f32`; values that are not exactly representable
/// in `f32` are rounded on save.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Tsv,
}

impl EmbeddingFormat {
    /// Guesses the format from a file extension (`.tsv`/`.txt` vs anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => EmbeddingFormat::Tsv,
            _ => EmbeddingFormat::Binary,
        }
    }
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(EmbeddingFormat::Binary),
            "tsv" => Ok(EmbeddingFormat::Tsv),
            other => Err(Error::InvalidArgument(format!("unknown embedding format {other:?}"))),
        }
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_embeddings(set, &mut buf, format)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings<R: BufRead>(mut reader: R, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    match format {
        EmbeddingFormat::Binary => {
            let mut bytes = Vec::new();
            reader.read_to_end(&mut bytes).map_err(|e| Error::io("<reader>", e))?;
            read_binary(&bytes)
        }
        EmbeddingFormat::Tsv => read_tsv(reader),
    }
}

pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut w: W, format: EmbeddingFormat) -> Result<()> {
    let bytes = match format {
        EmbeddingFormat::Binary => write_binary(set)?,
        EmbeddingFormat::Tsv => write_tsv(set).into_bytes(),
    };
    w.write_all(&bytes).map_err(|e| Error::io("<writer>", e))
}

fn push_str(out: &mut Vec<u8>, s: &str, record: usize) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::format("embedding file", record, "string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn write_binary(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + set.len() * (set.dim() * 4 + 16));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (i, e) in set.iter().enumerate() {
        let record = i + 1;
        push_str(&mut out, &e.id, record)?;
        let mut mask = 0u8;
        if e.speaker.is_some() {
            mask |= BIT_SPEAKER;
        }
        if e.domain.is_some() {
            mask |= BIT_DOMAIN;
        }
        if e.duration_s.is_some() {
            mask |= BIT_DURATION;
        }
        if e.partition.is_some() {
            mask |= BIT_PARTITION;
        }
        out.push(mask);
        for s in [&e.speaker, &e.domain, &e.partition].into_iter().flatten() {
            push_str(&mut out, s, record)?;
        }
        if let Some(d) = e.duration_s {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
        for &v in &e.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("embedding file", record, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, record: usize) -> Result<u8> {
        Ok(self.take(1, record)?[0])
    }

    fn u16(&mut self, record: usize) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, record)?.try_into().unwrap()))
    }

    fn u32(&mut self, record: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }

    fn f32(&mut self, record: usize) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }

    fn string(&mut self, record: usize) -> Result<String> {
        let n = self.u16(record)? as usize;
        let raw = self.take(n, record)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format("embedding file", record, "invalid UTF-8 string"))
    }
}

fn read_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, 0)? != MAGIC {
        return Err(Error::format("embedding header", 0, "bad magic (expected \"SVEC\")"));
    }
    let version = c.u8(0)?;
    if version != VERSION {
        return Err(Error::format("embedding header", 0, format!("unsupported version {version}")));
    }
    let dim = c.u32(0)? as usize;
    let count = c.u32(0)? as usize;
    if dim == 0 {
        return Err(Error::format("embedding header", 0, "dimension is zero"));
    }
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let record = i + 1;
        let id = c.string(record)?;
        let mask = c.u8(record)?;
        if mask & !0x0F != 0 {
            return Err(Error::format("embedding file", record, format!("unknown field bits {mask:#04x}")));
        }
        let speaker = if mask & BIT_SPEAKER != 0 { Some(c.string(record)?) } else { None };
        let domain = if mask & BIT_DOMAIN != 0 { Some(c.string(record)?) } else { None };
        let partition = if mask & BIT_PARTITION != 0 { Some(c.string(record)?) } else { None };
        let duration_s = if mask & BIT_DURATION != 0 { Some(c.f32(record)? as f64) } else { None };
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(c.f32(record)? as f64);
        }
        items.push(Embedding {
            id,
            vector,
            speaker,
            domain,
            duration_s,
            partition,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format("embedding file", count, "trailing bytes after last record"));
    }
    EmbeddingSet::new(dim, items)
}

fn write_tsv(set: &EmbeddingSet) -> String {
    use std::fmt::Write as _;
    let mut out = format!("#dim={}\n", set.dim());
    for e in set {
        out.push_str(&e.id);
        out.push('\t');
        for (k, v) in e.vector.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        if let Some(s) = &e.speaker {
            let _ = write!(out, "\tspeaker={s}");
        }
        if let Some(s) = &e.domain {
            let _ = write!(out, "\tdomain={s}");
        }
        if let Some(d) = e.duration_s {
            let _ = write!(out, "\tduration={d}");
        }
        if let Some(s) = &e.partition {
            let _ = write!(out, "\tpartition={s}");
        }
        out.push('\n');
    }
    out
}

/// `id<TAB>v1 v2 ...` rows, an optional `#dim=<d>` first line, and optional
/// trailing `key=value` columns for speaker, domain, duration and partition.
fn read_tsv<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut dim: Option<usize> = None;
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        let line = line.trim_end_matches('\r');
        if lineno == 0 {
            if let Some(rest) = line.strip_prefix("#dim=") {
                let d: usize = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::format("embedding header", 0, format!("bad #dim line {line:?}")))?;
                if d == 0 {
                    return Err(Error::format("embedding header", 0, "dimension is zero"));
                }
                dim = Some(d);
                continue;
            }
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let record = items.len() + 1;
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::format("embedding file", record, "empty id"));
        }
        let values = cols
            .next()
            .ok_or_else(|| Error::format("embedding file", record, "missing vector column"))?;
        let vector = values
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format("embedding file", record, format!("bad number {t:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let expected = *dim.get_or_insert(vector.len());
        if vector.len() != expected {
            return Err(Error::DimensionMismatch {
                record,
                expected,
                found: vector.len(),
            });
        }
        let mut e = Embedding::new(id, vector);
        for col in cols {
            let (key, value) = col
                .split_once('=')
                .ok_or_else(|| Error::format("embedding file", record, format!("bad metadata column {col:?}")))?;
            match key {
                "speaker" => e.speaker = Some(value.to_string()),
                "domain" => e.domain = Some(value.to_string()),
                "partition" => e.partition = Some(value.to_string()),
                "duration" => {
                    e.duration_s = Some(
                        value
                            .parse()
                            .map_err(|_| Error::format("embedding file", record, format!("bad duration {value:?}")))?,
                    )
                }
                other => {
                    return Err(Error::format("embedding file", record, format!("unknown metadata key {other:?}")))
                }
            }
        }
        items.push(e);
    }
    let dim = dim.ok_or_else(|| Error::format("embedding header", 0, "empty TSV without #dim line"))?;
    EmbeddingSet::new(dim, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(set: &EmbeddingSet, format: EmbeddingFormat) -> EmbeddingSet {
        let mut buf = Vec::new();
        write_embeddings(set, &mut buf, format).unwrap();
        read_embeddings(&buf[..], format).unwrap()
    }

    #[test]
    fn binary_header_dim_and_count() {
        let set = EmbeddingSet::new(
            4,
            vec![
                Embedding::new("a", vec![1.0, 2.0, 3.0, 4.0]),
                Embedding::new("b", vec![0.5, -0.25, 0.0, 8.0]),
            ],
        )
        .unwrap();
        let back = roundtrip(&set, EmbeddingFormat::Binary);
        assert_eq!(back.dim(), 4);
        assert_eq!(back.len(), 2);
        assert_eq!(back, set);
    }

    #[test]
    fn empty_set_binary() {
        let set = EmbeddingSet::empty(8).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&set, &mut buf, EmbeddingFormat::Binary).unwrap();
        assert_eq!(buf.len(), 13);
        assert_eq!(&buf[9..13], &0u32.to_le_bytes());
        let back = read_embeddings(&buf[..], EmbeddingFormat::Binary).unwrap();
        assert_eq!(back.dim(), 8);
        assert!(back.is_empty());
    }

    #[test]
    fn unicode_id_roundtrips() {
        let set = EmbeddingSet::new(
            2,
            vec![Embedding::new("说话人1", vec![0.5, 1.5]).with_speaker("发言者").with_duration(3.5)],
        )
        .unwrap();
        assert_eq!(roundtrip(&set, EmbeddingFormat::Binary), set);
        assert_eq!(roundtrip(&set, EmbeddingFormat::Tsv), set);
    }

    #[test]
    fn tsv_row_parses() {
        let set = read_embeddings("seg1\t0.1 0.2 0.3\n".as_bytes(), EmbeddingFormat::Tsv).unwrap();
        assert_eq!(set.dim(), 3);
        assert_eq!(set.items()[0].id, "seg1");
        assert_eq!(set.items()[0].vector, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn tsv_dimension_mismatch_names_record() {
        let text = "#dim=4\na\t1 2 3 4\nb\t1 2 3\n";
        match read_embeddings(text.as_bytes(), EmbeddingFormat::Tsv) {
            Err(Error::DimensionMismatch {
                record: 2,
                expected: 4,
                found: 3,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binary_truncated_record_is_reported() {
        let set = EmbeddingSet::new(
            4,
            vec![Embedding::new("a", vec![1.0; 4]), Embedding::new("b", vec![2.0; 4])],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_embeddings(&set, &mut buf, EmbeddingFormat::Binary).unwrap();
        buf.truncate(buf.len() - 4);
        match read_embeddings(&buf[..], EmbeddingFormat::Binary) {
            Err(Error::Format { record: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binary_bad_magic() {
        assert!(matches!(
            read_embeddings(&b"XVEC\x01\x01\0\0\0\0\0\0\0"[..], EmbeddingFormat::Binary),
            Err(Error::Format { record: 0, .. })
        ));
    }

    #[test]
    fn duplicate_id_in_file() {
        let text = "a\t1 2\na\t3 4\n";
        assert!(matches!(
            read_embeddings(text.as_bytes(), EmbeddingFormat::Tsv),
            Err(Error::DuplicateId { record: 2, .. })
        ));
    }

    fn arb_embedding(dim: usize) -> impl Strategy<Value = Embedding> {
        (
            "[a-z0-9\\u{4e00}-\\u{4e10}]{1,8}",
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), dim),
            prop::option::of("[a-z]{1,5}"),
            prop::option::of("[a-z]{1,5}"),
            prop::option::of(0.0f32..1000.0),
            prop::option::of("[a-z_]{1,5}"),
        )
            .prop_map(|(id, v, speaker, domain, dur, partition)| Embedding {
                id,
                vector: v.into_iter().map(f64::from).collect(),
                speaker,
                domain,
                duration_s: dur.map(f64::from),
                partition,
            })
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_bit_exact(items in prop::collection::vec(arb_embedding(5), 0..12)) {
            let mut seen = std::collections::HashSet::new();
            let items: Vec<_> = items.into_iter().filter(|e| seen.insert(e.id.clone())).collect();
            let set = EmbeddingSet::new(5, items).unwrap();
            let back = roundtrip(&set, EmbeddingFormat::Binary);
            prop_assert_eq!(back.len(), set.len());
            for (a, b) in set.iter().zip(back.iter()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.speaker, &b.speaker);
                prop_assert_eq!(&a.partition, &b.partition);
                prop_assert_eq!(a.duration_s.map(f64::to_bits), b.duration_s.map(f64::to_bits));
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.vector), bits(&b.vector));
            }
        }
    }
}
