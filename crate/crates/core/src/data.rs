//! Corpus data model and on-disk formats.
//!
//! Corpus CSV: `element_id,group_id,class_label,raw_0..raw_{d_raw-1},emb_0..emb_{d_emb-1}`
//! with an empty `class_label` for unlabeled elements.
//!
//! Corpus binary (little endian): magic `DDL1`, `u32 s`, `u32 d_raw`,
//! `u32 d_emb`, then `s` records of
//! `u32 len, element_id bytes, u32 len, group_id bytes, i64 label (-1 = none),
//! f64 * d_raw, f64 * d_emb`.
//!
//! Score CSV: `element_id,d_raw,d_score,d_hat` (`d_hat` may be empty).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{DdlError, Result};
use crate::scalar::{norm, Scalar};

const CORPUS_MAGIC: &[u8; 4] = b"DDL1";
const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ElementRecord<T> {
    pub element_id: String,
    pub group_id: String,
    pub class_label: Option<usize>,
    /// Distiller input.
    pub raw_input: Vec<T>,
    /// Base-model feature.
    pub embedding: Vec<T>,
}

/// Validated, immutable collection of elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T> {
    elements: Vec<ElementRecord<T>>,
    k_classes: usize,
    d_raw: usize,
    d_emb: usize,
}

/// Members of one group, in corpus order.
#[derive(Debug, Clone)]
pub struct GroupView<'a, T> {
    pub group_id: &'a str,
    pub members: Vec<&'a ElementRecord<T>>,
}

impl<T> GroupView<'_, T> {
    /// Class label shared by the group, if its first member has one.
    pub fn class_label(&self) -> Option<usize> {
        self.members.first().and_then(|e| e.class_label)
    }
}

impl<T: Scalar> Corpus<T> {
    /// Validates `elements`, inferring `k_classes` as one past the largest label.
    pub fn new(elements: Vec<ElementRecord<T>>) -> Result<Self> {
        let k = elements
            .iter()
            .filter_map(|e| e.class_label)
            .max()
            .map_or(0, |m| m + 1);
        Self::with_classes(elements, k)
    }

    pub fn with_classes(elements: Vec<ElementRecord<T>>, k_classes: usize) -> Result<Self> {
        let first = elements
            .first()
            .ok_or_else(|| DdlError::Validation("corpus is empty".into()))?;
        let (d_raw, d_emb) = (first.raw_input.len(), first.embedding.len());
        if d_emb == 0 {
            return Err(DdlError::Schema("embedding dimension is zero".into()));
        }
        let mut seen = HashSet::with_capacity(elements.len());
        for e in &elements {
            if e.raw_input.len() != d_raw {
                return Err(DdlError::Schema(format!(
                    "element {} has raw_input length {}, expected {d_raw}",
                    e.element_id,
                    e.raw_input.len()
                )));
            }
            if e.embedding.len() != d_emb {
                return Err(DdlError::Schema(format!(
                    "element {} has embedding length {}, expected {d_emb}",
                    e.element_id,
                    e.embedding.len()
                )));
            }
            if !seen.insert(e.element_id.as_str()) {
                return Err(DdlError::Validation(format!(
                    "duplicate element_id {}",
                    e.element_id
                )));
            }
            if let Some(label) = e.class_label {
                if label >= k_classes {
                    return Err(DdlError::Validation(format!(
                        "element {} has class_label {label} outside [0, {k_classes})",
                        e.element_id
                    )));
                }
            }
            if e.raw_input.iter().chain(&e.embedding).any(|v| !v.is_finite()) {
                return Err(DdlError::Validation(format!(
                    "element {} has a non-finite value",
                    e.element_id
                )));
            }
            if norm(&e.embedding).as_f64() <= MIN_EMBEDDING_NORM {
                return Err(DdlError::Validation(format!(
                    "element {} has a zero-norm embedding",
                    e.element_id
                )));
            }
        }
        Ok(Self {
            elements,
            k_classes,
            d_raw,
            d_emb,
        })
    }

    pub fn elements(&self) -> &[ElementRecord<T>] {
        &self.elements
    }

    pub fn into_elements(self) -> Vec<ElementRecord<T>> {
        self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.elements.iter().all(|e| e.class_label.is_some())
    }

    /// Groups in order of first appearance.
    pub fn groups(&self) -> Vec<GroupView<'_, T>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<GroupView<'_, T>> = Vec::new();
        for e in &self.elements {
            let slot = *index.entry(e.group_id.as_str()).or_insert_with(|| {
                groups.push(GroupView {
                    group_id: e.group_id.as_str(),
                    members: Vec::new(),
                });
                groups.len() - 1
            });
            groups[slot].members.push(e);
        }
        groups
    }

    /// Sub-corpus of the elements accepted by `keep`, keeping `k_classes`.
    pub fn filter(&self, mut keep: impl FnMut(&ElementRecord<T>) -> bool) -> Result<Self> {
        let elements = self.elements.iter().filter(|e| keep(e)).cloned().collect();
        Self::with_classes(elements, self.k_classes)
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Result<Corpus<U>> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        let elements = self
            .elements
            .iter()
            .map(|e| ElementRecord {
                element_id: e.element_id.clone(),
                group_id: e.group_id.clone(),
                class_label: e.class_label,
                raw_input: conv(&e.raw_input),
                embedding: conv(&e.embedding),
            })
            .collect();
        Corpus::with_classes(elements, self.k_classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminabilityRecord<T> {
    pub element_id: String,
    /// Similarity ratio before normalization; any real.
    pub d_raw: T,
    /// Normalized score in (0, 1).
    pub d_score: T,
    /// Regressor prediction, when available.
    pub d_hat: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Binary,
}

impl CorpusFormat {
    /// `.bin` / `.ddl` select the binary format, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("ddl") => CorpusFormat::Binary,
            _ => CorpusFormat::Csv,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = DdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(CorpusFormat::Csv),
            "binary" | "bin" => Ok(CorpusFormat::Binary),
            other => Err(DdlError::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Formats a real with 17 significant digits in scientific notation.
pub(crate) fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_real(field: &str, line: u64, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| DdlError::Parse {
        line,
        message: format!("column {column}: cannot parse {field:?} as a real"),
    })
}

pub fn load_corpus<T: Scalar>(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus<T>> {
    match format {
        CorpusFormat::Csv => read_corpus_csv(File::open(path)?),
        CorpusFormat::Binary => read_corpus_binary(BufReader::new(File::open(path)?)),
    }
}

pub fn save_corpus<T: Scalar>(
    corpus: &Corpus<T>,
    path: impl AsRef<Path>,
    format: CorpusFormat,
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        CorpusFormat::Csv => write_corpus_csv(corpus, file),
        CorpusFormat::Binary => write_corpus_binary(corpus, file),
    }
}

fn corpus_header(d_raw: usize, d_emb: usize) -> Vec<String> {
    let mut header = vec![
        "element_id".to_string(),
        "group_id".to_string(),
        "class_label".to_string(),
    ];
    header.extend((0..d_raw).map(|i| format!("raw_{i}")));
    header.extend((0..d_emb).map(|i| format!("emb_{i}")));
    header
}

pub fn write_corpus_csv<T: Scalar, W: Write>(corpus: &Corpus<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(corpus_header(corpus.d_raw, corpus.d_emb))?;
    for e in &corpus.elements {
        let mut row = vec![
            e.element_id.clone(),
            e.group_id.clone(),
            e.class_label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        row.extend(e.raw_input.iter().chain(&e.embedding).map(|v| fmt_real(v.as_f64())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_csv<T: Scalar, R: Read>(reader: R) -> Result<Corpus<T>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[..3] != ["element_id", "group_id", "class_label"] {
        return Err(DdlError::Schema(
            "corpus header must start with element_id,group_id,class_label".into(),
        ));
    }
    let d_raw = names[3..].iter().take_while(|n| n.starts_with("raw_")).count();
    let d_emb = names.len() - 3 - d_raw;
    if names != corpus_header(d_raw, d_emb).iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(DdlError::Schema(format!(
            "unexpected corpus header; expected raw_0..raw_{{d_raw-1}} then emb_0..emb_{{d_emb-1}}, got {}",
            names.join(",")
        )));
    }
    let mut elements = Vec::new();
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != names.len() {
            return Err(DdlError::Schema(format!(
                "line {line}: expected {} fields, found {}",
                names.len(),
                row.len()
            )));
        }
        let class_label = match row[2].trim() {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| DdlError::Parse {
                line,
                message: format!("class_label {s:?} is not a non-negative integer"),
            })?),
        };
        let mut values = Vec::with_capacity(d_raw + d_emb);
        for (i, field) in row.iter().enumerate().skip(3) {
            values.push(T::of(parse_real(field, line, names[i])?));
        }
        let embedding = values.split_off(d_raw);
        elements.push(ElementRecord {
            element_id: row[0].to_string(),
            group_id: row[1].to_string(),
            class_label,
            raw_input: values,
            embedding,
        });
    }
    Corpus::new(elements)
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DdlError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_corpus_binary<T: Scalar, W: Write>(corpus: &Corpus<T>, mut w: W) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    put_u32(&mut w, corpus.len())?;
    put_u32(&mut w, corpus.d_raw)?;
    put_u32(&mut w, corpus.d_emb)?;
    for e in &corpus.elements {
        put_str(&mut w, &e.element_id)?;
        put_str(&mut w, &e.group_id)?;
        let label = e.class_label.map_or(-1i64, |l| l as i64);
        w.write_all(&label.to_le_bytes())?;
        for v in e.raw_input.iter().chain(&e.embedding) {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Little-endian cursor over a byte source that reports truncation as a format error.
pub(crate) struct ByteReader<R> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DdlError::Format("file is truncated".into()),
            _ => DdlError::Io(e),
        })?;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DdlError::Format("file is truncated".into()),
            _ => DdlError::Io(e),
        })?;
        String::from_utf8(buf).map_err(|_| DdlError::Format("identifier is not UTF-8".into()))
    }

    /// Errors unless the source is exhausted.
    pub(crate) fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(DdlError::Format("trailing bytes after last record".into())),
        }
    }
}

pub fn read_corpus_binary<T: Scalar, R: Read>(reader: R) -> Result<Corpus<T>> {
    let mut r = ByteReader::new(reader);
    if &r.bytes::<4>()? != CORPUS_MAGIC {
        return Err(DdlError::Format("bad corpus magic, expected DDL1".into()));
    }
    let s = r.u32()?;
    let d_raw = r.u32()?;
    let d_emb = r.u32()?;
    let mut elements = Vec::with_capacity(s);
    for _ in 0..s {
        let element_id = r.string()?;
        let group_id = r.string()?;
        let class_label = match r.i64()? {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(DdlError::Format(format!("invalid class label {l}"))),
        };
        let raw_input = (0..d_raw).map(|_| r.f64().map(T::of)).collect::<Result<_>>()?;
        let embedding = (0..d_emb).map(|_| r.f64().map(T::of)).collect::<Result<_>>()?;
        elements.push(ElementRecord {
            element_id,
            group_id,
            class_label,
            raw_input,
            embedding,
        });
    }
    r.finish()?;
    Corpus::new(elements)
}

pub fn save_scores<T: Scalar>(records: &[DiscriminabilityRecord<T>], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(DdlError::Precondition("no score records to save".into()));
    }
    write_scores(records, BufWriter::new(File::create(path)?))
}

pub fn write_scores<T: Scalar, W: Write>(records: &[DiscriminabilityRecord<T>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["element_id", "d_raw", "d_score", "d_hat"])?;
    for rec in records {
        w.write_record([
            rec.element_id.clone(),
            fmt_real(rec.d_raw.as_f64()),
            fmt_real(rec.d_score.as_f64()),
            rec.d_hat.map(|v| fmt_real(v.as_f64())).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scores<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<DiscriminabilityRecord<T>>> {
    read_scores(File::open(path)?)
}

pub fn read_scores<T: Scalar, R: Read>(reader: R) -> Result<Vec<DiscriminabilityRecord<T>>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["element_id", "d_raw", "d_score", "d_hat"] {
        return Err(DdlError::Schema(
            "score header must be element_id,d_raw,d_score,d_hat".into(),
        ));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 4 {
            return Err(DdlError::Schema(format!("line {line}: expected 4 fields, found {}", row.len())));
        }
        let d_raw = parse_real(&row[1], line, "d_raw")?;
        let d_score = parse_real(&row[2], line, "d_score")?;
        if !(d_score > 0.0 && d_score < 1.0) {
            return Err(DdlError::Validation(format!(
                "line {line}: d_score {d_score} outside (0, 1)"
            )));
        }
        let d_hat = match row[3].trim() {
            "" => None,
            s => Some(T::of(parse_real(s, line, "d_hat")?)),
        };
        out.push(DiscriminabilityRecord {
            element_id: row[0].to_string(),
            d_raw: T::of(d_raw),
            d_score: T::of(d_score),
            d_hat,
        });
    }
    Ok(out)
}
