//! Prompt datasets, baseline score files, and the binary logit dump.
//!
//! Dump layout (all integers little-endian):
//!
//! ```text
//! "MULI" | version: u32 | n_rows: u64 | n_cols: u32 | fp_len: u16 | fingerprint (UTF-8)
//! n_rows * n_cols f32 values, row-major
//! ```
//!
//! Row metadata lives next to it in `<path>.manifest.jsonl`, one JSON object
//! per row: `{prompt_id, label, row, text_sha256}`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::{validate_dataset, Dataset, Label, LabeledPrompt, LogitRecord, Matrix};
use crate::error::{Error, Result};
use crate::util::{read_file, write_atomic};

pub const DUMP_MAGIC: &[u8; 4] = b"MULI";
pub const DUMP_VERSION: u32 = 1;
pub const OMOD_CLAMP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptFormat {
    Jsonl,
    Csv,
}

impl PromptFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(PromptFormat::Jsonl),
            Some("csv") => Ok(PromptFormat::Csv),
            _ => Err(Error::invalid(format!(
                "cannot infer prompt format from '{}'; use .jsonl or .csv",
                path.display()
            ))),
        }
    }
}

/// Accepts 0/1, booleans, and the strings "0", "1", "true", "false" (any case).
pub fn coerce_label(v: &Value) -> std::result::Result<Label, String> {
    match v {
        Value::Bool(b) => Ok(Label::from(*b)),
        Value::Number(n) => match n.as_u64() {
            Some(0) => Ok(Label::Benign),
            Some(1) => Ok(Label::Toxic),
            _ => match n.as_f64() {
                Some(0.0) => Ok(Label::Benign),
                Some(1.0) => Ok(Label::Toxic),
                _ => Err(format!("unknown label value {n}")),
            },
        },
        Value::String(s) => coerce_label_str(s),
        other => Err(format!("unknown label value {other}")),
    }
}

fn coerce_label_str(s: &str) -> std::result::Result<Label, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "0" | "false" => Ok(Label::Benign),
        "1" | "true" => Ok(Label::Toxic),
        other => Err(format!("unknown label value '{other}'")),
    }
}

fn opt_string(v: Option<&Value>) -> Option<String> {
    match v {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.is_empty() => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => Some(other.to_string()),
    }
}

/// Reads a prompt file. Missing ids become the 1-based record number.
pub fn parse_prompts(path: &Path, format: PromptFormat) -> Result<Dataset> {
    let items = match format {
        PromptFormat::Jsonl => parse_jsonl_prompts(path)?,
        PromptFormat::Csv => parse_csv_prompts(path)?,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let d = Dataset::new(name, items);
    let report = validate_dataset(&d);
    if !report.accepted {
        return Err(Error::data(format!(
            "{}: dataset rejected (duplicate ids: {:?}, empty texts: {:?}, empty ids: {})",
            path.display(),
            report.duplicate_ids,
            report.empty_texts,
            report.empty_ids
        )));
    }
    Ok(d)
}

fn parse_jsonl_prompts(path: &Path) -> Result<Vec<LabeledPrompt>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut record = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        record += 1;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| bad(format!("malformed JSON: {e}")))?;
        let text = match v.get("text") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(bad("field 'text' must be a string".into())),
            None => return Err(bad("missing field 'text'".into())),
        };
        let label = coerce_label(v.get("label").ok_or_else(|| bad("missing field 'label'".into()))?)
            .map_err(bad)?;
        items.push(LabeledPrompt {
            id: opt_string(v.get("id")).unwrap_or_else(|| record.to_string()),
            text,
            label,
            group: opt_string(v.get("group")),
            tag: opt_string(v.get("tag")),
        });
    }
    Ok(items)
}

fn parse_csv_prompts(path: &Path) -> Result<Vec<LabeledPrompt>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (text_col, label_col) = match (col("text"), col("label")) {
        (Some(t), Some(l)) => (t, l),
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must contain 'text' and 'label'".into(),
            })
        }
    };
    let (id_col, group_col, tag_col) = (col("id"), col("group"), col("tag"));
    let mut items = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| bad(format!("malformed record: {e}")))?;
        let field = |c: Option<usize>| {
            c.and_then(|c| rec.get(c))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        let text = rec.get(text_col).ok_or_else(|| bad("missing field 'text'".into()))?;
        let label = coerce_label_str(rec.get(label_col).ok_or_else(|| bad("missing field 'label'".into()))?)
            .map_err(bad)?;
        items.push(LabeledPrompt {
            id: field(id_col).unwrap_or_else(|| (i + 1).to_string()),
            text: text.to_string(),
            label,
            group: field(group_col),
            tag: field(tag_col),
        });
    }
    Ok(items)
}

pub fn write_prompts_jsonl(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for item in &d.items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub prompt_id: String,
    pub label: Label,
    pub row: u64,
    pub text_sha256: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub n_rows: u64,
    pub n_cols: u32,
    pub backend_fingerprint: String,
}

/// Logit matrix plus per-row manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDump {
    pub header: DumpHeader,
    pub manifest: Vec<ManifestEntry>,
    /// Row-major, `n_rows * n_cols`.
    pub matrix: Vec<f32>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest.jsonl");
    PathBuf::from(s)
}

impl LogitDump {
    pub fn empty(n_cols: usize, backend_fingerprint: &str) -> Self {
        LogitDump {
            header: DumpHeader {
                version: DUMP_VERSION,
                n_rows: 0,
                n_cols: n_cols as u32,
                backend_fingerprint: backend_fingerprint.to_string(),
            },
            manifest: Vec::new(),
            matrix: Vec::new(),
        }
    }

    /// Packs records in order; all must share one fingerprint and one length.
    pub fn from_records(records: &[LogitRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Ok(LogitDump::empty(0, ""));
        };
        let n_cols = first.logits.len();
        let fp = &first.backend_fingerprint;
        if u32::try_from(n_cols).is_err() {
            return Err(Error::data("vector length exceeds u32"));
        }
        let mut dump = LogitDump::empty(n_cols, fp);
        let mut seen = HashSet::new();
        for r in records {
            if &r.backend_fingerprint != fp {
                return Err(Error::FingerprintMismatch {
                    expected: fp.clone(),
                    got: r.backend_fingerprint.clone(),
                });
            }
            if r.logits.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    got: r.logits.len(),
                });
            }
            if !seen.insert(r.prompt_id.as_str()) {
                return Err(Error::data(format!("duplicate prompt id '{}' in dump", r.prompt_id)));
            }
            r.check_finite()?;
            dump.push_unchecked(r);
        }
        Ok(dump)
    }

    fn push_unchecked(&mut self, r: &LogitRecord) {
        self.manifest.push(ManifestEntry {
            prompt_id: r.prompt_id.clone(),
            label: r.label,
            row: self.header.n_rows,
            text_sha256: r.text_sha256.clone(),
            partial: r.partial,
        });
        self.matrix.extend_from_slice(&r.logits);
        self.header.n_rows += 1;
    }

    pub fn n_rows(&self) -> usize {
        self.header.n_rows as usize
    }

    pub fn n_cols(&self) -> usize {
        self.header.n_cols as usize
    }

    pub fn fingerprint(&self) -> &str {
        &self.header.backend_fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.n_cols();
        &self.matrix[i * n..(i + 1) * n]
    }

    /// Logits of the manifest entry `i` (manifest order).
    pub fn entry_logits(&self, i: usize) -> &[f32] {
        self.row(self.manifest[i].row as usize)
    }

    pub fn records(&self) -> Vec<LogitRecord> {
        self.manifest
            .iter()
            .map(|m| LogitRecord {
                prompt_id: m.prompt_id.clone(),
                label: m.label,
                logits: self.row(m.row as usize).to_vec(),
                backend_fingerprint: self.header.backend_fingerprint.clone(),
                text_sha256: m.text_sha256.clone(),
                partial: m.partial,
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.manifest.iter().map(|m| m.label).collect()
    }

    pub fn prompt_ids(&self) -> Vec<String> {
        self.manifest.iter().map(|m| m.prompt_id.clone()).collect()
    }

    /// Logits in manifest order, widened to f64.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.n_cols();
        let mut data = Vec::with_capacity(self.manifest.len() * n);
        for m in &self.manifest {
            data.extend(self.row(m.row as usize).iter().map(|&x| f64::from(x)));
        }
        Matrix::from_vec(self.manifest.len(), n, data).expect("consistent dump")
    }

    /// Keeps the listed manifest entries, renumbering rows.
    pub fn select(&self, entries: &[usize]) -> LogitDump {
        let mut out = LogitDump::empty(self.n_cols(), self.fingerprint());
        for &i in entries {
            let m = &self.manifest[i];
            out.push_unchecked(&LogitRecord {
                prompt_id: m.prompt_id.clone(),
                label: m.label,
                logits: self.row(m.row as usize).to_vec(),
                backend_fingerprint: String::new(),
                text_sha256: m.text_sha256.clone(),
                partial: m.partial,
            });
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.manifest.len() as u64 != self.header.n_rows {
            return Err(Error::data(format!(
                "manifest has {} entries but header claims {} rows",
                self.manifest.len(),
                self.header.n_rows
            )));
        }
        let mut seen_rows = HashSet::new();
        let mut seen_ids = HashSet::new();
        for m in &self.manifest {
            if m.row >= self.header.n_rows || !seen_rows.insert(m.row) {
                return Err(Error::data(format!("manifest row index {} invalid or repeated", m.row)));
            }
            if !seen_ids.insert(m.prompt_id.as_str()) {
                return Err(Error::data(format!("duplicate prompt id '{}'", m.prompt_id)));
            }
        }
        Ok(())
    }

    pub fn encode_matrix_file(&self) -> Vec<u8> {
        let fp = self.header.backend_fingerprint.as_bytes();
        let mut out = Vec::with_capacity(22 + fp.len() + self.matrix.len() * 4);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&self.header.n_rows.to_le_bytes());
        out.extend_from_slice(&self.header.n_cols.to_le_bytes());
        out.extend_from_slice(&(fp.len() as u16).to_le_bytes());
        out.extend_from_slice(fp);
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary part; the manifest is left empty.
    pub fn decode_matrix_file(bytes: &[u8]) -> Result<(DumpHeader, Vec<f32>)> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != DUMP_MAGIC {
            return Err(Error::data("not a logit dump (bad magic)"));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != DUMP_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DUMP_VERSION,
            });
        }
        let n_rows = u64::from_le_bytes(cur.array()?);
        let n_cols = u32::from_le_bytes(cur.array()?);
        let fp_len = u16::from_le_bytes(cur.array()?) as usize;
        let fp = std::str::from_utf8(cur.take(fp_len)?)
            .map_err(|_| Error::data("fingerprint is not UTF-8"))?
            .to_string();
        let payload = cur.rest();
        let expected = n_rows
            .checked_mul(u64::from(n_cols))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::data("dump dimensions overflow"))?;
        if (payload.len() as u64) < expected {
            return Err(Error::Truncated(format!(
                "header claims {n_rows}x{n_cols} floats ({expected} bytes) but payload has {} bytes",
                payload.len()
            )));
        }
        if payload.len() as u64 > expected {
            return Err(Error::data(format!(
                "{} trailing bytes after the logit payload",
                payload.len() as u64 - expected
            )));
        }
        let matrix = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((
            DumpHeader {
                version,
                n_rows,
                n_cols,
                backend_fingerprint: fp,
            },
            matrix,
        ))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated(format!("header ends at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

pub fn write_dump(dump: &LogitDump, path: &Path) -> Result<()> {
    dump.validate()?;
    let mut manifest = Vec::new();
    for m in &dump.manifest {
        serde_json::to_writer(&mut manifest, m)?;
        manifest.push(b'\n');
    }
    write_atomic(&manifest_path(path), &manifest)?;
    write_atomic(path, &dump.encode_matrix_file())
}

pub fn write_logit_dump(records: &[LogitRecord], path: &Path) -> Result<LogitDump> {
    let dump = LogitDump::from_records(records)?;
    write_dump(&dump, path)?;
    Ok(dump)
}

pub fn read_logit_dump(path: &Path) -> Result<LogitDump> {
    let (header, matrix) = LogitDump::decode_matrix_file(&read_file(path)?)?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut manifest = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        manifest.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    let dump = LogitDump {
        header,
        manifest,
        matrix,
    };
    dump.validate()?;
    Ok(dump)
}

/// `unsafe_logit - safe_logit`.
pub fn llamaguard_feature(unsafe_logit: f64, safe_logit: f64) -> Result<f64> {
    if !unsafe_logit.is_finite() || !safe_logit.is_finite() {
        return Err(Error::data("llamaguard logits must be finite"));
    }
    Ok(unsafe_logit - safe_logit)
}

/// Log-odds of the largest category score, clamped to `[eps, 1 - eps]`.
pub fn omod_feature(category_scores: &[f64]) -> Result<f64> {
    if category_scores.is_empty() {
        return Err(Error::data("no category scores"));
    }
    if category_scores.iter().any(|c| c.is_nan()) {
        return Err(Error::data("NaN category score"));
    }
    let c = category_scores
        .iter()
        .map(|c| c.clamp(OMOD_CLAMP_EPS, 1.0 - OMOD_CLAMP_EPS))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(c.ln() - (-c).ln_1p())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScoreRow {
    pub prompt_id: String,
    pub raw: BTreeMap<String, Value>,
    pub feature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// Reads `{prompt_id, unsafe_logit, safe_logit}` or `{prompt_id, category_scores}` rows.
/// An optional `label` field is carried through.
pub fn parse_baseline_scores(path: &Path) -> Result<Vec<BaselineScoreRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| bad(format!("malformed JSON: {e}")))?;
        let Value::Object(obj) = v else {
            return Err(bad("expected a JSON object".into()));
        };
        let prompt_id = opt_string(obj.get("prompt_id")).ok_or_else(|| bad("missing 'prompt_id'".into()))?;
        let num = |k: &str| obj.get(k).and_then(Value::as_f64);
        let feature = if let (Some(u), Some(s)) = (num("unsafe_logit"), num("safe_logit")) {
            llamaguard_feature(u, s)
        } else if let Some(Value::Array(cs)) = obj.get("category_scores") {
            let scores: Option<Vec<f64>> = cs.iter().map(Value::as_f64).collect();
            let scores = scores.ok_or_else(|| bad("category_scores must be numbers".into()))?;
            omod_feature(&scores)
        } else {
            return Err(bad(
                "expected unsafe_logit+safe_logit or category_scores".into(),
            ));
        }
        .map_err(|e| bad(e.to_string()))?;
        let label = match obj.get("label") {
            None | Some(Value::Null) => None,
            Some(l) => Some(coerce_label(l).map_err(bad)?),
        };
        let raw = obj
            .into_iter()
            .filter(|(k, _)| k != "prompt_id" && k != "label")
            .collect();
        rows.push(BaselineScoreRow {
            prompt_id,
            raw,
            feature,
            label,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn record(id: &str, logits: Vec<f32>) -> LogitRecord {
        LogitRecord {
            prompt_id: id.into(),
            label: Label::Toxic,
            logits,
            backend_fingerprint: "fp0".into(),
            text_sha256: "00".into(),
            partial: false,
        }
    }

    #[test]
    fn jsonl_basic_and_default_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"text\":\"hi\",\"label\":0}\n\n{\"text\":\"bad\",\"label\":true,\"group\":\"g\"}\n",
        );
        let d = parse_prompts(&p, PromptFormat::Jsonl).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.items[0].label, Label::Benign);
        assert_eq!(d.items[0].id, "1");
        assert_eq!(d.items[1].id, "2");
        assert_eq!(d.items[1].group.as_deref(), Some("g"));
    }

    #[test]
    fn jsonl_missing_text_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.jsonl", "{\"text\":\"x\",\"label\":0}\n{\"label\":1}\n");
        match parse_prompts(&p, PromptFormat::Jsonl) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("text"));
            }
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "b.jsonl", "{\"text\":\"x\",\"label\":\"maybe\"}\n");
        assert!(matches!(parse_prompts(&p, PromptFormat::Jsonl), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_boolean_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "id,text,label\nx,\"hello, world\",true\ny,ok,0\n");
        let d = parse_prompts(&p, PromptFormat::Csv).unwrap();
        assert_eq!(d.items[0].label, Label::Toxic);
        assert_eq!(d.items[0].text, "hello, world");
        assert_eq!(d.items[1].label, Label::Benign);
        let p = write(dir.path(), "b.csv", "text,label\nx,2\n");
        assert!(matches!(parse_prompts(&p, PromptFormat::Csv), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn dataset_serialization_roundtrip_stays_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"id\":\"q\",\"text\":\"a \\\"quoted\\\" line\",\"label\":1,\"tag\":\"jailbreak\"}\n{\"text\":\"b\",\"label\":0}\n",
        );
        let d = parse_prompts(&p, PromptFormat::Jsonl).unwrap();
        let out = dir.path().join("b.jsonl");
        write_prompts_jsonl(&d, &out).unwrap();
        let back = parse_prompts(&out, PromptFormat::Jsonl).unwrap();
        assert_eq!(back.items, d.items);
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let recs = vec![record("a", vec![1.0, -0.0, 3.5, f32::MIN_POSITIVE]), record("b", vec![0.0; 4])];
        write_logit_dump(&recs, &p).unwrap();
        let size = fs::metadata(&p).unwrap().len();
        assert_eq!(size, 4 + 4 + 8 + 4 + 2 + 3 + 2 * 4 * 4);
        let back = read_logit_dump(&p).unwrap();
        assert_eq!(back.records(), recs);
        assert_eq!(back.row(0)[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn dump_write_refusals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let bad_len = vec![record("a", vec![1.0; 4]), record("b", vec![1.0; 3])];
        assert!(matches!(write_logit_dump(&bad_len, &p), Err(Error::DimensionMismatch { .. })));
        let mut other = record("b", vec![1.0; 4]);
        other.backend_fingerprint = "fp1".into();
        let bad_fp = vec![record("a", vec![1.0; 4]), other];
        assert!(matches!(write_logit_dump(&bad_fp, &p), Err(Error::FingerprintMismatch { .. })));
        let nan = vec![record("a", vec![f32::NAN; 4])];
        assert!(write_logit_dump(&nan, &p).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn dump_read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let recs = vec![record("a", vec![1.0; 4]), record("b", vec![2.0; 4])];
        let dump = write_logit_dump(&recs, &p).unwrap();

        // header says 3 rows, payload holds 2
        let mut bytes = dump.encode_matrix_file();
        bytes[8..16].copy_from_slice(&3u64.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_logit_dump(&p), Err(Error::Truncated(_))));

        let mut bytes = dump.encode_matrix_file();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(read_logit_dump(&p).is_err());

        let mut bytes = dump.encode_matrix_file();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_logit_dump(&p), Err(Error::Version { found: 2, .. })));

        fs::write(&p, &dump.encode_matrix_file()[..10]).unwrap();
        assert!(matches!(read_logit_dump(&p), Err(Error::Truncated(_))));
    }

    #[test]
    fn empty_dump_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dump(&LogitDump::empty(8, "fp"), &p).unwrap();
        let back = read_logit_dump(&p).unwrap();
        assert_eq!(back.n_rows(), 0);
        assert_eq!(back.n_cols(), 8);
    }

    #[test]
    fn baseline_features() {
        assert_eq!(llamaguard_feature(2.0, 1.0).unwrap(), 1.0);
        assert_eq!(llamaguard_feature(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(llamaguard_feature(-1.5, 2.5).unwrap(), -4.0);
        assert!(llamaguard_feature(f64::INFINITY, 0.0).is_err());

        assert_eq!(omod_feature(&[0.5]).unwrap(), 0.0);
        assert!((omod_feature(&[0.1, 0.9]).unwrap() - 2.19722).abs() < 1e-5);
        let sat = omod_feature(&[1.0]).unwrap();
        assert!(sat.is_finite());
        assert!((sat - ((1.0 - OMOD_CLAMP_EPS) / OMOD_CLAMP_EPS).ln()).abs() < 1e-6);
        assert!(omod_feature(&[]).is_err());
    }

    #[test]
    fn baseline_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "b.jsonl",
            "{\"prompt_id\":\"a\",\"unsafe_logit\":2.0,\"safe_logit\":1.0,\"label\":1}\n{\"prompt_id\":\"b\",\"category_scores\":[0.1,0.9]}\n",
        );
        let rows = parse_baseline_scores(&p).unwrap();
        assert_eq!(rows[0].feature, 1.0);
        assert_eq!(rows[0].label, Some(Label::Toxic));
        assert!((rows[1].feature - 9f64.ln()).abs() < 1e-12);
        assert_eq!(rows[1].label, None);
        let p = write(dir.path(), "c.jsonl", "{\"prompt_id\":\"a\"}\n");
        assert!(parse_baseline_scores(&p).is_err());
    }

    proptest! {
        #[test]
        fn dump_roundtrip_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(any::<u32>(), 3), 0..6),
        ) {
            let recs: Vec<LogitRecord> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let v = r.iter().map(|&b| {
                        let f = f32::from_bits(b);
                        if f.is_finite() { f } else { -0.0 }
                    }).collect();
                    record(&i.to_string(), v)
                })
                .collect();
            let dump = LogitDump::from_records(&recs).unwrap();
            let (h, m) = LogitDump::decode_matrix_file(&dump.encode_matrix_file()).unwrap();
            prop_assert_eq!(h, dump.header.clone());
            let a: Vec<u32> = m.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = dump.matrix.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn omod_strictly_increasing(a in 1e-6f64..0.999_999, b in 1e-6f64..0.999_999) {
            prop_assume!(a < b);
            prop_assert!(omod_feature(&[a, 1e-3]).unwrap() <= omod_feature(&[b, 1e-3]).unwrap());
            prop_assert!(omod_feature(&[a]).unwrap() < omod_feature(&[b]).unwrap());
        }

        #[test]
        fn llamaguard_antisymmetric(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            prop_assert_eq!(llamaguard_feature(a, b).unwrap(), -llamaguard_feature(b, a).unwrap());
        }
    }
}
