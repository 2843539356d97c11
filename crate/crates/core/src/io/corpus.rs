//! Line-delimited JSON corpora: benchmark instances and caption pairs.
//!
//! One JSON object per line. Canonical field names are
//! `id, caption, positive, negatives, category` for benchmark records and
//! `id, caption_a, caption_b, source` for pairs; a [`FieldMap`] renames them
//! for files that use different keys.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// The nine semantic categories of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Quantity,
    Adjective,
    Coreference,
    BasicEvent,
    Adverb,
    SpatialRelationship,
    Ocr,
    TemporalRelationship,
    Action,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Quantity,
        Category::Adjective,
        Category::Coreference,
        Category::BasicEvent,
        Category::Adverb,
        Category::SpatialRelationship,
        Category::Ocr,
        Category::TemporalRelationship,
        Category::Action,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Quantity => "quantity",
            Category::Adjective => "adjective",
            Category::Coreference => "coreference",
            Category::BasicEvent => "basic_event",
            Category::Adverb => "adverb",
            Category::SpatialRelationship => "spatial_relationship",
            Category::Ocr => "ocr",
            Category::TemporalRelationship => "temporal_relationship",
            Category::Action => "action",
        }
    }

    /// Case-insensitive; spaces and hyphens count as underscores, and the
    /// plural forms `adjectives`/`adverbs` are accepted.
    pub fn parse(s: &str) -> Option<Category> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        let norm = match norm.as_str() {
            "adjectives" => "adjective",
            "adverbs" => "adverb",
            other => other,
        };
        Category::ALL.into_iter().find(|c| c.as_str() == norm)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ted6kInstance {
    pub id: String,
    pub caption: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub category: Category,
}

impl Ted6kInstance {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.caption.is_empty() || self.positive.is_empty() {
            return Err("empty caption or positive".into());
        }
        if self.negatives.is_empty() {
            return Err("no negative statements".into());
        }
        if self.negatives.iter().any(|n| n.is_empty()) {
            return Err("empty negative statement".into());
        }
        if self.negatives.contains(&self.positive) {
            return Err("positive statement also listed as a negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub id: String,
    pub caption_a: String,
    pub caption_b: String,
    pub source: String,
}

impl CaptionPair {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.caption_a.is_empty() || self.caption_b.is_empty() {
            return Err("empty caption".into());
        }
        if self.caption_a == self.caption_b {
            return Err("caption_a and caption_b are identical".into());
        }
        if self.source.is_empty() {
            return Err("empty source id".into());
        }
        Ok(())
    }
}

/// Maps canonical field names to the names used in a particular file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    #[serde(flatten)]
    renames: BTreeMap<String, String>,
}

impl FieldMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rename(mut self, canonical: &str, actual: &str) -> Self {
        self.renames.insert(canonical.to_string(), actual.to_string());
        self
    }

    pub fn field<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.renames.get(canonical).map(String::as_str).unwrap_or(canonical)
    }

    /// Parses `canonical=actual` pairs separated by commas.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut map = FieldMap::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (c, a) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("field mapping {part:?} is not canonical=actual")))?;
            map = map.rename(c.trim(), a.trim());
        }
        Ok(map)
    }
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
    id: Option<String>,
}

impl LineCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Record {
            path: self.path.to_path_buf(),
            line: self.line,
            id: self.id.clone(),
            msg: msg.into(),
        }
    }
}

fn str_field(obj: &serde_json::Map<String, Value>, key: &str, ctx: &LineCtx<'_>) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) if key.ends_with("id") || key == "source" => Ok(n.to_string()),
        Some(_) => Err(ctx.err(format!("field {key:?} is not a string"))),
        None => Err(ctx.err(format!("missing field {key:?}"))),
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, serde_json::Map<String, Value>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx {
            path,
            line: i + 1,
            id: None,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| ctx.err(format!("malformed JSON: {e}")))?;
        match v {
            Value::Object(obj) => out.push((i + 1, obj)),
            _ => return Err(ctx.err("record is not a JSON object")),
        }
    }
    if out.is_empty() {
        return Err(Error::Argument(format!("{} contains no records", path.display())));
    }
    Ok(out)
}

pub fn load_ted6k(path: impl AsRef<Path>) -> Result<Vec<Ted6kInstance>> {
    load_ted6k_with(path, &FieldMap::default())
}

pub fn load_ted6k_with(path: impl AsRef<Path>, fields: &FieldMap) -> Result<Vec<Ted6kInstance>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, obj) in read_records(path)? {
        let mut ctx = LineCtx { path, line, id: None };
        let id = str_field(&obj, fields.field("id"), &ctx)?;
        ctx.id = Some(id.clone());
        let caption = str_field(&obj, fields.field("caption"), &ctx)?;
        let positive = str_field(&obj, fields.field("positive"), &ctx)?;
        let neg_key = fields.field("negatives");
        let negatives = match obj.get(neg_key) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| ctx.err("negative statement is not a string"))
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(ctx.err(format!("field {neg_key:?} is not a list"))),
            None => return Err(ctx.err(format!("missing field {neg_key:?}"))),
        };
        let cat_raw = str_field(&obj, fields.field("category"), &ctx)?;
        let category =
            Category::parse(&cat_raw).ok_or_else(|| ctx.err(format!("unknown category {cat_raw:?}")))?;
        let inst = Ted6kInstance {
            id: id.clone(),
            caption,
            positive,
            negatives,
            category,
        };
        inst.validate().map_err(|m| ctx.err(m))?;
        if !seen.insert(id) {
            return Err(ctx.err("duplicate id"));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<CaptionPair>> {
    load_pairs_with(path, &FieldMap::default())
}

pub fn load_pairs_with(path: impl AsRef<Path>, fields: &FieldMap) -> Result<Vec<CaptionPair>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, obj) in read_records(path)? {
        let mut ctx = LineCtx { path, line, id: None };
        let id = str_field(&obj, fields.field("id"), &ctx)?;
        ctx.id = Some(id.clone());
        let pair = CaptionPair {
            id: id.clone(),
            caption_a: str_field(&obj, fields.field("caption_a"), &ctx)?,
            caption_b: str_field(&obj, fields.field("caption_b"), &ctx)?,
            source: str_field(&obj, fields.field("source"), &ctx)?,
        };
        pair.validate().map_err(|m| ctx.err(m))?;
        if !seen.insert(id) {
            return Err(ctx.err("duplicate id"));
        }
        out.push(pair);
    }
    Ok(out)
}

/// Writes records one JSON object per line with canonical field names.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Argument(format!("serializing record: {e}")))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
