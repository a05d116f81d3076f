//! Canonical split files: one tab-separated, integer-coded instance per line,
//! plus a `vocab.tsv` sidecar of `field  raw-value  code` lines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{DataError, FieldSpec, Instance, Schema, SplitSet};

pub const OOV_RAW: &str = "<oov>";

/// Raw value to code mapping per categorical field. Code 0 is reserved for
/// out-of-vocabulary values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    fields: Vec<(String, Vec<String>)>,
    lookup: Vec<HashMap<String, u32>>,
}

impl Vocabulary {
    /// `fields[f] = (name, values)`; `values[k]` receives code `k + 1`.
    pub fn from_fields(fields: Vec<(String, Vec<String>)>) -> Self {
        let lookup = fields
            .iter()
            .map(|(_, vals)| vals.iter().enumerate().map(|(k, v)| (v.clone(), k as u32 + 1)).collect())
            .collect();
        Vocabulary { fields, lookup }
    }

    /// Identity vocabulary (raw value = code) for an integer-coded schema.
    pub fn identity(schema: &Schema) -> Self {
        let all = schema.user_attrs.iter().chain(&schema.item_attrs).chain(&schema.context);
        Self::from_fields(
            all.map(|f| (f.name.clone(), (1..f.cardinality).map(|c| c.to_string()).collect()))
                .collect(),
        )
    }

    pub fn code(&self, field: usize, raw: &str) -> u32 {
        self.lookup[field].get(raw).copied().unwrap_or(0)
    }

    pub fn field_name(&self, field: usize) -> &str {
        &self.fields[field].0
    }

    /// Number of codes including the OOV bucket.
    pub fn cardinality(&self, field: usize) -> usize {
        self.fields[field].1.len() + 1
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Schema implied by the `user.` / `item.` / `ctx.` name prefixes.
    pub fn schema(&self) -> Result<Schema, DataError> {
        let mut s = Schema::default();
        for f in 0..self.len() {
            let spec = FieldSpec { name: self.field_name(f).to_string(), cardinality: self.cardinality(f) };
            let bucket = if spec.name.starts_with("user.") {
                &mut s.user_attrs
            } else if spec.name.starts_with("item.") {
                &mut s.item_attrs
            } else if spec.name.starts_with("ctx.") {
                &mut s.context
            } else {
                return Err(DataError::Malformed {
                    file: "vocab.tsv".into(),
                    line: 0,
                    reason: format!("field {:?} lacks a user./item./ctx. prefix", spec.name),
                });
            };
            bucket.push(spec);
        }
        Ok(s)
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for (name, vals) in &self.fields {
            let _ = writeln!(out, "{name}\t{OOV_RAW}\t0");
            for (k, v) in vals.iter().enumerate() {
                let _ = writeln!(out, "{name}\t{v}\t{}", k + 1);
            }
        }
        out
    }

    fn parse(text: &str) -> Result<Self, DataError> {
        let mut fields: Vec<(String, Vec<String>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| DataError::Malformed { file: "vocab.tsv".into(), line: i + 1, reason };
            let p: Vec<&str> = line.split('\t').collect();
            if p.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", p.len())));
            }
            let code: usize = p[2].parse().map_err(|_| bad(format!("bad code {:?}", p[2])))?;
            if fields.last().is_none_or(|(n, _)| n != p[0]) {
                if code != 0 {
                    return Err(bad(format!("field {:?} must start with code 0", p[0])));
                }
                fields.push((p[0].to_string(), Vec::new()));
                continue;
            }
            let (_, vals) = fields.last_mut().unwrap();
            if code != vals.len() + 1 {
                return Err(bad(format!("codes must be dense, expected {} found {code}", vals.len() + 1)));
            }
            vals.push(p[1].to_string());
        }
        Ok(Self::from_fields(fields))
    }
}

const SPLIT_FILES: [&str; 6] =
    ["train", "test_all", "test_new_user", "test_new_item", "test_infreq_user", "test_infreq_item"];

fn render_instances(rows: &[Instance]) -> String {
    let mut out = String::with_capacity(rows.len() * 32);
    for r in rows {
        let _ = write!(out, "{}\t{}", r.user_id, r.item_id);
        for c in r.user_attrs.iter().chain(&r.item_attrs).chain(&r.context) {
            let _ = write!(out, "\t{c}");
        }
        let _ = writeln!(out, "\t{}\t{}", r.label, r.timestamp);
    }
    out
}

fn parse_instances(file: &str, text: &str, schema: &Schema) -> Result<Vec<Instance>, DataError> {
    let (nu, ni, nc) = (schema.user_attrs.len(), schema.item_attrs.len(), schema.context.len());
    let width = 4 + nu + ni + nc;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let bad = |reason: String| DataError::Malformed { file: file.to_string(), line: i + 1, reason };
            let p: Vec<&str> = line.split('\t').collect();
            if p.len() != width {
                return Err(bad(format!("expected {width} columns, found {}", p.len())));
            }
            let int = |s: &str| s.parse::<u32>().map_err(|_| bad(format!("bad integer {s:?}")));
            let codes = p[2..2 + nu + ni + nc].iter().map(|s| int(s)).collect::<Result<Vec<_>, _>>()?;
            let label = int(p[width - 2])?;
            if label > 1 {
                return Err(bad(format!("label {label} not binary")));
            }
            Ok(Instance {
                user_id: int(p[0])?,
                item_id: int(p[1])?,
                user_attrs: codes[..nu].to_vec(),
                item_attrs: codes[nu..nu + ni].to_vec(),
                context: codes[nu + ni..].to_vec(),
                label: label as u8,
                timestamp: p[width - 1].parse().map_err(|_| bad(format!("bad timestamp {:?}", p[width - 1])))?,
            })
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), DataError> {
    std::fs::write(path, text).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn read_file(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Write `<split>.tsv` for every split plus `vocab.tsv` into `dir`.
pub fn write_splits(dir: &Path, splits: &SplitSet, vocab: &Vocabulary) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    write_file(&dir.join("vocab.tsv"), &vocab.render())?;
    let sets = [
        &splits.train,
        &splits.test_all,
        &splits.test_new_user,
        &splits.test_new_item,
        &splits.test_infreq_user,
        &splits.test_infreq_item,
    ];
    for (name, rows) in SPLIT_FILES.iter().zip(sets) {
        write_file(&dir.join(format!("{name}.tsv")), &render_instances(rows))?;
    }
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<(SplitSet, Vocabulary), DataError> {
    let vocab = Vocabulary::parse(&read_file(&dir.join("vocab.tsv"))?)?;
    let schema = vocab.schema()?;
    let mut sets = Vec::with_capacity(SPLIT_FILES.len());
    for name in SPLIT_FILES {
        let file = format!("{name}.tsv");
        sets.push(parse_instances(&file, &read_file(&dir.join(&file))?, &schema)?);
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().unwrap();
    let splits = SplitSet {
        schema,
        train: next(),
        test_all: next(),
        test_new_user: next(),
        test_new_item: next(),
        test_infreq_user: next(),
        test_infreq_item: next(),
    };
    Ok((splits, vocab))
}
