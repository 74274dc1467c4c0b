//! Corpus files: one JSON record per line, and a directory of TSV files with
//! one file per label combination.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use styleadapt_core::corpus::{tokenize, AttributeSchema, CorpusSplit, LabeledSentence, SplitName};
use styleadapt_core::Error as CoreError;

use crate::error::{CliError, Result};

struct Labels<'a> {
    schema: &'a AttributeSchema,
    labels: &'a [usize],
}

impl Serialize for Labels<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.labels.len()))?;
        for (attr, v) in self.schema.attributes().iter().zip(self.labels) {
            map.serialize_entry(&attr.name, &attr.values[*v])?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    text: String,
    labels: Labels<'a>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    text: String,
    labels: BTreeMap<String, String>,
}

/// One JSON line per sentence, labels in schema order.
pub fn to_jsonl(sentences: &[LabeledSentence], schema: &AttributeSchema) -> String {
    let mut out = String::new();
    for s in sentences {
        let rec = RecordOut { text: s.text(), labels: Labels { schema, labels: &s.labels } };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Parses JSONL text; errors carry the 1-based line number.
pub fn from_jsonl(text: &str, schema: &AttributeSchema) -> std::result::Result<Vec<LabeledSentence>, CoreError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let rec: RecordIn = serde_json::from_str(line).map_err(|e| CoreError::Validation { line: line_no, message: e.to_string() })?;
        let pairs: Vec<(&str, &str)> = rec.labels.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let s = LabeledSentence::from_named(&rec.text, &pairs, schema).map_err(|message| CoreError::Validation { line: line_no, message })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, sentences: &[LabeledSentence], schema: &AttributeSchema) -> Result<()> {
    write_file(path, to_jsonl(sentences, schema).as_bytes())
}

pub fn read_jsonl(path: &Path, schema: &AttributeSchema) -> Result<Vec<LabeledSentence>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    from_jsonl(&text, schema).map_err(|e| CliError::format(path, e.to_string()))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

pub fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.jsonl", name.as_str()))
}

/// Writes `train.jsonl`, `dev.jsonl` and `test.jsonl` under `dir`.
pub fn save_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<()> {
    for name in SplitName::ALL {
        write_jsonl(&split_path(dir, name), corpus.get(name), &corpus.schema)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path, schema: &AttributeSchema) -> Result<CorpusSplit> {
    let mut splits = Vec::with_capacity(3);
    for name in SplitName::ALL {
        splits.push(read_jsonl(&split_path(dir, name), schema)?);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(CorpusSplit::new(schema.clone(), train, dev, test)?)
}

fn combination_name(schema: &AttributeSchema, labels: &[usize]) -> String {
    schema.attributes().iter().zip(labels).map(|(a, v)| a.values[*v].as_str()).collect::<Vec<_>>().join("+")
}

/// `<root>/<split>/<v1>+<v2>.tsv`, one sentence per line. Every label
/// combination gets a file, possibly empty.
pub fn write_tsv_layout(root: &Path, corpus: &CorpusSplit) -> Result<()> {
    let schema = &corpus.schema;
    for name in SplitName::ALL {
        for combo in schema.combinations() {
            let mut text = String::new();
            for s in corpus.get(name).iter().filter(|s| s.labels == combo) {
                text.push_str(&s.text());
                text.push('\n');
            }
            let path = root.join(name.as_str()).join(format!("{}.tsv", combination_name(schema, &combo)));
            write_file(&path, text.as_bytes())?;
        }
    }
    Ok(())
}

/// Reads one split of the TSV layout. Files are visited in schema
/// combination order; missing files count as empty.
pub fn read_tsv_split(root: &Path, name: SplitName, schema: &AttributeSchema) -> Result<Vec<LabeledSentence>> {
    let dir = root.join(name.as_str());
    if !dir.is_dir() {
        return Err(CliError::format(&dir, "split directory missing"));
    }
    let known: Vec<String> = schema.combinations().iter().map(|c| format!("{}.tsv", combination_name(schema, c))).collect();
    for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
        let entry = entry.map_err(|e| CliError::io(&dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if file.ends_with(".tsv") && !known.contains(&file) {
            return Err(CliError::format(entry.path(), "file name is not a label combination of the schema"));
        }
    }
    let mut out = Vec::new();
    for (combo, file) in schema.combinations().into_iter().zip(known) {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        for (i, line) in text.lines().enumerate() {
            let s = LabeledSentence::new(tokenize(line), combo.clone(), schema)
                .map_err(|_| CliError::format(&path, format!("line {}: empty sentence", i + 1)))?;
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_numbers_in_errors() {
        let schema = AttributeSchema::tense_voice();
        let text = "{\"text\":\"a b\",\"labels\":{\"tense\":\"past\",\"voice\":\"active\"}}\n{\"text\":\"c\",\"labels\":{\"tense\":\"later\",\"voice\":\"active\"}}\n";
        match from_jsonl(text, &schema) {
            Err(CoreError::Validation { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("later"));
            }
            other => panic!("{other:?}"),
        }
        let extra = "{\"text\":\"a\",\"labels\":{\"tense\":\"past\",\"voice\":\"active\"},\"id\":3}\n";
        assert!(matches!(from_jsonl(extra, &schema), Err(CoreError::Validation { line: 1, .. })));
    }

    #[test]
    fn labels_follow_schema_order() {
        let schema = AttributeSchema::from_pairs(&[("voice", &["passive", "active"]), ("tense", &["future", "past"])]).unwrap();
        let s = LabeledSentence::new(vec!["x".into()], vec![1, 0], &schema).unwrap();
        assert_eq!(to_jsonl(&[s], &schema), "{\"text\":\"x\",\"labels\":{\"voice\":\"active\",\"tense\":\"future\"}}\n");
    }
}
