//! Preprocessed examples, one JSON object per line:
//! `{"tokens": [..], "edges": {"default": [[s, t], ..], "reverse": .., "self": ..,
//! "global": .., "forward": .., "backward": ..}, "pos": [..], "global_index": g,
//! "target": [..]}`.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{EdgeType, ExtendedLeviGraph, TypedEdges};

/// A graph paired with its target token ids (no `<bos>`/`<eos>`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub graph: ExtendedLeviGraph,
    pub target: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<usize>,
    edges: BTreeMap<String, Vec<[usize; 2]>>,
    pos: Vec<i64>,
    global_index: i64,
    #[serde(default)]
    target: Vec<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

impl From<&Example> for Record {
    fn from(ex: &Example) -> Record {
        let edges = EdgeType::ALL
            .into_iter()
            .map(|t| {
                let pairs = ex.graph.edges.get(t).iter().map(|&(s, d)| [s, d]).collect();
                (t.key().to_string(), pairs)
            })
            .collect();
        Record {
            tokens: ex.graph.tokens.clone(),
            edges,
            pos: ex.graph.positions.clone(),
            global_index: ex.graph.global_index.map_or(-1, |g| g as i64),
            target: ex.target.clone(),
        }
    }
}

fn from_record(r: Record) -> Result<Example, String> {
    let mut edges = TypedEdges::default();
    for (key, pairs) in r.edges {
        let t = EdgeType::ALL
            .into_iter()
            .find(|t| t.key() == key)
            .ok_or_else(|| format!("unknown edge type `{key}`"))?;
        edges.get_mut(t).extend(pairs.into_iter().map(|[s, d]| (s, d)));
    }
    let global_index = match r.global_index {
        -1 => None,
        g if g >= 0 => Some(g as usize),
        g => return Err(format!("bad global_index {g}")),
    };
    Ok(Example {
        graph: ExtendedLeviGraph {
            tokens: r.tokens,
            edges,
            positions: r.pos,
            global_index,
        },
        target: r.target,
    })
}

pub fn write_jsonl<W: Write>(examples: &[Example], mut out: W) -> io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, &Record::from(ex))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads examples and checks each graph against `edge_types`.
pub fn read_jsonl<R: BufRead>(input: R, edge_types: usize) -> Result<Vec<Example>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| JsonlError::Record { line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let ex = from_record(rec).map_err(err)?;
        ex.graph.validate(edge_types).map_err(err)?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_penman, to_extended_levi, Vocabulary};

    #[test]
    fn field_names_and_layout() {
        let g = parse_penman("(c / come-01 :ARG0 (a / and))").unwrap();
        let vocab = Vocabulary::from_tokens(["come-01", "and", ":ARG0", "came"]);
        let ex = Example {
            graph: to_extended_levi(&g, false).to_ids(&vocab),
            target: vec![vocab.id("came")],
        };
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&ex), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["tokens"], serde_json::json!([5, 6, 7, 4]));
        assert_eq!(v["edges"]["default"], serde_json::json!([[0, 2], [2, 1]]));
        assert_eq!(v["edges"]["self"].as_array().unwrap().len(), 4);
        assert_eq!(v["pos"], serde_json::json!([0, 1, 1, -1]));
        assert_eq!(v["global_index"], 3);
        assert_eq!(v["target"], serde_json::json!([8]));
        assert_eq!(read_jsonl(buf.as_slice(), 4).unwrap(), vec![ex]);
    }

    #[test]
    fn rejects_disallowed_edge_type() {
        let line = r#"{"tokens":[5,4],"edges":{"self":[[0,0],[1,1]],"global":[[1,0]],"forward":[[0,0]]},"pos":[0,-1],"global_index":1,"target":[]}"#;
        assert!(read_jsonl(line.as_bytes(), 4).is_err());
        assert!(read_jsonl(line.as_bytes(), 6).is_ok());
        let bad = r#"{"tokens":[5],"edges":{"sideways":[]},"pos":[0],"global_index":-1}"#;
        assert!(matches!(read_jsonl(bad.as_bytes(), 6), Err(JsonlError::Record { line: 1, .. })));
    }
}
