use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use super::levi::GLOBAL_TOKEN;
use super::{GraphError, GraphEntry, LabeledGraph};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const GNODE: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", GLOBAL_TOKEN];

/// Token ↔ id map shared by the encoder and the decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = PAD;
    pub const UNK: usize = UNK;
    pub const BOS: usize = BOS;
    pub const EOS: usize = EOS;
    pub const GNODE: usize = GNODE;

    /// Reserved entries followed by `tokens` in the given order (duplicates skipped).
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED.into_iter().chain(tokens) {
            if !v.ids.contains_key(t) {
                v.ids.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Joins ids into a sentence, stopping at `<eos>` and dropping `<bos>`/`<pad>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Vocabulary, GraphError> {
        let lines: Vec<String> = input
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| GraphError::Invalid(format!("vocabulary: {e}")))?;
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(*r) {
                return Err(GraphError::Invalid(format!("vocabulary line {} must be `{r}`", i + 1)));
            }
        }
        let v = Vocabulary::from_tokens(lines[RESERVED.len()..].iter().map(String::as_str));
        if v.len() != lines.len() {
            return Err(GraphError::Invalid("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }
}

fn graph_tokens(g: &LabeledGraph) -> impl Iterator<Item = String> + '_ {
    g.tokens().map(str::to_string).chain(g.edges.iter().map(|(_, l, _)| {
        if l.starts_with(':') {
            l.clone()
        } else {
            format!(":{l}")
        }
    }))
}

/// Builds one vocabulary over node tokens, edge labels and target words.
///
/// Tokens seen fewer than `min_count` times are left out (they map to
/// `<unk>`). Ids after the reserved block are ordered by descending count,
/// ties broken lexicographically.
pub fn build_vocab(corpus: &[GraphEntry], min_count: usize) -> Result<Vocabulary, GraphError> {
    if corpus.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for entry in corpus {
        for t in graph_tokens(&entry.graph) {
            *counts.entry(t).or_default() += 1;
        }
        for w in entry.target.iter().flatten() {
            *counts.entry(w.clone()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_tokens(ranked.iter().map(|(t, _)| t.as_str())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_penman;

    fn entry(amr: &str, target: &str) -> GraphEntry {
        GraphEntry {
            graph: parse_penman(amr).unwrap(),
            target: Some(target.split_whitespace().map(str::to_string).collect()),
        }
    }

    #[test]
    fn single_pair_min_count_one() {
        let c = vec![entry("(c / come-01 :ARG0 (a / and))", "they came")];
        let v = build_vocab(&c, 1).unwrap();
        assert_eq!(v.len(), 5 + 5);
        for t in ["come-01", "and", ":ARG0", "they", "came"] {
            assert!(v.get(t).is_some(), "{t}");
        }
        assert_eq!(v.token(0), "<pad>");
        assert_eq!(v.token(4), "<gnode>");
    }

    #[test]
    fn min_count_two_drops_singletons() {
        let c = vec![entry("(c / come-01 :ARG0 (a / and))", "they came")];
        let v = build_vocab(&c, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("come-01"), UNK);
    }

    #[test]
    fn ordering_by_count_then_lexicographic() {
        let c = vec![
            entry("(b / beta :r (a / alpha))", "alpha zeta"),
            entry("(z / zeta)", "beta"),
        ];
        let v = build_vocab(&c, 1).unwrap();
        let order: Vec<&str> = v.tokens()[5..].iter().map(String::as_str).collect();
        assert_eq!(order, vec!["alpha", "beta", "zeta", ":r"]);
        assert_eq!(build_vocab(&c, 1).unwrap(), v);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert_eq!(build_vocab(&[], 1), Err(GraphError::EmptyCorpus));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::from_tokens(["x", "y"]);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().nth(5), Some("x"));
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
    }
}
