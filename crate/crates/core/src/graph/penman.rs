//! A PENMAN subset: `(var / concept :role target ...)` where a target is a
//! nested node, a variable reference, a quoted literal or a bare constant.
//!
//! Alignments (`~e.3`) are not supported. Bare symbols that look like
//! variables (one or two lowercase letters, optional digits) must resolve to
//! a variable defined somewhere in the graph; any other bare symbol
//! (`-`, `5`, `imperative`) becomes a constant node.

use std::collections::HashMap;

use super::{parse_error, target_from_comment, GraphEntry, GraphError, LabeledGraph};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Open,
    Close,
    Slash,
    Role(String),
    Quoted(String),
    Symbol(String),
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, GraphError> {
    let mut out = Vec::new();
    for (li, raw) in text.lines().enumerate() {
        let line = li + 1;
        if raw.trim_start().starts_with('#') {
            continue;
        }
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            let simple = match c {
                '(' => Some(Tok::Open),
                ')' => Some(Tok::Close),
                '/' => Some(Tok::Slash),
                _ => None,
            };
            if let Some(tok) = simple {
                out.push(Spanned { tok, line, column });
                i += 1;
            } else if c.is_whitespace() {
                i += 1;
            } else if c == '"' {
                let mut j = i + 1;
                let mut s = String::new();
                while j < chars.len() && chars[j] != '"' {
                    if chars[j] == '\\' && j + 1 < chars.len() {
                        j += 1;
                    }
                    s.push(chars[j]);
                    j += 1;
                }
                if j >= chars.len() {
                    return Err(parse_error(line, column, "unterminated string literal"));
                }
                out.push(Spanned {
                    tok: Tok::Quoted(s),
                    line,
                    column,
                });
                i = j + 1;
            } else {
                let mut j = i;
                while j < chars.len() && !chars[j].is_whitespace() && !matches!(chars[j], '(' | ')' | '"') {
                    if chars[j] == '/' && j > i && chars[i] != ':' {
                        break;
                    }
                    j += 1;
                }
                let word: String = chars[i..j].iter().collect();
                let tok = if let Some(role) = word.strip_prefix(':') {
                    if role.is_empty() {
                        return Err(parse_error(line, column, "empty role name"));
                    }
                    Tok::Role(word.clone())
                } else {
                    Tok::Symbol(word)
                };
                out.push(Spanned { tok, line, column });
                i = j;
            }
        }
    }
    Ok(out)
}

fn looks_like_variable(s: &str) -> bool {
    let letters = s.chars().take_while(|c| c.is_ascii_lowercase()).count();
    (1..=2).contains(&letters) && s[letters..].chars().all(|c| c.is_ascii_digit())
}

struct Parser<'a> {
    toks: &'a [Spanned],
    pos: usize,
    graph: LabeledGraph,
    vars: HashMap<String, usize>,
    // (edge index, symbol, line, column) whose target is resolved at the end
    pending: Vec<(usize, String, usize, usize)>,
    constants: usize,
    end: (usize, usize),
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Spanned> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Spanned> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn eof(&self, what: &str) -> GraphError {
        parse_error(self.end.0, self.end.1, format!("unexpected end of input, expected {what}"))
    }

    fn add_constant(&mut self, token: String) -> usize {
        self.constants += 1;
        self.graph.nodes.push((format!("#const{}", self.constants), token));
        self.graph.nodes.len() - 1
    }

    fn node(&mut self) -> Result<usize, GraphError> {
        let open = self.next().ok_or_else(|| self.eof("'('"))?;
        if open.tok != Tok::Open {
            return Err(parse_error(open.line, open.column, "expected '('"));
        }
        let var = match self.next() {
            Some(Spanned {
                tok: Tok::Symbol(v), ..
            }) => v.clone(),
            Some(t) => return Err(parse_error(t.line, t.column, "expected a variable")),
            None => return Err(parse_error(open.line, open.column, "unclosed '('")),
        };
        match self.next() {
            Some(Spanned { tok: Tok::Slash, .. }) => {}
            Some(t) => return Err(parse_error(t.line, t.column, "expected '/' after variable")),
            None => return Err(parse_error(open.line, open.column, "unclosed '('")),
        }
        let concept = match self.next() {
            Some(Spanned {
                tok: Tok::Symbol(c) | Tok::Quoted(c),
                ..
            }) => c.clone(),
            Some(t) => return Err(parse_error(t.line, t.column, "expected a concept")),
            None => return Err(parse_error(open.line, open.column, "unclosed '('")),
        };
        if self.vars.contains_key(&var) {
            return Err(parse_error(open.line, open.column + 1, format!("variable `{var}` defined twice")));
        }
        self.graph.nodes.push((var.clone(), concept));
        let me = self.graph.nodes.len() - 1;
        self.vars.insert(var, me);

        loop {
            let Some(t) = self.peek() else {
                return Err(parse_error(open.line, open.column, "unclosed '('"));
            };
            match &t.tok {
                Tok::Close => {
                    self.pos += 1;
                    return Ok(me);
                }
                Tok::Role(role) => {
                    self.pos += 1;
                    let role = role.clone();
                    let Some(target) = self.peek() else {
                        return Err(parse_error(open.line, open.column, "unclosed '('"));
                    };
                    match &target.tok {
                        Tok::Open => {
                            self.graph.edges.push((me, role, usize::MAX));
                            let slot = self.graph.edges.len() - 1;
                            let child = self.node()?;
                            self.graph.edges[slot].2 = child;
                        }
                        Tok::Quoted(s) => {
                            self.pos += 1;
                            let c = self.add_constant(s.clone());
                            self.graph.edges.push((me, role, c));
                        }
                        Tok::Symbol(s) if !looks_like_variable(s) && !self.vars.contains_key(s) => {
                            self.pos += 1;
                            let c = self.add_constant(s.clone());
                            self.graph.edges.push((me, role, c));
                        }
                        Tok::Symbol(s) => {
                            self.pos += 1;
                            self.graph.edges.push((me, role, usize::MAX));
                            self.pending
                                .push((self.graph.edges.len() - 1, s.clone(), target.line, target.column));
                        }
                        _ => return Err(parse_error(target.line, target.column, "expected a role target")),
                    }
                }
                _ => return Err(parse_error(t.line, t.column, "expected a role or ')'")),
            }
        }
    }

    fn resolve(&mut self) -> Result<(), GraphError> {
        for (edge, sym, line, column) in std::mem::take(&mut self.pending) {
            let target = match self.vars.get(&sym) {
                Some(&n) => n,
                None if looks_like_variable(&sym) => {
                    return Err(parse_error(line, column, format!("undefined variable `{sym}`")));
                }
                None => self.add_constant(sym),
            };
            self.graph.edges[edge].2 = target;
        }
        Ok(())
    }
}

/// Parses exactly one PENMAN graph; `#` comment lines are skipped.
pub fn parse_penman(text: &str) -> Result<LabeledGraph, GraphError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(parse_error(1, 1, "empty input"));
    }
    let last_line = text.lines().count().max(1);
    let last_col = text.lines().last().map_or(0, |l| l.chars().count()) + 1;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        graph: LabeledGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            root: 0,
        },
        vars: HashMap::new(),
        pending: Vec::new(),
        constants: 0,
        end: (last_line, last_col),
    };
    p.node()?;
    if let Some(extra) = p.peek() {
        let msg = if extra.tok == Tok::Close {
            "unexpected ')'"
        } else {
            "trailing input after graph"
        };
        return Err(parse_error(extra.line, extra.column, msg));
    }
    p.resolve()?;
    p.graph.validate()?;
    Ok(p.graph)
}

/// Parses blank-line separated graphs, taking targets from `# ::snt` comments.
pub fn parse_penman_corpus(text: &str) -> Result<Vec<GraphEntry>, GraphError> {
    let mut out = Vec::new();
    let mut block = String::new();
    let mut target = None;
    let mut block_start = 0;
    let lines: Vec<&str> = text.lines().collect();
    let flush = |block: &mut String, target: &mut Option<Vec<String>>, start: usize, out: &mut Vec<GraphEntry>| {
        if block.lines().any(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#')) {
            let graph = parse_penman(block).map_err(|e| shift_line(e, start))?;
            out.push(GraphEntry {
                graph,
                target: target.take(),
            });
        }
        block.clear();
        *target = None;
        Ok::<(), GraphError>(())
    };
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            flush(&mut block, &mut target, block_start, &mut out)?;
            block_start = i + 1;
            continue;
        }
        if let Some(t) = target_from_comment(line) {
            target = Some(t);
        }
        block.push_str(line);
        block.push('\n');
    }
    flush(&mut block, &mut target, block_start, &mut out)?;
    if out.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    Ok(out)
}

fn shift_line(e: GraphError, by: usize) -> GraphError {
    match e {
        GraphError::Parse { line, column, message } => GraphError::Parse {
            line: line + by,
            column,
            message,
        },
        other => other,
    }
}
