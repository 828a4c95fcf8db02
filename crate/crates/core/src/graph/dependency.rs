//! Dependency trees, one token per line: `index form head relation`,
//! separated by tabs or spaces. Ten-column CoNLL-U lines are also accepted
//! (columns 1, 2, 7 and 8 are used).

use super::{parse_error, target_from_comment, GraphEntry, GraphError, LabeledGraph};

struct Row {
    line: usize,
    index: usize,
    form: String,
    head: usize,
    rel: String,
}

fn parse_row(line_no: usize, line: &str) -> Result<Option<Row>, GraphError> {
    let cols: Vec<&str> = if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    };
    let (idx, form, head, rel) = match cols.len() {
        4 => (cols[0], cols[1], cols[2], cols[3]),
        n if n >= 10 => (cols[0], cols[1], cols[6], cols[7]),
        n => {
            return Err(parse_error(line_no, 1, format!("expected 4 or 10 columns, found {n}")));
        }
    };
    // CoNLL-U multiword ranges and empty nodes.
    if idx.contains('-') || idx.contains('.') {
        return Ok(None);
    }
    let col_of = |field: &str| line.find(field).map_or(1, |p| p + 1);
    let index = idx
        .parse()
        .map_err(|_| parse_error(line_no, col_of(idx), format!("bad token index `{idx}`")))?;
    let head = head
        .parse()
        .map_err(|_| parse_error(line_no, col_of(head), format!("bad head index `{head}`")))?;
    Ok(Some(Row {
        line: line_no,
        index,
        form: form.to_string(),
        head,
        rel: rel.to_string(),
    }))
}

fn build(rows: Vec<Row>) -> Result<LabeledGraph, GraphError> {
    if rows.is_empty() {
        return Err(parse_error(1, 1, "empty input"));
    }
    let n = rows.len();
    for (i, r) in rows.iter().enumerate() {
        if r.index != i + 1 {
            return Err(parse_error(r.line, 1, format!("expected token index {}, found {}", i + 1, r.index)));
        }
        if r.head > n {
            return Err(parse_error(r.line, 1, format!("head {} out of range 0..={n}", r.head)));
        }
        if r.head == r.index {
            return Err(parse_error(r.line, 1, format!("token {} is its own head", r.index)));
        }
    }
    let roots: Vec<&Row> = rows.iter().filter(|r| r.head == 0).collect();
    match roots.len() {
        0 => return Err(GraphError::Invalid("no root token (head 0)".into())),
        1 => {}
        k => {
            return Err(parse_error(roots[1].line, 1, format!("{k} root tokens; exactly one allowed")));
        }
    }
    // Every token must reach the root by following heads.
    for r in &rows {
        let mut cur = r.index;
        let mut steps = 0;
        while cur != 0 {
            cur = rows[cur - 1].head;
            steps += 1;
            if steps > n {
                return Err(parse_error(r.line, 1, format!("cycle through token {}", r.index)));
            }
        }
    }
    let root = roots[0].index - 1;
    let nodes = rows.iter().map(|r| (r.index.to_string(), r.form.clone())).collect();
    let edges = rows
        .iter()
        .filter(|r| r.head != 0)
        .map(|r| (r.head - 1, r.rel.clone(), r.index - 1))
        .collect();
    let g = LabeledGraph { nodes, edges, root };
    g.validate()?;
    Ok(g)
}

/// Parses one dependency tree. Blank and `#` lines are skipped.
pub fn parse_dependency(text: &str) -> Result<LabeledGraph, GraphError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(r) = parse_row(i + 1, line)? {
            rows.push(r);
        }
    }
    build(rows)
}

/// Parses blank-line separated trees, taking targets from `# target = ...` or `# ::snt` comments.
pub fn parse_dependency_corpus(text: &str) -> Result<Vec<GraphEntry>, GraphError> {
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut target = None;
    let mut finish = |rows: &mut Vec<Row>, target: &mut Option<Vec<String>>| -> Result<(), GraphError> {
        if !rows.is_empty() {
            out.push(GraphEntry {
                graph: build(std::mem::take(rows))?,
                target: target.take(),
            });
        }
        *target = None;
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            finish(&mut rows, &mut target)?;
        } else if t.starts_with('#') {
            if let Some(tg) = target_from_comment(t) {
                target = Some(tg);
            }
        } else if let Some(r) = parse_row(i + 1, line)? {
            rows.push(r);
        }
    }
    finish(&mut rows, &mut target)?;
    if out.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    Ok(out)
}
