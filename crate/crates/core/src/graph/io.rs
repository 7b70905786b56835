//! Plain-text graph files.
//!
//! ```text
//! GEOWALK-GRAPH v1 <kind> <curvature> <n> <k>
//! 0: (3,0.25) (1,0.5)
//! ...
//! ```
//! Distances use shortest round-trip decimals, so reading back is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GeoError, Result};
use crate::manifold::{Geometry, ManifoldSpec};

use super::RelationalGraph;

pub const GRAPH_MAGIC: &str = "GEOWALK-GRAPH";
pub const GRAPH_VERSION: &str = "v1";

pub fn render_graph(g: &RelationalGraph) -> String {
    let mut s = String::with_capacity(g.n() * (8 + 24 * g.k));
    writeln!(
        s,
        "{GRAPH_MAGIC} {GRAPH_VERSION} {} {} {} {}",
        g.spec.kind(),
        g.spec.curvature(),
        g.n(),
        g.k
    )
    .expect("writing to a String");
    for (i, list) in g.neighbors.iter().enumerate() {
        write!(s, "{i}:").expect("writing to a String");
        for &(j, d) in list {
            write!(s, " ({j},{d})").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn save_graph(g: &RelationalGraph, path: &Path) -> Result<()> {
    fs::write(path, render_graph(g))?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<RelationalGraph> {
    let text = fs::read_to_string(path)?;
    parse_graph(&text).map_err(|e| e.context(path.display().to_string()))
}

fn perr(line: usize, offset: usize, msg: impl Into<String>) -> GeoError {
    GeoError::Parse {
        line,
        offset,
        msg: msg.into(),
    }
}

/// Splits on single spaces, keeping each token's byte offset.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_ascii_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out
}

pub fn parse_graph(text: &str) -> Result<RelationalGraph> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| perr(1, 0, "empty graph file"))?;
    let head = tokens(header);
    if head.is_empty() {
        return Err(perr(1, 0, "empty graph header"));
    }
    if head[0].1 != GRAPH_MAGIC {
        return Err(perr(1, head[0].0, format!("expected `{GRAPH_MAGIC}`")));
    }
    if let Some(&(_, v)) = head.get(1) {
        if v != GRAPH_VERSION {
            return Err(GeoError::Version {
                found: v.to_string(),
                expected: GRAPH_VERSION.to_string(),
            });
        }
    }
    if head.len() != 6 {
        return Err(perr(1, 0, format!("header needs 6 fields, found {}", head.len())));
    }
    let kind: Geometry = head[2]
        .1
        .parse()
        .map_err(|_| perr(1, head[2].0, format!("unknown geometry `{}`", head[2].1)))?;
    let c: f64 = head[3]
        .1
        .parse()
        .map_err(|_| perr(1, head[3].0, "curvature is not a number"))?;
    let spec = ManifoldSpec::new(kind, c).map_err(|e| perr(1, head[3].0, e.to_string()))?;
    let n: usize = head[4]
        .1
        .parse()
        .map_err(|_| perr(1, head[4].0, "node count is not an integer"))?;
    let k: usize = head[5]
        .1
        .parse()
        .map_err(|_| perr(1, head[5].0, "k is not an integer"))?;

    let mut neighbors = Vec::with_capacity(n);
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks = tokens(line);
        let (off, label) = toks[0];
        let idx = label
            .strip_suffix(':')
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| perr(lineno, off, "expected `<node>:`"))?;
        if idx != neighbors.len() {
            return Err(perr(
                lineno,
                off,
                format!("expected node {}, found {idx}", neighbors.len()),
            ));
        }
        let mut list = Vec::with_capacity(toks.len() - 1);
        for &(off, tok) in &toks[1..] {
            let inner = tok
                .strip_prefix('(')
                .and_then(|t| t.strip_suffix(')'))
                .ok_or_else(|| perr(lineno, off, "expected `(neighbor,distance)`"))?;
            let (j, d) = inner
                .split_once(',')
                .ok_or_else(|| perr(lineno, off, "missing `,` in neighbor pair"))?;
            let j: usize = j
                .parse()
                .map_err(|_| perr(lineno, off + 1, format!("bad neighbor index `{j}`")))?;
            let d: f64 = d.parse().map_err(|_| {
                perr(
                    lineno,
                    off + 2 + inner.find(',').unwrap_or(0),
                    format!("bad distance `{d}`"),
                )
            })?;
            list.push((j, d));
        }
        neighbors.push(list);
    }
    if neighbors.len() != n {
        let last = text.lines().count().max(1);
        return Err(perr(
            last,
            0,
            format!("header declares {n} nodes, file lists {}", neighbors.len()),
        ));
    }
    RelationalGraph::new(spec, k, neighbors)
}
