use std::collections::HashMap;
use std::io::BufRead;

use super::{EdgeEvent, GraphError, Result};

/// Parsed edge-list file with node ids remapped densely in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub events: Vec<EdgeEvent>,
    pub num_nodes: usize,
    /// Original identifier of each dense node id.
    pub node_labels: Vec<String>,
    pub self_loops_dropped: usize,
}

/// Reads `src dst [weight] [timestamp]` lines separated by whitespace or commas.
///
/// Blank lines and lines starting with `%` or `#` are skipped. Without a
/// timestamp column the zero-based line ordinal is used as the event time.
pub fn parse_edge_list<R: BufRead>(reader: R) -> Result<EdgeList> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut node_labels = Vec::new();
    let mut events = Vec::new();
    let mut self_loops = 0;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GraphError::ParseError {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if !(2..=4).contains(&fields.len()) {
            return Err(GraphError::ParseError {
                line: lineno + 1,
                message: format!("expected 2 to 4 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str, v: &str| GraphError::ParseError {
            line: lineno + 1,
            message: format!("invalid {what} {v:?}"),
        };
        if fields[0].parse::<i64>().is_err() {
            return Err(bad("source id", fields[0]));
        }
        if fields[1].parse::<i64>().is_err() {
            return Err(bad("destination id", fields[1]));
        }
        if let Some(w) = fields.get(2) {
            w.parse::<f64>().map_err(|_| bad("weight", w))?;
        }
        let time = match fields.get(3) {
            Some(ts) => ts
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| bad("timestamp", ts))? as u64,
            None => events.len() as u64 + self_loops as u64,
        };
        if fields[0] == fields[1] {
            self_loops += 1;
            continue;
        }
        let mut intern = |raw: &str| -> usize {
            *ids.entry(raw.to_string()).or_insert_with(|| {
                node_labels.push(raw.to_string());
                node_labels.len() - 1
            })
        };
        let src = intern(fields[0]);
        let dst = intern(fields[1]);
        events.push(EdgeEvent { src, dst, time });
    }
    if events.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    Ok(EdgeList {
        num_nodes: node_labels.len(),
        events,
        node_labels,
        self_loops_dropped: self_loops,
    })
}
