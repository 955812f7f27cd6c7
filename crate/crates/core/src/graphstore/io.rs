use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use super::{GraphError, Result, Snapshot, SnapshotSequence};
use crate::linalg::Matrix;

const MAGIC: &str = "whends-dataset 1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn features_text(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.len() * 20);
    for r in 0..m.rows() {
        for (j, v) in m.row(r).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes one node per line, `d` whitespace-separated floats (round-trip exact).
pub fn write_features(m: &Matrix, path: &Path) -> Result<()> {
    write_file(path, &features_text(m))
}

/// Reads a feature file written by [`write_features`] or produced externally.
pub fn load_features(path: &Path, num_nodes: usize) -> Result<Matrix> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| GraphError::ParseError {
                        line: lineno + 1,
                        message: format!("invalid feature value {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(GraphError::ParseError {
                    line: lineno + 1,
                    message: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.len() != num_nodes {
        return Err(GraphError::Format(format!(
            "{} has {} feature rows for {num_nodes} nodes",
            path.display(),
            rows.len()
        )));
    }
    if rows[0].is_empty() {
        return Err(GraphError::Format("feature rows are empty".into()));
    }
    Matrix::from_rows(&rows).map_err(|e| GraphError::Format(e.to_string()))
}

/// Serializes a sequence into `dir`: `meta.txt`, `edges.txt` (`t src dst`),
/// `labels.txt` (`t src dst label` for every labeled edge) and either a shared
/// `features.txt` or one `features/<t>.txt` per snapshot.
pub fn write_dataset(seq: &SnapshotSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let shared = seq
        .snapshots
        .windows(2)
        .all(|w| Arc::ptr_eq(&w[0].features, &w[1].features) || w[0].features == w[1].features);

    let meta = format!(
        "{MAGIC}\nnum_nodes {}\ndim {}\nsnapshots {}\ntrain_count {}\nfeatures {}\n",
        seq.num_nodes,
        seq.dim,
        seq.len(),
        seq.train_count,
        if shared { "shared" } else { "per_snapshot" }
    );
    write_file(&dir.join("meta.txt"), &meta)?;

    let mut edges = String::new();
    let mut labels = String::new();
    for snap in &seq.snapshots {
        for (i, &(s, d)) in snap.edges.iter().enumerate() {
            writeln!(edges, "{} {s} {d}", snap.index).unwrap();
            if let Some(l) = &snap.labels {
                writeln!(labels, "{} {s} {d} {}", snap.index, l[i]).unwrap();
            }
        }
    }
    write_file(&dir.join("edges.txt"), &edges)?;
    write_file(&dir.join("labels.txt"), &labels)?;

    if shared {
        if let Some(first) = seq.snapshots.first() {
            write_features(&first.features, &dir.join("features.txt"))?;
        }
    } else {
        let fdir = dir.join("features");
        fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
        for snap in &seq.snapshots {
            write_features(&snap.features, &fdir.join(format!("{}.txt", snap.index)))?;
        }
    }
    Ok(())
}

fn parse_triple(line: &str, n: usize, what: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = line
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| GraphError::Format(format!("bad {what} line {line:?}")))?;
    if v.len() != n {
        return Err(GraphError::Format(format!("bad {what} line {line:?}")));
    }
    Ok(v)
}

pub fn read_dataset(dir: &Path) -> Result<SnapshotSequence> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let mut lines = meta.lines();
    if lines.next() != Some(MAGIC) {
        return Err(GraphError::Format(format!(
            "{} is not a dataset manifest",
            meta_path.display()
        )));
    }
    let mut fields = BTreeMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once(' ') {
            fields.insert(k.to_string(), v.trim().to_string());
        }
    }
    let num = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| GraphError::Format(format!("meta.txt missing {key}")))
    };
    let num_nodes = num("num_nodes")?;
    let dim = num("dim")?;
    let total = num("snapshots")?;
    let train_count = num("train_count")?;
    if total < 2 || train_count == 0 || train_count >= total {
        return Err(GraphError::Format(format!(
            "bad split {train_count}/{total}"
        )));
    }

    let edges_path = dir.join("edges.txt");
    let text = fs::read_to_string(&edges_path).map_err(io_err(&edges_path))?;
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); total];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v = parse_triple(line, 3, "edge")?;
        if v[0] >= total || v[1] >= num_nodes || v[2] >= num_nodes || v[1] == v[2] {
            return Err(GraphError::Format(format!("edge out of range: {line:?}")));
        }
        edges[v[0]].push((v[1], v[2]));
    }

    let labels_path = dir.join("labels.txt");
    let text = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
    let mut labels: Vec<Option<Vec<u8>>> = vec![None; total];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v = parse_triple(line, 4, "label")?;
        let t = v[0];
        if t >= total || v[3] > 1 {
            return Err(GraphError::Format(format!("label out of range: {line:?}")));
        }
        let l = labels[t].get_or_insert_with(Vec::new);
        if edges[t].get(l.len()) != Some(&(v[1], v[2])) {
            return Err(GraphError::Format(format!(
                "label does not match edge order: {line:?}"
            )));
        }
        l.push(v[3] as u8);
    }

    let shared = fields.get("features").map(String::as_str) != Some("per_snapshot");
    let shared_features = if shared {
        Some(Arc::new(load_features(
            &dir.join("features.txt"),
            num_nodes,
        )?))
    } else {
        None
    };
    let mut snapshots = Vec::with_capacity(total);
    for (t, (e, l)) in edges.into_iter().zip(labels).enumerate() {
        let features = match &shared_features {
            Some(f) => Arc::clone(f),
            None => Arc::new(load_features(
                &dir.join("features").join(format!("{t}.txt")),
                num_nodes,
            )?),
        };
        if features.cols() != dim {
            return Err(GraphError::Format(format!(
                "snapshot {t} features have width {}, expected {dim}",
                features.cols()
            )));
        }
        if let Some(l) = &l {
            if l.len() != e.len() {
                return Err(GraphError::Format(format!(
                    "snapshot {t} is partially labeled"
                )));
            }
        }
        let mut snap = Snapshot::new(t, num_nodes, e, features);
        snap.labels = l;
        snapshots.push(snap);
    }
    Ok(SnapshotSequence {
        snapshots,
        train_count,
        num_nodes,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{init_features, inject_anomalies, nds_perturb};

    fn seq() -> SnapshotSequence {
        let f = Arc::new(init_features(6, 3, 2));
        let snapshots = (0..3)
            .map(|t| Snapshot::new(t, 6, vec![(0, 1), (2, 3), (t, 5)], Arc::clone(&f)))
            .collect();
        let mut s = SnapshotSequence {
            snapshots,
            train_count: 1,
            num_nodes: 6,
            dim: 3,
        };
        for t in 1..3 {
            s.snapshots[t] = inject_anomalies(&s.snapshots[t], 0.3, t as u64).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_shared() {
        let dir = tempfile::tempdir().unwrap();
        let s = seq();
        write_dataset(&s, dir.path()).unwrap();
        assert!(dir.path().join("features.txt").exists());
        assert_eq!(read_dataset(dir.path()).unwrap(), s);
    }

    #[test]
    fn round_trip_drifting() {
        let dir = tempfile::tempdir().unwrap();
        let s = nds_perturb(&seq(), 0.3, 4).unwrap();
        write_dataset(&s, dir.path()).unwrap();
        assert!(dir.path().join("features/2.txt").exists());
        assert_eq!(read_dataset(dir.path()).unwrap(), s);
    }

    #[test]
    fn feature_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        fs::write(&p, "1 2\n3 4\n").unwrap();
        assert_eq!(
            load_features(&p, 2).unwrap(),
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()
        );
        assert!(matches!(load_features(&p, 3), Err(GraphError::Format(_))));
        fs::write(&p, "1 2\n3\n").unwrap();
        assert!(matches!(
            load_features(&p, 2),
            Err(GraphError::ParseError { line: 2, .. })
        ));
        assert!(matches!(
            load_features(&dir.path().join("missing.txt"), 2),
            Err(GraphError::Io { .. })
        ));
    }
}
