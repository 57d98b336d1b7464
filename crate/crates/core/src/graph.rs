//! Graph data model and Planetoid-format ingestion.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use gbert_tensor::CsrMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    /// Indices in range and the three sets disjoint.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, set) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            for &i in set {
                if i >= n {
                    return Err(Error::Split(format!("{name} index {i} out of range for {n} nodes")));
                }
                if seen[i] {
                    return Err(Error::Split(format!("node {i} appears in more than one split set")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Counters reported by [`load_planetoid`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub unknown_endpoint: usize,
    pub self_citations: usize,
    pub duplicates: usize,
}

/// Undirected attributed graph. Node indices follow content-file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub node_ids: Vec<String>,
    pub features: CsrMatrix<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Both directions of every undirected edge, sorted by `(source, target)`.
    pub edges: Vec<Edge>,
    pub masks: Option<DatasetSplit>,
    offsets: Vec<usize>,
}

impl Graph {
    /// Builds a graph from parts. Edges are symmetrized, self-loops and
    /// duplicates removed.
    pub fn new(
        node_ids: Vec<String>,
        features: CsrMatrix<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize, f32)>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if features.rows() != n || labels.len() != n {
            return Err(Error::Config(format!(
                "{n} node ids but {} feature rows and {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_names.len().max(1)) {
            return Err(Error::Config(format!("label {bad} outside {} classes", class_names.len())));
        }
        let mut map: std::collections::BTreeMap<(usize, usize), f32> = Default::default();
        for (s, t, w) in edges {
            if s >= n || t >= n {
                return Err(Error::Config(format!("edge ({s}, {t}) outside {n} nodes")));
            }
            if s == t {
                continue;
            }
            map.entry((s, t)).or_insert(w);
            map.entry((t, s)).or_insert(w);
        }
        let edges: Vec<Edge> = map
            .into_iter()
            .map(|((source, target), weight)| Edge {
                source,
                target,
                weight,
            })
            .collect();
        let mut offsets = vec![0usize; n + 1];
        for e in &edges {
            offsets[e.source + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            node_ids,
            features,
            labels,
            class_names,
            edges,
            masks: None,
            offsets,
        })
    }

    /// Structure-only graph: one constant feature, a single class.
    pub fn from_edge_list(n: usize, edges: &[(usize, usize)]) -> Self {
        Graph::new(
            (0..n).map(|i| i.to_string()).collect(),
            CsrMatrix::from_dense(n, 1, &vec![1.0; n]),
            vec![0; n],
            vec!["0".into()],
            edges.iter().map(|&(a, b)| (a, b, 1.0)),
        )
        .expect("edge endpoints within range")
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.edges.len() / 2
    }

    /// Outgoing edges of `i`, sorted by target.
    pub fn neighbors(&self, i: usize) -> &[Edge] {
        &self.edges[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn with_masks(mut self, split: DatasetSplit) -> Result<Self> {
        split.validate(self.node_count())?;
        self.masks = Some(split);
        Ok(self)
    }

    /// SHA-256 over features, labels and edges.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.node_count() as u64).to_le_bytes());
        h.update((self.feature_dim() as u64).to_le_bytes());
        for r in 0..self.node_count() {
            for (c, v) in self.features.row(r) {
                h.update((c as u64).to_le_bytes());
                h.update(v.to_le_bytes());
            }
            h.update(u64::MAX.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for e in &self.edges {
            h.update((e.source as u64).to_le_bytes());
            h.update((e.target as u64).to_le_bytes());
            h.update(e.weight.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the graph as a JSON manifest plus flat binaries under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = self.node_count();
        let d = self.feature_dim();
        binio::write_f32(&dir.join("features.f32"), &self.features.to_dense())?;
        binio::write_u32(
            &dir.join("labels.u32"),
            &self.labels.iter().map(|&y| y as u32).collect::<Vec<_>>(),
        )?;
        let mut ends = Vec::with_capacity(self.edges.len() * 2);
        let mut weights = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            ends.extend([e.source as u32, e.target as u32]);
            weights.push(e.weight);
        }
        binio::write_u32(&dir.join("edges.u32"), &ends)?;
        binio::write_f32(&dir.join("weights.f32"), &weights)?;
        let manifest = GraphManifest {
            format_version: GRAPH_FORMAT,
            node_count: n,
            feature_dim: d,
            edge_entries: self.edges.len(),
            node_ids: self.node_ids.clone(),
            class_names: self.class_names.clone(),
            masks: self.masks.clone(),
            hash: self.content_hash(),
        };
        fs::write(dir.join("graph.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: GraphManifest = serde_json::from_slice(&fs::read(dir.join("graph.json"))?)?;
        if manifest.format_version != GRAPH_FORMAT {
            return Err(Error::CacheInvalid(format!(
                "graph format {} (expected {GRAPH_FORMAT})",
                manifest.format_version
            )));
        }
        let (n, d) = (manifest.node_count, manifest.feature_dim);
        let dense = binio::read_f32(&dir.join("features.f32"), Some(n * d))?;
        let labels = binio::read_u32(&dir.join("labels.u32"), Some(n))?;
        let ends = binio::read_u32(&dir.join("edges.u32"), Some(2 * manifest.edge_entries))?;
        let weights = binio::read_f32(&dir.join("weights.f32"), Some(manifest.edge_entries))?;
        let edges = ends
            .chunks_exact(2)
            .zip(weights)
            .map(|(e, w)| (e[0] as usize, e[1] as usize, w));
        let mut g = Graph::new(
            manifest.node_ids,
            CsrMatrix::from_dense(n, d, &dense),
            labels.into_iter().map(|y| y as usize).collect(),
            manifest.class_names,
            edges,
        )?;
        if let Some(m) = manifest.masks {
            g = g.with_masks(m)?;
        }
        if g.content_hash() != manifest.hash {
            return Err(Error::CacheInvalid(format!(
                "{}: graph hash mismatch",
                dir.display()
            )));
        }
        Ok(g)
    }
}

const GRAPH_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphManifest {
    format_version: u32,
    node_count: usize,
    feature_dim: usize,
    edge_entries: usize,
    node_ids: Vec<String>,
    class_names: Vec<String>,
    masks: Option<DatasetSplit>,
    hash: String,
}

/// Reads `<node_id> <f_1> … <f_dx> <class_label>` and `<cited> <citing>` files.
///
/// Class indices follow the sorted order of the distinct label strings.
pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<(Graph, IngestStats)> {
    let content = fs::read_to_string(content_path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: content_path.to_path_buf(),
        line,
        msg,
    };
    let mut node_ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut triplets = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut width: Option<usize> = None;
    for (ln, line) in content.lines().enumerate() {
        let lineno = ln + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 2 {
            return Err(parse_err(lineno, "expected an id and a class label".into()));
        }
        let d = fields.len() - 2;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(Error::Schema {
                    path: content_path.to_path_buf(),
                    line: lineno,
                    expected: w,
                    found: d,
                })
            }
            _ => {}
        }
        let id = fields[0].to_string();
        let row = node_ids.len();
        if index.insert(id.clone(), row).is_some() {
            return Err(parse_err(lineno, format!("duplicate node id {id}")));
        }
        for (c, f) in fields[1..fields.len() - 1].iter().enumerate() {
            let v: f32 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature value {f:?} in column {}", c + 2)))?;
            if v != 0.0 {
                triplets.push((row, c, v));
            }
        }
        node_ids.push(id);
        raw_labels.push(fields[fields.len() - 1].to_string());
    }
    let n = node_ids.len();
    let features = CsrMatrix::from_triplets(n, width.unwrap_or(0), triplets);
    let class_names: Vec<String> = raw_labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_of: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let labels = raw_labels.iter().map(|l| class_of[l.as_str()]).collect();

    let cites = fs::read_to_string(cites_path)?;
    let mut stats = IngestStats::default();
    let mut pairs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (ln, line) in cites.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.len() {
            0 => continue,
            2 => {}
            k => {
                return Err(Error::Parse {
                    path: cites_path.to_path_buf(),
                    line: ln + 1,
                    msg: format!("expected 2 ids, found {k} fields"),
                })
            }
        }
        let (Some(&a), Some(&b)) = (index.get(fields[0]), index.get(fields[1])) else {
            stats.unknown_endpoint += 1;
            continue;
        };
        if a == b {
            stats.self_citations += 1;
            continue;
        }
        if !seen.insert((a.min(b), a.max(b))) {
            stats.duplicates += 1;
            continue;
        }
        pairs.push((a, b, 1.0));
    }
    let graph = Graph::new(node_ids, features, labels, class_names, pairs)?;
    Ok((graph, stats))
}

/// Seeded Planetoid-style split: `train_per_class` per class, then
/// `val_size` and `test_size` drawn from the remaining nodes.
pub fn standard_split(
    graph: &Graph,
    train_per_class: usize,
    val_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let n = graph.node_count();
    let classes = graph.class_count();
    let requested = train_per_class * classes + val_size + test_size;
    if requested > n {
        return Err(Error::Split(format!(
            "requested {requested} nodes but the graph has {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in graph.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut in_train = vec![false; n];
    let mut train = Vec::with_capacity(train_per_class * classes);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < train_per_class {
            return Err(Error::Split(format!(
                "class {} has {} nodes, fewer than {train_per_class}",
                graph.class_names[c],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..train_per_class] {
            in_train[i] = true;
            train.push(i);
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    rest.shuffle(&mut rng);
    let validation = rest[..val_size].to_vec();
    let test = rest[val_size..val_size + test_size].to_vec();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

#[derive(Deserialize)]
struct SplitFile {
    train: Vec<String>,
    #[serde(alias = "val")]
    validation: Vec<String>,
    test: Vec<String>,
}

/// Reads a JSON split listing node ids under `train`, `validation`, `test`.
pub fn load_split_file(graph: &Graph, path: &Path) -> Result<DatasetSplit> {
    let file: SplitFile = serde_json::from_slice(&fs::read(path)?)?;
    let index: HashMap<&str, usize> = graph
        .node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let resolve = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Split(format!("{}: unknown node id {id}", path.display())))
            })
            .collect()
    };
    let split = DatasetSplit {
        train: resolve(&file.train)?,
        validation: resolve(&file.validation)?,
        test: resolve(&file.test)?,
    };
    split.validate(graph.node_count())?;
    Ok(split)
}

/// Content, cites and optional split file for a dataset name under `dir`.
pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.content")),
        dir.join(format!("{name}.cites")),
        dir.join(format!("{name}.split.json")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_nodes_no_edges() {
        let d = tempfile::tempdir().unwrap();
        let c = write(d.path(), "g.content", "a 1 0 x\nb 0 1 y\n");
        let e = write(d.path(), "g.cites", "");
        let (g, stats) = load_planetoid(&c, &e).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(stats, IngestStats::default());
    }

    #[test]
    fn unknown_and_self_citations_are_dropped() {
        let d = tempfile::tempdir().unwrap();
        let c = write(d.path(), "g.content", "a 1 x\nb 0 y\nc 1 x\n");
        let e = write(d.path(), "g.cites", "a zz\nb b\na b\nb a\nc a\n");
        let (g, stats) = load_planetoid(&c, &e).unwrap();
        assert_eq!(stats.unknown_endpoint, 1);
        assert_eq!(stats.self_citations, 1);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(g.edge_count(), 2);
        for e in &g.edges {
            assert_eq!(e.weight, 1.0);
            assert!(g.edges.iter().any(|f| f.source == e.target && f.target == e.source));
        }
    }

    #[test]
    fn parse_and_schema_errors_carry_line_numbers() {
        let d = tempfile::tempdir().unwrap();
        let e = write(d.path(), "g.cites", "");
        let c = write(d.path(), "bad.content", "a 1 0 x\nb 1 q y\n");
        let msg = load_planetoid(&c, &e).unwrap_err().to_string();
        assert!(msg.contains(":2:"), "{msg}");
        let c = write(d.path(), "w.content", "a 1 0 x\nb 1 y\n");
        let err = load_planetoid(&c, &e).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, expected: 2, found: 1, .. }));
    }

    fn toy(n: usize, classes: usize) -> Graph {
        Graph::new(
            (0..n).map(|i| i.to_string()).collect(),
            CsrMatrix::from_dense(n, 1, &vec![1.0; n]),
            (0..n).map(|i| i % classes).collect(),
            (0..classes).map(|c| format!("c{c}")).collect(),
            (1..n).map(|i| (i - 1, i, 1.0)),
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let g = toy(100, 4);
        let s = standard_split(&g, 5, 30, 40, 9).unwrap();
        assert_eq!(s.sizes(), [20, 30, 40]);
        s.validate(100).unwrap();
        assert_eq!(s, standard_split(&g, 5, 30, 40, 9).unwrap());
        assert_ne!(s, standard_split(&g, 5, 30, 40, 10).unwrap());
        for c in 0..4 {
            assert_eq!(s.train.iter().filter(|&&i| g.labels[i] == c).count(), 5);
        }
    }

    #[test]
    fn split_edge_cases() {
        let g = toy(20, 2);
        assert!(standard_split(&g, 0, 5, 5, 0).unwrap().train.is_empty());
        assert!(standard_split(&g, 5, 10, 10, 0).is_err());
        assert!(standard_split(&g, 11, 0, 0, 0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let g = toy(10, 3).with_masks(DatasetSplit {
            train: vec![0, 1],
            validation: vec![2],
            test: vec![3, 4],
        })
        .unwrap();
        g.save(d.path()).unwrap();
        let back = Graph::load(d.path()).unwrap();
        assert_eq!(back, g);
    }
}
