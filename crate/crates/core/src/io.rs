//! File formats: the text dataset directory, the binary dataset bundle,
//! pseudo-label text, embedding export and parameter checkpoints.
//!
//! Dataset directory layout:
//!
//! ```text
//! schema.toml          [[types]] name/count, [[relations]] name/source/target
//! <relation>.edges     src_local <TAB> dst_local [<TAB> weight]
//! <type>.features      one whitespace-separated row of floats per object
//! <type>.labels        local_id <TAB> class_id   (optional)
//! ```
//!
//! Ids are 0-based; blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::graph::{build_graph_with, Edge, FeatureSet, HinGraph, HinSchema, Normalization, RelationSpec};
use crate::lpa::PseudoLabels;

pub const SCHEMA_FILE: &str = "schema.toml";
pub const BUNDLE_MAGIC: &[u8; 8] = b"HPBUNDLE";
pub const BUNDLE_VERSION: u32 = 1;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"HPEM";
pub const EMBEDDING_VERSION: u32 = 1;
/// dtype tag for little-endian f32 payloads.
pub const DTYPE_F32: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HPCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = match path.file_name() {
        Some(name) => path.with_file_name(format!(".{}.tmp", name.to_string_lossy())),
        None => return Err(Error::InvalidArgument(format!("not a file path: {}", path.display()))),
    };
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-comment, non-blank lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDecl {
    pub name: String,
    pub count: usize,
}

/// Contents of `schema.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub types: Vec<TypeDecl>,
    #[serde(default)]
    pub relations: Vec<RelationSpec>,
    #[serde(default)]
    pub normalization: Normalization,
}

/// A validated dataset: graph, features and optional ground-truth labels as
/// `(global id, class)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub graph: HinGraph,
    pub features: FeatureSet,
    pub labels: Vec<(usize, usize)>,
}

/// Result of reading a dataset directory, with non-fatal findings.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

pub fn read_dataset_dir(dir: &Path) -> Result<Loaded> {
    let schema_path = dir.join(SCHEMA_FILE);
    let decl: SchemaFile = toml::from_str(&read_text(&schema_path)?).map_err(|e| Error::Parse {
        file: schema_path.clone(),
        line: e.span().map_or(0, |s| line_of(&read_text(&schema_path).unwrap_or_default(), s.start)),
        message: e.message().to_string(),
    })?;
    let schema = HinSchema::new(decl.types.iter().map(|t| t.name.clone()).collect(), decl.relations.clone())?;
    let counts: Vec<usize> = decl.types.iter().map(|t| t.count).collect();
    let mut warnings = Vec::new();

    let mut edge_lists = Vec::with_capacity(schema.num_links());
    for rel in &schema.relations()[..schema.num_links()] {
        let path = dir.join(format!("{}.edges", rel.name));
        let text = read_text(&path)?;
        let mut edges = Vec::new();
        for (ln, line) in data_lines(&text) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 && f.len() != 3 {
                return Err(parse_err(&path, ln, format!("expected 2 or 3 fields, found {}", f.len())));
            }
            let id = |s: &str| s.parse::<usize>().map_err(|_| parse_err(&path, ln, format!("bad id `{s}`")));
            let (src, dst) = (id(f[0])?, id(f[1])?);
            let weight = match f.get(2) {
                Some(w) => w.parse::<f64>().map_err(|_| parse_err(&path, ln, format!("bad weight `{w}`")))?,
                None => 1.0,
            };
            for (v, ty) in [(src, rel.source), (dst, rel.target)] {
                if v >= counts[ty] {
                    return Err(parse_err(
                        &path,
                        ln,
                        format!("id {v} out of range for type `{}` (count {})", schema.object_types()[ty], counts[ty]),
                    ));
                }
            }
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(parse_err(&path, ln, format!("nonpositive weight {weight}")));
            }
            edges.push(Edge::new(src, dst, weight));
        }
        if edges.is_empty() {
            warnings.push(format!("relation `{}` has no edges ({})", rel.name, path.display()));
        }
        edge_lists.push(edges);
    }
    let graph = build_graph_with(schema, &edge_lists, &counts, decl.normalization)?;

    let mut mats = Vec::new();
    let mut labels = Vec::new();
    for (t, decl_t) in decl.types.iter().enumerate() {
        let path = dir.join(format!("{}.features", decl_t.name));
        mats.push(read_features(&path, decl_t.count)?);
        let lpath = dir.join(format!("{}.labels", decl_t.name));
        if lpath.exists() {
            for (local, class) in read_local_labels(&lpath, decl_t.count)? {
                labels.push((graph.globalize(t, local), class));
            }
        }
    }
    labels.sort_unstable();
    let features = FeatureSet::new(&graph, mats)?;
    Ok(Loaded {
        dataset: Dataset {
            graph,
            features,
            labels,
        },
        warnings,
    })
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

fn read_features(path: &Path, rows: usize) -> Result<Array2<f64>> {
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut n = 0;
    let mut last_line = 0;
    for (ln, line) in data_lines(&text) {
        last_line = ln;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(path, ln, format!("bad float `{s}`"))))
            .collect::<Result<_>>()?;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(parse_err(path, ln, format!("non-finite feature {v}")));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(path, ln, format!("row has {} values, expected {w}", row.len())))
            }
            _ => {}
        }
        if n == rows {
            return Err(parse_err(path, ln, format!("more than {rows} feature rows")));
        }
        data.extend(row);
        n += 1;
    }
    if n < rows {
        return Err(parse_err(
            path,
            last_line + 1,
            format!("missing feature row {n}: expected {rows} rows, found {n}"),
        ));
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), data).map_err(|e| parse_err(path, 0, e.to_string()))
}

fn read_local_labels(path: &Path, count: usize) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut seen = vec![false; count];
    for (ln, line) in data_lines(&text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(parse_err(path, ln, format!("expected 2 fields, found {}", f.len())));
        }
        let local: usize = f[0].parse().map_err(|_| parse_err(path, ln, format!("bad id `{}`", f[0])))?;
        let class: usize = f[1].parse().map_err(|_| parse_err(path, ln, format!("bad class `{}`", f[1])))?;
        if local >= count {
            return Err(parse_err(path, ln, format!("id {local} out of range (count {count})")));
        }
        if std::mem::replace(&mut seen[local], true) {
            return Err(parse_err(path, ln, format!("duplicate label for id {local}")));
        }
        out.push((local, class));
    }
    Ok(out)
}

/// Write a dataset in the text directory format. `local_labels[t]` holds
/// `(local id, class)` pairs for type `t`; empty means no labels file.
pub fn write_dataset_dir(
    dir: &Path,
    graph: &HinGraph,
    edges: &[Vec<Edge>],
    features: &FeatureSet,
    local_labels: &[Vec<(usize, usize)>],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = graph.schema();
    let decl = SchemaFile {
        types: schema
            .object_types()
            .iter()
            .zip(graph.counts())
            .map(|(n, &c)| TypeDecl { name: n.clone(), count: c })
            .collect(),
        relations: schema.link_specs(),
        normalization: graph.normalization(),
    };
    let text = toml::to_string(&decl).map_err(|e| Error::Format {
        what: "schema",
        message: e.to_string(),
    })?;
    atomic_write(&dir.join(SCHEMA_FILE), text.as_bytes())?;

    for (r, rel) in schema.relations()[..schema.num_links()].iter().enumerate() {
        let mut s = String::new();
        for e in edges.get(r).map(Vec::as_slice).unwrap_or(&[]) {
            if e.weight == 1.0 {
                let _ = writeln!(s, "{}\t{}", e.src, e.dst);
            } else {
                let _ = writeln!(s, "{}\t{}\t{}", e.src, e.dst, e.weight);
            }
        }
        atomic_write(&dir.join(format!("{}.edges", rel.name)), s.as_bytes())?;
    }
    for (t, name) in schema.object_types().iter().enumerate() {
        let mut s = String::new();
        for row in features.matrix(t).rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        atomic_write(&dir.join(format!("{name}.features")), s.as_bytes())?;
        if let Some(labels) = local_labels.get(t).filter(|l| !l.is_empty()) {
            let mut s = String::new();
            for (l, c) in labels {
                let _ = writeln!(s, "{l}\t{c}");
            }
            atomic_write(&dir.join(format!("{name}.labels")), s.as_bytes())?;
        }
    }
    Ok(())
}

fn with_header(magic: &[u8], version: u32, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(magic.len() + 4 + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend(payload);
    out
}

fn strip_header<'a>(bytes: &'a [u8], magic: &[u8], version: u32, what: &'static str) -> Result<&'a [u8]> {
    let hl = magic.len() + 4;
    if bytes.len() < hl || &bytes[..magic.len()] != magic {
        return Err(Error::Format {
            what,
            message: "bad magic".into(),
        });
    }
    let v = u32::from_le_bytes(bytes[magic.len()..hl].try_into().expect("4 bytes"));
    if v != version {
        return Err(Error::Format {
            what,
            message: format!("unsupported version {v} (expected {version})"),
        });
    }
    Ok(&bytes[hl..])
}

fn encode<T: Serialize>(value: &T, what: &'static str) -> Result<Vec<u8>> {
    bincode::serialize(value).map_err(|e| Error::Format {
        what,
        message: e.to_string(),
    })
}

fn decode<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &'static str) -> Result<T> {
    bincode::deserialize(bytes).map_err(|e| Error::Format {
        what,
        message: e.to_string(),
    })
}

pub fn write_bundle(path: &Path, dataset: &Dataset) -> Result<()> {
    atomic_write(path, &with_header(BUNDLE_MAGIC, BUNDLE_VERSION, encode(dataset, "bundle")?))
}

pub fn read_bundle(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(strip_header(&bytes, BUNDLE_MAGIC, BUNDLE_VERSION, "bundle")?, "bundle")
}

pub fn is_bundle(path: &Path) -> bool {
    let mut buf = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut buf))
        .is_ok()
        && &buf == BUNDLE_MAGIC
}

/// Load a dataset from either a bundle file or a text directory.
pub fn load_dataset(path: &Path) -> Result<Loaded> {
    if path.is_dir() {
        read_dataset_dir(path)
    } else {
        Ok(Loaded {
            dataset: read_bundle(path)?,
            warnings: Vec::new(),
        })
    }
}

/// `K=<k>` header, then `global_id <TAB> label` lines.
pub fn format_pseudo_labels(labels: &PseudoLabels) -> String {
    let mut s = format!("K={}\n", labels.k());
    for (i, l) in labels.as_slice().iter().enumerate() {
        let _ = writeln!(s, "{i}\t{l}");
    }
    s
}

pub fn write_pseudo_labels(path: &Path, labels: &PseudoLabels) -> Result<()> {
    atomic_write(path, format_pseudo_labels(labels).as_bytes())
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabels> {
    let text = read_text(path)?;
    let mut lines = data_lines(&text);
    let (ln, head) = lines.next().ok_or_else(|| parse_err(path, 1, "missing K= header"))?;
    let k: usize = head
        .strip_prefix("K=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| parse_err(path, ln, "expected `K=<int>`"))?;
    let mut assignment = Vec::new();
    for (ln, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = match f.as_slice() {
            [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
            _ => None,
        };
        let (id, label) = parsed.ok_or_else(|| parse_err(path, ln, "expected `global_id<TAB>label`"))?;
        if id != assignment.len() {
            return Err(parse_err(path, ln, format!("expected id {}, found {id}", assignment.len())));
        }
        assignment.push(label);
    }
    PseudoLabels::new(assignment, k)
}

/// `global_id <TAB> class` lines, e.g. ground truth for evaluation.
pub fn read_global_labels(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [a, b] => a.parse().ok().zip(b.parse().ok()),
                _ => None,
            }
            .ok_or_else(|| parse_err(path, ln, "expected `global_id<TAB>class`"))
        })
        .collect()
}

pub fn format_global_labels(labels: &[(usize, usize)]) -> String {
    labels.iter().fold(String::new(), |mut s, (i, c)| {
        let _ = writeln!(s, "{i}\t{c}");
        s
    })
}

/// Binary embedding file: magic `HPEM`, u32 version, u64 rows, u64 dim,
/// u32 dtype tag (1 = f32), then row-major little-endian f32 values.
pub fn encode_embeddings(emb: ArrayView2<'_, f64>) -> Vec<u8> {
    let (n, d) = emb.dim();
    let mut out = Vec::with_capacity(28 + 4 * n * d);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in emb.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |m: String| Error::Format {
        what: "embeddings",
        message: m,
    };
    if bytes.len() < 28 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != EMBEDDING_VERSION {
        return Err(bad(format!("unsupported version {}", u32_at(4))));
    }
    let (n, d) = (u64_at(8) as usize, u64_at(16) as usize);
    if u32_at(24) != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype tag {}", u32_at(24))));
    }
    let body = &bytes[28..];
    if body.len() != 4 * n * d {
        return Err(bad(format!("expected {} payload bytes, found {}", 4 * n * d, body.len())));
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((n, d), vals).map_err(|e| bad(e.to_string()))
}

pub fn write_embeddings(path: &Path, emb: ArrayView2<'_, f64>) -> Result<()> {
    atomic_write(path, &encode_embeddings(emb))
}

pub fn read_embeddings(path: &Path) -> Result<Array2<f64>> {
    decode_embeddings(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `global_id <TAB> v0 <TAB> v1 ...` with f32 precision.
pub fn format_embeddings_tsv(emb: ArrayView2<'_, f64>) -> String {
    let mut s = String::new();
    for (i, row) in emb.rows().into_iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, "\t{}", *v as f32);
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointBody {
    schema_fingerprint: String,
    shapes: Vec<usize>,
    params: ModelParams,
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, schema: &HinSchema) -> Result<()> {
    let body = CheckpointBody {
        schema_fingerprint: schema.fingerprint(),
        shapes: params.tensors().iter().map(|t| t.1.len()).collect(),
        params: params.clone(),
    };
    atomic_write(path, &with_header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, encode(&body, "checkpoint")?))
}

/// Load a checkpoint; with `schema`, reject checkpoints trained on another schema.
pub fn read_checkpoint(path: &Path, schema: Option<&HinSchema>) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let body: CheckpointBody = decode(
        strip_header(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?,
        "checkpoint",
    )?;
    let shapes: Vec<usize> = body.params.tensors().iter().map(|t| t.1.len()).collect();
    if shapes != body.shapes {
        return Err(Error::Format {
            what: "checkpoint",
            message: "tensor shapes disagree with the recorded shape table".into(),
        });
    }
    if let Some(s) = schema {
        if s.fingerprint() != body.schema_fingerprint {
            return Err(Error::Schema("checkpoint was trained on a different schema".into()));
        }
    }
    Ok(body.params)
}

/// Output file names written by a pretraining run.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.dir.join("embeddings.bin")
    }
    pub fn embeddings_tsv(&self) -> PathBuf {
        self.dir.join("embeddings.tsv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.jsonl")
    }
    pub fn pseudo_labels(&self) -> PathBuf {
        self.dir.join("pseudo.labels")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.dir.join("config.resolved.toml")
    }
}
