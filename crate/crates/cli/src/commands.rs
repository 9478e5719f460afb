use std::path::{Path, PathBuf};
use std::time::Instant;

use hetpre::encoder::forward;
use hetpre::eval::{kmeans_eval, linear_probe_seeds, ClusterScores, Labeled};
use hetpre::graph::HinGraph;
use hetpre::io::{self, Dataset, RunFiles};
use hetpre::synth::{planted_hin, PlantedConfig};
use hetpre::trainer::{self, TrainConfig};
use hetpre::{Error, Result};

use crate::{EvalArgs, ExportArgs, IngestArgs, PretrainArgs, SynthArgs, Task, TrainOverrides};

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        message: e.message().to_string(),
    })
}

fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format {
        what: "resolved config",
        message: e.to_string(),
    })?;
    io::atomic_write(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load(path: &Path) -> Result<Dataset> {
    let loaded = io::load_dataset(path)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.dataset)
}

fn kv(key: &str, value: impl std::fmt::Display) {
    println!("{key}\t{value}");
}

/// `P (4025), A (7167), S (60)`.
fn type_stats(graph: &HinGraph) -> String {
    let s = graph.schema();
    s.object_types()
        .iter()
        .zip(graph.counts())
        .map(|(n, c)| format!("{n} ({c})"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn relation_stats(graph: &HinGraph) -> String {
    let s = graph.schema();
    (0..s.num_links())
        .map(|r| format!("{} ({})", s.relation(r).name, graph.adjacency(r).nnz()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn ingest(args: &IngestArgs) -> Result<()> {
    let ds = load(&args.dataset)?;
    io::write_bundle(&args.out, &ds)?;
    kv("types", type_stats(&ds.graph));
    kv("relations", relation_stats(&ds.graph));
    kv("objects", ds.graph.num_objects());
    kv("links", ds.graph.num_edges());
    kv("labeled", ds.labels.len());
    kv("bundle", args.out.display());
    Ok(())
}

fn parse_types(spec: &str) -> Result<Vec<(String, usize)>> {
    spec.split(',')
        .map(|part| {
            let (name, count) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("type `{part}` is not NAME:COUNT")))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad count in `{part}`")))?;
            Ok((name.trim().to_string(), count))
        })
        .collect()
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_toml::<PlantedConfig>(p)?,
        None => PlantedConfig::acceptance(),
    };
    cfg.seed = args.seed;
    if let Some(b) = args.blocks {
        cfg.num_blocks = b;
    }
    if let Some(t) = &args.types {
        cfg.types = parse_types(t)?;
    }
    if let Some(p) = args.p_in {
        cfg.p_in = p;
    }
    if let Some(p) = args.p_out {
        cfg.p_out = p;
    }
    if let Some(d) = args.feature_dim {
        cfg.feature_dim = d;
    }
    if let Some(s) = args.feature_noise {
        cfg.feature_noise = s;
    }
    if args.full_schema {
        cfg.star = false;
    }
    let h = planted_hin(&cfg)?;
    let local: Vec<Vec<(usize, usize)>> = (0..h.graph.schema().num_types())
        .map(|t| (0..h.graph.count(t)).map(|i| (i, h.blocks[h.graph.globalize(t, i)])).collect())
        .collect();
    io::write_dataset_dir(&args.out, &h.graph, &h.edges, &h.features, &local)?;
    write_toml(&args.out.join("synth.resolved.toml"), &cfg)?;
    kv("types", type_stats(&h.graph));
    kv("relations", relation_stats(&h.graph));
    kv("links", h.graph.num_edges());
    kv("out", args.out.display());
    Ok(())
}

fn resolve_config(file: Option<&PathBuf>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut c = match file {
        Some(p) => read_toml::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {$(if let Some(v) = o.$field { c.$field = v; })*};
    }
    apply!(seed, warmup_epochs, max_epochs, learning_rate, weight_decay, hidden_dim, num_layers, lpa_max_iters);
    c.validate()?;
    Ok(c)
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_ref(), &args.overrides)?;
    let ds = load(&args.dataset)?;
    create_dir(&args.out)?;
    let files = RunFiles::new(&args.out);
    write_toml(&files.resolved_config(), &cfg)?;

    let start = Instant::now();
    let out = trainer::pretrain(&ds.graph, &ds.features, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();

    let emb = out.embeddings.to_matrix();
    io::write_checkpoint(&files.checkpoint(), &out.params, ds.graph.schema())?;
    io::write_embeddings(&files.embeddings(), emb.view())?;
    io::atomic_write(&files.embeddings_tsv(), io::format_embeddings_tsv(emb.view()).as_bytes())?;
    io::atomic_write(&files.report(), out.report.to_jsonl().as_bytes())?;
    io::write_pseudo_labels(&files.pseudo_labels(), &out.labels)?;

    let r = &out.report;
    kv("k", r.k);
    kv("lpa_iterations", r.lpa_iterations);
    kv("lpa_converged", r.lpa_converged);
    kv("epochs", r.epochs.len());
    kv("best_epoch", r.best_epoch);
    if let Some(last) = r.epochs.last() {
        kv("final_loss", format!("{:.6}", last.loss));
    }
    kv("converged", r.converged);
    kv("wall_time_s", format!("{elapsed:.3}"));
    kv("out", args.out.display());
    Ok(())
}

fn read_embedding_arg(path: &Path) -> Result<ndarray::Array2<f64>> {
    if path.is_dir() {
        io::read_embeddings(&RunFiles::new(path).embeddings())
    } else {
        io::read_embeddings(path)
    }
}

/// Ground truth either from a dataset or from a plain labels file. A
/// dataset must describe exactly as many objects as there are embeddings.
fn read_labels_arg(path: &Path, rows: usize) -> Result<Vec<Labeled>> {
    if path.is_dir() || io::is_bundle(path) {
        let ds = load(path)?;
        if ds.graph.num_objects() != rows {
            return Err(Error::SizeMismatch {
                what: "dataset objects vs embedding rows".into(),
                expected: ds.graph.num_objects(),
                got: rows,
            });
        }
        Ok(ds.labels)
    } else {
        let labels = io::read_global_labels(path)?;
        if let Some(&(id, _)) = labels.iter().find(|l| l.0 >= rows) {
            return Err(Error::SizeMismatch {
                what: "labeled object id vs embedding rows".into(),
                expected: rows,
                got: id + 1,
            });
        }
        Ok(labels)
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let emb = read_embedding_arg(&args.embeddings)?;
    let labeled = read_labels_arg(&args.labels, emb.nrows())?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled objects to evaluate".into()));
    }
    if args.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    match args.task {
        Task::Classify => {
            if let Some(f) = args.fractions.iter().find(|f| !(**f > 0.0 && **f < 100.0)) {
                return Err(Error::InvalidArgument(format!("fraction {f}% outside (0, 100)")));
            }
            let mut micro = Vec::new();
            let mut macro_ = Vec::new();
            for &f in &args.fractions {
                let (mean, _) = linear_probe_seeds(emb.view(), &labeled, f / 100.0, &seeds)?;
                micro.push(pct(mean.micro_f1));
                macro_.push(pct(mean.macro_f1));
            }
            let header: Vec<String> = args.fractions.iter().map(|f| format!("{f}%")).collect();
            kv("fraction", header.join("\t"));
            kv("Mic-F1", micro.join("\t"));
            kv("Mac-F1", macro_.join("\t"));
        }
        Task::Cluster => {
            let runs: Vec<ClusterScores> = seeds
                .iter()
                .map(|&s| kmeans_eval(emb.view(), &labeled, s, args.restarts))
                .collect::<Result<_>>()?;
            let n = runs.len() as f64;
            kv("NMI", pct(runs.iter().map(|r| r.nmi).sum::<f64>() / n));
            kv("ARI", pct(runs.iter().map(|r| r.ari).sum::<f64>() / n));
        }
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let ds = load(&args.dataset)?;
    let params = io::read_checkpoint(&args.checkpoint, Some(ds.graph.schema()))?;
    let (table, _) = forward(&params, &ds.graph, &ds.features)?;
    let emb = table.to_matrix();
    if args.out.extension().is_some_and(|e| e == "tsv") {
        io::atomic_write(&args.out, io::format_embeddings_tsv(emb.view()).as_bytes())?;
    } else {
        io::write_embeddings(&args.out, emb.view())?;
    }
    kv("rows", emb.nrows());
    kv("dim", emb.ncols());
    kv("out", args.out.display());
    Ok(())
}
