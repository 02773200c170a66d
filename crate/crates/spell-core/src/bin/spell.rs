//! Command-line front end for the detection pipeline.
//!
//! Every subcommand exits 0 on success and 1 with a single-line
//! `error: ...` diagnostic on failure. All randomness sits behind
//! explicit seeds, so identical invocations produce identical files.

use clap::{Args, Parser, Subcommand};
use spell_core::eval::{predict, report_from_predictions, run_ablation, run_sweep, SweepAxis};
use spell_core::graph::{order_and_chunk, Chunk, EdgeVariant, FaceBox};
use spell_core::io::checkpoint::{load_checkpoint, save_checkpoint};
use spell_core::io::config_file::{load_run_config, RunConfig};
use spell_core::io::dataset::build_dataset;
use spell_core::io::features::FeatureStore;
use spell_core::io::predictions::{read_predictions, write_predictions};
use spell_core::io::synth::{generate, parse_synth_spec, SynthSpec};
use spell_core::io::time_key;
use spell_core::io::tracks::{read_tracks, write_tracks};
use spell_core::model::SpellParams;
use spell_core::train::fit;
use spell_core::{Result, SpellError};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "spell",
    version,
    about = "Active speaker detection over spatio-temporal face-box graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Track + feature-store input files shared by several subcommands.
#[derive(Args)]
struct DataArgs {
    /// Tracks CSV (video_id,time,cx,cy,w,h,entity_id,label).
    #[arg(long)]
    tracks: PathBuf,
    /// Feature store binary; its index CSV sits next to it as
    /// `<stem>_index.csv` unless --features-index is given.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    features_index: Option<PathBuf>,
}

impl DataArgs {
    fn index_path(&self) -> PathBuf {
        match &self.features_index {
            Some(p) => p.clone(),
            None => default_index_path(&self.features),
        }
    }

    fn load(&self) -> Result<(Vec<FaceBox>, FeatureStore)> {
        let boxes = read_tracks(&self.tracks)?;
        let store = FeatureStore::read(&self.features, &self.index_path())?;
        Ok((boxes, store))
    }
}

fn default_index_path(features: &Path) -> PathBuf {
    let stem = features.file_stem().and_then(|s| s.to_str()).unwrap_or("features");
    features.with_file_name(format!("{stem}_index.csv"))
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a tracks file and report per-chunk node/edge statistics.
    BuildGraph {
        #[arg(long)]
        tracks: PathBuf,
        /// Max nodes per chunk.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Temporal edge threshold in seconds.
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        /// Statistics CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Run configuration file (flat key = value); defaults if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint destination.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Optional validation tracks; AP is reported per epoch.
        #[arg(long)]
        val_tracks: Option<PathBuf>,
        #[arg(long)]
        val_features: Option<PathBuf>,
        #[arg(long)]
        val_features_index: Option<PathBuf>,
    },
    /// Score every box with a trained model.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Predictions CSV destination (video_id,time,entity_id,score).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
    },
    /// Average precision of a predictions file against labeled tracks.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        /// Optional report CSV (global + per-video AP).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (tracks + features) into a directory.
    Synth {
        /// Spec file (flat key = value); defaults if absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and score the module/modality ablation rows.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Held-out evaluation tracks; training data is reused if absent.
        #[arg(long)]
        eval_tracks: Option<PathBuf>,
        #[arg(long)]
        eval_features: Option<PathBuf>,
        #[arg(long)]
        eval_features_index: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one hyperparameter axis.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        eval_tracks: Option<PathBuf>,
        #[arg(long)]
        eval_features: Option<PathBuf>,
        #[arg(long)]
        eval_features_index: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of: tau, n, filter_dim.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `0.3,0.9,1.8`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    // Die quietly when stdout closes early (e.g. `spell ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph { tracks, n, tau, out } => build_graph(&tracks, n, tau, &out),
        Command::Train { data, config, out, history, val_tracks, val_features, val_features_index } => {
            train(&data, config.as_deref(), &out, history.as_deref(), val_tracks, val_features, val_features_index)
        }
        Command::Infer { data, ckpt, out, n, tau } => infer(&data, &ckpt, &out, n, tau),
        Command::Eval { predictions, tracks, out } => eval_cmd(&predictions, &tracks, out.as_deref()),
        Command::Synth { spec, seed, out_dir } => synth(spec.as_deref(), seed, &out_dir),
        Command::Ablate {
            data,
            eval_tracks,
            eval_features,
            eval_features_index,
            config,
            out,
        } => ablate(&data, eval_tracks, eval_features, eval_features_index, config.as_deref(), &out),
        Command::Sweep {
            data,
            eval_tracks,
            eval_features,
            eval_features_index,
            config,
            axis,
            values,
            out,
        } => sweep(
            &data,
            eval_tracks,
            eval_features,
            eval_features_index,
            config.as_deref(),
            &axis,
            &values,
            &out,
        ),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_out(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn build_graph(tracks: &Path, n: usize, tau: f64, out: &Path) -> Result<()> {
    let boxes = read_tracks(tracks)?;
    // Group per video in first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut by_video: HashMap<String, Vec<FaceBox>> = HashMap::new();
    for b in boxes {
        if !by_video.contains_key(&b.video_id) {
            order.push(b.video_id.clone());
        }
        by_video.entry(b.video_id.clone()).or_default().push(b);
    }

    let mut file = create_out(out)?;
    writeln!(file, "video_id,chunk,nodes,forward,undirected,backward")?;
    let (mut chunks, mut nodes, mut edges) = (0usize, 0usize, [0usize; 3]);
    for video in order {
        let vid_boxes = by_video.remove(&video).unwrap();
        for (i, chunk_nodes) in order_and_chunk(vid_boxes, n)?.into_iter().enumerate() {
            let chunk = Chunk::build(chunk_nodes, tau)?;
            let counts: Vec<usize> = EdgeVariant::ALL
                .iter()
                .map(|v| chunk.edge_set(*v).len())
                .collect();
            writeln!(
                file,
                "{video},{i},{},{},{},{}",
                chunk.node_count(),
                counts[0],
                counts[1],
                counts[2]
            )?;
            chunks += 1;
            nodes += chunk.node_count();
            for (acc, c) in edges.iter_mut().zip(&counts) {
                *acc += c;
            }
        }
    }
    file.flush()?;
    println!(
        "chunks {chunks} nodes {nodes} edges forward {} undirected {} backward {}",
        edges[0], edges[1], edges[2]
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &DataArgs,
    config: Option<&Path>,
    out: &Path,
    history_path: Option<&Path>,
    val_tracks: Option<PathBuf>,
    val_features: Option<PathBuf>,
    val_features_index: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (boxes, store) = data.load()?;
    let dataset = build_dataset(boxes, &store, &cfg.model, cfg.train.n, cfg.train.tau)?;

    let val = match (val_tracks, val_features) {
        (Some(t), Some(f)) => {
            let idx = val_features_index.unwrap_or_else(|| default_index_path(&f));
            let vb = read_tracks(&t)?;
            let vs = FeatureStore::read(&f, &idx)?;
            Some(build_dataset(vb, &vs, &cfg.model, cfg.train.n, cfg.train.tau)?)
        }
        (None, None) => None,
        _ => {
            return Err(SpellError::validation(
                "--val-tracks and --val-features must be given together",
            ))
        }
    };

    let mut params = SpellParams::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training on {} chunks / {} nodes, {} parameters",
        dataset.len(),
        dataset.total_nodes(),
        params.param_count()
    );
    let history = fit(&mut params, &dataset, &cfg.train, val.as_ref())?;
    for h in &history {
        match h.val_ap {
            Some(ap) => println!("epoch {} lr {} loss {} val_ap {ap}", h.epoch, h.lr, h.loss),
            None => println!("epoch {} lr {} loss {}", h.epoch, h.lr, h.loss),
        }
    }
    if let Some(path) = history_path {
        let mut file = create_out(path)?;
        writeln!(file, "epoch,lr,loss,val_ap")?;
        for h in &history {
            let val = h.val_ap.map(|v| v.to_string()).unwrap_or_default();
            writeln!(file, "{},{},{},{val}", h.epoch, h.lr, h.loss)?;
        }
        file.flush()?;
    }
    save_checkpoint(out, &params)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn infer(data: &DataArgs, ckpt: &Path, out: &Path, n: usize, tau: f64) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let (boxes, store) = data.load()?;
    let dataset = build_dataset(boxes, &store, &params.config, n, tau)?;
    let predictions = predict(&params, &dataset)?;
    write_predictions(out, &predictions)?;
    println!("{} predictions written to {}", predictions.len(), out.display());
    Ok(())
}

fn eval_cmd(predictions: &Path, tracks: &Path, out: Option<&Path>) -> Result<()> {
    let mut preds = read_predictions(predictions)?;
    let boxes = read_tracks(tracks)?;
    let mut labels: HashMap<(String, i64, String), u8> = HashMap::with_capacity(boxes.len());
    for b in &boxes {
        if let Some(l) = b.label {
            labels.insert((b.video_id.clone(), time_key(b.time), b.entity_id.clone()), l);
        }
    }
    if labels.is_empty() {
        return Err(SpellError::validation("tracks file carries no labels to score against"));
    }
    let mut matched = 0usize;
    for p in &mut preds {
        let key = (p.video_id.clone(), time_key(p.time), p.entity_id.clone());
        match labels.get(&key) {
            Some(&l) => {
                p.label = Some(l);
                matched += 1;
            }
            None => {
                return Err(SpellError::validation(format!(
                    "prediction ({}, {:.6}, {}) has no labeled track row",
                    p.video_id, p.time, p.entity_id
                )))
            }
        }
    }
    if matched < labels.len() {
        return Err(SpellError::validation(format!(
            "{} labeled track rows have no prediction",
            labels.len() - matched
        )));
    }

    let report = report_from_predictions(&preds)?;
    println!("AP {:.9} over {} boxes ({} positive)", report.ap, report.node_count, report.positive_count);
    if let Some(path) = out {
        let mut file = create_out(path)?;
        writeln!(file, "scope,video_id,ap")?;
        writeln!(file, "global,,{:.9}", report.ap)?;
        for (video, ap) in &report.per_video {
            match ap {
                Some(v) => writeln!(file, "video,{video},{v:.9}")?,
                None => writeln!(file, "video,{video},")?,
            }
        }
        file.flush()?;
    }
    Ok(())
}

fn synth(spec: Option<&Path>, seed: u64, out_dir: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => {
            let name = p.display().to_string();
            let text = std::fs::read_to_string(p)
                .map_err(|e| SpellError::parse(&name, 0, e.to_string()))?;
            parse_synth_spec(&text, &name)?
        }
        None => SynthSpec::default(),
    };
    std::fs::create_dir_all(out_dir)?;
    let (boxes, store) = generate(&spec, seed)?;
    let positives = boxes.iter().filter(|b| b.label == Some(1)).count();
    write_tracks(&out_dir.join("tracks.csv"), &boxes)?;
    store.write(&out_dir.join("features.bin"), &out_dir.join("features_index.csv"))?;
    println!(
        "{} scenes, {} boxes ({} positive), feature width {} written to {}",
        spec.scenes,
        boxes.len(),
        positives,
        store.dim(),
        out_dir.display()
    );
    Ok(())
}

fn load_eval_pair(
    data: &DataArgs,
    eval_tracks: Option<PathBuf>,
    eval_features: Option<PathBuf>,
    eval_features_index: Option<PathBuf>,
) -> Result<(Vec<FaceBox>, FeatureStore)> {
    match (eval_tracks, eval_features) {
        (Some(t), Some(f)) => {
            let idx = eval_features_index.unwrap_or_else(|| default_index_path(&f));
            Ok((read_tracks(&t)?, FeatureStore::read(&f, &idx)?))
        }
        (None, None) => data.load(),
        _ => Err(SpellError::validation(
            "--eval-tracks and --eval-features must be given together",
        )),
    }
}

fn ablate(
    data: &DataArgs,
    eval_tracks: Option<PathBuf>,
    eval_features: Option<PathBuf>,
    eval_features_index: Option<PathBuf>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (boxes, store) = data.load()?;
    let (eval_boxes, eval_store) =
        load_eval_pair(data, eval_tracks, eval_features, eval_features_index)?;
    let train_set = build_dataset(boxes, &store, &cfg.model, cfg.train.n, cfg.train.tau)?;
    let eval_set =
        build_dataset(eval_boxes, &eval_store, &cfg.model, cfg.train.n, cfg.train.tau)?;

    let rows = run_ablation(&train_set, &eval_set, &cfg.model, &cfg.train)?;
    let mut file = create_out(out)?;
    writeln!(file, "name,use_graph,bidirectional,edge_dropout,use_spatial,modality,ap")?;
    for r in &rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{:.9}",
            r.name,
            r.use_graph,
            r.bidirectional,
            r.edge_dropout,
            r.use_spatial,
            r.modality.name(),
            r.ap
        )?;
        println!("{:<14} AP {:.9}", r.name, r.ap);
    }
    file.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    data: &DataArgs,
    eval_tracks: Option<PathBuf>,
    eval_features: Option<PathBuf>,
    eval_features_index: Option<PathBuf>,
    config: Option<&Path>,
    axis: &str,
    values: &str,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let axis = SweepAxis::parse(axis)?;
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| SpellError::validation(format!("bad sweep value '{}'", v.trim())))
        })
        .collect::<Result<_>>()?;

    let (boxes, store) = data.load()?;
    let (eval_boxes, eval_store) =
        load_eval_pair(data, eval_tracks, eval_features, eval_features_index)?;
    let curve = run_sweep(
        &boxes,
        &store,
        &eval_boxes,
        &eval_store,
        &cfg.model,
        &cfg.train,
        axis,
        &values,
    )?;
    let mut file = create_out(out)?;
    writeln!(file, "axis,value,ap,edge_count,param_count")?;
    for p in &curve {
        writeln!(file, "{},{},{:.9},{},{}", axis.name(), p.value, p.ap, p.edge_count, p.param_count)?;
        println!("{} = {:<8} AP {:.9} edges {} params {}", axis.name(), p.value, p.ap, p.edge_count, p.param_count);
    }
    file.flush()?;
    Ok(())
}

