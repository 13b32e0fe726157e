use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context};
use l2r::evaluation::{self, SolveReport};
use l2r::graph::{build_sparse_graph, SparseGraph};
use l2r::instances::{generate_clustered, generate_uniform, parse_benchmark, serialize_benchmark, BenchmarkFormat, InstanceFile, Pattern, DEFAULT_CAPACITY};
use l2r::neural::checkpoint;
use l2r::prc::{self, PrcConfig};
use l2r::rollout::{construct, RolloutSeed, StartRule};
use l2r::training::{self, TrainConfig};
use l2r::{DecodeMode, Instance, Params, PolicyBundle, ProblemKind, ReducerKind, Solution};
use rayon::prelude::*;

use crate::manifest::RunManifest;
use crate::svg;
use crate::{Command, EvaluateArgs, GenerateArgs, ImproveArgs, InspectArgs, SolveArgs, TrainArgs};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<l2r::Error> for Failure {
    fn from(e: l2r::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn usage<T>(m: impl Into<String>) -> Res<T> {
    Err(Failure::Usage(m.into()))
}

fn parse_flag<T: FromStr>(name: &str, v: &str) -> Res<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Failure::Usage(format!("--{name}: {e}")))
}

pub fn run(cmd: &Command) -> Res<()> {
    let t0 = Instant::now();
    let args = serde_json::to_value(cmd)?;
    let (mut manifest, primary) = match cmd {
        Command::Generate(a) => (generate(a, args)?, a.out.clone()),
        Command::Train(a) => (train(a, args)?, a.out.clone()),
        Command::Solve(a) => (solve(a, args)?, a.out.clone()),
        Command::Improve(a) => (improve(a, args)?, a.out.clone()),
        Command::Evaluate(a) => (evaluate(a, args)?, a.out.clone()),
        Command::Inspect(a) => return inspect(a),
    };
    manifest.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    manifest.write(&primary)?;
    Ok(())
}

pub fn load_instance(path: &Path) -> anyhow::Result<Instance> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let inst = match ext.as_str() {
        "tsp" => parse_benchmark(&text, BenchmarkFormat::Tsplib)?,
        "vrp" => parse_benchmark(&text, BenchmarkFormat::Cvrplib)?,
        _ => Instance::try_from(serde_json::from_str::<InstanceFile>(&text).with_context(|| format!("parsing {}", path.display()))?)?,
    };
    Ok(inst)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn generate(a: &GenerateArgs, args: serde_json::Value) -> Res<RunManifest> {
    let kind: ProblemKind = parse_flag("kind", &a.kind)?;
    let pattern = match a.pattern.as_str() {
        "uniform" => None,
        p => Some(parse_flag::<Pattern>("pattern", p)?),
    };
    let bench = match a.format.as_str() {
        "json" => false,
        "benchmark" => true,
        f => return usage(format!("--format: expected json or benchmark, got `{f}`")),
    };
    if a.count == 0 {
        return usage("--count must be positive");
    }
    let capacity = match kind {
        ProblemKind::Cvrp => Some(a.capacity.unwrap_or(DEFAULT_CAPACITY)),
        ProblemKind::Tsp => a.capacity,
    };
    fs::create_dir_all(&a.out)?;
    let mut m = RunManifest::new("generate", args, Some(a.seed));
    let width = (a.count - 1).to_string().len();
    for i in 0..a.count {
        let seed = training::derive_seed(a.seed, &[i as u64]);
        let mut inst = match pattern {
            None => generate_uniform(kind, a.n, capacity, seed)?,
            Some(p) => generate_clustered(kind, a.n, p, capacity, seed)?,
        };
        inst.name = format!("{}{}_{:0width$}", kind.as_str(), a.n, i);
        let path = if bench {
            let p = a.out.join(format!("{}.{}", inst.name, if kind == ProblemKind::Tsp { "tsp" } else { "vrp" }));
            fs::write(&p, serialize_benchmark(&inst))?;
            p
        } else {
            let p = a.out.join(format!("{}.json", inst.name));
            write_json(&p, &inst.to_json())?;
            p
        };
        m.outputs.push(path);
    }
    Ok(m)
}

pub fn resolve_train_config(a: &TrainArgs) -> Res<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let is_json = p.extension().and_then(|e| e.to_str()) == Some("json");
            if is_json {
                serde_json::from_str::<TrainConfig>(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?
            } else {
                toml::from_str::<TrainConfig>(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?
            }
        }
        None => {
            let kind: ProblemKind = match &a.kind {
                Some(k) => parse_flag("kind", k)?,
                None => ProblemKind::Tsp,
            };
            match a.preset.as_str() {
                "desk" => TrainConfig::desk(kind),
                "full" => TrainConfig::full(kind),
                p => return usage(format!("--preset: expected desk or full, got `{p}`")),
            }
        }
    };
    if let Some(k) = &a.kind {
        let kind: ProblemKind = parse_flag("kind", k)?;
        if kind != cfg.kind {
            cfg.kind = kind;
            // Kind-specific defaults follow the kind; explicit flags below still win.
            let fresh = if a.preset == "full" { TrainConfig::full(kind) } else { TrainConfig::desk(kind) };
            cfg.batch_size = fresh.batch_size;
            cfg.k = fresh.k;
        }
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(n, epochs, batches_per_epoch, batch_size, k, gamma, lr, clip_norm, seed);
    if a.no_reduction_bias {
        cfg.reduction_bias = false;
    }
    if a.no_local_bias {
        cfg.local_bias = false;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn metrics_path(a: &TrainArgs) -> PathBuf {
    a.metrics.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        a.out.with_file_name(format!("{stem}.metrics.jsonl"))
    })
}

fn train(a: &TrainArgs, args: serde_json::Value) -> Res<RunManifest> {
    let cfg = resolve_train_config(a)?;
    let mpath = metrics_path(a);
    let mut log = BufWriter::new(fs::File::create(&mpath).with_context(|| format!("creating {}", mpath.display()))?);
    let diag = a.out.with_extension("diagnostic.l2r");
    let outcome = training::train(
        &cfg,
        |m, _| {
            serde_json::to_writer(&mut log, m)?;
            log.write_all(b"\n")?;
            log.flush()?;
            Ok(())
        },
        Some(&diag),
    );
    let outcome = outcome.map_err(|e| Failure::Runtime(anyhow!(e).context(format!("training aborted (see {})", diag.display()))))?;
    let meta = serde_json::json!({ "config": cfg, "epochs_logged": outcome.metrics.len() });
    checkpoint::save(&a.out, &outcome.params, cfg.k, cfg.gamma, meta)?;
    let mut m = RunManifest::new("train", serde_json::json!({ "args": args, "resolved": cfg }), Some(cfg.seed));
    if let Some(c) = &a.config {
        m.inputs.push(c.clone());
    }
    m.outputs = vec![a.out.clone(), mpath];
    Ok(m)
}

fn graph_for(inst: &Instance, gamma: f64, cache: Option<&Path>) -> anyhow::Result<SparseGraph> {
    if let Some(p) = cache {
        if p.exists() {
            let g = SparseGraph::read_from(BufReader::new(fs::File::open(p)?))?;
            if g.built_for(inst, gamma) {
                return Ok(g);
            }
        }
        let g = build_sparse_graph(inst, gamma)?;
        let mut w = BufWriter::new(fs::File::create(p)?);
        g.write_to(&mut w)?;
        w.flush()?;
        return Ok(g);
    }
    Ok(build_sparse_graph(inst, gamma)?)
}

fn load_checkpoint(path: &Path, kind: ProblemKind) -> Res<(Params<f32>, checkpoint::CheckpointHeader)> {
    let (p, h) = checkpoint::load::<f32>(path, None).with_context(|| format!("loading {}", path.display()))?;
    if p.config.kind != kind {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint was trained for {} but the instance is {}",
            p.config.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok((p, h))
}

fn solve(a: &SolveArgs, args: serde_json::Value) -> Res<RunManifest> {
    let mode: DecodeMode = parse_flag("mode", &a.mode)?;
    if mode == DecodeMode::Train {
        return usage("--mode: expected greedy or sample");
    }
    let reducer: ReducerKind = parse_flag("reducer", &a.reducer)?;
    let inst = load_instance(&a.instance)?;
    let (params, header) = load_checkpoint(&a.checkpoint, inst.kind)?;
    let k = a.k.unwrap_or(header.k);
    let gamma = a.gamma.unwrap_or(header.gamma);
    if k == 0 {
        return usage("--k must be positive");
    }
    let t0 = Instant::now();
    let graph = graph_for(&inst, gamma, a.graph_cache.as_deref())?;
    let bundle = PolicyBundle { params: &params, reducer, k, instrument: false };
    let seed = match (mode, inst.kind) {
        (DecodeMode::Greedy, _) => RolloutSeed::greedy(),
        (_, ProblemKind::Tsp) => RolloutSeed { start: StartRule::Random(a.seed), rng: a.seed },
        _ => RolloutSeed { start: StartRule::Fixed(0), rng: a.seed },
    };
    let traj = construct(std::slice::from_ref(&inst), std::slice::from_ref(&graph), &bundle, mode, &[seed])?.pop().unwrap();
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    let sol = Solution::from_sequence(&inst, &traj.sequence, traj.steps, traj.fallback_events, a.timings.then_some(ms))?;
    sol.validate(&inst)?;
    write_json(&a.out, &sol)?;
    let mut m = RunManifest::new("solve", serde_json::json!({ "args": args, "k": k, "gamma": gamma }), Some(a.seed));
    m.inputs = vec![a.instance.clone(), a.checkpoint.clone()];
    m.outputs.push(a.out.clone());
    if let Some(p) = &a.svg {
        let overlay = a.svg_step.map(|t| -> Res<svg::Overlay> {
            let d = traj.decisions.get(t).ok_or_else(|| Failure::Usage(format!("--svg-step {t}: only {} steps", traj.decisions.len())))?;
            Ok(svg::Overlay { from: traj.sequence[t], candidates: d.candidates.clone() })
        });
        let overlay = overlay.transpose()?;
        fs::write(p, svg::render(&inst, &traj.sequence, overlay.as_ref()))?;
        m.outputs.push(p.clone());
    }
    Ok(m)
}

fn improve(a: &ImproveArgs, args: serde_json::Value) -> Res<RunManifest> {
    let inst = load_instance(&a.instance)?;
    let sol: Solution = serde_json::from_slice(&fs::read(&a.solution).with_context(|| format!("reading {}", a.solution.display()))?)?;
    sol.validate(&inst)?;
    let (params, header) = load_checkpoint(&a.checkpoint, inst.kind)?;
    let cfg = PrcConfig { iterations: a.prc_iters, max_destroy_len: a.prc_max_destroy, k: a.k.unwrap_or(header.k), seed: a.seed };
    if cfg.max_destroy_len < 2 {
        return usage("--prc-max-destroy must be at least 2");
    }
    let t0 = Instant::now();
    let out = prc::improve(&inst, &sol.sequence()?, &params, &cfg)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    let new = Solution::from_sequence(&inst, &out.sequence, sol.steps, sol.fallback_events, a.timings.then_some(ms))?;
    new.validate(&inst)?;
    write_json(&a.out, &new)?;
    let hist = a.out.with_extension("history.json");
    write_json(&hist, &serde_json::json!({ "history": out.history, "accepted_segments": out.accepted }))?;
    let mut m = RunManifest::new("improve", serde_json::json!({ "args": args, "prc": cfg }), Some(a.seed));
    m.inputs = vec![a.instance.clone(), a.solution.clone(), a.checkpoint.clone()];
    m.outputs = vec![a.out.clone(), hist];
    if let Some(p) = &a.svg {
        fs::write(p, svg::render(&inst, &out.sequence, None))?;
        m.outputs.push(p.clone());
    }
    Ok(m)
}

fn evaluate(a: &EvaluateArgs, args: serde_json::Value) -> Res<RunManifest> {
    let kind: ProblemKind = parse_flag("kind", &a.kind)?;
    let exact = match a.oracle.as_str() {
        "held-karp" => true,
        "nearest-neighbor" => false,
        o => return usage(format!("--oracle: expected held-karp or nearest-neighbor, got `{o}`")),
    };
    let instances: Vec<Instance> = if a.instances.is_empty() {
        (0..a.count)
            .map(|i| {
                let mut inst = generate_uniform(kind, a.n, (kind == ProblemKind::Cvrp).then_some(DEFAULT_CAPACITY), training::derive_seed(a.seed, &[i as u64]))?;
                inst.name = format!("{}{}_{i}", kind.as_str(), a.n);
                Ok(inst)
            })
            .collect::<l2r::Result<_>>()?
    } else {
        a.instances.iter().map(|p| load_instance(p)).collect::<anyhow::Result<_>>()?
    };
    if exact {
        if let Some(bad) = instances.iter().find(|i| i.kind != ProblemKind::Tsp) {
            return usage(format!("--oracle held-karp needs TSP instances; `{}` is CVRP", bad.name));
        }
        if let Some(bad) = instances.iter().find(|i| i.len() > evaluation::HELD_KARP_MAX) {
            return usage(format!("--oracle held-karp supports n <= {}; `{}` has {}", evaluation::HELD_KARP_MAX, bad.name, bad.len()));
        }
    }
    let ckpt = match &a.checkpoint {
        Some(p) => {
            let k0 = instances.first().map_or(kind, |i| i.kind);
            Some(load_checkpoint(p, k0)?)
        }
        None => None,
    };
    fs::create_dir_all(&a.out)?;

    let rows: Vec<Vec<SolveReport>> = instances
        .par_iter()
        .map(|inst| -> anyhow::Result<Vec<SolveReport>> {
            let mut rows = Vec::new();
            let t = Instant::now();
            let nn = evaluation::nearest_neighbor(inst, 0)?;
            let nn_ms = t.elapsed().as_secs_f64() * 1e3;
            let (reference, ref_tour) = if exact {
                let t = Instant::now();
                let (tour, len) = evaluation::held_karp(inst)?;
                let mut r = SolveReport::new(&inst.name, "held-karp", len, Some(len))?;
                r.wall_ms = a.timings.then(|| t.elapsed().as_secs_f64() * 1e3);
                rows.push(r);
                (len, Some(tour.order))
            } else {
                (nn.objective, None)
            };
            let mut r = SolveReport::new(&inst.name, "nearest-neighbor", nn.objective, Some(reference))?;
            r.wall_ms = a.timings.then_some(nn_ms);
            rows.push(r);
            if let Some((params, header)) = &ckpt {
                let k = a.k.unwrap_or(header.k);
                let graph = build_sparse_graph(inst, a.gamma.unwrap_or(header.gamma))?;
                for reducer in [ReducerKind::Learned, ReducerKind::Dssr] {
                    let bundle = PolicyBundle { params, reducer, k, instrument: false };
                    let s = l2r::rollout::solve(inst, &graph, &bundle)?;
                    let name = if reducer == ReducerKind::Learned { "l2r-greedy" } else { "dssr-greedy" };
                    let mut r = SolveReport::new(&inst.name, name, s.objective, Some(reference))?;
                    r.k = Some(k);
                    r.fallback_events = s.fallback_events;
                    r.wall_ms = if a.timings { s.wall_ms } else { None };
                    if let Some(t) = &ref_tour {
                        r.optimality_ratio = Some(evaluation::optimality_ratio(inst, &graph, t, &bundle)?.percent);
                    }
                    rows.push(r);
                }
            }
            Ok(rows)
        })
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<SolveReport> = rows.into_iter().flatten().collect();
    let csv_path = a.out.join("report.csv");
    let json_path = a.out.join("report.json");
    evaluation::write_reports_csv(BufWriter::new(fs::File::create(&csv_path)?), &rows)?;
    evaluation::write_reports_json(BufWriter::new(fs::File::create(&json_path)?), &rows)?;
    let mut m = RunManifest::new("evaluate", args, Some(a.seed));
    m.inputs = a.instances.clone();
    m.inputs.extend(a.checkpoint.clone());
    m.outputs = vec![csv_path, json_path];

    if !a.pruned_k.is_empty() {
        if !exact {
            return usage("--pruned-k needs --oracle held-karp");
        }
        let (prow, summary) = evaluation::pruned_oracle_experiment(&instances, &a.pruned_k)?;
        let p = a.out.join("pruned.json");
        write_json(&p, &serde_json::json!({ "rows": prow, "summary": summary }))?;
        m.outputs.push(p);
    }

    let mut summary = String::new();
    let methods: Vec<&str> = {
        let mut v: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        v.dedup();
        v.sort();
        v.dedup();
        v
    };
    for meth in methods {
        let obj = evaluation::mean_of(&rows, meth, |r| Some(r.objective)).unwrap_or(f64::NAN);
        let gap = evaluation::mean_of(&rows, meth, |r| r.gap_pct).unwrap_or(f64::NAN);
        summary.push_str(&format!("{meth:>18}  objective {obj:.4}  gap {gap:.2}%\n"));
    }
    print!("{summary}");
    Ok(m)
}

fn inspect(a: &InspectArgs) -> Res<()> {
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let (header, _) = checkpoint::decode_header(&bytes)?;
    let params: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let doc = serde_json::json!({
        "path": a.checkpoint,
        "bytes": bytes.len(),
        "parameters": params,
        "header": header,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
