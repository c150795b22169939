use std::fmt::Write as _;
use std::fs;
use std::hint::black_box;
use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{stream_rng, Stream};
use crate::data::generate_split;
use crate::error::{Error, Result};
use crate::model::{GridVlpModel, ModelInput, VisualInput};
use crate::tensor::{ParamStore, Tape};
use crate::text::{tokenize, Vocabulary};
use crate::vision::{bind_constant, resize_image, CnnConfig, CnnEncoder, GridProjection, Image, RegionBaseline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturePath {
    Grid,
    Region,
    Forward,
}

impl FeaturePath {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Grid => "grid",
            Self::Region => "region",
            Self::Forward => "forward",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl Timing {
    /// Mean and sample standard deviation.
    pub fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = if ms.len() > 1 {
            ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub path: FeaturePath,
    /// Visual tokens: grid cells for grid/forward, kept boxes for region.
    pub tokens: usize,
    pub stages: Vec<(String, Timing)>,
    pub total: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn find(&self, path: FeaturePath, depth: usize, height: usize, width: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.path == path && r.depth == depth && r.height == height && r.width == width)
    }

    /// Region/grid mean latency for every (depth, size) with both paths.
    pub fn region_grid_ratios(&self) -> Vec<(usize, usize, usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.path == FeaturePath::Grid)
            .filter_map(|g| {
                let r = self.find(FeaturePath::Region, g.depth, g.height, g.width)?;
                Some((g.depth, g.height, g.width, r.total.mean_ms / g.total.mean_ms))
            })
            .collect()
    }

    /// Forward-latency ratio of each forward row against the first one.
    pub fn forward_speedups(&self) -> Vec<(usize, usize, f64)> {
        let fwd: Vec<&BenchRow> = self.rows.iter().filter(|r| r.path == FeaturePath::Forward).collect();
        let Some(base) = fwd.first() else { return Vec::new() };
        fwd.iter()
            .map(|r| (r.height, r.width, r.total.mean_ms / base.total.mean_ms))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,depth,height,width,tokens,stage,mean_ms,std_ms\n");
        for r in &self.rows {
            let total = ("total".to_string(), r.total);
            for (name, t) in r.stages.iter().chain(std::iter::once(&total)) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{:.6},{:.6}",
                    r.path.as_str(),
                    r.depth,
                    r.height,
                    r.width,
                    r.tokens,
                    name,
                    t.mean_ms,
                    t.std_ms
                );
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# Encoder latency\n\n{} warmup runs, {} timed runs, single thread. Times in ms (mean ± σ).\n\n",
            self.warmup, self.reps
        );
        out.push_str("| path | depth | size | tokens | stages | total |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let stages: Vec<String> = r
                .stages
                .iter()
                .map(|(n, t)| format!("{n} {:.3}±{:.3}", t.mean_ms, t.std_ms))
                .collect();
            let _ = writeln!(
                out,
                "| {} | {} | {}x{} | {} | {} | {:.3} ± {:.3} |",
                r.path.as_str(),
                r.depth,
                r.height,
                r.width,
                r.tokens,
                stages.join(", "),
                r.total.mean_ms,
                r.total.std_ms
            );
        }
        let ratios = self.region_grid_ratios();
        if !ratios.is_empty() {
            out.push_str("\n| depth | size | region / grid |\n|---|---|---|\n");
            for (d, h, w, q) in ratios {
                let _ = writeln!(out, "| {d} | {h}x{w} | {q:.2} |");
            }
        }
        let speedups = self.forward_speedups();
        if speedups.len() > 1 {
            out.push_str("\n| forward size | slowdown vs first |\n|---|---|\n");
            for (h, w, q) in speedups {
                let _ = writeln!(out, "| {h}x{w} | {q:.2} |");
            }
        }
        out
    }
}

type Run<'a> = Box<dyn FnMut() -> Result<(Vec<f64>, usize)> + 'a>;

/// One timed pipeline: per-stage milliseconds and a token count per call.
struct Probe<'a> {
    stages: &'static [&'static str],
    run: Run<'a>,
}

struct Measured {
    stages: Vec<(String, Timing)>,
    total: Timing,
    tokens: usize,
}

/// Warms up every probe, then times `reps` rounds with the probes
/// interleaved inside each round so slow drift hits all of them alike.
fn measure(warmup: usize, reps: usize, probes: &mut [Probe<'_>]) -> Result<Vec<Measured>> {
    for p in probes.iter_mut() {
        for _ in 0..warmup {
            (p.run)()?;
        }
    }
    let mut samples: Vec<(Vec<Vec<f64>>, Vec<f64>, usize)> = probes
        .iter()
        .map(|p| (vec![Vec::with_capacity(reps); p.stages.len()], Vec::with_capacity(reps), 0))
        .collect();
    for _ in 0..reps {
        for (p, (per_stage, totals, tokens)) in probes.iter_mut().zip(samples.iter_mut()) {
            let (ms, n) = (p.run)()?;
            *tokens = n;
            totals.push(ms.iter().sum());
            for (s, v) in per_stage.iter_mut().zip(ms) {
                s.push(v);
            }
        }
    }
    Ok(probes
        .iter()
        .zip(samples)
        .map(|(p, (per_stage, totals, tokens))| Measured {
            stages: p
                .stages
                .iter()
                .zip(&per_stage)
                .map(|(n, s)| (n.to_string(), Timing::from_samples(s)))
                .collect(),
            total: Timing::from_samples(&totals),
            tokens,
        })
        .collect())
}

struct Stopwatch(Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let ms = now.duration_since(self.0).as_secs_f64() * 1e3;
        self.0 = now;
        ms
    }
}

fn source_image(seed: u64, h: usize, w: usize) -> Result<Image> {
    let mut s = generate_split(seed, 1, h, w)?;
    Ok(s.remove(0).image)
}

fn cnn_for_depth(cfg: &RunConfig, depth: usize, rng: &mut ChaCha8Rng) -> Result<CnnEncoder<f32>> {
    let config = CnnConfig {
        depth,
        ..cfg.cnn_config()?
    };
    CnnEncoder::new(config, rng)
}

pub fn grid_and_region_rows(cfg: &RunConfig, depth: usize, h: usize, w: usize) -> Result<Vec<BenchRow>> {
    let mut rng = stream_rng(cfg.seed, Stream::Init, depth as u64, 7);
    let cnn = cnn_for_depth(cfg, depth, &mut rng)?;
    let channels = cnn.config.out_channels();
    let mut proj_store = ParamStore::<f32>::new();
    let proj = GridProjection::new(&mut proj_store, channels, cfg.width, cfg.grid_position, &mut rng)?;
    let region = RegionBaseline::<f32>::new(cfg.region_config(), channels, &mut rng)?;
    let img = source_image(cfg.seed, h, w)?;
    let (lo, hi) = (h.min(w), h.max(w));

    let grid_run = || {
        let mut sw = Stopwatch::start();
        let resized = resize_image(&img, lo, hi)?.image;
        let t_resize = sw.lap();
        let fmap = cnn.encode_grid(&resized)?;
        let t_encode = sw.lap();
        let mut tape = Tape::new();
        let params = bind_constant(&proj_store, &mut tape);
        let seq = proj.flatten_and_project(&mut tape, &params, &fmap)?;
        black_box(tape.value(seq.states));
        let t_project = sw.lap();
        Ok((vec![t_resize, t_encode, t_project], seq.len()))
    };
    let region_run = || {
        let mut sw = Stopwatch::start();
        let resized = resize_image(&img, lo, hi)?.image;
        let t_resize = sw.lap();
        let fmap = cnn.encode_grid(&resized)?;
        let t_encode = sw.lap();
        let regions = region.propose_regions(&fmap)?;
        let t_propose = sw.lap();
        let pooled = crate::vision::roi_pool(&fmap, &regions.boxes)?;
        let t_pool = sw.lap();
        black_box(region.box_head(&pooled)?);
        let t_head = sw.lap();
        Ok((vec![t_resize, t_encode, t_propose, t_pool, t_head], regions.len()))
    };
    let mut probes = [
        Probe {
            stages: &["resize", "encode", "project"],
            run: Box::new(grid_run),
        },
        Probe {
            stages: &["resize", "encode", "propose", "pool", "box_head"],
            run: Box::new(region_run),
        },
    ];
    let measured = measure(cfg.bench_warmup, cfg.bench_reps, &mut probes)?;
    Ok(measured
        .into_iter()
        .zip([FeaturePath::Grid, FeaturePath::Region])
        .map(|(m, path)| BenchRow {
            depth,
            height: h,
            width: w,
            path,
            tokens: m.tokens,
            stages: m.stages,
            total: m.total,
        })
        .collect())
}

struct ForwardSetup {
    cnn: CnnEncoder<f32>,
    model: GridVlpModel<f32>,
    tokens: crate::text::TokenSequence,
    img: Image,
    h: usize,
    w: usize,
}

/// Full forward latency (resize, encode, fuse) at each size, timed
/// interleaved across sizes.
pub fn forward_rows(cfg: &RunConfig, sizes: &[(usize, usize)]) -> Result<Vec<BenchRow>> {
    let caption = "a red square and a blue circle";
    let vocab = Vocabulary::build(&[caption], cfg.max_vocab)?;
    let setups = sizes
        .iter()
        .map(|&(h, w)| {
            let mut rng = stream_rng(cfg.seed, Stream::Init, 99, 7);
            let cnn = cnn_for_depth(cfg, cfg.cnn_depth, &mut rng)?;
            let model = GridVlpModel::<f32>::new(cfg.model_config(vocab.len(), cnn.config.out_channels()), &mut rng)?;
            Ok(ForwardSetup {
                cnn,
                model,
                tokens: tokenize(caption, &vocab, cfg.max_text_len),
                img: source_image(cfg.seed, h, w)?,
                h,
                w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probes: Vec<Probe> = setups
        .iter()
        .map(|s| {
            let (lo, hi) = (s.h.min(s.w), s.h.max(s.w));
            Probe {
                stages: &["resize", "encode", "fuse"],
                run: Box::new(move || {
                    let mut sw = Stopwatch::start();
                    let resized = resize_image(&s.img, lo, hi)?.image;
                    let t_resize = sw.lap();
                    let visual = VisualInput::from_grid(&s.cnn.encode_grid(&resized)?)?;
                    let t_encode = sw.lap();
                    let mut tape = Tape::new();
                    let params = bind_constant(&s.model.store, &mut tape);
                    let input = ModelInput {
                        tokens: &s.tokens,
                        visual: &visual,
                    };
                    let out = s.model.forward::<ChaCha8Rng>(&mut tape, &params, &[input], None)?;
                    black_box(tape.value(out.states));
                    let t_fuse = sw.lap();
                    Ok((vec![t_resize, t_encode, t_fuse], visual.len()))
                }),
            }
        })
        .collect();
    let measured = measure(cfg.bench_warmup, cfg.bench_reps, &mut probes)?;
    Ok(measured
        .into_iter()
        .zip(&setups)
        .map(|(m, s)| BenchRow {
            depth: cfg.cnn_depth,
            height: s.h,
            width: s.w,
            path: FeaturePath::Forward,
            tokens: m.tokens,
            stages: m.stages,
            total: m.total,
        })
        .collect())
}

/// Grid versus region feature extraction at every depth and size, then full
/// forward latency across input sizes.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for depth in cfg.bench_depth_list()? {
        for (h, w) in cfg.bench_size_list()? {
            rows.extend(grid_and_region_rows(cfg, depth, h, w)?);
        }
    }
    rows.extend(forward_rows(cfg, &cfg.bench_forward_size_list()?)?);
    Ok(BenchReport {
        warmup: cfg.bench_warmup,
        reps: cfg.bench_reps,
        rows,
    })
}

/// Writes `bench.md` and `bench.csv` under the output directory.
pub fn write_report(cfg: &RunConfig, report: &BenchReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let md = cfg.out_dir.join("bench.md");
    let csv = cfg.out_dir.join("bench.csv");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok((md, csv))
}
