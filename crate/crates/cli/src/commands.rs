use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, ensure, Context as _};
use rayon::prelude::*;
use serde::Serialize;

use gralora_core::adapters::{random_adapter, AdaptedLayer, AdapterKind, AdapterSpec};
use gralora_core::checkpoint::save_checkpoint;
use gralora_core::cost::{recommend_k, CostReport};
use gralora_core::gradients::{check_gradients, BatchInput, GradCheckOptions, GradCheckReport, LossSpec};
use gralora_core::outlier::{make_outlier_input, summarize, CellOutcome, DeviationRow, DeviationSweep, OutlierSpec};
use gralora_core::rng::{derive_seed, derived_rng, stream};
use gralora_core::trainer::{make_task, run_training, write_loss_curve, TaskSpec, TaskStructure, TrainReport};
use gralora_core::Matrix;

use crate::config::ExperimentConfig;

/// Result of a subcommand that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    Failed(String),
}

pub struct Context {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

const VERSION: &str = env!("CARGO_PKG_VERSION");

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn prepare(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating output directory {}", self.out_dir.display()))?;
        let mut echo = self.config.clone();
        echo.output_dir = None;
        self.write_json("config.resolved.json", &echo)
    }

    fn hash(&self) -> String {
        self.config.hash()
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// CSV preceded by a `# gralora <version> config=<hash>` line.
    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        writeln!(w, "# gralora {VERSION} config={}", self.hash())?;
        let mut out = csv::Writer::from_writer(&mut w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()?;
        drop(out);
        w.flush()?;
        Ok(())
    }

    fn par_map<T, R, F>(&self, items: &[T], f: F) -> anyhow::Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> anyhow::Result<R> + Sync + Send,
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            builder = builder.num_threads(j);
        }
        let pool = builder.build()?;
        pool.install(|| items.par_iter().map(&f).collect())
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    body: T,
}

fn envelope<'a, T: Serialize>(ctx: &'a Context, body: T) -> Envelope<'a, T> {
    Envelope {
        tool: "gralora",
        version: VERSION,
        config_hash: ctx.hash(),
        config: &ctx.config,
        body,
    }
}

fn kind_label(kind: AdapterKind) -> u64 {
    match kind {
        AdapterKind::Lora => 1,
        AdapterKind::Gralora => 2,
        AdapterKind::Hybrid => 3,
    }
}

pub fn gradcheck(ctx: &Context, inject_sign_flip: bool) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let g = cfg.geometry;
    let specs = [AdapterKind::Lora, AdapterKind::Gralora, AdapterKind::Hybrid]
        .into_iter()
        .map(|kind| cfg.adapter.spec(kind, g.m, g.n))
        .collect::<anyhow::Result<Vec<_>>>()?;
    ctx.prepare()?;
    let gc = &cfg.gradcheck;
    let opts = GradCheckOptions {
        h: gc.h,
        tolerance: gc.tolerance,
        max_probes_per_block: gc.max_probes_per_block,
        probe_seed: derive_seed(cfg.seed, &[stream::PROBE]),
        flip_analytic_sign: gc.inject_sign_flip || inject_sign_flip,
    };
    let w0 = Matrix::gaussian(
        g.m,
        g.n,
        1.0 / (g.n as f64).sqrt(),
        &mut derived_rng(cfg.seed, &[stream::BASE_WEIGHT]),
    );
    let x = make_outlier_input(g.n, g.t, &OutlierSpec::none(), cfg.seed)?;
    let loss = LossSpec::random_target(g.m, g.t, cfg.seed);
    let reports: Vec<GradCheckReport> = ctx.par_map(&specs, |spec| {
        let adapter = random_adapter(spec, derive_seed(cfg.seed, &[stream::ADAPTER, kind_label(spec.kind)]))?;
        let layer = AdaptedLayer::new(w0.clone(), adapter)?;
        Ok(check_gradients(&layer, &x, &loss, &opts)?)
    })?;
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        println!(
            "gradcheck {:<8} max_rel_error {:.3e} {}",
            r.adapter.as_str(),
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    #[derive(Serialize)]
    struct Body {
        passed: bool,
        reports: Vec<GradCheckReport>,
    }
    ctx.write_json("gradcheck.json", &envelope(ctx, Body { passed, reports }))?;
    Ok(if passed {
        Outcome::Passed
    } else {
        Outcome::Failed("analytic gradients disagree with finite differences".into())
    })
}

#[derive(Serialize)]
struct LocalityRow {
    rank: usize,
    k: usize,
    seed: u64,
    block_row: usize,
    block_col: usize,
    db_norm: f64,
    da_norm: f64,
    hot_block_column: usize,
}

pub fn outlier_sweep(ctx: &Context) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let activations = match cfg.activations() {
        Some(p) => Some(
            Matrix::load_binary(p).with_context(|| format!("loading activations {}", p.display()))?,
        ),
        None => None,
    };
    let mut geometry = cfg.geometry;
    if let Some(x) = &activations {
        ensure!(
            x.rows() == geometry.n,
            "activations have {} rows, expected N={}",
            x.rows(),
            geometry.n
        );
        geometry.t = x.cols();
    }
    let sweep = DeviationSweep {
        geometry,
        outlier: if activations.is_some() { OutlierSpec::none() } else { cfg.outlier.spec() },
        ranks: cfg.sweep.ranks.clone(),
        k_values: cfg.sweep.k_values.clone(),
        seeds: cfg.sweep.seeds.clone(),
        root_seed: cfg.seed,
        alpha: cfg.adapter.alpha,
    };
    sweep.validate()?;
    ctx.prepare()?;
    let cells = sweep.cells();
    let outcomes: Vec<CellOutcome> = ctx.par_map(&cells, |&key| {
        let probe = match &activations {
            Some(x) => sweep.probe_with_input(key.seed, BatchInput::new(x.clone()))?,
            None => sweep.probe(key.seed)?,
        };
        Ok(sweep.run_cell_with(&probe, key)?)
    })?;
    let rows: Vec<DeviationRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let mut locality = Vec::new();
    for o in &outcomes {
        if let Some(p) = &o.locality {
            for (i, (db_row, da_row)) in p.db_norms.iter().zip(&p.da_norms).enumerate() {
                for (j, (&db_norm, &da_norm)) in db_row.iter().zip(da_row).enumerate() {
                    locality.push(LocalityRow {
                        rank: o.row.rank,
                        k: o.row.k,
                        seed: o.row.seed,
                        block_row: i,
                        block_col: j,
                        db_norm,
                        da_norm,
                        hot_block_column: p.hot_block_column,
                    });
                }
            }
        }
    }
    let summary = summarize(&rows);
    for s in &summary {
        println!(
            "{:<8} r={:<4} k={:<2} cosine distance {:.4} ± {:.4} ({} seeds)",
            s.method, s.rank, s.k, s.cosine_mean, s.cosine_std, s.runs
        );
    }
    ctx.write_csv("deviation.csv", &rows)?;
    ctx.write_csv("deviation_summary.csv", &summary)?;
    ctx.write_csv("locality.csv", &locality)?;
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct RankRow {
    rank: usize,
    k: usize,
    seed: usize,
    effective_rank: usize,
    expected_rank: usize,
    saturated: bool,
}

pub fn rank_analysis(ctx: &Context) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let ra = &cfg.rank_analysis;
    ensure!(ra.seeds > 0, "rank analysis needs at least one seed");
    let mut cells = Vec::new();
    for &r in &ra.ranks {
        for &k in &ra.k_values {
            AdapterSpec::gralora(ra.m, ra.n, r, k).validate()?;
            cells.extend((0..ra.seeds).map(|s| (r, k, s)));
        }
    }
    ctx.prepare()?;
    let rows: Vec<RankRow> = ctx.par_map(&cells, |&(r, k, s)| {
        let spec = AdapterSpec::gralora(ra.m, ra.n, r, k);
        let seed = derive_seed(cfg.seed, &[stream::ADAPTER, r as u64, k as u64, s as u64]);
        let adapter = random_adapter(&spec, seed)?;
        let cap = ra.m.min(ra.n);
        Ok(RankRow {
            rank: r,
            k,
            seed: s,
            effective_rank: adapter.effective_rank(),
            expected_rank: (k * r).min(cap),
            saturated: k * r > cap,
        })
    })?;
    let mut failures = Vec::new();
    for chunk in rows.chunks(ra.seeds) {
        let hits = chunk.iter().filter(|r| r.effective_rank == r.expected_rank).count();
        let frac = hits as f64 / chunk.len() as f64;
        let head = &chunk[0];
        println!(
            "r={:<4} k={:<2} expected {:<4} matched {hits}/{}{}",
            head.rank,
            head.k,
            head.expected_rank,
            chunk.len(),
            if head.saturated { " (saturated)" } else { "" }
        );
        if frac < ra.min_match_fraction {
            failures.push(format!("r={} k={}", head.rank, head.k));
        }
    }
    ctx.write_csv("rank_analysis.csv", &rows)?;
    Ok(if failures.is_empty() {
        Outcome::Passed
    } else {
        Outcome::Failed(format!("rank law missed in cells {}", failures.join(", ")))
    })
}

pub fn cost(ctx: &Context, dtype_bytes: u64) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let g = cfg.geometry;
    ensure!(dtype_bytes > 0, "dtype width must be positive");
    let spec = cfg.adapter.spec(cfg.adapter.kind, g.m, g.n)?;
    let report = CostReport::for_spec(&spec, g.t, dtype_bytes)?;
    let baseline = CostReport::for_spec(&AdapterSpec::lora(g.m, g.n, spec.rank), g.t, dtype_bytes)?;
    ctx.prepare()?;
    #[derive(Serialize)]
    struct Body {
        adapter: AdapterSpec,
        tokens: usize,
        dtype_bytes: u64,
        report: CostReport,
        lora_baseline: CostReport,
        recommended_k: usize,
    }
    let body = Body {
        recommended_k: recommend_k(spec.rank, g.m, g.n),
        adapter: spec,
        tokens: g.t,
        dtype_bytes,
        report,
        lora_baseline: baseline,
    };
    println!("{}", serde_json::to_string_pretty(&body.report)?);
    ctx.write_json("cost.json", &envelope(ctx, body))?;
    Ok(Outcome::Passed)
}

fn task_spec(cfg: &ExperimentConfig, seed: u64) -> TaskSpec {
    let t = &cfg.train;
    TaskSpec {
        blocks: t.blocks,
        noise_std: t.noise_std,
        outlier: if t.structure == TaskStructure::OutlierAligned {
            cfg.outlier.spec()
        } else {
            OutlierSpec::none()
        },
        ..TaskSpec::new(t.structure, t.m, t.n, t.target_rank, seed)
    }
}

pub fn train(ctx: &Context) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let t = &cfg.train;
    let spec = cfg.adapter.spec(cfg.adapter.kind, t.m, t.n)?;
    let task = make_task(&task_spec(cfg, derive_seed(cfg.seed, &[stream::TASK])))?;
    let train_cfg = t.train_config(cfg.optimizer);
    ctx.prepare()?;
    let adapter_seed = derive_seed(cfg.seed, &[stream::ADAPTER]);
    let (layer, report) = run_training(&task, &spec, adapter_seed, &train_cfg)?;
    println!(
        "{} final eval loss {:.6} (noise floor {:.6}), recovery error {}",
        spec.kind.as_str(),
        report.final_eval_loss,
        report.noise_floor,
        report
            .recovery_error
            .map_or("n/a".to_string(), |e| format!("{e:.4}"))
    );
    ctx.write_json("train_report.json", &envelope(ctx, &report))?;
    let mut w = BufWriter::new(File::create(ctx.path("loss_curve.csv"))?);
    writeln!(w, "# gralora {VERSION} config={}", ctx.hash())?;
    write_loss_curve(&report, &mut w)?;
    w.flush()?;
    save_checkpoint(&layer.adapter, adapter_seed, ctx.path("adapter.ckpt"))?;
    Ok(if report.diverged {
        Outcome::Failed("training diverged".into())
    } else {
        Outcome::Passed
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct HybridRow {
    method: &'static str,
    ratio: Option<f64>,
    lora_rank: usize,
    gralora_rank: usize,
    seed: u64,
    final_eval_loss: f64,
    recovery_error: Option<f64>,
}

pub fn hybrid_sweep(ctx: &Context) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let t = &cfg.train;
    ensure!(!cfg.sweep.seeds.is_empty(), "sweep seeds must be non-empty");
    ensure!(!cfg.sweep.ratios.is_empty(), "sweep ratios must be non-empty");
    // None is the LoRA baseline
    let mut methods: Vec<Option<f64>> = vec![None];
    let mut ratios = cfg.sweep.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    methods.extend(ratios.into_iter().map(Some));
    let mut specs = Vec::new();
    for m in &methods {
        let spec = match m {
            None => cfg.adapter.spec(AdapterKind::Lora, t.m, t.n)?,
            Some(ratio) => {
                let mut a = cfg.adapter.clone();
                a.hybrid_ratio = *ratio;
                a.spec(AdapterKind::Hybrid, t.m, t.n)?
            }
        };
        specs.push(spec);
    }
    let train_cfg = t.train_config(cfg.optimizer);
    let cells: Vec<(usize, u64)> = (0..methods.len())
        .flat_map(|mi| cfg.sweep.seeds.iter().map(move |&s| (mi, s)))
        .collect();
    ctx.prepare()?;
    let rows: Vec<HybridRow> = ctx.par_map(&cells, |&(mi, seed)| {
        let task = make_task(&task_spec(cfg, derive_seed(cfg.seed, &[stream::TASK, seed])))?;
        let spec = &specs[mi];
        let (_, report): (_, TrainReport) =
            run_training(&task, spec, derive_seed(cfg.seed, &[stream::ADAPTER, seed]), &train_cfg)?;
        Ok(HybridRow {
            method: if methods[mi].is_none() { "lora" } else { "hybrid" },
            ratio: methods[mi],
            lora_rank: if spec.kind == AdapterKind::Lora { spec.rank } else { spec.lora_rank },
            gralora_rank: spec.gralora_rank(),
            seed,
            final_eval_loss: report.final_eval_loss,
            recovery_error: report.recovery_error,
        })
    })?;
    let seeds = cfg.sweep.seeds.len();
    for (mi, chunk) in rows.chunks(seeds).enumerate() {
        let mean = chunk.iter().map(|r| r.final_eval_loss).sum::<f64>() / seeds as f64;
        let label = methods[mi].map_or("lora".to_string(), |r| format!("hybrid ratio {r}"));
        println!("{label:<20} mean final eval loss {mean:.6}");
    }
    ctx.write_csv("hybrid_sweep.csv", &rows)?;
    let baseline = &rows[..seeds];
    let mut mismatched = Vec::new();
    if let Some(mi) = methods.iter().position(|m| *m == Some(1.0)) {
        for (b, h) in baseline.iter().zip(&rows[mi * seeds..(mi + 1) * seeds]) {
            if b.final_eval_loss != h.final_eval_loss || b.recovery_error != h.recovery_error {
                mismatched.push(b.seed);
            }
        }
    }
    Ok(if mismatched.is_empty() {
        Outcome::Passed
    } else {
        Outcome::Failed(format!("ratio 1 differs from LoRA for seeds {mismatched:?}"))
    })
}

#[derive(Serialize)]
struct EquivalenceRow {
    k: usize,
    adapters: usize,
    max_rel_error: f64,
    nonzero_counts_exact: bool,
    passed: bool,
}

pub fn equivalence(ctx: &Context) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config;
    let (m, n, r) = (cfg.geometry.m, cfg.geometry.n, cfg.adapter.r);
    let eq = &cfg.equivalence;
    ensure!(eq.adapters_per_k > 0, "equivalence needs at least one adapter per k");
    for &k in &eq.k_values {
        AdapterSpec::gralora(m, n, r, k).validate()?;
    }
    ctx.prepare()?;
    let rows: Vec<EquivalenceRow> = ctx.par_map(&eq.k_values, |&k| {
        let spec = AdapterSpec::gralora(m, n, r, k);
        let mut max_rel: f64 = 0.0;
        let mut nnz_ok = true;
        for i in 0..eq.adapters_per_k {
            let seed = derive_seed(cfg.seed, &[stream::ADAPTER, k as u64, i as u64]);
            let gralora_core::Adapter::Gralora(g) = random_adapter(&spec, seed)? else {
                bail!("expected a GraLoRA adapter");
            };
            let (a_g, b_g) = g.to_regularized_form();
            let target = g.fused_update().scale(1.0 / g.scale);
            let gap = b_g.matmul_t(&a_g)?.sub(&target)?.frobenius_norm();
            max_rel = max_rel.max(gap / target.frobenius_norm());
            nnz_ok &= a_g.count_nonzero() == n * r && b_g.count_nonzero() == m * r;
        }
        Ok(EquivalenceRow {
            k,
            adapters: eq.adapters_per_k,
            max_rel_error: max_rel,
            nonzero_counts_exact: nnz_ok,
            passed: nnz_ok && max_rel <= eq.tolerance,
        })
    })?;
    for row in &rows {
        println!(
            "k={:<2} max relative error {:.3e} nonzeros exact {} {}",
            row.k,
            row.max_rel_error,
            row.nonzero_counts_exact,
            if row.passed { "PASS" } else { "FAIL" }
        );
    }
    let passed = rows.iter().all(|r| r.passed);
    #[derive(Serialize)]
    struct Body {
        passed: bool,
        cells: Vec<EquivalenceRow>,
    }
    ctx.write_json("equivalence.json", &envelope(ctx, Body { passed, cells: rows }))?;
    Ok(if passed {
        Outcome::Passed
    } else {
        Outcome::Failed("regularized form disagrees with the block grid".into())
    })
}
