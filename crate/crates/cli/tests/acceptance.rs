//! Acceptance checks, one line per criterion.
//!
//! Criterion 7 needs real disaster snapshots: point `FLOODLENS_REAL_CONFIG`
//! at a run config over them. Its bands are reported, never failed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use floodlens::dataset::{self, flood_label};
use floodlens::evalmetrics::{self, EvalReport};
use floodlens::geogrid::{cell_of_id, grid_id, GridCell};
use floodlens::ingest::{DisasterType, EventTable, GeoEvent, StudyWindow};
use floodlens::synth::{self, SynthConfig};
use floodlens::textcorpus::{CorpusCache, LocationText, TextSource};
use floodlens::textembed::{
    self, encode_tokens, Architecture, Encoder, FloodinessLabel, Layer, SigmoidPlacement,
    TrainConfig, TransferHead,
};
use floodlens_cli::{Pipeline, RunConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(
        elapsed < limit,
        format!(
            "took {:.1} s, limit {:.0} s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

// ---- criterion 1 ----

fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn brute_counts(p: &[u8], y: &[u8]) -> (f64, f64, f64, f64) {
    let count = |pp: u8, yy: u8| {
        p.iter()
            .zip(y)
            .filter(|&(&a, &b)| a == pp && b == yy)
            .count() as f64
    };
    (count(1, 1), count(1, 0), count(0, 0), count(0, 1))
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    check(
        evalmetrics::rocauc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(|e| e.to_string())?
            == 0.75,
        "ROCAUC example is not exactly 0.75",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(2..=50);
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        // Coarse scores force ties.
        let s: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0..12) as f64) / 4.0)
            .collect();
        let p = evalmetrics::binarize(&s, 1.5);
        let (tp, fp, tn, fn_) = brute_counts(&p, &y);
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        let pairs = [
            (evalmetrics::rocauc(&s, &y), brute_auc(&s, &y)),
            (evalmetrics::accuracy(&p, &y), (tp + tn) / n as f64),
            (evalmetrics::f1(&p, &y), f1),
            (
                evalmetrics::balanced_accuracy(&p, &y),
                (tp / (tp + fn_) + tn / (tn + fp)) / 2.0,
            ),
        ];
        for (got, want) in pairs {
            let got = got.map_err(|e| format!("case {case}: {e}"))?;
            worst = worst.max((got - want).abs());
        }
    }
    check(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "500 instances, max deviation {worst:e}, {:.2} s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- criterion 2 ----

fn label_oracle() -> Outcome {
    let t = Instant::now();
    let window = StudyWindow::new(2000, 2015).map_err(|e| e.to_string())?;
    let kinds = DisasterType::ALL;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut positives = 0;
    for case in 0..1000 {
        let grids: Vec<GridCell> = (0..3)
            .map(|k| GridCell::new(k * 10, rng.random_range(-180..180)).expect("valid cell"))
            .collect();
        let n_events = rng.random_range(0..40);
        let events: Vec<GeoEvent> = (0..n_events)
            .map(|i| {
                let cell = grids[rng.random_range(0..3)];
                GeoEvent {
                    record_id: format!("e{i}"),
                    disaster_type: kinds[rng.random_range(0..kinds.len())],
                    year: rng.random_range(1998..2018),
                    lat: cell.lat_floor() as f64 + 0.5,
                    lon: cell.lon_floor() as f64 + 0.5,
                    location_name: "X".into(),
                    country: None,
                    damage_cost: None,
                    grid: cell.id(),
                }
            })
            .collect();
        let table = EventTable::from_events(events.clone()).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=5u32);
        let year = rng.random_range(window.start..=window.end - n as i32);
        let grid = grids[rng.random_range(0..3)].id();
        let got = flood_label(&table, grid, year, n, window).map_err(|e| e.to_string())?;
        let want = u8::from(events.iter().any(|e| {
            e.grid == grid
                && e.disaster_type == DisasterType::Flood
                && e.year > year
                && e.year <= year + n as i32
        }));
        check(
            got == want,
            format!("case {case}: got {got}, brute force {want}"),
        )?;
        positives += want as usize;
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "1000 cases ({positives} positive) exact, {:.2} s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- criterion 3 ----

fn grid_bijection() -> Outcome {
    let t = Instant::now();
    let mut seen = BTreeSet::new();
    for lat in -90..90 {
        for lon in -180..180 {
            let cell = GridCell::new(lat, lon).map_err(|e| e.to_string())?;
            let id = grid_id(cell);
            let back = cell_of_id(id.value() as i64).map_err(|e| e.to_string())?;
            check(
                back == cell,
                format!("({lat}, {lon}) came back as {back:?}"),
            )?;
            seen.insert(id);
        }
    }
    check(seen.len() == 64_800, format!("{} distinct ids", seen.len()))?;
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "64800 cells round-trip, {:.2} s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- criterion 4 ----

fn toy_corpus() -> (CorpusCache, Vec<FloodinessLabel>) {
    let wet = [
        "river",
        "river valley",
        "the river delta",
        "a wide river plain",
    ];
    let dry = [
        "desert",
        "mountain plateau",
        "the dry hills",
        "a high rocky ridge",
    ];
    let mut corpus = CorpusCache::default();
    let mut labels = Vec::new();
    for i in 0..40u32 {
        let grid = cell_of_id(5000 + i as i64).expect("valid id").id();
        let river = i % 2 == 0;
        let stem = if river {
            wet[(i / 2) as usize % 4]
        } else {
            dry[(i / 2) as usize % 4]
        };
        let mut entry = LocationText::missing(grid, &format!("T{i}"));
        entry.text = format!("{stem} near town {}", i % 7);
        entry.source = TextSource::GeographySection;
        corpus.entries.insert(grid, entry);
        labels.push(FloodinessLabel {
            grid,
            label: u8::from(river),
        });
    }
    (corpus, labels)
}

fn head_params(h: &mut TransferHead) -> Vec<&mut f64> {
    h.proj
        .w
        .iter_mut()
        .chain(h.proj.b.iter_mut())
        .chain(h.readout.w.iter_mut())
        .chain(h.readout.b.iter_mut())
        .collect()
}

fn max_gradient_error(tokens: &Array2<f64>, placement: SigmoidPlacement) -> f64 {
    let hidden = tokens.ncols();
    let mut head = TransferHead::init(hidden, 3, placement);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    head.readout.w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    head.readout.b[0] = 0.2;
    let mut grad = TransferHead::zeros(hidden, placement);
    head.loss_and_grad(tokens, 1.0, &mut grad);
    let analytic: Vec<f64> = head_params(&mut grad).into_iter().map(|g| *g).collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = head.clone();
        *head_params(&mut plus)[k] += eps;
        let mut minus = head.clone();
        *head_params(&mut minus)[k] -= eps;
        let numeric = (plus.loss(tokens, 1.0) - minus.loss(tokens, 1.0)) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5));
    }
    worst
}

fn freezing_and_gradients() -> Outcome {
    let t = Instant::now();
    let backbone = Encoder::tiny(0);
    let before = backbone.checksum();
    let snapshot = backbone.weights.clone();
    let (corpus, labels) = toy_corpus();
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: Some(0.1),
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, log) = textembed::train_transfer_head(&backbone, &corpus, &labels, &cfg)
        .map_err(|e| e.to_string())?;
    let diff = backbone.weights.max_abs_diff(&snapshot);
    check(
        diff == 0.0 && backbone.checksum() == before,
        format!("backbone moved by {diff}"),
    )?;
    check(log.epochs.len() == 3, "head did not train for three epochs")?;

    let tokens = encode_tokens(
        &backbone,
        "a wide river plain near the coast",
        Layer::SecondToLast,
    )
    .map_err(|e| e.to_string())?
    .matrix;
    let per_token = max_gradient_error(&tokens, SigmoidPlacement::PerToken);
    let post = max_gradient_error(&tokens, SigmoidPlacement::PostAverage);
    let worst = per_token.max(post);
    check(
        worst < 1e-4,
        format!("head gradient relative error {worst:e}"),
    )?;
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "max |Δbackbone| = 0, head gradient relative error {worst:.1e}, {:.1} s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- criterion 5 ----

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/smoke")
}

fn run_all(dir: &Path) -> Result<Duration, String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_floodlens"))
        .arg("--config")
        .arg(fixture_dir().join("floodlens.toml"))
        .arg("--output")
        .arg(dir.join("out"))
        .arg("--cache-dir")
        .arg(dir.join("cache"))
        .arg("all")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ),
    )?;
    Ok(t.elapsed())
}

fn pipeline_smoke() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let elapsed = run_all(a.path())?;
    within(elapsed, Duration::from_secs(300))?;
    run_all(b.path())?;
    let csv_a = std::fs::read(a.path().join("out/report.csv")).map_err(|e| e.to_string())?;
    let csv_b = std::fs::read(b.path().join("out/report.csv")).map_err(|e| e.to_string())?;
    check(csv_a == csv_b, "report.csv differs between reruns")?;
    let report =
        EvalReport::read_csv(&a.path().join("out/report.csv")).map_err(|e| e.to_string())?;
    let models = [
        "baseline",
        "statistical",
        "pretrained_avg",
        "finetuned_avg",
        "transfer_head",
    ];
    for h in [1, 2, 5] {
        for m in models {
            let row = report
                .row(m, h)
                .ok_or(format!("no row for {m} at horizon {h}"))?;
            let metrics = [row.rocauc, row.accuracy, row.f1, row.balanced_accuracy];
            check(
                metrics.iter().all(|v| (0.0..=1.0).contains(v)),
                format!("{m} h{h} metric outside [0, 1]"),
            )?;
        }
    }
    check(
        report.rows.len() == 15,
        format!("{} report rows", report.rows.len()),
    )?;
    Ok(format!(
        "15 rows, metrics in [0, 1], identical rerun, {:.1} s",
        elapsed.as_secs_f64()
    ))
}

// ---- criterion 6 ----

const SIGNAL_GRIDS: usize = 150;

fn mean_auc(report: &EvalReport, model: &str) -> Result<f64, String> {
    let mut sum = 0.0;
    for h in [1, 2, 5] {
        sum += report
            .row(model, h)
            .ok_or(format!("no {model} row"))?
            .rocauc;
    }
    Ok(sum / 3.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn signal_recovery() -> Outcome {
    let t = Instant::now();
    let (mut base, mut stat, mut text) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let world = synth::generate(&SynthConfig {
            n_grids: SIGNAL_GRIDS,
            seed: 100 + seed,
            ..SynthConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let paths = world.write(dir.path()).map_err(|e| e.to_string())?;
        let mut cfg = RunConfig::default();
        cfg.paths.disasters = paths.disasters;
        cfg.paths.damage = Some(paths.damage);
        cfg.paths.output = dir.path().join("out");
        cfg.paths.cache = dir.path().join("cache");
        cfg.wiki.mock_pages = Some(paths.pages);
        cfg.wiki.requests_per_second = 1000.0;
        cfg.window.start = world.config.window.start;
        cfg.window.end = world.config.window.end;
        cfg.architectures = vec![Architecture::TransferHead];
        cfg.seeds.split = seed;
        cfg.seeds.training = seed;
        let mut p = Pipeline::open(cfg).map_err(|e| format!("{e:#}"))?;
        p.run_all().map_err(|e| format!("{e:#}"))?;
        let report =
            EvalReport::read_csv(&dir.path().join("out/report.csv")).map_err(|e| e.to_string())?;
        base.push(mean_auc(&report, "baseline")?);
        stat.push(mean_auc(&report, "statistical")?);
        text.push(mean_auc(&report, "transfer_head")?);
    }
    let (b, s, m) = (median(base), median(stat), median(text));
    let summary = format!(
        "median ROCAUC transfer_head {m:.3} / statistical {s:.3} / baseline {b:.3}, {:.0} s",
        t.elapsed().as_secs_f64()
    );
    check(m - s >= 0.02 && s - b >= 0.02, summary.clone())?;
    Ok(summary)
}

// ---- criterion 7 ----

fn band(value: f64, lo: f64, hi: f64) -> &'static str {
    if (lo..=hi).contains(&value) {
        "in band"
    } else {
        "OUT OF BAND"
    }
}

fn real_data() -> Option<String> {
    let path = std::env::var_os("FLOODLENS_REAL_CONFIG")?;
    let run = || -> anyhow::Result<String> {
        let cfg = RunConfig::load(Path::new(&path))?;
        let out = cfg.paths.output.clone();
        let mut p = Pipeline::open(cfg.clone())?;
        p.run_all()?;
        drop(p);
        let table = EventTable::read_jsonl(&out.join("events.jsonl"))?;
        let filtered = dataset::filter_grids(&table).len() as f64;
        let corpus = CorpusCache::load(&out.join("corpus.jsonl"))?;
        let coverage = corpus.coverage() as f64 / corpus.len().max(1) as f64;
        let report = EvalReport::read_csv(&out.join("report.csv"))?;
        let mut parts = vec![
            format!(
                "filtered grids {filtered} ({})",
                band(filtered, 881.0 * 0.95, 881.0 * 1.05)
            ),
            {
                let target = 2775.0 / 2852.0;
                format!(
                    "text coverage {coverage:.3} ({})",
                    band(coverage, target * 0.95, target * 1.05)
                )
            },
        ];
        for h in &cfg.horizons {
            if let Some(r) = report.row("transfer_head", *h) {
                parts.push(format!(
                    "h{h} transfer_head ROCAUC {:.3} ({})",
                    r.rocauc,
                    band(r.rocauc, 0.70, 0.82)
                ));
            }
        }
        Ok(parts.join(", "))
    };
    Some(run().unwrap_or_else(|e| format!("run failed: {e:#}")))
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("metric oracles", metric_oracles),
        ("label oracle", label_oracle),
        ("grid bijection", grid_bijection),
        ("freezing and gradient checks", freezing_and_gradients),
        ("pipeline smoke", pipeline_smoke),
        ("signal recovery", signal_recovery),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    match real_data() {
        Some(detail) => println!("criterion 7 real-data bands: REPORTED ({detail})"),
        None => println!("criterion 7 real-data bands: NOT RUN (set FLOODLENS_REAL_CONFIG to a run config over real snapshots)"),
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
