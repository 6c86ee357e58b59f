use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svae_core::attribution::{explain_with_seed, AttributionTarget, Method, TargetSpec};
use svae_core::data::Dataset;
use svae_core::export::{csv_matrix, csv_row, tile, write_png_gray, write_png_heatmap};
use svae_core::invariance::{counterfactual, explore_grid, invariance_test};
use svae_core::models::{Architecture, LatentSplit, Model, SvaeModel};
use svae_core::training::{evaluate, metrics_csv, train_with, Checkpoint, EvalMetrics, TrainConfig};
use svae_service::Snapshot;

use crate::{
    CheckpointArgs, Command, CounterfactualArgs, EvalArgs, ExplainArgs, ExploreArgs, InvarianceArgs, OutputArgs,
    ServeArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    let echo = serde_json::to_string_pretty(&command)?;
    match command {
        Command::Train(a) => train_cmd(&a, &run_dir(&a.output, "train")?, &echo),
        Command::Eval(a) => eval_cmd(&a, &run_dir(&a.common.output, "eval")?, &echo),
        Command::Invariance(a) => invariance_cmd(&a, &run_dir(&a.common.output, "invariance")?, &echo),
        Command::Explore(a) => explore_cmd(&a, &run_dir(&a.common.output, "explore")?, &echo),
        Command::Explain(a) => explain_cmd(&a, &run_dir(&a.common.output, "explain")?, &echo),
        Command::Counterfactual(a) => counterfactual_cmd(&a, &run_dir(&a.common.output, "counterfactual")?, &echo),
        Command::Serve(a) => serve_cmd(&a),
    }
}

fn run_dir(output: &OutputArgs, command: &str) -> Result<PathBuf> {
    let dir = match &output.run_dir {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("{command}-{secs}"))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn start(dir: &Path, echo: &str) -> Result<()> {
    log::info!("writing artifacts to {}", dir.display());
    write(&dir.join("config.json"), format!("{echo}\n"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn svae_model(ck: &Checkpoint) -> Result<SvaeModel> {
    match ck.to_model()? {
        Model::Svae(m) => Ok(m),
        Model::Semivae(_) => bail!("this command needs an svae checkpoint, got semivae"),
    }
}

fn check_compatible(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    ensure!(
        data.input_dim() == ck.model.input_dim && data.num_classes() == ck.model.num_classes,
        "dataset has {} pixels and {} classes, checkpoint expects {} and {}",
        data.input_dim(),
        data.num_classes(),
        ck.model.input_dim,
        ck.model.num_classes
    );
    Ok(())
}

fn test_image(data: &Dataset, index: usize) -> Result<&[f64]> {
    ensure!(index < data.len(), "index {index} out of range for {} test images", data.len());
    Ok(data.image(index))
}

/// Loaded checkpoint and test split shared by the inspection commands.
struct Inspect {
    ck: Checkpoint,
    test: Dataset,
}

fn inspect(common: &CheckpointArgs) -> Result<Inspect> {
    let ck = load_checkpoint(&common.checkpoint)?;
    let test = common.data.test()?;
    check_compatible(&ck, &test)?;
    Ok(Inspect { ck, test })
}

fn train_config(a: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        model_kind: a.model,
        beta: a.beta,
        alpha: a.alpha,
        learning_rate: a.lr,
        batch_size: a.batch_size as usize,
        epochs: a.epochs as usize,
        seed,
        split: LatentSplit::new(a.d1, a.d2)?,
        architecture: Architecture {
            encoder_hidden: a.enc_hidden.clone(),
            decoder_hidden: a.dec_hidden.clone(),
            classifier_hidden: a.cls_hidden.clone(),
            hidden_activation: a.activation,
        },
        eval_samples: a.eval_samples,
    })
}

fn results_header(m: &EvalMetrics) -> String {
    let mut h = String::from("seed,accuracy");
    for (k, _) in &m.terms {
        write!(h, ",{k}").unwrap();
    }
    h.push('\n');
    h
}

fn results_row(seed: u64, m: &EvalMetrics) -> String {
    let mut row = format!("{seed},{}", m.accuracy);
    for (_, v) in &m.terms {
        write!(row, ",{v}").unwrap();
    }
    row.push('\n');
    row
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn train_cmd(a: &TrainArgs, dir: &Path, echo: &str) -> Result<()> {
    let sweep = !a.seeds.is_empty();
    ensure!(!(sweep && a.out.is_some()), "--out names a single checkpoint; a seed sweep writes one per seed");
    let seeds = if sweep { a.seeds.clone() } else { vec![a.seed] };
    for s in &seeds {
        train_config(a, *s)?.validate()?;
    }
    let splits = a.data.splits()?;
    start(dir, echo)?;

    let mut results = String::new();
    let mut all = Vec::new();
    for &seed in &seeds {
        let cfg = train_config(a, seed)?;
        let seed_dir = if sweep { dir.join(format!("seed-{seed}")) } else { dir.to_path_buf() };
        fs::create_dir_all(&seed_dir)?;
        let ck = train_with(&cfg, &splits.train, Some(&splits.valid), |m| {
            log::debug!(
                "seed {seed} epoch {}: {}valid accuracy {}",
                m.epoch,
                m.train_terms.iter().map(|(k, v)| format!("{k} {v:.3}, ")).collect::<String>(),
                m.valid_accuracy.map_or("-".into(), |v| format!("{v:.2}%"))
            )
        })?;
        let path = a.out.clone().unwrap_or_else(|| seed_dir.join("model.svae"));
        ck.save(&path).with_context(|| format!("saving {}", path.display()))?;
        write(&seed_dir.join("metrics.csv"), metrics_csv(&ck.metrics_history))?;

        let m = evaluate(&ck.to_model()?, &cfg, &splits.test, cfg.eval_samples, seed)?;
        println!(
            "seed {seed}: test accuracy {:.2}%, R {:.2} ({})",
            m.accuracy,
            m.reconstruction(),
            path.display()
        );
        if results.is_empty() {
            results.push_str(&results_header(&m));
        }
        results.push_str(&results_row(seed, &m));
        all.push(m);
    }
    write(&dir.join("results.csv"), &results)?;

    if sweep {
        let mut summary = String::from("metric,mean,std\n");
        let (mean, std) = mean_std(&all.iter().map(|m| m.accuracy).collect::<Vec<_>>());
        writeln!(summary, "accuracy,{mean},{std}").unwrap();
        println!("accuracy {mean:.2} ± {std:.2} over {} seeds", seeds.len());
        for (i, (k, _)) in all[0].terms.iter().enumerate() {
            let (mean, std) = mean_std(&all.iter().map(|m| m.terms[i].1).collect::<Vec<_>>());
            writeln!(summary, "{k},{mean},{std}").unwrap();
            if k == "reconstruction" {
                println!("R {mean:.2} ± {std:.2}");
            }
        }
        write(&dir.join("summary.csv"), summary)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, dir: &Path, echo: &str) -> Result<()> {
    let Inspect { ck, test } = inspect(&a.common)?;
    start(dir, echo)?;
    let samples = a.samples.unwrap_or(ck.config.eval_samples);
    let m = evaluate(&ck.to_model()?, &ck.config, &test, samples, a.seed)?;
    println!("accuracy: {:.2}%", m.accuracy);
    println!("R: {:.2}", m.reconstruction());

    let mut csv = String::from("metric,value\n");
    writeln!(csv, "accuracy,{}", m.accuracy).unwrap();
    for (k, v) in &m.terms {
        writeln!(csv, "{k},{v}").unwrap();
    }
    write(&dir.join("eval.csv"), csv)?;
    let mut preds = String::from("index,label,predicted\n");
    for (i, p) in m.predictions.iter().enumerate() {
        writeln!(preds, "{i},{},{p}", test.label(i)).unwrap();
    }
    write(&dir.join("predictions.csv"), preds)
}

fn invariance_cmd(a: &InvarianceArgs, dir: &Path, echo: &str) -> Result<()> {
    let Inspect { ck, test } = inspect(&a.common)?;
    let m = svae_model(&ck)?;
    ensure!(a.images > 0, "--images must be positive");
    let data = test.slice(0, a.images.min(test.len()))?;
    start(dir, echo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let curve = invariance_test(&m, &data, &a.sigmas, a.draws, a.samples, &mut rng)?;
    let csv = curve.to_csv();
    print!("{csv}");
    write(&dir.join("retention.csv"), csv)
}

fn explore_cmd(a: &ExploreArgs, dir: &Path, echo: &str) -> Result<()> {
    let Inspect { ck, test } = inspect(&a.common)?;
    let m = svae_model(&ck)?;
    ensure!(a.dims.len() == 2, "--dims takes exactly two dimensions, got {}", a.dims.len());
    let x = test_image(&test, a.index)?;
    let g = explore_grid(&m, x, a.dims[0], a.dims[1], a.step, a.radius)?;
    start(dir, echo)?;
    let shape = test.image_shape();
    let (mosaic, mosaic_shape) = tile(&g.images, shape, g.side(), 1)?;
    write_png_gray(dir.join("grid.png"), &mosaic, mosaic_shape)?;
    write_png_gray(dir.join("original.png"), x, shape)?;

    let mut csv = String::from("row,col");
    for i in 0..m.latent_dim() {
        write!(csv, ",z{i}").unwrap();
    }
    csv.push('\n');
    let side = g.side();
    for (k, code) in g.codes.iter().enumerate() {
        write!(csv, "{},{},", k / side, k % side).unwrap();
        csv.push_str(&csv_row(code));
    }
    write(&dir.join("grid.csv"), csv)?;
    println!("{side}×{side} grid written to {}", dir.join("grid.png").display());
    Ok(())
}

fn explain_cmd(a: &ExplainArgs, dir: &Path, echo: &str) -> Result<()> {
    let ck = load_checkpoint(&a.common.checkpoint)?;
    let m = svae_model(&ck)?;
    // GradientShap baselines come from the training split, as in the service
    let (test, pool) = if a.method == Method::GradientShap && a.common.data.available() {
        let s = a.common.data.splits()?;
        (s.test, Some(s.train))
    } else {
        (a.common.data.test()?, None)
    };
    check_compatible(&ck, &test)?;
    let x = test_image(&test, a.index)?;
    let target = match a.target {
        TargetSpec::Classifier(class) => AttributionTarget::Classifier { class },
        TargetSpec::Divergence(k) => {
            let r = a.ref_index.context("divergence targets need --ref-index")?;
            AttributionTarget::Divergence {
                k,
                reference: test_image(&test, r)?.to_vec(),
            }
        }
    };
    let map = explain_with_seed(&m, x, a.method, target, pool.as_ref(), a.seed)?;
    start(dir, echo)?;
    let shape = test.image_shape();
    write(&dir.join("attribution.csv"), csv_row(&map.values))?;
    write(&dir.join("attribution_grid.csv"), csv_matrix(&map.values, shape)?)?;
    write_png_heatmap(dir.join("heatmap.png"), &map.values, shape)?;
    write_png_gray(dir.join("image.png"), x, shape)?;
    println!(
        "{} attribution for {}: sum {:.6}, max |value| {:.6}",
        a.method,
        a.target,
        map.values.iter().sum::<f64>(),
        map.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    );
    Ok(())
}

fn counterfactual_cmd(a: &CounterfactualArgs, dir: &Path, echo: &str) -> Result<()> {
    let Inspect { ck, test } = inspect(&a.common)?;
    let m = svae_model(&ck)?;
    let x = test_image(&test, a.index)?;
    let targets: Vec<usize> = match a.target {
        Some(t) => vec![t],
        None => (0..m.num_classes()).collect(),
    };
    let mut results = Vec::with_capacity(targets.len());
    for &t in &targets {
        results.push(counterfactual(&m, x, t, a.max_iters, a.step_size)?);
    }
    start(dir, echo)?;
    let mut csv = String::from("target,probability,converged,iterations\n");
    let mut images = String::new();
    for cf in &results {
        writeln!(csv, "{},{},{},{}", cf.target, cf.probability, cf.converged, cf.iterations).unwrap();
        images.push_str(&csv_row(&cf.image));
        println!(
            "class {}: p = {:.4} after {} steps{}",
            cf.target,
            cf.probability,
            cf.iterations,
            if cf.converged { "" } else { " (not converged)" }
        );
    }
    write(&dir.join("counterfactuals.csv"), csv)?;
    write(&dir.join("images.csv"), images)?;
    let shape = test.image_shape();
    let imgs: Vec<Vec<f64>> = results.into_iter().map(|cf| cf.image).collect();
    let (strip, strip_shape) = tile(&imgs, shape, imgs.len(), 1)?;
    write_png_gray(dir.join("strip.png"), &strip, strip_shape)?;
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (train, test) = if a.data.available() {
        let s = a.data.splits()?;
        (Some(s.train), Some(s.test))
    } else {
        log::warn!("no dataset given; /api/dataset/sample is disabled and GradientShap uses a zero baseline");
        (None, None)
    };
    let snapshot = Snapshot::new(ck, train, test)?;
    let addr = std::net::SocketAddr::new(a.host, a.port);
    tokio::runtime::Runtime::new()?.block_on(svae_service::serve(snapshot, addr))?;
    Ok(())
}
