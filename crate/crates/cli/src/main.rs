//! Command-line front end: build, fuse, count, train, eval, quantize, bench.
//!
//! Exit codes: 0 success, 1 usage or precondition failure (one-line
//! diagnostic on stderr), 2 verification failure. All file outputs are
//! written atomically. Flag precedence: built-in defaults, then a --config
//! file when given, then explicit flags.

use repdet_core::error::Result;
use repdet_core::netdef::{
    count_params_flops, fuse_model, load_weights, save_weights, Model, ModelConfig, Variant,
};
use repdet_core::quantsim::{
    calibrate, partial_quantize, sensitivity, CalibMode, DEFAULT_KEEP_FLOAT,
};
use repdet_core::rng::Rng;
use repdet_core::tensor::{Shape, Tensor};
use repdet_core::trainer::{
    evaluate_model, format_metrics_log, gen_synth_dataset, train, PreprocessMode, SynthSample,
    TrainConfig,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: repdet <command> [--flag value ...]

commands:
  build     --variant n|s|m|l [--config FILE] [--seed N] [--num-classes N] --out FILE
  fuse      --in FILE --out FILE [--verify]
  count     (--in FILE | --variant V) [--input N] [--json-like]
  train     --data synth:COUNT:SEED [--config FILE] [--variant V] [--out-dir DIR]
            [--epochs N] [--batch-size N] [--lr0 X] [--lrf X] [--seed N]
            [--img-size N] [--num-classes N] [--teacher FILE] [--threads N]
  eval      --in FILE --data synth:COUNT:SEED [--mode border|resize]
            [--img-size N] [--target N]
  quantize  --in FUSED_FILE --calib synth:COUNT:SEED [--mode maxabs|percentile]
            [--keep-float N] [--img-size N] [--report FILE] [--out FILE]
  bench     --in FILE [--repeat N] [--input N] [--seed N]

flags are long-form only; a --config file is applied before other flags.";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(run(&args));
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    1
}

pub fn run(args: &[String]) -> i32 {
    let Some(cmd) = args.first() else {
        eprintln!("{USAGE}");
        return 1;
    };
    if cmd == "--help" || cmd == "help" {
        println!("{USAGE}");
        return 0;
    }
    let flags = match Flags::parse(&args[1..]) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let out = match cmd.as_str() {
        "build" => cmd_build(&flags),
        "fuse" => cmd_fuse(&flags),
        "count" => cmd_count(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "quantize" => cmd_quantize(&flags),
        "bench" => cmd_bench(&flags),
        other => {
            eprintln!("error: unknown subcommand `{other}`");
            eprintln!("{USAGE}");
            return 1;
        }
    };
    match out {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}

// ------------------------------------------------------------------- flags

struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

const SWITCH_NAMES: &[&str] = &["verify", "json-like"];

impl Flags {
    fn parse(args: &[String]) -> std::result::Result<Flags, String> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| format!("expected --flag, got `{arg}`"))?;
            if SWITCH_NAMES.contains(&name) {
                switches.push(name.to_string());
                i += 1;
                continue;
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| format!("flag --{name} needs a value"))?;
            values.insert(name.to_string(), value.clone());
            i += 2;
        }
        Ok(Flags {
            values,
            switches,
            consumed: std::cell::RefCell::new(Vec::new()),
        })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.consumed.borrow_mut().push(name.to_string());
        self.values.get(name).map(String::as_str)
    }

    fn switch(&self, name: &str) -> bool {
        self.consumed.borrow_mut().push(name.to_string());
        self.switches.iter().any(|s| s == name)
    }

    fn parse_as<T: std::str::FromStr>(&self, name: &str) -> std::result::Result<Option<T>, String> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("bad value `{v}` for --{name}")),
        }
    }

    /// Every provided flag must have been consumed by the subcommand.
    fn reject_unknown(&self) -> std::result::Result<(), String> {
        let seen = self.consumed.borrow();
        for k in self.values.keys() {
            if !seen.iter().any(|s| s == k) {
                return Err(format!("unknown flag --{k}"));
            }
        }
        for k in &self.switches {
            if !seen.iter().any(|s| s == k) {
                return Err(format!("unknown flag --{k}"));
            }
        }
        Ok(())
    }
}

fn model_config_from_flags(flags: &Flags) -> std::result::Result<ModelConfig, String> {
    let mut cfg = ModelConfig::for_variant(Variant::N);
    if let Some(path) = flags.get("config") {
        let text = std::fs::read_to_string(path).map_err(|e| format!("--config {path}: {e}"))?;
        cfg = ModelConfig::parse(&text).map_err(|e| e.to_string())?;
    }
    if let Some(v) = flags.get("variant") {
        cfg.set_kv("variant", v).map_err(|e| e.to_string())?;
    }
    if let Some(v) = flags.get("num-classes") {
        cfg.set_kv("num_classes", v).map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

/// `synth:COUNT:SEED` dataset specifier.
fn parse_data_spec(spec: &str, size: usize, num_classes: usize) -> std::result::Result<Vec<SynthSample>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 || parts[0] != "synth" {
        return Err(format!("data spec `{spec}` is not synth:COUNT:SEED"));
    }
    let count: usize = parts[1].parse().map_err(|_| format!("bad count in `{spec}`"))?;
    let seed: u64 = parts[2].parse().map_err(|_| format!("bad seed in `{spec}`"))?;
    if count == 0 {
        return Err("dataset count must be positive".into());
    }
    Ok(gen_synth_dataset(count, seed, num_classes, size))
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// --------------------------------------------------------------- commands

fn cmd_build(flags: &Flags) -> std::result::Result<i32, String> {
    let cfg = model_config_from_flags(flags)?;
    let seed: u64 = flags.parse_as("seed")?.unwrap_or(0);
    let out = flags.get("out").ok_or("build needs --out")?.to_string();
    flags.reject_unknown()?;
    let model = Model::build(&cfg, seed).map_err(|e| e.to_string())?;
    save_weights(&model, Path::new(&out)).map_err(|e| e.to_string())?;
    println!(
        "built variant {} ({} params) -> {}",
        cfg.variant.name(),
        model.param_count(),
        out
    );
    Ok(0)
}

fn cmd_fuse(flags: &Flags) -> std::result::Result<i32, String> {
    let input = flags.get("in").ok_or("fuse needs --in")?.to_string();
    let out = flags.get("out").ok_or("fuse needs --out")?.to_string();
    let verify = flags.switch("verify");
    flags.reject_unknown()?;
    let model = load_weights(Path::new(&input)).map_err(|e| e.to_string())?;
    let fused = fuse_model(&model).map_err(|e| e.to_string())?;
    if verify {
        let mut rng = Rng::new(17);
        let mut worst = 0.0f32;
        for _ in 0..20 {
            let x = Tensor::rand_uniform(Shape::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
            let a = model.forward(&x).map_err(|e| e.to_string())?;
            let b = fused.forward(&x).map_err(|e| e.to_string())?;
            for (ta, tb) in a.cls.iter().chain(a.boxes.iter()).zip(b.cls.iter().chain(b.boxes.iter()))
            {
                worst = worst.max(ta.max_abs_diff(tb));
            }
        }
        if worst > 1e-4 {
            eprintln!("error: fusion verification failed: max abs diff {worst:e} > 1e-4");
            return Ok(2);
        }
        println!("fusion verified: max abs diff {worst:e} <= 1e-4");
    }
    save_weights(&fused, Path::new(&out)).map_err(|e| e.to_string())?;
    println!(
        "fused {} -> {} ({} -> {} params)",
        input,
        out,
        model.param_count(),
        fused.param_count()
    );
    Ok(0)
}

fn cmd_count(flags: &Flags) -> std::result::Result<i32, String> {
    let input_hw: usize = flags.parse_as("input")?.unwrap_or(640);
    let json_like = flags.switch("json-like");
    let model = match flags.get("in") {
        Some(path) => {
            let path = path.to_string();
            flags.reject_unknown()?;
            load_weights(Path::new(&path)).map_err(|e| e.to_string())?
        }
        None => {
            let cfg = model_config_from_flags(flags)?;
            let seed: u64 = flags.parse_as("seed")?.unwrap_or(0);
            flags.reject_unknown()?;
            Model::build(&cfg, seed).map_err(|e| e.to_string())?
        }
    };
    let report = count_params_flops(&model, (input_hw, input_hw)).map_err(|e| e.to_string())?;
    if json_like {
        println!("params={}", report.params);
        println!("macs={}", report.macs);
        println!("flops={}", report.flops);
        println!("fused={}", if model.fused { 1 } else { 0 });
        println!("input={input_hw}");
    } else {
        println!(
            "{} model at {input_hw}x{input_hw} ({});",
            model.config.variant.name(),
            if model.fused { "fused" } else { "unfused" },
        );
        println!("  params : {:>12}  ({:.2} M)", report.params, report.params as f64 / 1e6);
        println!(
            "  flops  : {:>12}  ({:.2} G, as 2*MACs)",
            report.flops,
            report.flops as f64 / 1e9
        );
        println!(
            "  macs   : {:>12}  ({:.2} G)",
            report.macs,
            report.macs as f64 / 1e9
        );
    }
    Ok(0)
}

fn cmd_train(flags: &Flags) -> std::result::Result<i32, String> {
    let mut mcfg = model_config_from_flags(flags)?;
    if flags.get("num-classes").is_none() && flags.get("config").is_none() {
        // synthetic shapes default to three classes
        mcfg.num_classes = 3;
    }
    let img_size: usize = flags.parse_as("img-size")?.unwrap_or(64);
    let data_spec = flags.get("data").ok_or("train needs --data synth:COUNT:SEED")?.to_string();
    let data = parse_data_spec(&data_spec, img_size, mcfg.num_classes)?;
    let out_dir: PathBuf = flags.get("out-dir").unwrap_or("runs").into();

    let seed: u64 = flags.parse_as("seed")?.unwrap_or(0);
    let mut tcfg = TrainConfig::toy(seed);
    tcfg.eval_target = img_size + 32;
    if let Some(v) = flags.parse_as("epochs")? {
        tcfg.epochs = v;
    }
    if let Some(v) = flags.parse_as("batch-size")? {
        tcfg.batch_size = v;
    }
    if let Some(v) = flags.parse_as("lr0")? {
        tcfg.lr0 = v;
    }
    if let Some(v) = flags.parse_as("lrf")? {
        tcfg.lrf = v;
    }
    if let Some(v) = flags.parse_as("threads")? {
        tcfg.threads = v;
    }
    if let Some(path) = flags.get("teacher") {
        let teacher = load_weights(Path::new(path)).map_err(|e| e.to_string())?;
        tcfg.distill_teacher = Some(teacher);
    }
    flags.reject_unknown()?;

    let model = Model::build(&mcfg, seed).map_err(|e| e.to_string())?;
    let result = train(model, &tcfg, &data).map_err(|e| e.to_string())?;

    save_weights(&result.model, &out_dir.join("model.rdet")).map_err(|e| e.to_string())?;
    save_weights(&result.ema_model, &out_dir.join("model_ema.rdet")).map_err(|e| e.to_string())?;
    write_text_atomic(&out_dir.join("metrics.tsv"), &format_metrics_log(&result.log))
        .map_err(|e| e.to_string())?;
    let last = result.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final ap {:.4}, ap50 {:.4}; outputs in {}",
        result.log.len(),
        last.ap,
        last.ap50,
        out_dir.display()
    );
    Ok(0)
}

fn cmd_eval(flags: &Flags) -> std::result::Result<i32, String> {
    let input = flags.get("in").ok_or("eval needs --in")?.to_string();
    let data_spec = flags.get("data").ok_or("eval needs --data synth:COUNT:SEED")?.to_string();
    let mode: PreprocessMode = flags
        .get("mode")
        .map(|m| m.parse())
        .transpose()
        .map_err(|e: repdet_core::Error| e.to_string())?
        .unwrap_or(PreprocessMode::Border);
    let img_size: usize = flags.parse_as("img-size")?.unwrap_or(64);
    let target: usize = flags.parse_as("target")?.unwrap_or(img_size + 32);
    flags.reject_unknown()?;

    let model = load_weights(Path::new(&input)).map_err(|e| e.to_string())?;
    let data = parse_data_spec(&data_spec, img_size, model.config.num_classes)?;
    let ap = evaluate_model(&model, &data, mode, target, 0.03, 0.65, 0)
        .map_err(|e| e.to_string())?;
    println!("ap = {:.6}", ap.ap);
    println!("ap50 = {:.6}", ap.ap50);
    Ok(0)
}

fn cmd_quantize(flags: &Flags) -> std::result::Result<i32, String> {
    let input = flags.get("in").ok_or("quantize needs --in (a fused checkpoint)")?.to_string();
    let calib_spec = flags.get("calib").ok_or("quantize needs --calib synth:COUNT:SEED")?.to_string();
    let mode: CalibMode = flags
        .get("mode")
        .map(|m| m.parse())
        .transpose()
        .map_err(|e: repdet_core::Error| e.to_string())?
        .unwrap_or(CalibMode::MaxAbs);
    let keep_float: usize = flags.parse_as("keep-float")?.unwrap_or(DEFAULT_KEEP_FLOAT);
    let img_size: usize = flags.parse_as("img-size")?.unwrap_or(64);
    let report_path: PathBuf = flags.get("report").unwrap_or("sensitivity.tsv").into();
    let out = flags.get("out").map(str::to_string);
    flags.reject_unknown()?;

    let model = load_weights(Path::new(&input)).map_err(|e| e.to_string())?;
    let data = parse_data_spec(&calib_spec, img_size, model.config.num_classes)?;
    let images: Vec<Tensor> = data.iter().map(|s| s.image.clone()).collect();
    let qmap = calibrate(&model, &images, mode).map_err(|e| e.to_string())?;
    let mut report = sensitivity(&model, &qmap, &images).map_err(|e| e.to_string())?;
    let keep = report.most_sensitive(keep_float);
    for l in report.layers.iter_mut() {
        l.kept_float = keep.contains(&l.name);
    }
    write_text_atomic(&report_path, &report.to_text()).map_err(|e| e.to_string())?;

    let qs = partial_quantize(&model, &qmap, &report, keep_float).map_err(|e| e.to_string())?;
    if let Some(out) = &out {
        repdet_core::quantsim::save_quantsim(&qs, Path::new(out)).map_err(|e| e.to_string())?;
    }
    println!(
        "quantized {} sites, kept {} in float; report -> {}{}",
        qs.active.iter().filter(|&&a| a).count(),
        keep_float,
        report_path.display(),
        out.map(|o| format!(", checkpoint -> {o}")).unwrap_or_default()
    );
    Ok(0)
}

fn cmd_bench(flags: &Flags) -> std::result::Result<i32, String> {
    let input = flags.get("in").ok_or("bench needs --in (an unfused checkpoint)")?.to_string();
    let repeat: usize = flags.parse_as("repeat")?.unwrap_or(10);
    let extent: usize = flags.parse_as("input")?.unwrap_or(320);
    let seed: u64 = flags.parse_as("seed")?.unwrap_or(0);
    flags.reject_unknown()?;
    if repeat == 0 {
        return Err("--repeat must be positive".into());
    }

    let model = load_weights(Path::new(&input)).map_err(|e| e.to_string())?;
    if model.fused {
        return Err("bench compares unfused vs fused; give an unfused checkpoint".into());
    }
    let fused = fuse_model(&model).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(seed);
    let x = Tensor::rand_uniform(Shape::new(1, 3, extent, extent), &mut rng, 0.0, 1.0);

    repdet_core::tensor::set_checked(false);
    let stats = |m: &Model| -> std::result::Result<(f64, f64, f64), String> {
        let mut times = Vec::with_capacity(repeat);
        m.forward(&x).map_err(|e| e.to_string())?; // warmup
        for _ in 0..repeat {
            let t0 = std::time::Instant::now();
            let h = m.forward(&x).map_err(|e| e.to_string())?;
            std::hint::black_box(&h);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let p50 = times[times.len() / 2];
        let p95 = times[(times.len() * 95 / 100).min(times.len() - 1)];
        Ok((mean, p50, p95))
    };
    let (um, u50, u95) = stats(&model)?;
    let (fm, f50, f95) = stats(&fused)?;
    repdet_core::tensor::set_checked(true);

    println!("input {extent}x{extent}, {repeat} repeats, times in ms");
    println!("unfused: mean {um:.2}  p50 {u50:.2}  p95 {u95:.2}");
    println!("fused  : mean {fm:.2}  p50 {f50:.2}  p95 {f95:.2}");
    println!("speedup: {:.3}x (mean)", um / fm);
    Ok(0)
}
