//! Command-line interface.
//!
//! Subcommands: train | eval | bench | depthwise | simcheck | policyfreq |
//! gen-data. Config comes from `--config <file>` (key=value lines) plus
//! `--<key> <value>` overrides for any config key. `VITLAB_THREADS` sets
//! the kernel thread pool size.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::analyze::{mean_consecutive_similarity, policy_frequency, simcheck};
use super::bench::bench_throughput;
use super::config::RunConfig;
use super::train::{eval_split, infer_mode};
use super::HarnessError;
use crate::data::{generate_dataset, load_dataset, normalize, write_dataset, Dataset, Split};
use crate::model::{Model, ModelMode};
use crate::rng::Rng;
use crate::seg::{depthwise_eval, Tap};

const USAGE: &str = "usage: vitlab <command> [flags]

commands:
  train       --data <dir> --out <dir> [--config <file>] [--init-ckpt <run-dir>]
              [--<key> <value>...]
  eval        --ckpt <run-dir> --data <dir> --out <dir> [--split test|val|train]
              [--with-throughput] [--warmup N] [--iters N]
  bench       --out <dir> [--config <file>] [--ckpt <run-dir>]
              [--keep-ratio R]... [--merge-ratio R]... [--warmup N] [--iters N]
  depthwise   --ckpt <run-dir> --data <dir> --out <dir> [--split test|val|train]
  simcheck    --ckpt <run-dir> --data <dir> --out <dir> [--index I]
  policyfreq  --ckpt <run-dir> --data <dir> --out <dir> [--index I]
  gen-data    --out <dir> [--seed S] [--n-base N] [--base-hw PX]

any config key (mode, lr, keep_ratio, epochs, seed, ...) can be overridden
with --<key> <value>; see the default config printed by `vitlab train -h`.";

struct Args {
    /// CLI-level options.
    opts: Vec<(String, String)>,
    /// Config overrides (key already normalized).
    cfg_overrides: Vec<(String, String)>,
}

const CLI_KEYS: &[&str] = &[
    "config", "out", "data", "ckpt", "init-ckpt", "split", "index", "warmup", "iters",
    "keep-ratio", "merge-ratio", "with-throughput", "n-base", "base-hw",
];

fn parse_args(argv: &[String]) -> Result<Args, HarnessError> {
    let mut opts = Vec::new();
    let mut cfg_overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        let Some(key) = arg.strip_prefix("--") else {
            return Err(HarnessError::Usage(format!("unexpected argument {arg:?}")));
        };
        if key == "with-throughput" {
            opts.push((key.to_string(), "true".to_string()));
            i += 1;
            continue;
        }
        let value = argv
            .get(i + 1)
            .ok_or_else(|| HarnessError::Usage(format!("flag --{key} needs a value")))?
            .clone();
        if CLI_KEYS.contains(&key) {
            opts.push((key.to_string(), value));
        } else {
            // A config override. Repeated assignments must agree.
            if let Some((_, prev)) = cfg_overrides.iter().find(|(k, _)| k == key) {
                if prev != &value {
                    return Err(HarnessError::Usage(format!(
                        "conflicting values for --{key}: {prev:?} vs {value:?}"
                    )));
                }
            }
            cfg_overrides.push((key.to_string(), value));
        }
        i += 2;
    }
    Ok(Args {
        opts,
        cfg_overrides,
    })
}

impl Args {
    fn get(&self, key: &str) -> Option<&str> {
        self.opts.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn get_all(&self, key: &str) -> Vec<&str> {
        self.opts.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    fn require(&self, key: &str) -> Result<&str, HarnessError> {
        self.get(key)
            .ok_or_else(|| HarnessError::Usage(format!("missing required flag --{key}")))
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| HarnessError::Usage(format!("invalid value {v:?} for --{key}"))),
        }
    }
}

/// Assemble the effective config: file, then CLI overrides.
fn load_config(args: &Args) -> Result<(RunConfig, BTreeSet<String>), HarnessError> {
    let (mut cfg, mut set_keys) = match args.get("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read {path}: {e}")))?;
            RunConfig::parse(&text)?
        }
        None => (RunConfig::default(), BTreeSet::new()),
    };
    for (k, v) in &args.cfg_overrides {
        cfg.set(k, v)?;
        set_keys.insert(k.clone());
    }
    cfg.validate(&set_keys)?;
    Ok((cfg, set_keys))
}

fn load_data(args: &Args) -> Result<Dataset, HarnessError> {
    let dir = args.require("data")?;
    Ok(load_dataset(Path::new(dir))?)
}

fn out_dir(args: &Args) -> Result<PathBuf, HarnessError> {
    let dir = PathBuf::from(args.require("out")?);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Load the model from a training run directory (the EMA checkpoint, with
/// the run's own config unless overridden).
fn load_run(args: &Args) -> Result<(RunConfig, Model), HarnessError> {
    let run_dir = PathBuf::from(args.require("ckpt")?);
    let cfg = if args.get("config").is_some() {
        load_config(args)?.0
    } else {
        let text = std::fs::read_to_string(run_dir.join("config.cfg")).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", run_dir.join("config.cfg").display()))
        })?;
        let (mut cfg, mut keys) = RunConfig::parse(&text)?;
        for (k, v) in &args.cfg_overrides {
            cfg.set(k, v)?;
            keys.insert(k.clone());
        }
        cfg.validate(&keys)?;
        cfg
    };
    let mut model = Model::init(
        cfg.backbone_config(),
        &Model::default_aux_blocks(cfg.depth),
        &mut Rng::new(cfg.seed, 1),
    )?;
    let ema = run_dir.join("ckpt_ema");
    let raw = run_dir.join("ckpt");
    if ema.join("manifest.txt").exists() {
        model.load_checkpoint(&ema)?;
    } else if raw.join("manifest.txt").exists() {
        model.load_checkpoint(&raw)?;
    } else if run_dir.join("manifest.txt").exists() {
        model.load_checkpoint(&run_dir)?;
    } else {
        return Err(HarnessError::Config(format!(
            "no checkpoint manifest under {}",
            run_dir.display()
        )));
    }
    Ok((cfg, model))
}

fn split_arg(args: &Args) -> Result<Split, HarnessError> {
    match args.get("split").unwrap_or("test") {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(HarnessError::Usage(format!("unknown split {other:?}"))),
    }
}

fn cmd_train(args: &Args) -> Result<(), HarnessError> {
    let (cfg, _) = load_config(args)?;
    let data = load_data(args)?;
    let out = out_dir(args)?;
    // Warm start from another run's checkpoint (its raw weights).
    let init_weights = match args.get("init-ckpt") {
        Some(dir) => {
            let run_dir = PathBuf::from(dir);
            let mut init = Model::init(
                cfg.backbone_config(),
                &Model::default_aux_blocks(cfg.depth),
                &mut Rng::new(cfg.seed, 1),
            )?;
            let raw = run_dir.join("ckpt");
            if raw.join("manifest.txt").exists() {
                init.load_checkpoint(&raw)?;
            } else {
                init.load_checkpoint(&run_dir)?;
            }
            Some(init.param_data())
        }
        None => None,
    };
    println!("training mode={} seed={} -> {}", cfg.mode.as_str(), cfg.seed, out.display());
    let outcome = super::train::train_loop_from(&cfg, &data, init_weights.as_deref(), Some(&out))?;
    for m in &outcome.metrics {
        println!(
            "epoch {:>3}  loss {:.4}  val_dice {:.4}  val_ap {:.4}",
            m.epoch, m.train_loss, m.val_dice, m.val_ap
        );
    }
    println!("checkpoints written to {}", out.display());
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<(), HarnessError> {
    let (cfg, model) = load_run(args)?;
    let data = load_data(args)?;
    let out = out_dir(args)?;
    let split = split_arg(args)?;
    let mode = infer_mode(&cfg)?;
    let report = eval_split(&model, &mode, &data, split)?;

    let throughput = if args.get("with-throughput").is_some() {
        let warmup = args.parse_opt("warmup", 20usize)?;
        let iters = args.parse_opt("iters", 200usize)?;
        let res = bench_throughput(
            &model,
            &mode,
            (cfg.image_hw, cfg.image_hw),
            warmup,
            iters,
            &cfg.hash(),
            &mut Rng::new(cfg.seed, 77),
        )?;
        Some(res.imgs_per_sec_mean)
    } else {
        None
    };

    let hash = cfg.hash();
    let mut jsonl = String::new();
    for (metric, value) in [("dice", report.dice), ("ap", report.ap)] {
        let rec = serde_json::json!({
            "config": hash,
            "mode": cfg.mode.as_str(),
            "block": "final",
            "metric": metric,
            "value": value,
        });
        let _ = writeln!(jsonl, "{rec}");
    }
    std::fs::write(out.join("eval.jsonl"), jsonl)?;

    let ratio = if cfg.mode.is_tome() {
        cfg.merge_fraction as f64
    } else if cfg.mode.is_prune() {
        cfg.keep_ratio
    } else {
        1.0
    };
    let tp = throughput.map(|t| format!("{t:.3}")).unwrap_or_default();
    let csv = format!(
        "mode,keep_ratio,dice,ap,imgs_per_sec\n{},{},{:.6},{:.6},{}\n",
        cfg.mode.as_str(),
        ratio,
        report.dice,
        report.ap,
        tp
    );
    std::fs::write(out.join("results.csv"), csv)?;
    println!(
        "{} split={} dice {:.4}  ap {:.4}{}",
        cfg.mode.as_str(),
        split.as_str(),
        report.dice,
        report.ap,
        throughput.map(|t| format!("  imgs/sec {t:.2}")).unwrap_or_default()
    );
    Ok(())
}

fn cmd_bench(args: &Args) -> Result<(), HarnessError> {
    let out = out_dir(args)?;
    let warmup = args.parse_opt("warmup", 20usize)?;
    let iters = args.parse_opt("iters", 200usize)?;
    // With --ckpt, bench the trained model; otherwise a random init from
    // the config (throughput does not depend on weight values).
    let (cfg, model) = if args.get("ckpt").is_some() {
        load_run(args)?
    } else {
        let (cfg, _) = load_config(args)?;
        let model = Model::init(
            cfg.backbone_config(),
            &Model::default_aux_blocks(cfg.depth),
            &mut Rng::new(cfg.seed, 1),
        )?;
        (cfg, model)
    };
    let hash = cfg.hash();
    let mut modes: Vec<ModelMode> = Vec::new();
    for r in args.get_all("keep-ratio") {
        let ratio: f64 = r
            .parse()
            .map_err(|_| HarnessError::Usage(format!("invalid --keep-ratio {r:?}")))?;
        modes.push(ModelMode::Prune(
            crate::pruning::PruneSchedule::new(cfg.first_block, cfg.stage_len, ratio, cfg.depth)
                .map_err(|e| HarnessError::Config(e.to_string()))?,
        ));
    }
    for r in args.get_all("merge-ratio") {
        let fraction: f32 = r
            .parse()
            .map_err(|_| HarnessError::Usage(format!("invalid --merge-ratio {r:?}")))?;
        modes.push(ModelMode::ToMe {
            scope: cfg.mode.tome_scope().unwrap_or(crate::tome::ToMeScope::Mhsa),
            fraction,
        });
    }
    if modes.is_empty() {
        modes.push(infer_mode(&cfg)?);
    }
    let mut rng = Rng::new(cfg.seed, 99);
    let mut jsonl = String::new();
    let mut csv = String::from(
        "mode,keep_ratio,imgs_per_sec_mean,imgs_per_sec_std,latency_ms_mean,latency_ms_p50,latency_ms_p90,latency_ms_p99,threads\n",
    );
    for mode in &modes {
        let res = bench_throughput(
            &model,
            mode,
            (cfg.image_hw, cfg.image_hw),
            warmup,
            iters,
            &hash,
            &mut rng,
        )?;
        println!(
            "{:>18} ratio {:.3}: {:.2} imgs/sec (mean {:.3} ms, p50 {:.3} ms)",
            res.mode, res.keep_ratio, res.imgs_per_sec_mean, res.latency_ms_mean, res.latency_ms_p50
        );
        let _ = writeln!(jsonl, "{}", serde_json::to_string(&res)?);
        let _ = writeln!(
            csv,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            res.mode,
            res.keep_ratio,
            res.imgs_per_sec_mean,
            res.imgs_per_sec_std,
            res.latency_ms_mean,
            res.latency_ms_p50,
            res.latency_ms_p90,
            res.latency_ms_p99,
            res.threads
        );
    }
    std::fs::write(out.join("bench.jsonl"), jsonl)?;
    std::fs::write(out.join("bench.csv"), csv)?;
    Ok(())
}

fn cmd_depthwise(args: &Args) -> Result<(), HarnessError> {
    let (cfg, model) = load_run(args)?;
    let data = load_data(args)?;
    let out = out_dir(args)?;
    let split = split_arg(args)?;
    let mode = infer_mode(&cfg)?;
    let mut taps: Vec<Tap> = model.aux_blocks().iter().map(|&b| Tap::Block(b)).collect();
    taps.push(Tap::Final);
    let samples: Vec<crate::data::Sample> = data
        .split(split)
        .iter()
        .map(|s| crate::data::Sample {
            image: normalize(&s.image),
            ..s.clone()
        })
        .collect();
    let per_block = depthwise_eval(&model, &mode, &samples, &taps)?;
    let hash = cfg.hash();
    let mut csv = String::from("mode,block,ap\n");
    let mut jsonl = String::new();
    for (tap, ap) in &per_block {
        let _ = writeln!(csv, "{},{},{:.6}", cfg.mode.as_str(), tap.label(), ap);
        let rec = serde_json::json!({
            "config": hash,
            "mode": cfg.mode.as_str(),
            "block": tap.label(),
            "metric": "ap",
            "value": ap,
        });
        let _ = writeln!(jsonl, "{rec}");
        println!("{:>8}: ap {:.4}", tap.label(), ap);
    }
    std::fs::write(out.join("depthwise.csv"), csv)?;
    std::fs::write(out.join("depthwise.jsonl"), jsonl)?;
    Ok(())
}

fn sample_for_index(args: &Args, data: &Dataset) -> Result<crate::data::Sample, HarnessError> {
    let index: usize = args.parse_opt("index", 0usize)?;
    let test = data.split(Split::Test);
    let pool = if test.is_empty() { &data.samples } else { &test };
    let s = pool
        .get(index)
        .ok_or_else(|| HarnessError::Usage(format!("--index {index} out of range ({} samples)", pool.len())))?;
    Ok(crate::data::Sample {
        image: normalize(&s.image),
        ..s.clone()
    })
}

fn cmd_simcheck(args: &Args) -> Result<(), HarnessError> {
    let (cfg, model) = load_run(args)?;
    let data = load_data(args)?;
    let out = out_dir(args)?;
    let sample = sample_for_index(args, &data)?;
    let mode = infer_mode(&cfg)?;
    let sim = simcheck(&model, &mode, &sample.image)?;
    let mut csv = String::from("block");
    for j in 0..sim.len() {
        let _ = write!(csv, ",{j}");
    }
    csv.push('\n');
    for (i, row) in sim.iter().enumerate() {
        let _ = write!(csv, "{i}");
        for v in row {
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    std::fs::write(out.join("simcheck.csv"), csv)?;
    println!(
        "mean consecutive-block cosine similarity over blocks [{}..{}): {:.4}",
        cfg.first_block,
        cfg.depth,
        mean_consecutive_similarity(&sim, cfg.first_block)
    );
    Ok(())
}

fn cmd_policyfreq(args: &Args) -> Result<(), HarnessError> {
    let (cfg, model) = load_run(args)?;
    if !cfg.mode.is_prune() {
        return Err(HarnessError::Usage(
            "policyfreq requires a pruning-mode checkpoint".into(),
        ));
    }
    let data = load_data(args)?;
    let out = out_dir(args)?;
    let sample = sample_for_index(args, &data)?;
    let schedule = cfg.schedule()?;
    let freq = policy_frequency(&model, &schedule, &sample.image)?;
    let (gh, gw) = cfg.backbone_config().grid();
    let mut csv = String::from("token,row,col,freq\n");
    for (i, f) in freq.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{f:.6}", i / gw, i % gw);
    }
    std::fs::write(out.join("policyfreq.csv"), csv)?;
    let grid = crate::tensor::Tensor::new(freq.iter().map(|&f| f as f32).collect(), vec![gh, gw]);
    crate::data::save_pgm(&out.join("policyfreq.pgm"), &grid)?;
    println!(
        "policy frequency grid {}x{} written; mean {:.3}",
        gh,
        gw,
        freq.iter().sum::<f64>() / freq.len() as f64
    );
    Ok(())
}

fn cmd_gen_data(args: &Args) -> Result<(), HarnessError> {
    let out = out_dir(args)?;
    let seed: u64 = args.parse_opt("seed", 0u64)?;
    let n_base: usize = args.parse_opt("n-base", 64usize)?;
    let base_hw: usize = args.parse_opt("base-hw", 128usize)?;
    let ds = generate_dataset(seed, n_base, (base_hw, base_hw))?;
    write_dataset(&out, &ds)?;
    let count = |sp: Split| ds.samples.iter().filter(|s| s.split == sp).count();
    println!(
        "wrote {} samples ({} train / {} val / {} test) at {}x{} to {}",
        ds.samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        base_hw / 2,
        base_hw / 2,
        out.display()
    );
    Ok(())
}

fn init_threads() {
    let threads = std::env::var("VITLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        });
    // Ignore the error when a pool already exists (repeated calls in-process).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Entry point. Returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    init_threads();
    let Some((cmd, rest)) = argv.split_first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    let args = match parse_args(rest) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}\n\n{USAGE}");
            return 2;
        }
    };
    let result = match cmd.as_str() {
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "bench" => cmd_bench(&args),
        "depthwise" => cmd_depthwise(&args),
        "simcheck" => cmd_simcheck(&args),
        "policyfreq" => cmd_policyfreq(&args),
        "gen-data" => cmd_gen_data(&args),
        "-h" | "--help" | "help" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("unknown command {other:?}\n\n{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e @ (HarnessError::Usage(_) | HarnessError::Config(_))) => {
            eprintln!("{e}");
            2
        }
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn conflicting_mode_flags_are_usage_errors() {
        let err = match parse_args(&args(&["--mode", "prune", "--mode", "none"])) {
            Err(e) => e,
            Ok(_) => panic!("conflicting --mode accepted"),
        };
        assert!(matches!(err, HarnessError::Usage(_)), "{err}");
        // Repeating the same value is fine.
        assert!(parse_args(&args(&["--mode", "prune", "--mode", "prune"])).is_ok());
    }

    #[test]
    fn unknown_config_key_is_an_error() {
        let parsed = parse_args(&args(&["--bogus_key", "3"])).ok().unwrap();
        let err = load_config(&parsed).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn missing_value_is_a_usage_error() {
        let err = match parse_args(&args(&["--out"])) {
            Err(e) => e,
            Ok(_) => panic!("missing value accepted"),
        };
        assert!(matches!(err, HarnessError::Usage(_)));
    }

    #[test]
    fn unknown_command_and_help_exit_codes() {
        assert_eq!(run(args(&["frobnicate"])), 2);
        assert_eq!(run(args(&["--help"])), 0);
        assert_eq!(run(args(&[])), 2);
    }

    #[test]
    fn gen_data_and_eval_flow() {
        let base = std::env::temp_dir().join(format!("vitlab-cli-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&base);
        let data = base.join("data");
        let run_dir = base.join("run");
        assert_eq!(
            run(args(&[
                "gen-data", "--out", data.to_str().unwrap(), "--seed", "3", "--n-base", "4",
                "--base-hw", "32",
            ])),
            0
        );
        assert!(data.join("manifest.tsv").exists());
        assert_eq!(
            run(args(&[
                "train", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
                "--mode", "prune", "--epochs", "1", "--image_hw", "16", "--patch_hw", "4",
                "--dim", "8", "--heads", "2", "--depth", "6", "--first_block", "2",
                "--stage_len", "2", "--ema_decay", "0.5",
            ])),
            0
        );
        assert!(run_dir.join("metrics.jsonl").exists());
        let eval_dir = base.join("eval");
        assert_eq!(
            run(args(&[
                "eval", "--ckpt", run_dir.to_str().unwrap(), "--data", data.to_str().unwrap(),
                "--out", eval_dir.to_str().unwrap(),
            ])),
            0
        );
        assert!(eval_dir.join("eval.jsonl").exists());
        assert!(eval_dir.join("results.csv").exists());
        std::fs::remove_dir_all(&base).unwrap();
    }
}
