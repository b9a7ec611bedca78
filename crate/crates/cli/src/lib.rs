//! Command line front end over the training library.
//!
//! Every subcommand reads a flat `key=value` config (optional), applies
//! command line overrides on top, and talks to the library; nothing in here
//! does numerics. Errors map to process exit codes in `main`: usage, config,
//! data and IO problems exit 2, numeric faults exit 3.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use udg_core::domains::{
    erm_train, evaluate, gen_glyphs, gen_two_moons, CorruptionFamily, DomainDataset, ShiftSpec,
};
use udg_core::grad::Rng;
use udg_core::meta::{
    metrics_csv, model_from_checkpoint, train, AblationFlags, MetaStepReport, TrainConfig,
    TrainOptions,
};
use udg_core::model::{load_checkpoint, save_checkpoint, Backbone, Checkpoint};
use udg_core::uncertainty::{score_domains, spearman};
use udg_core::{Result, UdgError};

const USAGE: &str = "\
usage: udg <command> [--config PATH] [--key value]...

commands:
  train     fit a model on a source domain and write a checkpoint
  eval      report accuracy of a checkpoint on one or more domains
  score     rank unseen domains by predicted transfer risk
  ablate    compare the full method against reduced variants
  gen-data  write a synthetic dataset to a file

`--key value` accepts any training config key (see the README); boolean
flags such as --no-mixup need no value. Keys given on the command line
override the config file.
";

const TRAIN_HELP: &str = "\
usage: udg train (--data PATH | --gen SPEC) [--config PATH] [--key value]...
  --data PATH            source domain file
  --gen SPEC             generate the source instead (e.g. moons:n=200,rot=0,noise=0.1,seed=0)
  --checkpoint-out PATH  where to save the final (and periodic) checkpoint
  --metrics-out PATH     where to write per-iteration metrics CSV
  --resume PATH          continue from an existing checkpoint
plus any config key, e.g. --iterations 500 --seed 7 --no-mixup
";

const EVAL_HELP: &str = "\
usage: udg eval --checkpoint PATH (--data PATH | --gen SPEC)...
prints one row per domain and an unweighted `avg` row.
";

const SCORE_HELP: &str = "\
usage: udg score --checkpoint PATH --source DOMAIN --target DOMAIN [--target DOMAIN]...
  DOMAIN is a dataset path or a generator spec (moons:... / glyphs:...)
  --oracle-bayes   also estimate repeated-sampling predictive variance
  --draws N        sample count for the oracle (default 30)
";

const ABLATE_HELP: &str = "\
usage: udg ablate --family NAME (--data PATH | --gen SPEC) --target DOMAIN... [--seeds N]
  NAME is perturbation, mixup, or strategy. Each variant trains --seeds
  times (default 5) with seeds base..base+N-1 and reports mean/std of the
  mean accuracy over the --target domains.
";

const GEN_DATA_HELP: &str = "\
usage: udg gen-data --spec SPEC --out PATH
  SPEC examples:
    moons:n=200,rot=30,noise=0.1,seed=0
    glyphs:n=500,seed=1
    glyphs:n=500,family=blur,severity=3,seed=1
";

/// Dispatch. `args` excludes the binary name.
pub fn run(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        return Err(UdgError::Usage(USAGE.into()));
    };
    let rest = &args[1..];
    match cmd.as_str() {
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "score" => cmd_score(rest),
        "ablate" => cmd_ablate(rest),
        "gen-data" => cmd_gen_data(rest),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(UdgError::Usage(format!(
            "unknown command `{other}`; expected train, eval, score, ablate, or gen-data"
        ))),
    }
}

/// Flags that are plain switches: present means true, no value token.
/// An explicit `true`/`false` after one is still accepted.
const SWITCH_KEYS: [&str; 11] = [
    "random_gaussian",
    "deterministic_perturbation",
    "random_mu",
    "random_sigma",
    "no_mixup",
    "random_mixup",
    "no_adversarial",
    "no_meta",
    "no_min_phi_p",
    "timing",
    "oracle_bayes",
];

fn parse_flags(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let tok = &args[i];
        let Some(body) = tok.strip_prefix("--") else {
            return Err(UdgError::Usage(format!("expected a --flag, got `{tok}`")));
        };
        if body.is_empty() {
            return Err(UdgError::Usage("bare `--` is not a flag".into()));
        }
        let key = body.replace('-', "_");
        let switch = SWITCH_KEYS.contains(&key.as_str());
        match args.get(i + 1) {
            Some(v) if !switch || v == "true" || v == "false" => {
                out.push((key, v.clone()));
                i += 2;
            }
            _ if switch => {
                out.push((key, "true".into()));
                i += 1;
            }
            _ => return Err(UdgError::Usage(format!("flag --{body} needs a value"))),
        }
    }
    Ok(out)
}

fn wants_help(args: &[String]) -> bool {
    args.iter().any(|a| a == "--help" || a == "-h")
}

/// Unwrap the config variant so wrapped messages do not stack prefixes.
fn config_msg(e: UdgError) -> String {
    match e {
        UdgError::Config(m) => m,
        other => other.to_string(),
    }
}

/// Apply a `key=value` file. `#` starts a comment, blank lines are fine,
/// errors carry `path:line:` so a bad key in a long file is findable.
fn apply_config_file(cfg: &mut TrainConfig, path: &str) -> Result<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| UdgError::Config(format!("cannot read config `{path}`: {e}")))?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UdgError::Config(format!(
                "{path}:{}: expected key=value, got `{line}`",
                idx + 1
            )));
        };
        cfg.set(k.trim(), v.trim())
            .map_err(|e| UdgError::Config(format!("{path}:{}: {}", idx + 1, config_msg(e))))?;
    }
    Ok(())
}

fn parse_with<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| UdgError::Usage(format!("bad value `{v}` for {key}: {e}")))
}

/// A dataset argument: a generator spec when it carries a known prefix,
/// otherwise a file path.
fn load_domain(arg: &str) -> Result<DomainDataset> {
    if arg.starts_with("moons:") || arg.starts_with("glyphs:") {
        gen_from_spec(arg)
    } else {
        DomainDataset::load(arg)
    }
}

/// `moons:n=200,rot=30,noise=0.1,seed=0` or
/// `glyphs:n=500[,family=blur,severity=3],seed=1`.
pub fn gen_from_spec(spec: &str) -> Result<DomainDataset> {
    let Some((kind, body)) = spec.split_once(':') else {
        return Err(UdgError::Usage(format!(
            "generator spec `{spec}` needs the form kind:key=value,... (kinds: moons, glyphs)"
        )));
    };
    let mut fields = BTreeMap::new();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let Some((k, v)) = part.split_once('=') else {
            return Err(UdgError::Usage(format!(
                "generator spec part `{part}` is not key=value"
            )));
        };
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut take = |k: &str| fields.remove(k);
    let n: usize = match take("n") {
        Some(v) => parse_with("n", &v)?,
        None => return Err(UdgError::Usage(format!("generator spec `{spec}` needs n="))),
    };
    let seed: u64 = match take("seed") {
        Some(v) => parse_with("seed", &v)?,
        None => 0,
    };
    let ds = match kind {
        "moons" => {
            let rot: f64 = match take("rot") {
                Some(v) => parse_with("rot", &v)?,
                None => 0.0,
            };
            let noise: f64 = match take("noise") {
                Some(v) => parse_with("noise", &v)?,
                None => 0.1,
            };
            gen_two_moons(n, rot, noise, seed)?
        }
        "glyphs" => {
            let family = take("family");
            let severity = take("severity");
            let shift = match (family, severity) {
                (Some(f), Some(s)) => {
                    let fam: CorruptionFamily = parse_with("family", &f)?;
                    let sev: u8 = parse_with("severity", &s)?;
                    Some(ShiftSpec::new(fam, sev)?)
                }
                (None, None) => None,
                _ => {
                    return Err(UdgError::Usage(
                        "family and severity go together; give both or neither".into(),
                    ))
                }
            };
            gen_glyphs(n, shift, seed)?
        }
        other => {
            return Err(UdgError::Usage(format!(
                "unknown generator `{other}` (expected moons or glyphs)"
            )))
        }
    };
    if let Some(k) = fields.keys().next() {
        return Err(UdgError::Usage(format!(
            "unknown generator spec key `{k}` in `{spec}`"
        )));
    }
    Ok(ds)
}

/// Full-batch mean cross entropy under the final parameters; the summary
/// line needs a loss even for zero-iteration runs, where no history exists.
fn mean_ce(backbone: &Backbone, ds: &DomainDataset) -> Result<f64> {
    let raw = backbone.forward_raw(&ds.inputs, ds.n, None)?;
    let c = raw.classes;
    let mut total = 0.0;
    for i in 0..ds.n {
        let row = &raw.logits[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[ds.labels[i]];
    }
    Ok(total / ds.n as f64)
}

struct TrainArgs {
    cfg: TrainConfig,
    source: DomainDataset,
    checkpoint_out: Option<PathBuf>,
    metrics_out: Option<PathBuf>,
    resume: Option<String>,
}

fn parse_train_args(args: &[String]) -> Result<TrainArgs> {
    let pairs = parse_flags(args)?;
    let mut cfg = TrainConfig::default();
    for (k, v) in &pairs {
        if k == "config" {
            apply_config_file(&mut cfg, v)?;
        }
    }
    let (mut data, mut gen) = (None, None);
    let mut checkpoint_out = None;
    let mut metrics_out = None;
    let mut resume = None;
    for (k, v) in &pairs {
        match k.as_str() {
            "config" => {}
            "data" => data = Some(v.clone()),
            "gen" => gen = Some(v.clone()),
            "checkpoint_out" => checkpoint_out = Some(PathBuf::from(v)),
            "metrics_out" => metrics_out = Some(PathBuf::from(v)),
            "resume" => resume = Some(v.clone()),
            _ => cfg.set(k, v).map_err(|e| UdgError::Config(config_msg(e)))?,
        }
    }
    let source = match (data, gen) {
        (Some(p), None) => DomainDataset::load(&p)?,
        (None, Some(s)) => gen_from_spec(&s)?,
        (None, None) => {
            return Err(UdgError::Usage(
                "train needs a source: --data PATH or --gen SPEC".into(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(UdgError::Usage("give either --data or --gen, not both".into()))
        }
    };
    cfg.validate()?;
    Ok(TrainArgs {
        cfg,
        source,
        checkpoint_out,
        metrics_out,
        resume,
    })
}

fn cmd_train(args: &[String]) -> Result<()> {
    if wants_help(args) {
        print!("{TRAIN_HELP}");
        return Ok(());
    }
    let t = parse_train_args(args)?;
    let cfg = &t.cfg;

    // the combined strategy ablation degenerates to the plain baseline;
    // run it as such so there is no replay machinery in the way
    let plain = cfg.ablation.no_meta && cfg.ablation.no_adversarial;
    let (model, history) = if plain {
        if t.resume.is_some() {
            return Err(UdgError::Usage(
                "--resume is not supported for the degenerate baseline".into(),
            ));
        }
        let (model, losses) = erm_train(cfg, &t.source)?;
        let history: Vec<MetaStepReport> = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| MetaStepReport {
                iteration: i as u64,
                loss_train: l,
                loss_meta_test: l,
                kl: 0.0,
                mean_sigma: 0.0,
                a: 0.0,
                b: 0.0,
                tau: 0.0,
                adv_trajectory: Vec::new(),
                wall_ms: 0.0,
            })
            .collect();
        let ckpt = Checkpoint::from_model(&model, cfg.iterations, &Rng::new(cfg.seed), cfg.to_map());
        if let Some(path) = &t.checkpoint_out {
            save_checkpoint(path, &ckpt)?;
        }
        (model, history)
    } else {
        let resume = t.resume.as_deref().map(load_checkpoint).transpose()?;
        let run = train(
            cfg,
            &t.source,
            TrainOptions {
                persist_path: t.checkpoint_out.clone(),
                resume,
            },
        )?;
        (run.model, run.history)
    };

    if let Some(path) = &t.metrics_out {
        fs::write(path, metrics_csv(&history))?;
    }
    let rec = evaluate(&model.backbone, &t.source)?;
    let loss = mean_ce(&model.backbone, &t.source)?;
    println!("iter={} loss={} src_acc={}", cfg.iterations, loss, rec.accuracy);
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<()> {
    if wants_help(args) {
        print!("{EVAL_HELP}");
        return Ok(());
    }
    let pairs = parse_flags(args)?;
    let mut checkpoint = None;
    let mut targets = Vec::new();
    for (k, v) in &pairs {
        match k.as_str() {
            "checkpoint" => checkpoint = Some(v.clone()),
            "data" | "target" => targets.push(v.clone()),
            "gen" => targets.push(v.clone()),
            other => return Err(UdgError::Usage(format!("eval does not take --{other}"))),
        }
    }
    let Some(ckpt_path) = checkpoint else {
        return Err(UdgError::Usage("eval needs --checkpoint PATH".into()));
    };
    if targets.is_empty() {
        return Err(UdgError::Usage(
            "eval needs at least one domain: --data PATH or --gen SPEC".into(),
        ));
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let (model, _) = model_from_checkpoint(&ckpt)?;
    let mut sum = 0.0;
    for t in &targets {
        let ds = load_domain(t)?;
        let rec = evaluate(&model.backbone, &ds)?;
        println!(
            "domain={} acc={} correct={} n={}",
            rec.domain_id, rec.accuracy, rec.correct, rec.n
        );
        sum += rec.accuracy;
    }
    println!("domain=avg acc={}", sum / targets.len() as f64);
    Ok(())
}

fn cmd_score(args: &[String]) -> Result<()> {
    if wants_help(args) {
        print!("{SCORE_HELP}");
        return Ok(());
    }
    let pairs = parse_flags(args)?;
    let mut checkpoint = None;
    let mut source = None;
    let mut targets = Vec::new();
    let mut oracle = false;
    let mut draws = 30usize;
    for (k, v) in &pairs {
        match k.as_str() {
            "checkpoint" => checkpoint = Some(v.clone()),
            "source" => source = Some(v.clone()),
            "target" => targets.push(v.clone()),
            "oracle_bayes" => oracle = parse_with("oracle-bayes", v)?,
            "draws" => draws = parse_with("draws", v)?,
            other => return Err(UdgError::Usage(format!("score does not take --{other}"))),
        }
    }
    let Some(ckpt_path) = checkpoint else {
        return Err(UdgError::Usage("score needs --checkpoint PATH".into()));
    };
    let Some(source) = source else {
        return Err(UdgError::Usage("score needs --source DOMAIN".into()));
    };
    if targets.is_empty() {
        return Err(UdgError::Usage("score needs at least one --target DOMAIN".into()));
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let (model, cfg) = model_from_checkpoint(&ckpt)?;
    let src = load_domain(&source)?;
    let loaded: Vec<DomainDataset> = targets
        .iter()
        .map(|t| load_domain(t))
        .collect::<Result<_>>()?;
    let refs: Vec<&DomainDataset> = loaded.iter().collect();
    let bayes = oracle.then_some((draws, cfg.seed));
    let report = score_domains(&model.pnet, &model.backbone, &src, &refs, bayes)?;
    print!("{}", report.render());
    if oracle && report.breakdown.len() >= 2 {
        let scores: Vec<f64> = report.breakdown.iter().map(|e| e.score).collect();
        let vars: Vec<f64> = report
            .breakdown
            .iter()
            .map(|e| e.bayes_variance.unwrap_or(f64::NAN))
            .collect();
        println!("spearman={}", spearman(&scores, &vars)?);
    }
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<()> {
    if wants_help(args) {
        print!("{ABLATE_HELP}");
        return Ok(());
    }
    let pairs = parse_flags(args)?;
    let mut cfg = TrainConfig::default();
    for (k, v) in &pairs {
        if k == "config" {
            apply_config_file(&mut cfg, v)?;
        }
    }
    let mut family = None;
    let mut seeds = 5u64;
    let (mut data, mut gen) = (None, None);
    let mut targets = Vec::new();
    for (k, v) in &pairs {
        match k.as_str() {
            "config" => {}
            "family" => family = Some(v.clone()),
            "seeds" => seeds = parse_with("seeds", v)?,
            "data" => data = Some(v.clone()),
            "gen" => gen = Some(v.clone()),
            "target" => targets.push(v.clone()),
            _ => cfg.set(k, v).map_err(|e| UdgError::Config(config_msg(e)))?,
        }
    }
    let Some(family) = family else {
        return Err(UdgError::Usage(
            "ablate needs --family (perturbation, mixup, or strategy)".into(),
        ));
    };
    let variant_keys: &[&str] = match family.as_str() {
        "perturbation" => &AblationFlags::PERTURBATION,
        "mixup" => &AblationFlags::MIXUP,
        "strategy" => &AblationFlags::STRATEGY,
        other => {
            return Err(UdgError::Usage(format!(
                "unknown ablation family `{other}` (expected perturbation, mixup, or strategy)"
            )))
        }
    };
    if seeds == 0 {
        return Err(UdgError::Usage("--seeds must be at least 1".into()));
    }
    let source = match (data, gen) {
        (Some(p), None) => DomainDataset::load(&p)?,
        (None, Some(s)) => gen_from_spec(&s)?,
        (None, None) => {
            return Err(UdgError::Usage(
                "ablate needs a source: --data PATH or --gen SPEC".into(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(UdgError::Usage("give either --data or --gen, not both".into()))
        }
    };
    if targets.is_empty() {
        return Err(UdgError::Usage("ablate needs at least one --target DOMAIN".into()));
    }
    cfg.validate()?;
    let loaded: Vec<DomainDataset> = targets
        .iter()
        .map(|t| load_domain(t))
        .collect::<Result<_>>()?;

    // deterministic (variant, seed) order: rows print as computed
    let mut rows = vec![("full", Vec::new())];
    rows.extend(variant_keys.iter().map(|k| (*k, Vec::new())));
    for (name, accs) in &mut rows {
        for s in 0..seeds {
            let mut c = cfg.clone();
            if *name != "full" {
                c.set(name, "true").map_err(|e| UdgError::Config(config_msg(e)))?;
            }
            c.seed = cfg.seed + s;
            let run = train(&c, &source, TrainOptions::default())?;
            let mut sum = 0.0;
            for ds in &loaded {
                sum += evaluate(&run.model.backbone, ds)?.accuracy;
            }
            accs.push(sum / loaded.len() as f64);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = if accs.len() > 1 {
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
                / (accs.len() - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        println!("{name} mean={mean} std={std}");
    }
    Ok(())
}

fn cmd_gen_data(args: &[String]) -> Result<()> {
    if wants_help(args) {
        print!("{GEN_DATA_HELP}");
        return Ok(());
    }
    let pairs = parse_flags(args)?;
    let mut spec = None;
    let mut out = None;
    for (k, v) in &pairs {
        match k.as_str() {
            "spec" => spec = Some(v.clone()),
            "out" => out = Some(v.clone()),
            other => return Err(UdgError::Usage(format!("gen-data does not take --{other}"))),
        }
    }
    let Some(spec) = spec else {
        return Err(UdgError::Usage("gen-data needs --spec SPEC".into()));
    };
    let Some(out) = out else {
        return Err(UdgError::Usage("gen-data needs --out PATH".into()));
    };
    let ds = gen_from_spec(&spec)?;
    ds.save(&out)?;
    println!("wrote {} examples ({} features, {} classes) to {out}", ds.n, ds.d, ds.classes);
    Ok(())
}
