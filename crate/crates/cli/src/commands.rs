use std::path::{Path, PathBuf};

use corrvae::config::RunConfig;
use corrvae::datagen::Dataset;
use corrvae::eval::evaluate;
use corrvae::model::metrics_csv;
use corrvae::moo::{generate, reports_csv, traverse, ConstraintSpec, SolverOptions, TraverseTarget};
use corrvae::numcore::Rng;
use corrvae::pipeline::{self, streams, TEST_FILE, TRAIN_FILE};
use corrvae::CorrVae;
use serde_json::{json, Map, Value};

use crate::{Command, Common, Failure};

type Outcome<T = ()> = Result<T, Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Config precedence: `--config` file, else the checkpoint's, else defaults;
/// then `--seed`; then `--set` overrides; then the command's own flags.
fn resolve_config(common: &Common, from_ckpt: Option<&Value>, extra: &[String]) -> Outcome<RunConfig> {
    let mut flat: Map<String, Value> = match (&common.config, from_ckpt) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Failure::Usage("config must be a JSON object".into())),
                Err(e) => return Err(Failure::Usage(format!("config {}: {e}", path.display()))),
            }
        }
        (None, Some(Value::Object(m))) => m.clone(),
        _ => Map::new(),
    };
    if let Some(seed) = common.seed {
        flat.insert("seed".into(), json!(seed));
    }
    if !flat.contains_key("seed") {
        return Err(Failure::Usage(
            "a seed is required (--seed or a config with `seed`)".into(),
        ));
    }
    let base = RunConfig::from_flat(&flat).map_err(|e| Failure::Usage(e.to_string()))?;
    let overrides: Vec<&String> = common.set.iter().chain(extra).collect();
    let mut cfg = base
        .with_overrides(&overrides)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.out = Some(common.out.display().to_string());
    Ok(cfg)
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Outcome<Self> {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Outcome {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
    }

    /// Merged config and manifest; called last so the file list is complete.
    fn finish(mut self, command: &str, argv: &[String], cfg: &RunConfig, inputs: Value) -> Outcome {
        self.write("config.json", cfg.to_json_string())?;
        self.files.push("manifest.json".into());
        let manifest = json!({
            "command": command,
            "argv": argv,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "streams": {
                "init": streams::INIT,
                "train": streams::TRAIN,
                "eval": streams::EVAL,
                "generate": streams::GENERATE,
                "traverse": streams::TRAVERSE,
            },
            "config": cfg.to_flat(),
            "inputs": inputs,
            "outputs": self.files,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.dir.join("manifest.json"), text).map_err(runtime)
    }
}

fn load_checkpoint(path: &Path) -> Outcome<(CorrVae, Value)> {
    let (model, extra) = CorrVae::load(path)?;
    Ok((model, extra.get("config").cloned().unwrap_or(Value::Null)))
}

fn load_split(dir: &Path, file: &str) -> Outcome<Dataset> {
    Ok(Dataset::read(&dir.join(file))?)
}

pub fn dispatch(command: Command, argv: &[String]) -> Outcome {
    match command {
        Command::GenData {
            common,
            n,
            test_n,
            side,
            with_shape,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = n {
                extra.push(format!("data.n={n}"));
            }
            if let Some(t) = test_n {
                extra.push(format!("data.test_n={t}"));
            }
            if let Some(s) = side {
                extra.push(format!("data.side={s}"));
            }
            if with_shape {
                extra.push("data.with_shape=true".into());
            }
            let cfg = resolve_config(&common, None, &extra)?;
            let (train, test) = pipeline::make_splits(&cfg)?;
            let mut out = Output::create(&common.out)?;
            train.write(&out.path(TRAIN_FILE))?;
            test.write(&out.path(TEST_FILE))?;
            eprintln!("wrote {} training and {} test samples", train.len(), test.len());
            out.finish("gen-data", argv, &cfg, json!({}))
        }
        Command::Train { common, data } => {
            let mut extra = Vec::new();
            if let Some(d) = &data {
                extra.push(format!("data.path={}", d.display()));
            }
            let cfg = resolve_config(&common, None, &extra)?;
            let train = match &cfg.data.path {
                Some(dir) => load_split(Path::new(dir), TRAIN_FILE)?,
                None => pipeline::make_splits(&cfg)?.0,
            };
            let (model, history) = pipeline::train_new::<f64>(&cfg, &train, &mut |r| {
                eprintln!(
                    "epoch {:>3}  tau {:.3}  total {:.3}  recon {:.3}  l3 {:.4}",
                    r.epoch, r.tau, r.loss.total, r.loss.recon, r.loss.l3
                );
            })?;
            let mut out = Output::create(&common.out)?;
            let extra = json!({"config": cfg.to_flat(), "epochs": history.len()});
            model.save(&out.path("model.ckpt"), &extra)?;
            out.write("metrics.csv", metrics_csv(&history))?;
            let (hard, prob) = (out.path("mask_hard.csv"), out.path("mask_prob.csv"));
            model.mask.export_csv(&model.spec.property_names, &hard, &prob)?;
            out.finish("train", argv, &cfg, json!({"data": cfg.data.path}))
        }
        Command::Eval { common, ckpt, data } => {
            let (model, ckpt_cfg) = load_checkpoint(&ckpt)?;
            let cfg = resolve_config(&common, Some(&ckpt_cfg), &[])?;
            let test = match data.as_deref() {
                Some(dir) => load_split(dir, TEST_FILE)?,
                None => pipeline::make_splits(&cfg)?.1,
            };
            let expected = pipeline::expected_pairs_for(&model.spec.property_names);
            let report = evaluate(
                &model,
                &test,
                &expected,
                &cfg,
                &mut Rng::derive(cfg.seed, streams::EVAL),
            )?;
            let mut out = Output::create(&common.out)?;
            out.write("eval.json", report.to_json())?;
            out.write("eval.csv", report.to_csv())?;
            out.write("mi.csv", report.mi_csv())?;
            eprint!("{}", report.to_csv());
            out.finish("eval", argv, &cfg, json!({"ckpt": ckpt, "data": data}))
        }
        Command::Traverse {
            common,
            ckpt,
            index,
            lo,
            hi,
            steps,
        } => {
            let (model, ckpt_cfg) = load_checkpoint(&ckpt)?;
            let cfg = resolve_config(&common, Some(&ckpt_cfg), &[])?;
            let target = parse_index(&index)?;
            if !(lo <= hi) {
                return Err(Failure::Usage(format!("--lo {lo} exceeds --hi {hi}")));
            }
            let opts = SolverOptions::from(&cfg.generate);
            let track = traverse(&model, target, (lo, hi), steps, None, &opts)?;
            let mut out = Output::create(&common.out)?;
            let mut csv = format!("step,value,{}\n", model.spec.property_names.join(","));
            for (k, s) in track.iter().enumerate() {
                s.image.write_pgm(&out.path(&format!("step_{k:03}.pgm")))?;
                let props = match &s.oracle {
                    Some(o) => o.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
                    None => vec![""; model.spec.properties()].join(","),
                };
                csv.push_str(&format!("{k},{},{props}\n", s.value));
            }
            out.write("traverse.csv", csv)?;
            out.finish("traverse", argv, &cfg, json!({"ckpt": ckpt, "index": index}))
        }
        Command::Generate {
            common,
            ckpt,
            spec,
            batch,
        } => {
            let (model, ckpt_cfg) = load_checkpoint(&ckpt)?;
            let cfg = resolve_config(&common, Some(&ckpt_cfg), &[])?;
            if batch == 0 {
                return Err(Failure::Usage("--batch must be positive".into()));
            }
            let request = ConstraintSpec::load(&spec, &model.spec.property_names)?;
            let opts = SolverOptions::from(&cfg.generate);
            let g = generate(
                &model,
                &request,
                batch,
                &mut Rng::derive(cfg.seed, streams::GENERATE),
                &opts,
            )?;
            let mut out = Output::create(&common.out)?;
            for (k, img) in g.images.iter().enumerate() {
                img.write_pgm(&out.path(&format!("img_{k:03}.pgm")))?;
            }
            out.write(
                "report.json",
                serde_json::to_string_pretty(&g.reports).map_err(runtime)?,
            )?;
            out.write("report.csv", reports_csv(&g.reports))?;
            let converged = g.reports.iter().filter(|r| r.converged).count();
            eprintln!("{converged}/{batch} images converged");
            out.finish("generate", argv, &cfg, json!({"ckpt": ckpt, "spec": spec}))
        }
        Command::InspectMask { common, ckpt } => {
            let (model, ckpt_cfg) = load_checkpoint(&ckpt)?;
            let cfg = resolve_config(&common, Some(&ckpt_cfg), &[])?;
            let names = &model.spec.property_names;
            let mut out = Output::create(&common.out)?;
            let (hard, prob) = (out.path("mask_hard.csv"), out.path("mask_prob.csv"));
            model.mask.export_csv(names, &hard, &prob)?;
            let pairs: Vec<[&str; 2]> = corrvae::maskpool::correlation_pairs(&model.hard_mask())?
                .into_iter()
                .map(|(i, j)| [names[i].as_str(), names[j].as_str()])
                .collect();
            for [a, b] in &pairs {
                println!("{a} ~ {b}");
            }
            out.write("pairs.json", serde_json::to_string_pretty(&pairs).map_err(runtime)?)?;
            out.finish("inspect-mask", argv, &cfg, json!({"ckpt": ckpt}))
        }
    }
}

fn parse_index(s: &str) -> Outcome<TraverseTarget> {
    let bad = || Failure::Usage(format!("--index must be w:<i> or wprime:<j>, got `{s}`"));
    let (kind, i) = s.split_once(':').ok_or_else(bad)?;
    let i: usize = i.parse().map_err(|_| bad())?;
    match kind {
        "w" => Ok(TraverseTarget::W(i)),
        "wprime" => Ok(TraverseTarget::WPrime(i)),
        _ => Err(bad()),
    }
}
