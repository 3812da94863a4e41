use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pansharp::baselines::{bicubic_baseline, brovey_fuse, hpf_fuse, ihs_fuse, sfim_fuse};
use pansharp::dataset::{synthesize_dataset, Dataset, DatasetMeta, SplitCounts};
use pansharp::gp::{solve, FidelityRecord, GpConfig};
use pansharp::gppnn::{
    evaluate, load_checkpoint, save_checkpoint, train as train_network, Ablation, GppnnWeights, NetworkConfig,
    TrainConfig, TrainOutcome,
};
use pansharp::gradsuite::run_suite;
use pansharp::metrics::{evaluate_set, fmt_metric};
use pansharp::observation::{DegradationSpec, ImagePair};
use pansharp::tensor::{read_ten, write_ten};
use pansharp::{Fault, Tensor};
use serde::{Deserialize, Serialize};

use crate::output::{csv_writer, ensure_dir, metric_fields, write_fidelity, write_json, write_ppm, write_trace, RUN_CONFIG};
use crate::{
    AblateArgs, Command, EvalArgs, FuseArgs, GpOpts, GradcheckArgs, NumericFailure, SweepArgs, SynthArgs, TrainArgs,
    TrainOpts,
};

/// Everything needed to repeat a run, written beside its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    /// The command's arguments with every default filled in.
    pub args: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DegradationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
    pub version: String,
}

impl RunConfig {
    fn new(command: &str, args: &impl Serialize) -> Result<Self> {
        Ok(RunConfig {
            command: command.into(),
            args: serde_json::to_value(args)?,
            spec: None,
            network: None,
            training: None,
            version: env!("CARGO_PKG_VERSION").into(),
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_json(&dir.join(RUN_CONFIG), self)
    }
}

/// Rebuilds the command recorded in a run_config.json.
pub fn recorded_command(path: &Path, out: Option<PathBuf>) -> Result<Command> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let rc: RunConfig = serde_json::from_str(&text).with_context(|| format!("{} is not a run config", path.display()))?;
    fn args<T: serde::de::DeserializeOwned>(rc: &RunConfig) -> Result<T> {
        serde_json::from_value(rc.args.clone()).context("run config arguments do not match the command")
    }
    let cmd = match rc.command.as_str() {
        "synth" => Command::Synth(SynthArgs { out: out.unwrap_or(args::<SynthArgs>(&rc)?.out), ..args(&rc)? }),
        "train" => Command::Train(TrainArgs { out: out.unwrap_or(args::<TrainArgs>(&rc)?.out), ..args(&rc)? }),
        "eval" => Command::Eval(EvalArgs { out: out.unwrap_or(args::<EvalArgs>(&rc)?.out), ..args(&rc)? }),
        "fuse" => Command::Fuse(FuseArgs { out: out.unwrap_or(args::<FuseArgs>(&rc)?.out), ..args(&rc)? }),
        "ablate" => Command::Ablate(AblateArgs { out: out.unwrap_or(args::<AblateArgs>(&rc)?.out), ..args(&rc)? }),
        "sweep" => Command::Sweep(SweepArgs { out: out.unwrap_or(args::<SweepArgs>(&rc)?.out), ..args(&rc)? }),
        "gradcheck" => {
            let a: GradcheckArgs = args(&rc)?;
            Command::Gradcheck(GradcheckArgs { out: out.or(a.out.clone()), ..a })
        }
        other => bail!("unknown command {other:?} in {}", path.display()),
    };
    Ok(cmd)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = DegradationSpec::gaussian(a.blur_size, a.sigma, a.ratio, a.bands)?;
    let mut rc = RunConfig::new("synth", a)?;
    rc.spec = Some(spec.clone());
    rc.write(&a.out)?;
    let counts = SplitCounts {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let ds = synthesize_dataset(counts, a.size, &spec, a.seed)?;
    ds.save(&a.out).with_context(|| format!("cannot write dataset to {}", a.out.display()))?;
    log::info!(
        "wrote {} train, {} val, {} test samples to {}",
        a.train,
        a.val,
        a.test,
        a.out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("cannot load dataset {}", dir.display()))
}

fn network_config(o: &TrainOpts, meta: &DatasetMeta, layers: usize, width: usize) -> Result<NetworkConfig> {
    let mut net = NetworkConfig::new(layers, width, meta.spec.ratio, meta.bands)?
        .with_ablation(o.ablation)
        .with_seed(o.seed);
    net.normalization = o.normalization;
    Ok(net)
}

fn train_config(o: &TrainOpts) -> TrainConfig {
    TrainConfig {
        epochs: o.epochs,
        lr: o.lr,
        batch: o.batch,
        patch: o.patch,
        seed: o.seed,
        init: o.init,
        rho_init: o.rho_init,
    }
}

fn train_and_save(ds: &Dataset, net: &NetworkConfig, tc: &TrainConfig, dir: &Path) -> Result<TrainOutcome> {
    ensure_dir(dir)?;
    log::info!(
        "training K={} C={} ablation={} ({} parameters) for {} epochs",
        net.layers,
        net.width,
        net.ablation,
        net.param_count(),
        tc.epochs
    );
    let outcome = train_network(&ds.train, &ds.val, net, tc)?;
    save_checkpoint(dir.join("checkpoint"), &outcome.weights)?;
    write_trace(&dir.join("trace.csv"), &outcome.trace)?;
    Ok(outcome)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let net = network_config(&a.opts, &ds.meta, a.opts.layers, a.opts.width)?;
    let tc = train_config(&a.opts);
    let mut rc = RunConfig::new("train", a)?;
    rc.spec = Some(ds.meta.spec.clone());
    rc.network = Some(net.clone());
    rc.training = Some(tc.clone());
    rc.write(&a.out)?;
    let outcome = train_and_save(&ds, &net, &tc, &a.out)?;
    log::info!("best epoch {} of {}", outcome.best_epoch, tc.epochs);
    Ok(())
}

/// What a method needs besides the images.
struct FuseCtx<'a> {
    weights: Option<&'a GppnnWeights<f32>>,
    spec: Option<&'a DegradationSpec>,
    gp: &'a GpOpts,
}

fn fuse_pair(method: &str, lrms: &Tensor<f32>, pan: &Tensor<f32>, ctx: &FuseCtx) -> Result<(Tensor<f32>, Vec<FidelityRecord>)> {
    let pair = ImagePair {
        lrms: lrms.clone(),
        pan: pan.clone(),
        hrms_gt: None,
    };
    let r = pair.ratio()?;
    let image = match method {
        "bicubic" => bicubic_baseline(lrms, r)?,
        "ihs" => ihs_fuse(lrms, pan, r)?,
        "brovey" => brovey_fuse(lrms, pan, r)?,
        "hpf" => hpf_fuse(lrms, pan, r)?,
        "sfim" => sfim_fuse(lrms, pan, r)?,
        "gp" => {
            let spec = ctx.spec.ok_or_else(|| anyhow!("gp needs a degradation spec"))?;
            let cfg = GpConfig::new(ctx.gp.gp_rho, ctx.gp.gp_iterations, ctx.gp.gp_prox, spec.clone())?;
            let res = solve(lrms, pan, &cfg)?;
            return Ok((res.image.clip(0.0, 1.0), res.trace));
        }
        "gppnn" => {
            let w = ctx.weights.ok_or_else(|| anyhow!("method gppnn needs --checkpoint"))?;
            pansharp::gppnn::fuse(w, lrms, pan)?
        }
        other => bail!("unknown method {other:?}; expected gt, bicubic, ihs, brovey, hpf, sfim, gp or gppnn"),
    };
    Ok((image.clip(0.0, 1.0), Vec::new()))
}

fn load_weights(path: Option<&PathBuf>) -> Result<Option<GppnnWeights<f32>>> {
    path.map(|p| load_checkpoint(p).with_context(|| format!("cannot load checkpoint {}", p.display())))
        .transpose()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let pairs = ds.split(&a.split)?;
    if pairs.is_empty() {
        bail!("split {} of {} is empty", a.split, a.data.display());
    }
    let weights = load_weights(a.checkpoint.as_ref())?;
    let ctx = FuseCtx {
        weights: weights.as_ref(),
        spec: Some(&ds.meta.spec),
        gp: &a.gp,
    };
    let mut rc = RunConfig::new("eval", a)?;
    rc.spec = Some(ds.meta.spec.clone());
    rc.network = weights.as_ref().map(|w| w.config.clone());
    rc.write(&a.out)?;

    let mut w = csv_writer(&a.out.join("metrics.csv"))?;
    w.write_record(["method", "psnr", "ssim", "sam", "ergas"])?;
    for method in &a.methods {
        let fused = pairs
            .iter()
            .map(|p| match method.as_str() {
                "gt" => p.hrms_gt.clone().ok_or_else(|| anyhow!("sample without ground truth")),
                m => Ok(fuse_pair(m, &p.lrms, &p.pan, &ctx)?.0),
            })
            .collect::<Result<Vec<_>>>()?;
        let m = evaluate_set(pairs, &fused)?;
        log::info!("{method}: psnr {}", fmt_metric(m.psnr));
        let [p, s, sa, e] = metric_fields(&m);
        w.write_record([method.as_str(), &p, &s, &sa, &e])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the degradation from a dataset spec.json or a bare spec.
fn read_spec(path: &Path) -> Result<DegradationSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if let Ok(meta) = serde_json::from_str::<DatasetMeta>(&text) {
        return Ok(meta.spec);
    }
    let spec: DegradationSpec =
        serde_json::from_str(&text).with_context(|| format!("{} holds no degradation spec", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let read = |p: &Path| read_ten(p).with_context(|| format!("cannot read {}", p.display()));
    let (lrms, pan) = (read(&a.lrms)?, read(&a.pan)?);
    let (_, bands, lh, _) = lrms.dims4()?;
    let ratio = pan.dims4()?.2 / lh.max(1);
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => DegradationSpec::gaussian(7, 2.0, ratio.max(2), bands)?,
    };
    let weights = load_weights(a.checkpoint.as_ref())?;
    let mut rc = RunConfig::new("fuse", a)?;
    rc.spec = Some(spec.clone());
    rc.network = weights.as_ref().map(|w| w.config.clone());
    rc.write(&a.out)?;

    let ctx = FuseCtx {
        weights: weights.as_ref(),
        spec: Some(&spec),
        gp: &a.gp,
    };
    let (image, trace) = fuse_pair(&a.method, &lrms, &pan, &ctx)?;
    write_ten(a.out.join("fused.ten"), &image)?;
    write_ppm(&a.out.join("fused.ppm"), &image)?;
    if !trace.is_empty() {
        write_fidelity(&a.out.join("gp_trace.csv"), &trace)?;
    }
    log::info!("fused with {} into {}", a.method, a.out.display());
    Ok(())
}

/// Row labels of the ablation table.
pub fn variant_label(ab: Ablation) -> &'static str {
    match ab {
        Ablation::None => "full",
        Ablation::NoProx => "I",
        Ablation::SharedWeights => "II",
        Ablation::FusedBlock => "III",
        Ablation::TransposedKernels => "IV",
    }
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if ds.test.is_empty() {
        bail!("ablation needs a non-empty test split");
    }
    let tc = train_config(&a.opts);
    let mut rc = RunConfig::new("ablate", a)?;
    rc.spec = Some(ds.meta.spec.clone());
    rc.network = Some(network_config(&a.opts, &ds.meta, a.opts.layers, a.opts.width)?);
    rc.training = Some(tc.clone());
    rc.write(&a.out)?;

    let mut w = csv_writer(&a.out.join("ablation.csv"))?;
    w.write_record(["variant", "ablation", "params", "psnr", "ssim", "sam", "ergas", "best_epoch"])?;
    for ab in Ablation::ALL {
        let opts = TrainOpts {
            ablation: ab,
            ..a.opts.clone()
        };
        let net = network_config(&opts, &ds.meta, opts.layers, opts.width)?;
        let outcome = train_and_save(&ds, &net, &tc, &a.out.join(ab.name()))?;
        let m = evaluate(&outcome.weights, &ds.test)?;
        let [p, s, sa, e] = metric_fields(&m);
        w.write_record([
            variant_label(ab).to_string(),
            ab.name().to_string(),
            net.param_count().to_string(),
            p,
            s,
            sa,
            e,
            outcome.best_epoch.to_string(),
        ])?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepBest {
    layers: usize,
    width: usize,
    val_psnr: f64,
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if ds.val.is_empty() {
        bail!("sweep selects by validation PSNR and needs a non-empty val split");
    }
    if a.k_list.is_empty() || a.c_list.is_empty() {
        bail!("sweep needs at least one layer count and one width");
    }
    let tc = train_config(&a.opts);
    let mut rc = RunConfig::new("sweep", a)?;
    rc.spec = Some(ds.meta.spec.clone());
    rc.training = Some(tc.clone());
    rc.write(&a.out)?;

    let mut w = csv_writer(&a.out.join("sweep.csv"))?;
    w.write_record(["layers", "width", "params", "val_psnr", "best_epoch"])?;
    let mut best: Option<SweepBest> = None;
    for &k in &a.k_list {
        for &c in &a.c_list {
            let net = network_config(&a.opts, &ds.meta, k, c)?;
            let outcome = train_and_save(&ds, &net, &tc, &a.out.join(format!("k{k}_c{c}")))?;
            let val = outcome.trace[outcome.best_epoch - 1].val_psnr.unwrap_or(f64::NEG_INFINITY);
            w.write_record([
                k.to_string(),
                c.to_string(),
                net.param_count().to_string(),
                fmt_metric(val),
                outcome.best_epoch.to_string(),
            ])?;
            w.flush()?;
            if best.as_ref().map_or(true, |b| val > b.val_psnr) {
                best = Some(SweepBest {
                    layers: k,
                    width: c,
                    val_psnr: val,
                });
            }
        }
    }
    let best = best.expect("grid is non-empty");
    write_json(&a.out.join("best.json"), &best)?;
    println!("best: K={} C={} val_psnr={}", best.layers, best.width, fmt_metric(best.val_psnr));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let fault = a.inject_fault.then_some(Fault::NegateConvInputGrad);
    if let Some(dir) = &a.out {
        RunConfig::new("gradcheck", a)?.write(dir)?;
    }
    let entries = run_suite(a.seed, fault)?;
    let mut failed = Vec::new();
    for e in &entries {
        let status = if e.passed() { "PASS" } else { "FAIL" };
        println!("{:<16} max_rel_err {:.3e}  tol {:.0e}  {status}", e.op, e.report.max_rel_err(), e.report.tolerance);
        if !e.passed() {
            failed.push(e.op.clone());
        }
    }
    if let Some(dir) = &a.out {
        let mut w = csv_writer(&dir.join("report.csv"))?;
        w.write_record(["op", "max_rel_err", "tolerance", "passed"])?;
        for e in &entries {
            w.write_record([
                e.op.clone(),
                format!("{:e}", e.report.max_rel_err()),
                format!("{:e}", e.report.tolerance),
                e.passed().to_string(),
            ])?;
        }
        w.flush()?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}
