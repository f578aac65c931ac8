//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use stdiffusion::checkpoint::{self, DataInfo, SampleManifest, SampleSet};
use stdiffusion::config::RunConfig;
use stdiffusion::data::{self, Scaling};
use stdiffusion::denoiser::{self, Denoiser};
use stdiffusion::lma::kernel_weight_summary;
use stdiffusion::metrics::evaluate_all;
use stdiffusion::viz::{self, Pca};
use stdiffusion::wavelet::cascade;
use stdiffusion::{Error, Tensor};

use crate::Common;

/// Resolution of the wavelet function table: samples every `2^-CASCADE_ITERATIONS`.
const CASCADE_ITERATIONS: u32 = 12;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => f.write_str(m),
            Self::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::MissingFile(_) => Self::Usage(e.to_string()),
            other => Self::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the config".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> CliResult {
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn train(common: &Common) -> CliResult {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    write_resolved(&dir, &cfg)?;
    let path = cfg
        .data
        .path
        .clone()
        .ok_or_else(|| CliError::Usage("data.path is not set in the config".into()))?;
    let series = data::load_csv(&path, cfg.data.feature_columns.as_deref())?;
    let batch = data::make_windows(&series, cfg.data.window, cfg.data.stride)?;
    info!(
        "training on {} windows of length {} with {} features",
        batch.len(),
        batch.window_len(),
        batch.channels()
    );
    let info = DataInfo {
        feature_names: series.feature_names.clone(),
        scaling: batch.scaling.clone(),
    };
    let windows = Tensor::from_array3(&batch.windows);
    let mut model = Denoiser::new(&cfg, batch.channels())?;
    let ckpt = dir.join("checkpoint");
    let every = cfg.train.checkpoint_every;
    let state = denoiser::train_with(&mut model, &windows, cfg.train.epochs, cfg.seed, |m, s| {
        if every > 0 && s.epoch % every == 0 {
            checkpoint::save_checkpoint(&ckpt, m, &info, s.step, s.epoch)?;
        }
        Ok(())
    })?;
    checkpoint::save_checkpoint(&ckpt, &model, &info, state.step, state.epoch)?;
    let mut curve = String::from("step,epoch,denoise,regularizer,total\n");
    for r in &state.history {
        curve.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.denoise, r.regularizer, r.total));
    }
    write_text(&dir.join("loss_curve.csv"), &curve)?;
    info!("checkpoint written to {}", ckpt.display());
    Ok(())
}

pub fn sample(ckpt: &Path, n: usize, common: &Common) -> CliResult {
    if common.config.is_some() {
        warn!("--config is ignored by `sample`; the checkpoint's config is used");
    }
    let (model, manifest) = checkpoint::load_checkpoint(ckpt)?;
    let mut cfg = manifest.config.clone();
    apply_overrides(&mut cfg, common);
    let dir = out_dir(&cfg)?;
    write_resolved(&dir, &cfg)?;
    let scaled = model.sample(n, cfg.seed)?;
    let windows = match &manifest.data.scaling {
        Some(s) => Tensor::from_array3(&s.unscale(&scaled.to_array3())),
        None => {
            warn!("checkpoint has no scaling metadata; writing samples in model units");
            scaled
        }
    };
    let set = SampleSet {
        manifest: SampleManifest {
            shape: [n, model.window, model.channels],
            dtype: "f32".into(),
            feature_names: manifest.data.feature_names.clone(),
            scaling: manifest.data.scaling.clone(),
            config_hash: manifest.config_hash.clone(),
            seed: Some(cfg.seed),
        },
        windows,
    };
    set.save(&dir)?;
    info!("wrote {n} samples to {}", dir.display());
    Ok(())
}

/// Real windows mapped to `[0, 1]`, with the scaling used.
fn load_real(path: &Path, window: usize, cfg: &RunConfig, fallback: Option<&Scaling>) -> CliResult<(Tensor, Scaling)> {
    if path.is_dir() {
        let set = SampleSet::load(path)?;
        let scaling = match set.manifest.scaling.clone().or_else(|| fallback.cloned()) {
            Some(s) => s,
            None => {
                let k = set.windows.dim(2);
                let flat = set.windows.clone().reshape(&[set.windows.numel() / k.max(1), k]);
                Scaling::fit(&flat.to_array2(), &set.manifest.feature_names)
            }
        };
        let x = set.scaled(&scaling)?;
        return Ok((x, scaling));
    }
    let series = data::load_csv(path, cfg.data.feature_columns.as_deref())?;
    let batch = data::make_windows(&series, window, cfg.data.stride)?;
    let scaling = batch.scaling.clone().ok_or(Error::MissingScale)?;
    Ok((Tensor::from_array3(&batch.windows), scaling))
}

fn load_pair(real: &Path, samples: &Path, cfg: &RunConfig) -> CliResult<(Tensor, Tensor)> {
    let set = SampleSet::load(samples)?;
    let (r, scaling) = load_real(real, set.manifest.shape[1], cfg, set.manifest.scaling.as_ref())?;
    if r.dim(2) != set.manifest.shape[2] {
        return Err(CliError::Runtime(Error::Shape(format!(
            "real data has {} features, samples have {}",
            r.dim(2),
            set.manifest.shape[2]
        ))));
    }
    let s = set.scaled(&scaling)?;
    Ok((r, s))
}

pub fn evaluate(real: &Path, samples: &Path, trials: Option<usize>, common: &Common) -> CliResult {
    let mut cfg = resolve_config(common)?;
    if let Some(t) = trials {
        cfg.eval.trials = t;
    }
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    write_resolved(&dir, &cfg)?;
    let (r, s) = load_pair(real, samples, &cfg)?;
    info!("evaluating {} synthetic against {} real windows", s.dim(0), r.dim(0));
    let report = evaluate_all(&r, &s, &cfg, cfg.seed)?;
    write_text(&dir.join("report.json"), &report.to_json()?)?;
    let table = report.to_table();
    write_text(&dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn decompose(dataset: Option<&Path>, ckpt: Option<&Path>, common: &Common) -> CliResult {
    let (model, stored_scaling, mut cfg) = match ckpt {
        Some(c) => {
            let (m, manifest) = checkpoint::load_checkpoint(c)?;
            (Some(m), manifest.data.scaling, manifest.config)
        }
        None => (None, None, resolve_config(common)?),
    };
    apply_overrides(&mut cfg, common);
    let dir = out_dir(&cfg)?;
    write_resolved(&dir, &cfg)?;
    let path = dataset
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| CliError::Usage("no dataset given and data.path is not set".into()))?;
    let series = data::load_csv(&path, cfg.data.feature_columns.as_deref())?;
    let model = match model {
        Some(m) => m,
        None => Denoiser::new(&cfg, series.features())?,
    };
    let batch = data::make_windows(&series, model.window, cfg.data.stride)?;
    let x = match stored_scaling.filter(|s| s.features() == batch.channels()) {
        Some(s) => Tensor::from_array3(&s.scale(&data::unscale(&batch)?)),
        None => Tensor::from_array3(&batch.windows),
    };
    if x.dim(2) != model.channels {
        return Err(CliError::Runtime(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            x.dim(2),
            model.channels
        ))));
    }
    let dec = model.lma.decompose_tensor(&model.store, &x)?;
    let (n, l, k) = (x.dim(0), x.dim(1), x.dim(2));
    let mut comps = String::from("window,t,feature,input,trend,seasonal\n");
    for w in 0..n {
        for t in 0..l {
            for j in 0..k {
                let i = (w * l + t) * k + j;
                comps.push_str(&format!(
                    "{w},{t},{},{},{},{}\n",
                    series.feature_names[j],
                    x.data()[i],
                    dec.trend.data()[i],
                    dec.seasonal.data()[i]
                ));
            }
        }
    }
    write_text(&dir.join("components.csv"), &comps)?;
    let affine = serde_json::json!({
        "feature_names": series.feature_names,
        "gamma": dec.gamma,
        "beta": dec.beta,
        "kernels": model.lma.bank.kernels(),
    });
    write_text(&dir.join("affine.json"), &serde_json::to_string_pretty(&affine).map_err(Error::from)?)?;
    let summary = kernel_weight_summary(&dec.weights)?;
    let mut kw = String::from("feature");
    for w in model.lma.bank.kernels() {
        kw.push_str(&format!(",k{w}"));
    }
    kw.push('\n');
    for (name, row) in series.feature_names.iter().zip(&summary) {
        kw.push_str(name);
        for v in row {
            kw.push_str(&format!(",{v}"));
        }
        kw.push('\n');
    }
    write_text(&dir.join("kernel_weights.csv"), &kw)?;
    let f = cascade(&model.seasonal.filter.values(&model.store), CASCADE_ITERATIONS)?;
    let mut table = String::from("x,phi,psi\n");
    for ((x, p), s) in f.x.iter().zip(&f.phi).zip(&f.psi) {
        table.push_str(&format!("{x},{p},{s}\n"));
    }
    write_text(&dir.join("wavelet.csv"), &table)?;
    Ok(())
}

pub fn plot(real: &Path, samples: &Path, common: &Common) -> CliResult {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    write_resolved(&dir, &cfg)?;
    let (r, s) = load_pair(real, samples, &cfg)?;
    if r.dim(0) == 0 || s.dim(0) == 0 {
        return Err(CliError::Runtime(Error::Empty("corpus")));
    }
    let pc = &cfg.plot;
    let rs = viz::subsample(&r, pc.max_points, cfg.seed);
    let ss = viz::subsample(&s, pc.max_points, cfg.seed.wrapping_add(1));
    let (rr, sr) = (viz::flatten_windows(&rs), viz::flatten_windows(&ss));

    let pca = Pca::fit(&rr)?;
    let (pr, ps) = (pca.project(&rr), pca.project(&sr));
    write_text(&dir.join("pca.txt"), &viz::points_table(&[("real", &pr), ("synth", &ps)]))?;
    viz::render_scatter(&dir.join("pca.svg"), "PCA", &pr, &ps)?;

    let pooled: Vec<Vec<f64>> = rr.iter().chain(&sr).cloned().collect();
    let emb = viz::tsne(&pooled, pc.perplexity, pc.tsne_iterations, cfg.seed)?;
    let (er, es) = emb.split_at(rr.len());
    write_text(&dir.join("tsne.txt"), &viz::points_table(&[("real", er), ("synth", es)]))?;
    viz::render_scatter(&dir.join("tsne.svg"), "t-SNE", er, es)?;

    let curves = viz::density_curves(&r, &s, pc.density_points)?;
    write_text(&dir.join("density.txt"), &viz::density_table(&curves))?;
    viz::render_density(&dir.join("density.svg"), &curves)?;
    let summary = serde_json::json!({
        "density_max_gap": curves.max_gap(),
        "density_bandwidth": curves.bandwidth,
        "pca_explained": pca.explained,
    });
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).map_err(Error::from)?)?;
    info!("density max gap {:.4}", curves.max_gap());
    Ok(())
}
