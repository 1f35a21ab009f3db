use std::fs;
use std::path::{Path, PathBuf};

use mhmtl_core::autograd::Graph;
use mhmtl_core::data::{
    generate, load_manifest, read_gray, resize_bilinear, sample_seed, save_dataset, write_gray, GrayImage, Sample,
};
use mhmtl_core::train::eval::decode;
use mhmtl_core::train::{evaluate, Checkpoint, ModelPredictor, OraclePredictor, Prediction, Predictor, Trainer};
use mhmtl_core::{ConfigError, Model, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{RunConfig, SynthConfig};
use crate::CliError;

pub const REPORT_FILE: &str = "eval_report.txt";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const MASK_FILE: &str = "mask.png";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seed of the validation split, kept apart from the training seed.
fn val_seed(seed: u64) -> u64 {
    sample_seed(seed, "validation", 0)
}

fn synth_samples(tasks: &[TaskSpec], seed: u64, count: usize, synth: &SynthConfig) -> Result<Vec<Sample>, CliError> {
    let mut out = Vec::new();
    for t in tasks {
        out.extend(generate(seed, t, count, synth.sizes())?);
    }
    Ok(out)
}

fn synth_section(cfg: &RunConfig) -> Result<&SynthConfig, ConfigError> {
    cfg.data
        .synth
        .as_ref()
        .ok_or_else(|| ConfigError::invalid("data.synth", "section required to generate data"))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let synth = synth_section(cfg)?;
    let seed = seed.unwrap_or(cfg.seed());
    let train = synth_samples(cfg.tasks(), seed, synth.count, synth)?;
    let manifest = save_dataset(out, cfg.tasks(), &train)?;
    println!("wrote {} samples to {}", train.len(), manifest.display());
    if synth.val_count > 0 {
        let val = synth_samples(cfg.tasks(), val_seed(seed), synth.val_count, synth)?;
        let manifest = save_dataset(&out.join("val"), cfg.tasks(), &val)?;
        println!("wrote {} samples to {}", val.len(), manifest.display());
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, path: &Path) -> Result<Vec<Sample>, CliError> {
    let m = load_manifest(path)?;
    cfg.check_tasks(&m.tasks)?;
    Ok(m.samples)
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let out: PathBuf = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| ConfigError::invalid("output_dir", "set it in the config or pass --out"))?;
    let (train, val) = match (&cfg.data.manifest, &cfg.data.synth) {
        (Some(path), _) => {
            let val = match &cfg.data.val_manifest {
                Some(p) => load_split(cfg, p)?,
                None => Vec::new(),
            };
            (load_split(cfg, path)?, val)
        }
        (None, Some(synth)) => {
            let train = synth_samples(cfg.tasks(), cfg.seed(), synth.count, synth)?;
            let val = if synth.val_count > 0 {
                synth_samples(cfg.tasks(), val_seed(cfg.seed()), synth.val_count, synth)?
            } else {
                Vec::new()
            };
            (train, val)
        }
        (None, None) => {
            return Err(ConfigError::invalid("data", "give `manifest` or a `[data.synth]` section").into());
        }
    };
    let model = Model::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.optim.clone(), &train)?
        .with_validation(val)?
        .with_output_dir(&out)?;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        trainer.resume(&ckpt)?;
        log::info!("resumed from {} at step {}", path.display(), ckpt.step);
    }
    let summary = trainer.run()?;
    println!(
        "trained {} steps; last loss {:.6}; best score {:.6}; outputs in {}",
        summary.steps,
        summary.last_loss.unwrap_or(f64::NAN),
        summary.best_score.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: Option<&RunConfig>) -> Result<Model<f32>, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(cfg) = cfg {
        ckpt.verify(&cfg.model)?;
    }
    Ok(ckpt.build_model()?)
}

pub fn eval(checkpoint: Option<&Path>, manifest: &Path, cfg: Option<&RunConfig>, out: &Path) -> Result<(), CliError> {
    let model = checkpoint.map(|p| load_checkpoint(p, cfg)).transpose()?;
    let data = load_manifest(manifest)?;
    let report = match &model {
        Some(model) => {
            for t in &data.tasks {
                match model.config().task(&t.id) {
                    Some(m) if m == t => {}
                    _ => {
                        return Err(ConfigError::invalid(
                            format!("tasks.{}", t.id),
                            "manifest subtask is not a head of the checkpoint",
                        )
                        .into())
                    }
                }
            }
            evaluate(&ModelPredictor::new(model), &data.tasks, &data.samples)?
        }
        None => evaluate(&OraclePredictor as &dyn Predictor, &data.tasks, &data.samples)?,
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_string()).map_err(io_err(&path))?;
    print!("{report}");
    Ok(())
}

pub fn predict(
    checkpoint: &Path,
    image: &Path,
    subtask: &str,
    cfg: Option<&RunConfig>,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint, cfg)?;
    let task = model.task(subtask)?.clone();
    let img = read_gray(image)?;
    let orig = img.size();
    let size = model.config().input_size;
    let pixels = resize_bilinear(&img.to_unit(), orig, size);
    let mut g = Graph::new();
    let x = g.constant(&model.batch_input(&[&pixels])?);
    // Inference mode: dropout is off and the generator is never drawn from.
    let y = model.forward(&mut g, x, subtask, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let prediction = decode(&task, g.value(y), size, orig);

    fs::create_dir_all(out).map_err(io_err(out))?;
    let [h0, w0] = orig;
    let body = match prediction {
        Prediction::Mask(mask) => {
            let path = out.join(MASK_FILE);
            write_gray(&path, &GrayImage::new(h0, w0, mask)?)?;
            json!({ "mask_path": MASK_FILE })
        }
        Prediction::Class(probs) => {
            let class = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
            json!({ "class": class, "probs": probs })
        }
        Prediction::Box { bbox, score } => {
            let [cx, cy, w, h] = bbox;
            let px = [
                (cx - w / 2.0) * w0 as f64,
                (cy - h / 2.0) * h0 as f64,
                (cx + w / 2.0) * w0 as f64,
                (cy + h / 2.0) * h0 as f64,
            ];
            json!({ "box": bbox, "box_px": px, "score": score })
        }
        Prediction::Keypoints(k) => {
            let px: Vec<[f64; 2]> = k.iter().map(|p| [p[0] * w0 as f64, p[1] * h0 as f64]).collect();
            json!({ "keypoints": px })
        }
    };
    let mut doc = json!({
        "subtask": subtask,
        "kind": task.kind,
        "orig_size": orig,
    });
    if let (Some(doc), serde_json::Value::Object(body)) = (doc.as_object_mut(), body) {
        doc.extend(body);
    }
    let path = out.join(PREDICTION_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("prediction serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}
