//! Command-line surface binding the library into reproducible runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cdcn::data::{
    generate_synthetic_dataset, load_image_rgb, load_pair_dataset, procedural_sharp,
    save_image_rgb, DatasetLayout, Split, SyntheticSpec,
};
use cdcn::error::CdcnError;
use cdcn::eval::{estimate_field, evaluate, export_kernel_overlay, restore_image};
use cdcn::loss::LossConfig;
use cdcn::model::{audit_resolutions, build_model, ModelConfig, Precision};
use cdcn::pmpb::{dense_oracle_reblur, MotionFamily, TapField};
use cdcn::tensor::{standard_suite, Tensor};
use cdcn::trainer::{load_checkpoint, save_checkpoint, train_run, TrainConfig};

#[derive(Parser)]
#[command(
    name = "cdcn",
    about = "Blind single-image motion deblurring with per-pixel kernel-field estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Gopro,
    Hide,
    FlatPairs,
}

impl From<LayoutArg> for DatasetLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Gopro => DatasetLayout::Gopro,
            LayoutArg::Hide => DatasetLayout::Hide,
            LayoutArg::FlatPairs => DatasetLayout::FlatPairs,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Linear,
    Polyline,
    Rotation,
}

impl std::fmt::Display for FamilyArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyArg::Linear => "linear",
            FamilyArg::Polyline => "polyline",
            FamilyArg::Rotation => "rotation",
        })
    }
}

impl From<FamilyArg> for MotionFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Linear => MotionFamily::GlobalLinear,
            FamilyArg::Polyline => MotionFamily::GlobalPolyline,
            FamilyArg::Rotation => MotionFamily::RotationAboutCenter,
        }
    }
}

/// Overrides shared by subcommands that build a model or a train run. A
/// value given both here and in `--config` resolves to the flag, with a
/// warning.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file with "model", "train" and "loss" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    resblocks: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    /// Drop the PMPB reblurring loss (ablation).
    #[arg(long)]
    no_reblur_loss: bool,
    /// Drop the inverse-kernel path of the CDCR module.
    #[arg(long)]
    no_cdcr: bool,
    /// One level per scale.
    #[arg(long)]
    one_level: bool,
    /// First input / final output only.
    #[arg(long)]
    no_mimo: bool,
}

#[derive(serde::Serialize, serde::Deserialize, Default)]
#[serde(default)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    loss: Option<LossConfig>,
}

/// Fully-resolved settings of one run, written next to its outputs.
#[derive(serde::Serialize)]
struct ResolvedConfig<'a> {
    command: &'a str,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    loss: &'a LossConfig,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(ModelConfig, TrainConfig, LossConfig), CdcnError> {
        let file: FileConfig = match &self.config {
            None => FileConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CdcnError::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CdcnError::Config(format!("{}: {e}", path.display())))?
            }
        };
        let file_train = file.train.is_some();
        let file_model = file.model.is_some();
        let mut model = file.model.unwrap_or_default();
        let mut train = file.train.unwrap_or_default();
        let loss = file.loss.unwrap_or_default();

        fn take<T: PartialEq + Copy + std::fmt::Debug>(
            slot: &mut T,
            flag: Option<T>,
            from_file: bool,
            name: &str,
        ) {
            if let Some(v) = flag {
                if from_file && *slot != v {
                    eprintln!(
                        "warning: --{name} {v:?} overrides config file value {:?}",
                        *slot
                    );
                }
                *slot = v;
            }
        }
        take(&mut train.epochs, self.epochs, file_train, "epochs");
        take(
            &mut train.iters_per_epoch,
            self.iters_per_epoch,
            file_train,
            "iters-per-epoch",
        );
        take(&mut train.batch_size, self.batch, file_train, "batch");
        take(&mut train.patch_size, self.patch, file_train, "patch");
        take(&mut train.seed, self.seed, file_train, "seed");
        take(&mut train.learning_rate, self.lr, file_train, "lr");
        take(&mut train.decay_every, self.decay_every, file_train, "decay-every");
        take(&mut train.eval_every, self.eval_every, file_train, "eval-every");
        take(&mut model.base_channels, self.base_channels, file_model, "base-channels");
        take(&mut model.resblocks, self.resblocks, file_model, "resblocks");
        take(&mut model.scales, self.scales, file_model, "scales");
        if self.no_reblur_loss {
            train.ablation.no_reblur_loss = true;
        }
        if self.no_cdcr {
            train.ablation.no_cdcr = true;
        }
        if self.one_level {
            train.ablation.one_level = true;
        }
        if self.no_mimo {
            train.ablation.no_mimo = true;
        }
        model.validate()?;
        train.validate()?;
        Ok((model, train, loss))
    }
}

fn write_resolved(
    dir: &Path,
    command: &str,
    model: &ModelConfig,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<(), CdcnError> {
    let resolved = ResolvedConfig {
        command,
        model,
        train,
        loss,
    };
    let path = dir.join("resolved-config.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&resolved).expect("configs serialize"),
    )
    .map_err(|e| CdcnError::io(path, e))
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blurred/sharp dataset with ground-truth kernel
    /// fields.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        time_samples: usize,
        #[arg(long, default_value_t = 5.0)]
        max_displacement: f64,
        /// Trajectory families, cycled per sample.
        #[arg(long, value_delimiter = ',', default_values_t = [FamilyArg::Linear, FamilyArg::Polyline, FamilyArg::Rotation])]
        families: Vec<FamilyArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory of sharp source images (PNG).
        #[arg(long, conflicts_with = "procedural")]
        source_dir: Option<PathBuf>,
        /// Generate this many procedural sharp sources instead.
        #[arg(long)]
        procedural: Option<usize>,
        /// Procedural source extent (pixels, square).
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model on a paired dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LayoutArg::FlatPairs)]
        layout: LayoutArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Restore one blurred image with a trained checkpoint.
    Deblur {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Apply a stored kernel field to a sharp image (the PMPB forward
    /// model).
    Reblur {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint over a paired dataset (PSNR / SSIM).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LayoutArg::FlatPairs)]
        layout: LayoutArg,
        /// Directory for the machine-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the estimated sampling points of an image over the image.
    VisualizeKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid stride in kernel-field pixels.
        #[arg(long, default_value_t = 4)]
        stride: usize,
    },
    /// Print the resolution map of the wiring and check every fusion.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input extent the audit is evaluated at.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the finite-difference gradient suite over every op.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn run() -> Result<(), CdcnError> {
    let cli = Cli::parse();
    cdcn::init_threads_from_env();
    match cli.command {
        Command::Simulate {
            out,
            count,
            time_samples,
            max_displacement,
            families,
            seed,
            source_dir,
            procedural,
            size,
        } => {
            let sources: Vec<Tensor<f32>> = match (&source_dir, procedural) {
                (Some(dir), _) => {
                    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                        .map_err(|e| CdcnError::io(dir, e))?
                        .filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|p| p.extension().is_some_and(|x| x == "png"))
                        .collect();
                    files.sort();
                    if files.is_empty() {
                        return Err(CdcnError::Dataset(format!(
                            "no PNG sources in {}",
                            dir.display()
                        )));
                    }
                    files
                        .iter()
                        .map(|p| load_image_rgb(p))
                        .collect::<Result<_, _>>()?
                }
                (None, n) => {
                    let n = n.unwrap_or(4);
                    (0..n)
                        .map(|i| procedural_sharp(size, size, seed ^ (0xbeef + i as u64)))
                        .collect()
                }
            };
            let spec = SyntheticSpec {
                count,
                time_samples,
                max_displacement,
                families: families.into_iter().map(Into::into).collect(),
                seed,
            };
            let manifest = generate_synthetic_dataset(&spec, &sources, &out)?;
            let spec_path = out.join("simulate-config.json");
            std::fs::write(
                &spec_path,
                serde_json::to_string_pretty(&spec).expect("spec serializes"),
            )
            .map_err(|e| CdcnError::io(spec_path, e))?;
            println!("wrote {} pairs to {}", manifest.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            layout,
            out,
            cfg,
        } => {
            let (model, train, loss) = cfg.resolve()?;
            std::fs::create_dir_all(&out).map_err(|e| CdcnError::io(&out, e))?;
            write_resolved(&out, "train", &model, &train, &loss)?;
            let manifest = load_pair_dataset(&data, layout.into(), Split::Train)?;
            let outcome = match model.precision {
                Precision::F32 => train_run::<f32>(&train, &model, &manifest)?,
                Precision::F64 => train_run::<f64>(&train, &model, &manifest)?,
            };
            let ckpt_path = out.join("checkpoint.cdcn");
            save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
            outcome.log.save(&out.join("train_log.jsonl"))?;
            if let Some(abort) = outcome.aborted {
                return Err(CdcnError::NonFinite {
                    what: abort.what,
                    step: abort.step,
                });
            }
            println!(
                "trained {} steps; checkpoint at {}",
                outcome.log.records.len(),
                ckpt_path.display()
            );
            Ok(())
        }
        Command::Deblur {
            checkpoint,
            input,
            output,
        } => {
            if !input.is_file() {
                return Err(CdcnError::Dataset(format!(
                    "input image {} does not exist",
                    input.display()
                )));
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let params = ckpt.restore_model::<f32>()?;
            let image: Tensor<f32> = load_image_rgb(&input)?;
            let restored = restore_image(&params, &ckpt.model, &image);
            let clamped = restored.map(|v| v.clamp(0.0, 1.0));
            save_image_rgb(&clamped, &output)?;
            let run_record = output.with_extension("run.json");
            std::fs::write(
                &run_record,
                serde_json::to_string_pretty(&serde_json::json!({
                    "command": "deblur",
                    "checkpoint": checkpoint,
                    "input": input,
                    "model": ckpt.model,
                }))
                .expect("serializes"),
            )
            .map_err(|e| CdcnError::io(run_record, e))?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Reblur {
            field,
            input,
            output,
        } => {
            if !input.is_file() {
                return Err(CdcnError::Dataset(format!(
                    "input image {} does not exist",
                    input.display()
                )));
            }
            let taps = TapField::read_from(&field)?;
            let sharp: Tensor<f64> = load_image_rgb(&input)?;
            let s = sharp.shape();
            if s.h != taps.h || s.w != taps.w {
                return Err(CdcnError::Dataset(format!(
                    "field is {}x{} but image is {}x{}",
                    taps.h, taps.w, s.h, s.w
                )));
            }
            let blurred = dense_oracle_reblur(&sharp, &taps);
            save_image_rgb(&blurred, &output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            layout,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let manifest = load_pair_dataset(&data, layout.into(), Split::Test)?;
            let report = evaluate(&ckpt, &manifest)?;
            print!("{report}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CdcnError::io(&dir, e))?;
                let path = dir.join("eval-report.jsonl");
                std::fs::write(&path, report.to_jsonl()).map_err(|e| CdcnError::io(path, e))?;
                write_resolved(&dir, "evaluate", &ckpt.model, &ckpt.train, &ckpt.loss)?;
            }
            Ok(())
        }
        Command::VisualizeKernels {
            checkpoint,
            input,
            out,
            stride,
        } => {
            if !input.is_file() {
                return Err(CdcnError::Dataset(format!(
                    "input image {} does not exist",
                    input.display()
                )));
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let params = ckpt.restore_model::<f32>()?;
            let image: Tensor<f32> = load_image_rgb(&input)?;
            let field = estimate_field(&params, &ckpt.model, &image)?;
            std::fs::create_dir_all(&out).map_err(|e| CdcnError::io(&out, e))?;
            let table = cdcn::cdcr::kernel_field_table(&field, stride);
            let table_path = out.join("kernels.txt");
            std::fs::write(&table_path, &table).map_err(|e| CdcnError::io(table_path, e))?;
            export_kernel_overlay(&image, &field, stride, &out.join("overlay.png"))?;
            write_resolved(&out, "visualize-kernels", &ckpt.model, &ckpt.train, &ckpt.loss)?;
            println!("wrote overlay and kernel table to {}", out.display());
            Ok(())
        }
        Command::Audit { cfg, size } => {
            let (model, train, loss) = cfg.resolve()?;
            let mut model = model;
            let mut loss = loss;
            train.ablation.apply(&mut model, &mut loss);
            let report = audit_resolutions(&model, size, size);
            print!("{report}");
            let params = build_model::<f32>(&model, train.seed)?;
            println!("{}", params.summary());
            if report.ok() {
                Ok(())
            } else {
                Err(CdcnError::Config(format!(
                    "{} resolution mismatches",
                    report.mismatches.len()
                )))
            }
        }
        Command::Gradcheck { instances } => {
            if instances == 0 {
                return Err(CdcnError::Config("instances must be >= 1".into()));
            }
            let reports = standard_suite(instances);
            let mut ok = true;
            for r in &reports {
                println!("{r}");
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(CdcnError::Eval("gradient checks failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
