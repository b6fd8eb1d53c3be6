//! Command-line surface binding the library into reproducible runs: phantom
//! generation, two-phase training, 15-subset evaluation, inference on an
//! explicit modality subset, and the finite-difference gradient suites.
//!
//! Every output-producing command writes a fully resolved `run_manifest.json`
//! next to its artifacts; identical manifests produce byte-identical outputs.
//! Exit codes: 0 success, 1 contract violation (bad flag combinations, empty
//! subsets, failed verification), 2 I/O or parse error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::RngCore;

use xhved_core::data::{
    generate_phantom, load_volume, normalize_intensities, read_nifti1, save_volume, write_nifti1,
    ChannelRole, PhantomSpec, Volume,
};
use xhved_core::metrics::{enforce_nesting, model_predictor, subset_eval_grid};
use xhved_core::modality::{Modality, ModalitySubset};
use xhved_core::model::{LatentMode, ModelConfig, XhvedModel};
use xhved_core::rng::substream;
use xhved_core::train::{load_checkpoint, log_csv, save_checkpoint, TrainConfig, Trainer};
use xhved_core::{DataError, XhvedError};

#[derive(Parser)]
#[command(
    name = "xhved",
    version,
    about = "Hetero-modal brain-tumor segmentation toolkit: synthetic phantoms, \
             missing-modality training, and the 15-subset evaluation grid."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes with exact nested tumor labels.
    GeneratePhantoms {
        /// Number of phantoms to write.
        #[arg(long)]
        count: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Master seed; each phantom draws its own seed from a named substream.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Cubic volume extent in voxels; must be a positive multiple of 8.
        #[arg(long, default_value_t = 64)]
        extent: usize,
    },
    /// Train a model on a phantom dataset with the two-phase schedule.
    Train {
        /// JSON config file mirroring the training-config field names.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by generate-phantoms.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.bin, train_log.csv, and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Run only one phase of the schedule instead of both.
        #[arg(long, value_enum, default_value_t = PhaseArg::Both)]
        phase: PhaseArg,
        /// Encoder channel pyramid override, e.g. 4,8,12,16.
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
        /// Ablation: disable the encoder spatial-attention stages.
        #[arg(long)]
        no_save_attention: bool,
        /// Ablation: disable the mLSTM bottleneck mixer.
        #[arg(long)]
        no_vila: bool,
        /// Ablation: disable the decoder feature-exchange gates.
        #[arg(long)]
        no_sfeca: bool,
    },
    /// Evaluate a checkpoint over all 15 modality subsets into a CSV grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory produced by generate-phantoms.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (15 subset rows plus an average row).
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one case from NIfTI volumes of an explicit modality subset.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One .nii per available modality, in (fl, t1, t1c, t2) order.
        #[arg(long = "in", value_name = "NII", num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Available modalities: 4-bit mask (1011) or names (fl,t1c,t2).
        #[arg(long)]
        subset: String,
        /// Output label map (.nii): 0 background, 1 WT, 2 TC, 3 ET.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct all four modalities from an explicit modality subset.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One .nii per available modality, in (fl, t1, t1c, t2) order.
        #[arg(long = "in", value_name = "NII", num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Available modalities: 4-bit mask (1011) or names (fl,t1c,t2).
        #[arg(long)]
        subset: String,
        /// Output directory for the reconstructed four-channel volume.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suites and the dtype parity check.
    Gradcheck {
        /// Only run cases whose name contains this substring.
        #[arg(long)]
        module: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Joint,
    Both,
}

/// Errors carry their exit code: contract violations exit 1, I/O and parse
/// problems exit 2.
enum CliError {
    Contract(String),
    Io(String),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<XhvedError> for CliError {
    fn from(e: XhvedError) -> Self {
        match e {
            XhvedError::Data(d) => CliError::Io(d.to_string()),
            other => CliError::Contract(other.to_string()),
        }
    }
}

fn io_ctx(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    // Internal contract violations surface as panics; report the message
    // without a backtrace and exit like any other contract error.
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "internal error".to_string());
        eprintln!("error: {msg}");
    }));
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli.command))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Contract(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Ok(Err(CliError::Io(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(1),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GeneratePhantoms {
            count,
            out,
            seed,
            extent,
        } => cmd_generate_phantoms(count, &out, seed, extent),
        Command::Train {
            config,
            data,
            out,
            phase,
            channels,
            no_save_attention,
            no_vila,
            no_sfeca,
        } => cmd_train(
            &config,
            &data,
            &out,
            phase,
            channels,
            [no_save_attention, no_vila, no_sfeca],
        ),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, &out),
        Command::Segment {
            checkpoint,
            input,
            subset,
            out,
        } => cmd_segment(&checkpoint, &input, &subset, &out),
        Command::Reconstruct {
            checkpoint,
            input,
            subset,
            out,
        } => cmd_reconstruct(&checkpoint, &input, &subset, &out),
        Command::Gradcheck { module } => cmd_gradcheck(module.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// Run manifests

/// Fully resolved record of one run, written next to its outputs. Identical
/// manifests imply byte-identical CSV outputs and bit-identical checkpoints.
#[derive(serde::Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    seed: u64,
    config_path: Option<String>,
    train_config: Option<TrainConfig>,
    artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            tool_version: xhved_core::VERSION,
            command: command.to_string(),
            seed,
            config_path: None,
            train_config: None,
            artifacts: Vec::new(),
        }
    }

    /// Write into `dir/run_manifest.json`.
    fn write_in_dir(&self, dir: &Path) -> Result<(), CliError> {
        self.write_to(&dir.join("run_manifest.json"))
    }

    /// Write as a `<name>.manifest.json` sibling of a file output.
    fn write_beside(&self, file: &Path) -> Result<(), CliError> {
        let mut name = file
            .file_name()
            .map(|s| s.to_os_string())
            .unwrap_or_default();
        name.push(".manifest.json");
        self.write_to(&file.with_file_name(name))
    }

    fn write_to(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| io_ctx(path, e))
    }
}

fn create_parent_dirs(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_ctx(parent, e))?;
        }
    }
    Ok(())
}

/// A named substream keeps every consumer of the master seed independent.
fn derived_seed(seed: u64, label: &str) -> u64 {
    substream(seed, label).next_u64()
}

// ---------------------------------------------------------------------------
// generate-phantoms

fn cmd_generate_phantoms(
    count: usize,
    out: &Path,
    seed: u64,
    extent: usize,
) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Contract("--count must be at least 1".to_string()));
    }
    if extent < 8 || extent % 8 != 0 {
        return Err(CliError::Contract(format!(
            "--extent must be a positive multiple of 8, got {extent}"
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| io_ctx(out, e))?;

    let mut manifest = RunManifest::new("generate-phantoms", seed);
    for i in 0..count {
        let spec = PhantomSpec::sized(extent, derived_seed(seed, &format!("phantom.{i}")));
        let vol: Volume<f32> = generate_phantom(&spec);
        let stem = format!("phantom_{i:03}");
        save_volume(&vol, out, &stem)?;
        for c in 0..vol.shape()[1] {
            manifest
                .artifacts
                .push(out.join(format!("{stem}_c{c}.nii")).display().to_string());
        }
        manifest
            .artifacts
            .push(out.join(format!("{stem}.manifest.tsv")).display().to_string());
    }
    manifest.write_in_dir(out)?;
    println!(
        "wrote {count} phantom{} of extent {extent} to {}",
        if count == 1 { "" } else { "s" },
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset loading shared by train and eval

/// Load every volume in a dataset directory, in sorted stem order so runs are
/// independent of directory iteration order.
fn load_dataset(dir: &Path) -> Result<Vec<Volume<f32>>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_ctx(dir, e))?;
    let mut stems: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_ctx(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".manifest.tsv") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Io(format!(
            "no volume manifests (*.manifest.tsv) found in {}",
            dir.display()
        )));
    }
    stems
        .iter()
        .map(|stem| load_volume::<f32>(dir, stem).map_err(CliError::from))
        .collect()
}

/// Training and evaluation need the four modalities plus the three nested
/// label channels on every dataset item.
fn require_full_channels(dataset: &[Volume<f32>]) -> Result<(), CliError> {
    for (i, vol) in dataset.iter().enumerate() {
        for role in ChannelRole::MODALITIES.iter().chain(ChannelRole::LABELS.iter()) {
            if vol.channel_of(*role).is_none() {
                return Err(CliError::Contract(format!(
                    "dataset volume #{i} lacks a {} channel",
                    role.as_str()
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    phase: PhaseArg,
    channels: Option<Vec<usize>>,
    ablations: [bool; 3],
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|e| io_ctx(config_path, e))?;
    // serde_json already names the offending field for unknown/mistyped keys.
    let mut tc: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("{}: {e}", config_path.display())))?;

    match phase {
        PhaseArg::Pretrain => tc.train_steps = 0,
        PhaseArg::Joint => tc.pretrain_steps = 0,
        PhaseArg::Both => {}
    }
    let [no_save_attention, no_vila, no_sfeca] = ablations;
    if no_save_attention {
        tc.module_toggles.save_attention = false;
    }
    if no_vila {
        tc.module_toggles.vila = false;
    }
    if no_sfeca {
        tc.module_toggles.sfeca = false;
    }
    tc.validate()?;

    let dataset = load_dataset(data)?;
    require_full_channels(&dataset)?;
    let extent = dataset[0].extent();

    let mut mc = ModelConfig::new(extent, derived_seed(tc.seed, "model.init"));
    if let Some(ch) = channels {
        if ch.len() != 4 || ch.iter().any(|c| *c == 0) {
            return Err(CliError::Contract(format!(
                "--channels expects four positive comma-separated values, got {ch:?}"
            )));
        }
        mc.channels = [ch[0], ch[1], ch[2], ch[3]];
    }

    std::fs::create_dir_all(out).map_err(|e| io_ctx(out, e))?;
    let mut manifest = RunManifest::new("train", tc.seed);
    manifest.config_path = Some(config_path.display().to_string());
    manifest.train_config = Some(tc.clone());

    let mut trainer: Trainer<f32> = Trainer::new(mc, tc);
    trainer.run(&dataset)?;

    let ckpt_path = out.join("checkpoint.bin");
    save_checkpoint(&trainer, &ckpt_path)?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log_csv(&trainer.log)).map_err(|e| io_ctx(&log_path, e))?;
    manifest.artifacts.push(ckpt_path.display().to_string());
    manifest.artifacts.push(log_path.display().to_string());
    manifest.write_in_dir(out)?;

    match trainer.log.last() {
        Some(last) => println!(
            "trained {} steps (final phase {}): loss {:.4}, dice loss {:.4}, rec loss {:.4}",
            trainer.log.len(),
            last.phase,
            last.loss,
            last.dice,
            last.rec
        ),
        None => println!("no steps configured; wrote the initialized checkpoint"),
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let trainer: Trainer<f32> = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    require_full_channels(&dataset)?;
    for (i, vol) in dataset.iter().enumerate() {
        if vol.extent() != trainer.model.config.extent {
            return Err(CliError::Contract(format!(
                "dataset volume #{i} has extent {:?} but the checkpoint expects {:?}",
                vol.extent(),
                trainer.model.config.extent
            )));
        }
    }

    let grid = subset_eval_grid(model_predictor(&trainer.model), &dataset);
    create_parent_dirs(out)?;
    std::fs::write(out, grid.to_csv()).map_err(|e| io_ctx(out, e))?;

    let mut manifest = RunManifest::new("eval", trainer.train_config.seed);
    manifest.train_config = Some(trainer.train_config.clone());
    manifest.artifacts.push(out.display().to_string());
    manifest.write_beside(out)?;

    let avg = &grid.average;
    println!(
        "evaluated {} volumes over 15 subsets; average Dice wt/tc/et = {:.2}/{:.2}/{:.2}",
        dataset.len(),
        avg.dice[0],
        avg.dice[1],
        avg.dice[2]
    );
    println!("grid: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// segment / reconstruct

/// Validate the argv-level subset contract before any file is touched: the
/// subset must be non-empty and must name exactly one modality per input.
fn parse_case_subset(subset_str: &str, input: &[PathBuf]) -> Result<ModalitySubset, CliError> {
    let subset = ModalitySubset::parse(subset_str)?;
    if input.len() != subset.count() {
        return Err(CliError::Contract(format!(
            "subset {subset} names {} modalities but {} --in files were given",
            subset.count(),
            input.len()
        )));
    }
    Ok(subset)
}

/// Read the per-modality NIfTI files of an explicit subset into one volume
/// whose channels carry the matching modality roles.
fn load_case(
    model: &XhvedModel<f32>,
    input: &[PathBuf],
    subset: ModalitySubset,
) -> Result<Volume<f32>, CliError> {
    let mods: Vec<Modality> = subset.available().collect();
    let mut data: Vec<f32> = Vec::new();
    let mut roles: Vec<ChannelRole> = Vec::new();
    let mut extent: Option<[usize; 3]> = None;
    let mut spacing = [1.0; 3];
    for (path, m) in input.iter().zip(&mods) {
        let vol: Volume<f32> = read_nifti1(path)?;
        match extent {
            None => {
                extent = Some(vol.extent());
                spacing = vol.spacing_mm;
            }
            Some(e) if e != vol.extent() => {
                return Err(CliError::Contract(format!(
                    "{} has extent {:?} but earlier inputs have {:?}",
                    path.display(),
                    vol.extent(),
                    e
                )));
            }
            Some(_) => {}
        }
        data.extend_from_slice(vol.channel(0, 0));
        roles.push(ChannelRole::of_modality(*m));
    }
    let extent = extent.expect("subset is never empty");
    if extent != model.config.extent {
        return Err(CliError::Contract(format!(
            "inputs have extent {:?} but the checkpoint expects {:?}",
            extent, model.config.extent
        )));
    }
    let [d, h, w] = extent;
    Ok(Volume::new(data, [1, roles.len(), d, h, w], spacing, roles))
}

/// Deterministic inference: normalize the available channels, take the
/// posterior means, and read segmentation and reconstruction off the tape.
fn predict_case(
    model: &XhvedModel<f32>,
    vol: &Volume<f32>,
    subset: ModalitySubset,
) -> Result<(Vec<f32>, Vec<f32>), CliError> {
    let normalized = normalize_intensities(vol, subset);
    let mut tape = xhved_core::Tape::new();
    let mut binder = model.binder();
    let images = model.push_images(&mut tape, &normalized, subset);
    let out = model.forward(&mut tape, &mut binder, subset, &images, None, LatentMode::Mean);
    if tape.poison().is_some() {
        return Err(CliError::Contract(
            "forward pass produced non-finite values".to_string(),
        ));
    }
    Ok((tape.data(out.seg).to_vec(), tape.data(out.recon).to_vec()))
}

fn cmd_segment(
    checkpoint: &Path,
    input: &[PathBuf],
    subset_str: &str,
    out: &Path,
) -> Result<(), CliError> {
    let subset = parse_case_subset(subset_str, input)?;
    let trainer: Trainer<f32> = load_checkpoint(checkpoint)?;
    let vol = load_case(&trainer.model, input, subset)?;
    let (seg, _) = predict_case(&trainer.model, &vol, subset)?;

    let extent = vol.extent();
    let masks = enforce_nesting(&seg, extent, vol.spacing_mm);
    let vox = extent.iter().product::<usize>();
    let mut labels = vec![0.0f32; vox];
    for i in 0..vox {
        labels[i] = if masks.et[i] {
            3.0
        } else if masks.tc[i] {
            2.0
        } else if masks.wt[i] {
            1.0
        } else {
            0.0
        };
    }
    let [d, h, w] = extent;
    let label_vol = Volume::new(
        labels,
        [1, 1, d, h, w],
        vol.spacing_mm,
        vec![ChannelRole::Generic],
    );
    create_parent_dirs(out)?;
    write_nifti1(&label_vol, out)?;

    let mut manifest = RunManifest::new("segment", trainer.train_config.seed);
    manifest.train_config = Some(trainer.train_config.clone());
    manifest.artifacts.push(out.display().to_string());
    manifest.write_beside(out)?;

    let wt_voxels = masks.wt.iter().filter(|v| **v).count();
    println!(
        "segmented subset {subset}: {wt_voxels} whole-tumor voxels; labels: {}",
        out.display()
    );
    Ok(())
}

fn cmd_reconstruct(
    checkpoint: &Path,
    input: &[PathBuf],
    subset_str: &str,
    out: &Path,
) -> Result<(), CliError> {
    let subset = parse_case_subset(subset_str, input)?;
    let trainer: Trainer<f32> = load_checkpoint(checkpoint)?;
    let vol = load_case(&trainer.model, input, subset)?;
    let (_, recon) = predict_case(&trainer.model, &vol, subset)?;

    let [d, h, w] = vol.extent();
    let recon_vol = Volume::new(
        recon,
        [1, 4, d, h, w],
        vol.spacing_mm,
        ChannelRole::MODALITIES.to_vec(),
    );
    std::fs::create_dir_all(out).map_err(|e| io_ctx(out, e))?;
    save_volume(&recon_vol, out, "recon")?;

    let mut manifest = RunManifest::new("reconstruct", trainer.train_config.seed);
    manifest.train_config = Some(trainer.train_config.clone());
    for c in 0..4 {
        manifest
            .artifacts
            .push(out.join(format!("recon_c{c}.nii")).display().to_string());
    }
    manifest
        .artifacts
        .push(out.join("recon.manifest.tsv").display().to_string());
    manifest.write_in_dir(out)?;

    println!(
        "reconstructed all four modalities from subset {subset}: {}",
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(module: Option<&str>) -> Result<(), CliError> {
    use xhved_core::gradsuite::{
        block_suite, loss_dtype_parity, model_suite, primitive_suite, SuiteReport, F32_STEP,
        F32_TOL, F64_STEP, F64_TOL,
    };

    let mut suites: Vec<SuiteReport> = vec![
        primitive_suite::<f64>(F64_STEP, F64_TOL, 1)?,
        primitive_suite::<f32>(F32_STEP, F32_TOL, 1)?,
        block_suite::<f64>(F64_STEP, F64_TOL, 11)?,
        block_suite::<f32>(F32_STEP, F32_TOL, 11)?,
        model_suite::<f64>(F64_STEP, F64_TOL, 30)?,
    ];
    const PARITY_NAME: &str = "loss_dtype_parity";
    let run_parity = module.map_or(true, |m| PARITY_NAME.contains(m));
    if let Some(filter) = module {
        let mut known: Vec<String> = suites
            .iter()
            .flat_map(|s| s.cases.iter().map(|c| c.name.clone()))
            .collect();
        known.push(PARITY_NAME.to_string());
        known.sort();
        known.dedup();
        for s in &mut suites {
            s.cases.retain(|c| c.name.contains(filter));
        }
        suites.retain(|s| !s.cases.is_empty());
        if suites.is_empty() && !run_parity {
            return Err(CliError::Contract(format!(
                "no gradient cases match --module {filter}; known cases: {}",
                known.join(", ")
            )));
        }
    }

    let mut all_pass = true;
    for s in &suites {
        print!("{}", s.render());
        all_pass &= s.all_pass();
    }
    if run_parity {
        for seed in [3u64, 17] {
            for outcome in loss_dtype_parity(seed)? {
                let ok = outcome.pass(F32_TOL);
                all_pass &= ok;
                println!(
                    "[{}] {PARITY_NAME} {:<24} seed={seed:<3} rel={:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    outcome.name,
                    outcome.rel
                );
            }
        }
    }

    if all_pass {
        println!("gradcheck: all cases passed");
        Ok(())
    } else {
        Err(CliError::Contract(
            "gradient verification failed; see the case list above".to_string(),
        ))
    }
}
