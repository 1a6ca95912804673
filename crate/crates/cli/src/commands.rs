use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use gnetseg::io::{
    read_checkpoint, read_image, read_label_map, read_manifest, read_profile, write_checkpoint, write_image,
    write_label_map, write_profile, Manifest,
};
use gnetseg::link::{calibrate, parse_measurements, reference_measurements, ComputeFit, ComputeProfile, Measurement};
use gnetseg::train::{
    codec_for, evaluate_with, generate_synthetic, output_to_labels, predict, train_with, Sample,
    SyntheticDatasetSpec, TrainConfig,
};
use gnetseg::{build, quantize, validate, ChipProfile, Error, FittedProfiles, LabelMap, ModelGraph, Result, Tensor};
use serde_json::json;

use crate::{BenchArgs, CalibrateArgs, Cli, Command, ConvertArgs, EvalArgs, InferArgs, TrainArgs, ValidateArgs};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Build(a) => {
            let model = build(&a.model.config()?, seed)?;
            write_checkpoint(&model, &a.out)?;
            println!(
                "{} {}@{} {}: {} parameters in {} convs -> {}",
                model.variant(),
                model.input_format(),
                model.input_size(),
                model.head().describe(),
                model.param_count(),
                model.conv_count(),
                a.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate(a) => validate_cmd(a, seed),
        Command::Infer(a) => infer(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Convert(a) => convert(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn validate_cmd(a: ValidateArgs, seed: u64) -> Result<ExitCode> {
    let model = match &a.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => build(&a.model.config()?, seed)?,
    };
    let profile: ChipProfile = match &a.profile {
        Some(p) => read_profile(p)?,
        None => ChipProfile::default(),
    };
    profile.check()?;
    let report = validate(&model, &profile);
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Segments `image` with the float model, or the quantized one if given.
fn segmenter<'a>(
    model: &'a ModelGraph,
    quantized: Option<&'a gnetseg::QuantizedModel>,
) -> impl Fn(&Tensor) -> Result<LabelMap> + 'a {
    move |image| match quantized {
        Some(q) => output_to_labels(model, &q.forward(image)?),
        None => predict(model, image),
    }
}

fn mask_name(image: &Path) -> PathBuf {
    PathBuf::from(image.file_name().unwrap_or(image.as_os_str())).with_extension("pgm")
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let model = read_checkpoint(&a.checkpoint)?;
    let quantized = match &a.quantize_with {
        Some(m) => {
            let images: Vec<Tensor> = read_manifest(m)?.load()?.into_iter().map(|(i, _)| i).collect();
            Some(quantize(&model, &images, 8)?)
        }
        None => None,
    };
    let segment = segmenter(&model, quantized.as_ref());
    if let Some(image) = &a.image {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| Error::Usage("--image needs --out".into()))?;
        write_label_map(&segment(&read_image(image)?)?, out)?;
        println!("{}", out.display());
    } else {
        let manifest = read_manifest(a.manifest.as_ref().expect("clap enforces --image or --manifest"))?;
        let dir = a.out_dir.as_ref().expect("clap enforces --out-dir");
        create_dir(dir)?;
        for (image_path, _) in &manifest.entries {
            write_label_map(&segment(&read_image(image_path)?)?, dir.join(mask_name(image_path)))?;
        }
        println!("{} masks -> {}", manifest.entries.len(), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    Ok(read_manifest(path)?
        .load()?
        .into_iter()
        .map(|(image, labels)| Sample {
            image,
            labels,
            shapes: Vec::new(),
        })
        .collect())
}

fn export_split(samples: &[Sample], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut manifest = Manifest {
        base_dir: dir.to_path_buf(),
        entries: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let (img, lbl) = (dir.join(format!("image_{i:04}.pgm")), dir.join(format!("label_{i:04}.pgm")));
        write_image(&s.image, &img)?;
        write_label_map(&s.labels, &lbl)?;
        manifest.entries.push((img, lbl));
    }
    write_file(&dir.join("manifest.txt"), manifest.to_text().as_bytes())
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<ExitCode> {
    let config = a.model.config()?;
    let model = build(&config, seed)?;
    let (train_set, val_set) = match (&a.train_manifest, &a.val_manifest) {
        (Some(t), Some(v)) => (load_samples(t)?, load_samples(v)?),
        _ => {
            let classes = config.head.num_classes();
            let spec = |count, salt| SyntheticDatasetSpec::new(config.input_size, classes, count, seed.wrapping_add(salt));
            (
                generate_synthetic(&spec(a.synthetic_train, 1))?,
                generate_synthetic(&spec(a.synthetic_val, 2))?,
            )
        }
    };
    if let Some(dir) = &a.export_val {
        export_split(&val_set, dir)?;
    }
    let mut log = match &a.metrics {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|source| Error::Io { path: p.clone(), source })?,
        ),
        None => None,
    };
    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed,
        head: codec_for(config.head).mode,
    };
    let mut log_err = None;
    let outcome = train_with(&model, &train_set, &val_set, &cfg, |m| {
        let mut line = json!({ "epoch": m.epoch, "loss": m.loss, "miou": m.miou });
        if !a.no_timestamps {
            let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            line["time"] = json!(t);
        }
        println!("{line}");
        if let (Some(f), None) = (log.as_mut(), &log_err) {
            if let Err(e) = writeln!(f, "{line}") {
                log_err = Some(e);
            }
        }
    })?;
    if let (Some(source), Some(path)) = (log_err, &a.metrics) {
        return Err(Error::Io { path: path.clone(), source });
    }
    write_checkpoint(&outcome.model, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let manifest = read_manifest(&a.manifest)?;
    let pairs = manifest.load()?;
    let refs: Vec<_> = pairs.iter().map(|(i, l)| (i, l)).collect();
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => {
            let model = read_checkpoint(c)?;
            evaluate_with(model.head().num_classes(), &refs, |img| predict(&model, img))?
        }
        (None, Some(dir)) => {
            let mut masks = manifest.entries.iter().map(|(img, _)| read_label_map(dir.join(mask_name(img))));
            evaluate_with(a.classes, &refs, |_| masks.next().expect("one mask per entry"))?
        }
        (None, None) => return Err(Error::Usage("eval needs --checkpoint or --predictions".into())),
    };
    println!(
        "{}",
        json!({ "images": pairs.len(), "miou": report.miou, "per_class": report.per_class })
    );
    Ok(ExitCode::SUCCESS)
}

fn builtin_fit() -> Result<FittedProfiles> {
    let rows: Vec<_> = reference_measurements().iter().map(Measurement::to_row).collect();
    Ok(calibrate(&rows, ComputeFit::Fixed(ComputeProfile::reference()))?.profiles)
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let config = a.model.config()?;
    let model = build(&config, 0)?;
    let profiles = match &a.profiles {
        Some(p) => read_profile(p)?,
        None => builtin_fit()?,
    };
    let links = match &a.link {
        Some(sel) => profiles.select(sel),
        None => profiles.links.iter().collect(),
    };
    if links.is_empty() {
        return Err(Error::Usage(format!(
            "no fitted link matches `{}`",
            a.link.as_deref().unwrap_or("")
        )));
    }
    let reference = reference_measurements();
    println!(
        "{:<12} {:>10} {:>10} {:>14} {:>10} {:>10}",
        "link", "in bytes", "out bytes", "MACs", "fps", "measured"
    );
    for link in links {
        let cost = gnetseg::predict_fps(&model, link, &profiles.compute);
        let measured = reference
            .iter()
            .find(|m| m.config == config && m.link() == link.name)
            .map(|m| format!("{:.2}", m.fps))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:>10} {:>10} {:>14} {:>10.2} {:>10}",
            link.name, cost.in_bytes, cost.out_bytes, cost.macs, cost.fps, measured
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<ExitCode> {
    let measurements = match &a.table {
        Some(p) => parse_measurements(&fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?)?,
        None => reference_measurements(),
    };
    let mut holdouts = Vec::new();
    for h in &a.holdout {
        let (model, link) = h
            .split_once('@')
            .ok_or_else(|| Error::Usage(format!("--holdout wants MODEL@HOST/INTERFACE, got `{h}`")))?;
        holdouts.push((model.to_string(), link.to_string()));
    }
    let is_held = |m: &Measurement| holdouts.iter().any(|(model, link)| *model == m.model && *link == m.link());
    let rows: Vec<_> = measurements
        .iter()
        .filter(|m| !a.exclude_host.contains(&m.host) && !is_held(m))
        .map(Measurement::to_row)
        .collect();
    let fit = if a.fit_compute {
        ComputeFit::Fit
    } else {
        ComputeFit::Fixed(ComputeProfile::reference())
    };
    let cal = calibrate(&rows, fit)?;
    write_profile(&cal.profiles, &a.out)?;
    print!("{}", cal.residual_table());
    for m in measurements.iter().filter(|m| is_held(m)) {
        let p = cal.profiles.predict(&m.config, &m.link())?;
        println!(
            "held out {} on {}: predicted {:.2} fps, measured {:.2} fps ({:+.1}%)",
            m.model,
            m.link(),
            p.fps,
            m.fps,
            (p.fps - m.fps) / m.fps * 100.0
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn convert(a: ConvertArgs) -> Result<ExitCode> {
    let model = read_checkpoint(&a.checkpoint)?;
    let converted = model.convert_input_format(a.to.parse()?)?;
    write_checkpoint(&converted, &a.out)?;
    println!("{} -> {}", model.input_format(), converted.input_format());
    Ok(ExitCode::SUCCESS)
}
