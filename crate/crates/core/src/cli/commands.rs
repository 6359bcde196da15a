use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{pick, FileConfig};
use super::{
    AdapterArgs, Command, DecomposeArgs, DomainArgs, EvalArgs, Failure, Format, InputArgs, OutputArgs,
    PipelineArgs, RefineArgs, ScalesArgs, SynthArgs, ValidateArgs, ZeroshotArgs,
};
use crate::adapter::{self, AdapterConfig, GridSpec, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::embeddings::{
    load_embedding_file, write_atomic, write_embedding_file, CropKey, EmbeddingStore, FeatureVector,
    FileBackend, TextClassifier,
};
use crate::error::VcrError;
use crate::eval::{
    build_fewshot_episode, canonical_json, component_modes, crop_manifest, default_synth_modes, evaluate,
    reports_csv, run_ablation, run_domain_generalization, synth_csv, synthetic_benchmark, DatasetManifest,
    DomainTarget, EvalConfig, EvalReport, EvalResults, Mode, SynthConfig, RANDOM_REPEATS,
};
use crate::geometry::build_scale_set;
use crate::refine::{refine_image, Criterion, Weighting};

const DEFAULT_N: usize = 10;
const DEFAULT_M: usize = 100;
const DEFAULT_SHOTS: usize = 16;
const DEFAULT_LR: f64 = 0.01;

type CmdResult<T = ()> = Result<T, Failure>;

/// Wraps a library error with the operation that raised it.
fn domain(op: &str) -> impl Fn(VcrError) -> Failure + '_ {
    move |e| Failure::Domain(format!("{op}: {e}"))
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub(crate) fn dispatch(command: Command, stdout: &mut dyn Write) -> CmdResult {
    match command {
        Command::Scales(a) => scales(a, stdout),
        Command::Decompose(a) => decompose(a, stdout),
        Command::Refine(a) => refine(a),
        Command::Zeroshot(a) => zeroshot(a, stdout),
        Command::Fewshot(a) => evaluate_episode("fewshot", a, stdout),
        Command::Ablate(a) => evaluate_episode("ablate", a, stdout),
        Command::Domain(a) => domain_generalization(a, stdout),
        Command::Synth(a) => synth(a, stdout),
        Command::Validate(a) => validate(a, stdout),
    }
}

fn require(value: Option<PathBuf>, flag: &str) -> CmdResult<PathBuf> {
    value.ok_or_else(|| usage(format!("--{flag} is required")))
}

fn emit(out: Option<&Path>, bytes: &[u8], stdout: &mut dyn Write) -> CmdResult {
    match out {
        Some(path) => write_atomic(path, bytes).map_err(domain("write output")),
        None => stdout
            .write_all(bytes)
            .map_err(|e| Failure::Domain(format!("write stdout: {e}"))),
    }
}

/// Pipeline options after precedence resolution.
#[derive(Debug, Clone, Serialize)]
struct Pipeline {
    n: usize,
    m: usize,
    criterion: Criterion,
    weighting: Weighting,
    seed: u64,
    #[serde(skip)]
    workers: usize,
}

impl Pipeline {
    fn resolve(args: PipelineArgs, file: &FileConfig) -> CmdResult<Self> {
        let criterion = pick(args.criterion, file.criterion.clone(), "max-margin".into());
        let weighting = pick(args.weighting, file.weighting.clone(), "scale".into());
        let p = Self {
            n: pick(args.n, file.n, DEFAULT_N),
            m: pick(args.m, file.m, DEFAULT_M),
            criterion: Criterion::parse(&criterion).map_err(|e| usage(e.to_string()))?,
            weighting: Weighting::parse(&weighting).map_err(|e| usage(e.to_string()))?,
            seed: pick(args.seed, file.seed, 0),
            workers: pick(args.workers, file.workers, 1),
        };
        if p.n == 0 || p.m == 0 || p.workers == 0 {
            return Err(usage("--n, --m and --workers must be at least 1"));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
struct Inputs {
    embeddings: Option<PathBuf>,
    classifier: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Inputs {
    fn resolve(args: InputArgs, file: &FileConfig) -> Self {
        Self {
            embeddings: args.embeddings.or(file.embeddings.clone()),
            classifier: args.classifier.or(file.classifier.clone()),
            manifest: args.manifest.or(file.manifest.clone()),
        }
    }

    fn classifier(&self) -> CmdResult<TextClassifier> {
        let path = require(self.classifier.clone(), "classifier")?;
        TextClassifier::load(&path).map_err(domain("load classifier"))
    }

    fn backend(&self, clf: &TextClassifier) -> CmdResult<FileBackend> {
        let path = require(self.embeddings.clone(), "embeddings")?;
        FileBackend::open_exported(&path, clf).map_err(domain("load embeddings"))
    }

    fn dataset(&self, clf: &TextClassifier) -> CmdResult<DatasetManifest> {
        let path = require(self.manifest.clone(), "manifest")?;
        load_dataset(&path, clf)
    }
}

fn load_dataset(path: &Path, clf: &TextClassifier) -> CmdResult<DatasetManifest> {
    let dataset = DatasetManifest::load(path).map_err(domain("load manifest"))?;
    if dataset.classes != clf.class_names() {
        return Err(Failure::Domain(format!(
            "{}: class list does not match the classifier's",
            path.display()
        )));
    }
    Ok(dataset)
}

struct Output {
    out: Option<PathBuf>,
    format: Format,
    timing: bool,
}

impl Output {
    fn resolve(args: OutputArgs, file: &FileConfig) -> CmdResult<Self> {
        let out = args.out.or(file.out.clone());
        let by_extension = match out.as_ref().and_then(|p| p.extension()) {
            Some(ext) if ext == "csv" => Format::Csv,
            _ => Format::Json,
        };
        Ok(Self {
            format: args.format.or(file.format()?).unwrap_or(by_extension),
            timing: args.timing || file.timing.unwrap_or(false),
            out,
        })
    }

    fn write_reports(&self, command: &str, config: Value, reports: &[EvalReport], stdout: &mut dyn Write) -> CmdResult {
        let bytes = match self.format {
            Format::Json => canonical_json(&json!({"command": command, "config": config, "reports": reports})),
            Format::Csv => reports_csv(reports),
        }
        .map_err(domain("render report"))?;
        emit(self.out.as_deref(), &bytes, stdout)
    }
}

fn adapter_config(args: &AdapterArgs, file: &FileConfig) -> CmdResult<(AdapterConfig, usize, f64, bool)> {
    let grid = (args.grid || file.grid.unwrap_or(false)).then(|| GridSpec {
        steps: pick(args.grid_steps, file.grid_steps, GridSpec::default().steps),
        ..GridSpec::default()
    });
    let config = AdapterConfig {
        alpha: pick(args.alpha, file.alpha, DEFAULT_ALPHA),
        beta: pick(args.beta, file.beta, DEFAULT_BETA),
        grid,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let epochs = pick(args.epochs, file.epochs, 0);
    let lr = pick(args.lr, file.lr, DEFAULT_LR);
    let refine_keys = args.refine_cache_keys || file.refine_cache_keys.unwrap_or(false);
    Ok((config, epochs, lr, refine_keys))
}

fn scales(args: ScalesArgs, stdout: &mut dyn Write) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let set = build_scale_set(pick(args.n, file.n, DEFAULT_N)).map_err(|e| usage(e.to_string()))?;
    let text: Vec<String> = set.scales().iter().map(|s| format!("{s:?}")).collect();
    emit(None, format!("{}\n", text.join(" ")).as_bytes(), stdout)
}

fn decompose(args: DecomposeArgs, stdout: &mut dyn Write) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let path = require(args.manifest.or(file.manifest.clone()), "manifest")?;
    let n = pick(args.n, file.n, DEFAULT_N);
    let m = pick(args.m, file.m, DEFAULT_M);
    if n == 0 || m == 0 {
        return Err(usage("--n and --m must be at least 1"));
    }
    let seed = pick(args.seed, file.seed, 0);
    let ten_crop = args.ten_crop || file.ten_crop.unwrap_or(false);
    let dataset = DatasetManifest::load(&path).map_err(domain("load manifest"))?;
    let manifest = crop_manifest(&dataset, n, m, seed, ten_crop).map_err(domain("decompose"))?;
    emit(args.out.or(file.out).as_deref(), &manifest.to_json_bytes(), stdout)
}

fn refine(args: RefineArgs) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let p = Pipeline::resolve(args.pipeline, &file)?;
    let inputs = Inputs::resolve(args.input, &file);
    let out = require(args.out.or(file.out.clone()), "out")?;
    let clf = inputs.classifier()?;
    let backend = inputs.backend(&clf)?;
    let ids: Vec<(String, u32, u32)> = match &inputs.manifest {
        Some(path) => load_dataset(path, &clf)?
            .images
            .iter()
            .map(|i| (i.id.clone(), i.width, i.height))
            .collect(),
        None => backend
            .store()
            .images()
            .iter()
            .map(|i| (i.id.clone(), i.width, i.height))
            .collect(),
    };
    let scale_set = build_scale_set(p.n).map_err(|e| usage(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(p.workers)
        .build()
        .map_err(|e| Failure::Domain(format!("start workers: {e}")))?;
    let refined = pool
        .install(|| {
            ids.par_iter()
                .map(|(id, w, h)| {
                    refine_image(&backend, &clf, id, (*w, *h), &scale_set, p.m, p.criterion, p.weighting, p.seed)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(domain("refine"))?;
    let mut store = EmbeddingStore::new(clf.dim()).map_err(domain("refine"))?;
    for ((id, w, h), r) in ids.iter().zip(&refined) {
        store.add_image(id, *w, *h).map_err(domain("refine"))?;
        store
            .insert(id, CropKey::Refined, r.vector.as_slice(), Some(r.to_record()))
            .map_err(domain("refine"))?;
    }
    store.manifest_mut_extra().insert(
        "refinement".into(),
        serde_json::to_value(&p).expect("pipeline serializes"),
    );
    write_embedding_file(&store, &out).map_err(domain("write refined store"))
}

fn zeroshot(args: ZeroshotArgs, stdout: &mut dyn Write) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let inputs = Inputs::resolve(args.input, &file);
    let output = Output::resolve(args.output, &file)?;
    let clf = inputs.classifier()?;
    let backend = inputs.backend(&clf)?;
    let dataset = inputs.dataset(&clf)?;
    let store = backend.store();
    let refined = dataset
        .images
        .first()
        .is_some_and(|i| store.contains(&i.id, CropKey::Refined));
    let key = if refined { CropKey::Refined } else { CropKey::Global };
    let mut preds = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let row = store.get(&img.id, key).ok_or_else(|| {
            Failure::Domain(format!(
                "zeroshot: {}",
                VcrError::MissingEmbedding {
                    image_id: img.id.clone(),
                    view: key.to_string()
                }
            ))
        })?;
        let f = FeatureVector::from_unit(row.to_vec()).map_err(domain("zeroshot"))?;
        preds.push(adapter::predict(&f, &clf, None, 0.0, DEFAULT_BETA).map_err(domain("zeroshot"))?);
    }
    let labels: Vec<usize> = dataset.images.iter().map(|i| i.label).collect();
    let acc = evaluate(&preds, &labels, clf.num_classes()).map_err(domain("zeroshot"))?;
    let refinement = store.manifest().extra.get("refinement").cloned();
    let report = EvalReport {
        mode: format!("zeroshot:{}", if refined { "refined" } else { "global" }),
        dataset: None,
        criterion: None,
        weighting: if refined { Weighting::ScaleWeighted } else { Weighting::GlobalOnly },
        n: refinement.as_ref().and_then(|r| r["n"].as_u64()).unwrap_or(1) as usize,
        m: refinement.as_ref().and_then(|r| r["m"].as_u64()).unwrap_or(0) as usize,
        shots: 0,
        alpha: 0.0,
        beta: DEFAULT_BETA,
        seed: refinement.as_ref().and_then(|r| r["seed"].as_u64()).unwrap_or(0),
        repeats: 1,
        cache: "none".into(),
        validation: None,
        results: EvalResults {
            top1_accuracy: acc.top1,
            per_class_accuracy: acc.per_class,
            correct: acc.correct as f64,
            total: acc.total,
            predictions: preds,
        },
        wall_time: None,
    };
    let config = json!({"inputs": inputs, "features": if refined { "refined" } else { "global" }, "refinement": refinement});
    output.write_reports("zeroshot", config, &[report], stdout)
}

/// Everything `fewshot`, `ablate` and `domain` share.
struct EvalSetup {
    eval: EvalConfig,
    pipeline: Pipeline,
    shots: usize,
    val_per_class: usize,
    modes: Vec<Mode>,
    inputs: Inputs,
    output: Output,
    file: FileConfig,
}

impl EvalSetup {
    fn resolve(command: &str, args: EvalArgs) -> CmdResult<Self> {
        let file = FileConfig::load(args.config.config.as_deref())?;
        let pipeline = Pipeline::resolve(args.pipeline, &file)?;
        let (adapter, epochs, lr, refine_cache_keys) = adapter_config(&args.adapter, &file)?;
        let default_shots = if command == "ablate" { 0 } else { DEFAULT_SHOTS };
        let modes = match args.modes.or(file.modes.clone()) {
            Some(list) => Mode::parse_list(&list).map_err(|e| usage(e.to_string()))?,
            None if command == "ablate" => ablate_default_modes(pipeline.n).map_err(|e| usage(e.to_string()))?,
            None if command == "domain" => vec![Mode::Configured],
            None => vec![Mode::GlobalBaseline, Mode::Configured],
        };
        if modes.is_empty() {
            return Err(usage("--modes lists no mode"));
        }
        let output = Output::resolve(args.output, &file)?;
        let eval = EvalConfig {
            n: pipeline.n,
            m: pipeline.m,
            criterion: pipeline.criterion,
            weighting: pipeline.weighting,
            seed: pipeline.seed,
            adapter,
            epochs,
            lr,
            refine_cache_keys,
            workers: pipeline.workers,
            repeats: RANDOM_REPEATS,
            timing: output.timing,
        };
        eval.validate().map_err(|e| usage(e.to_string()))?;
        Ok(Self {
            eval,
            shots: pick(args.adapter.shots, file.shots, default_shots),
            val_per_class: pick(args.adapter.val_per_class, file.val_per_class, 0),
            modes,
            inputs: Inputs::resolve(args.input, &file),
            output,
            pipeline,
            file,
        })
    }

    fn echo(&self) -> Value {
        json!({
            "eval": self.eval,
            "shots": self.shots,
            "val_per_class": self.val_per_class,
            "modes": self.modes.iter().map(Mode::name).collect::<Vec<_>>(),
            "inputs": self.inputs,
        })
    }
}

/// Component, multi-crop, per-scale and criterion modes for one `n`.
fn ablate_default_modes(n: usize) -> crate::Result<Vec<Mode>> {
    let mut modes = component_modes();
    modes.push(Mode::MultiCropAvg);
    for &s in build_scale_set(n)?.scales() {
        modes.push(Mode::PerScale(s));
    }
    modes.extend([
        Mode::Criterion(Criterion::MinMargin),
        Mode::Criterion(Criterion::MinEntropy),
        Mode::Criterion(Criterion::MaxMargin),
        Mode::Criterion(Criterion::Random),
    ]);
    Ok(modes)
}

fn evaluate_episode(command: &str, args: EvalArgs, stdout: &mut dyn Write) -> CmdResult {
    let setup = EvalSetup::resolve(command, args)?;
    let clf = setup.inputs.classifier()?;
    let backend = setup.inputs.backend(&clf)?;
    let dataset = setup.inputs.dataset(&clf)?;
    let episode = build_fewshot_episode(&dataset, setup.shots, setup.val_per_class, setup.pipeline.seed)
        .map_err(domain("build episode"))?;
    let reports = run_ablation(&episode, &backend, &clf, &setup.modes, &setup.eval).map_err(domain(command))?;
    setup.output.write_reports(command, setup.echo(), &reports, stdout)
}

fn domain_generalization(args: DomainArgs, stdout: &mut dyn Write) -> CmdResult {
    let setup = EvalSetup::resolve("domain", args.eval)?;
    let specs = if args.target.is_empty() {
        setup.file.targets.clone().unwrap_or_default()
    } else {
        args.target
    };
    if specs.is_empty() {
        return Err(usage("at least one --target MANIFEST=EMBEDDINGS is required"));
    }
    let clf = setup.inputs.classifier()?;
    let backend = setup.inputs.backend(&clf)?;
    let source = setup.inputs.dataset(&clf)?;
    let episode = build_fewshot_episode(&source, setup.shots, setup.val_per_class, setup.pipeline.seed)
        .map_err(domain("build episode"))?;
    let mut loaded = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (manifest, embeddings) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--target `{spec}` is not MANIFEST=EMBEDDINGS")))?;
        let manifest = PathBuf::from(manifest);
        let name = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| spec.clone());
        let dataset = DatasetManifest::load(&manifest).map_err(domain("load target manifest"))?;
        let target_backend = FileBackend::open_exported(embeddings, &clf).map_err(domain("load target embeddings"))?;
        loaded.push((name, dataset, target_backend));
    }
    let targets: Vec<DomainTarget<'_>> = loaded
        .iter()
        .map(|(name, dataset, b)| DomainTarget {
            name: name.clone(),
            manifest: dataset.clone(),
            backend: b,
        })
        .collect();
    let mut reports = Vec::new();
    for &mode in &setup.modes {
        reports.extend(
            run_domain_generalization(&source, &episode, &backend, &targets, &clf, mode, &setup.eval)
                .map_err(domain("domain"))?,
        );
    }
    let mut echo = setup.echo();
    echo["targets"] = json!(specs);
    setup.output.write_reports("domain", echo, &reports, stdout)
}

fn synth(args: SynthArgs, stdout: &mut dyn Write) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let preset = pick(args.preset, file.preset.clone(), "default".into());
    let base = SynthConfig::preset(&preset).map_err(|e| usage(e.to_string()))?;
    let config = SynthConfig {
        n: pick(args.n, file.n, base.n),
        m: pick(args.m, file.m, base.m),
        shots: pick(args.shots, file.shots, base.shots),
        noise_amp: pick(args.noise, file.noise, base.noise_amp),
        seeds: pick(args.worlds, file.worlds, base.seeds),
        ..base
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let modes = match args.modes.or(file.modes.clone()) {
        Some(list) => Mode::parse_list(&list).map_err(|e| usage(e.to_string()))?,
        None => default_synth_modes(),
    };
    let output = Output::resolve(args.output, &file)?;
    let eval = EvalConfig {
        seed: pick(args.seed, file.seed, 0),
        workers: pick(args.workers, file.workers, 1),
        timing: output.timing,
        ..EvalConfig::default()
    };
    eval.validate().map_err(|e| usage(e.to_string()))?;
    let report = synthetic_benchmark(&config, &modes, &eval).map_err(domain("synth"))?;
    let bytes = match output.format {
        Format::Json => canonical_json(&json!({"command": "synth", "preset": preset, "report": report})),
        Format::Csv => synth_csv(&report),
    }
    .map_err(domain("render report"))?;
    emit(output.out.as_deref(), &bytes, stdout)
}

fn validate(args: ValidateArgs, stdout: &mut dyn Write) -> CmdResult {
    let store = load_embedding_file(&args.embeddings).map_err(domain("validate"))?;
    let path = args.embeddings.display();
    let mut lines = vec![format!(
        "{path}: {} rows, dim {}, {} images, {} keyed rows",
        store.len(),
        store.dim(),
        store.images().len(),
        store.manifest().rows.len()
    )];
    if store.manifest().classes.is_some() {
        let clf = TextClassifier::from_store(&store).map_err(domain("validate"))?;
        lines.push(format!("{path}: classifier with {} classes, tau {}", clf.num_classes(), clf.tau()));
    }
    if let Some(clf_path) = &args.classifier {
        let clf = TextClassifier::load(clf_path).map_err(domain("load classifier"))?;
        if clf.dim() != store.dim() {
            return Err(Failure::Domain(format!(
                "validate: {path} has dimension {} but {} has {}",
                store.dim(),
                clf_path.display(),
                clf.dim()
            )));
        }
    }
    if let Some(manifest) = &args.manifest {
        let dataset = DatasetManifest::load(manifest).map_err(domain("load manifest"))?;
        for img in &dataset.images {
            match store.image(&img.id) {
                None => {
                    return Err(Failure::Domain(format!("validate: image `{}` missing from {path}", img.id)))
                }
                Some(e) if (e.width, e.height) != (img.width, img.height) => {
                    return Err(Failure::Domain(format!(
                        "validate: image `{}` is {}x{} in {path} but {}x{} in {}",
                        img.id,
                        e.width,
                        e.height,
                        img.width,
                        img.height,
                        manifest.display()
                    )))
                }
                Some(_) => {}
            }
        }
        lines.push(format!("{path}: all {} manifest images present", dataset.images.len()));
    }
    lines.push("ok".into());
    emit(None, format!("{}\n", lines.join("\n")).as_bytes(), stdout)
}
