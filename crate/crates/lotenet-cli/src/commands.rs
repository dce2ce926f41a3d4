use std::fmt;
use std::io::Write;
use std::path::Path;

use lotenet::checkpoint::{self, CheckpointError};
use lotenet::config::{Precision, RunConfig};
use lotenet::data::{self, Dataset, DataError, SyntheticKind};
use lotenet::metrics::{self, MetricsReport};
use lotenet::model::{LoTeNetModel, ModelError};
use lotenet::scalar::Real;
use lotenet::train::{self, TrainError};

/// Failure classified by exit code: 2 usage/config, 3 divergence, 4 shape.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Shape(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Divergence(m) | CliError::Shape(m) | CliError::Internal(m) => {
                f.write_str(m)
            }
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Shape(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<lotenet::config::ConfigError> for CliError {
    fn from(e: lotenet::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::InputShape { .. } | ModelError::GridMismatch { .. } => CliError::Shape(e.to_string()),
        ModelError::Config(_) => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
        TrainError::Model(m) => model_error(m),
        TrainError::LabelRange { .. } => CliError::Shape(e.to_string()),
        TrainError::EmptySplit { .. } | TrainError::AucNeedsBinary { .. } => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(RunConfig::from_json(&text)?)
}

/// Loads the training pool plus an optional explicit held-out test set.
fn load_dataset<T: Real>(config: &RunConfig) -> Result<(Dataset<T>, Option<Dataset<T>>), CliError> {
    match config.data.format.as_str() {
        "synthetic" => {
            let synth = config.data.synthetic.as_ref().expect("validated");
            let kind: SyntheticKind = synth
                .kind
                .parse()
                .map_err(|e: DataError| CliError::Config(e.to_string()))?;
            Ok((data::gen_synthetic(kind, synth.count, synth.size, config.seed)?, None))
        }
        "ltnt" => {
            let path = config.data.path.as_ref().expect("validated");
            Ok((data::load_native(path)?, None))
        }
        "idx" => {
            let images = config.data.images.as_ref().expect("validated");
            let labels = config.data.labels.as_ref().expect("validated");
            let pool = data::load_idx(images, labels)?;
            let test = match (&config.data.test_images, &config.data.test_labels) {
                (Some(ti), Some(tl)) => Some(data::load_idx(ti, tl)?),
                (None, None) => None,
                _ => {
                    return Err(CliError::Config(
                        "test_images and test_labels must be given together".into(),
                    ))
                }
            };
            Ok((pool, test))
        }
        other => Err(CliError::Config(format!("unknown data format {other:?}"))),
    }
}

fn check_sample_shape<T: Real>(model: &LoTeNetModel<T>, dataset: &Dataset<T>) -> Result<(), CliError> {
    let expected = &model.config().input_shape;
    if dataset.sample_shape() != expected.as_slice() {
        return Err(CliError::Shape(format!(
            "dataset samples are {:?} but the model expects {:?}",
            dataset.sample_shape(),
            expected
        )));
    }
    if let Some(&bad) = dataset
        .labels
        .iter()
        .find(|&&l| l >= model.config().n_classes.max(2))
    {
        return Err(CliError::Shape(format!(
            "label {bad} out of range for {} classes",
            model.config().n_classes
        )));
    }
    Ok(())
}

pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let config = read_config(config_path)?;
    match config.precision {
        Precision::F64 => run_train::<f64>(&config, out_dir),
        Precision::F32 => run_train::<f32>(&config, out_dir),
    }
}

fn run_train<T: Real>(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let (pool, explicit_test) = load_dataset::<T>(config)?;
    let fractions = &config.data.split;
    if explicit_test.is_some() && fractions.len() != 2 {
        return Err(CliError::Config(
            "an explicit test set needs a two-way split (train, val)".into(),
        ));
    }
    if !(2..=3).contains(&fractions.len()) {
        return Err(CliError::Config(format!(
            "split must list 2 or 3 fractions, got {}",
            fractions.len()
        )));
    }
    let parts = data::split(&pool, fractions, config.seed)?;
    let train_ds = pool.subset(&parts[0])?;
    let val_ds = pool.subset(&parts[1])?;
    let test_ds = match explicit_test {
        Some(t) => Some(t),
        None if parts.len() == 3 => Some(pool.subset(&parts[2])?),
        None => None,
    };

    let model = LoTeNetModel::<T>::new(config.model_config()?).map_err(model_error)?;
    check_sample_shape(&model, &train_ds)?;
    let train_cfg = config.train_config()?;
    let outcome = train::train_with_progress(model, &train_ds, &val_ds, &train_cfg, |record| {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  val_metric {:.4}  ({:.1}s)",
            record.epoch, record.train_loss, record.val_metric, record.elapsed_seconds
        );
    })
    .map_err(train_error)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let io = |e: std::io::Error| CliError::Internal(format!("write failed: {e}"));

    checkpoint::save(&outcome.model, config, out_dir.join("best.ltc"))?;

    let mut history = std::fs::File::create(out_dir.join("history.jsonl")).map_err(io)?;
    for record in &outcome.history {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(history, "{line}").map_err(io)?;
    }

    let batch = train_cfg.batch_size;
    let val_report = metrics::evaluate(&outcome.model, &val_ds, batch, "val").map_err(model_error)?;
    let test_report = match &test_ds {
        Some(t) => Some(metrics::evaluate(&outcome.model, t, batch, "test").map_err(model_error)?),
        None => None,
    };
    let report = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_metric": outcome.best_metric,
        "val": val_report,
        "test": test_report,
    });
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(io)?;

    println!(
        "best epoch {} with validation {:.4}; wrote {}",
        outcome.best_epoch,
        outcome.best_metric,
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_evaluate(
    checkpoint_path: &Path,
    data: Option<&Path>,
    images: Option<&Path>,
    labels: Option<&Path>,
) -> Result<(), CliError> {
    let config = checkpoint::peek_config(checkpoint_path)?;
    match config.precision {
        Precision::F64 => run_evaluate::<f64>(checkpoint_path, data, images, labels),
        Precision::F32 => run_evaluate::<f32>(checkpoint_path, data, images, labels),
    }
}

fn load_eval_dataset<T: Real>(
    data: Option<&Path>,
    images: Option<&Path>,
    labels: Option<&Path>,
) -> Result<Dataset<T>, CliError> {
    match (data, images, labels) {
        (Some(path), None, None) => Ok(data::load_native(path)?),
        (None, Some(i), Some(l)) => Ok(data::load_idx(i, l)?),
        _ => Err(CliError::Config(
            "provide either --data <ltnt> or --images/--labels <idx>".into(),
        )),
    }
}

fn run_evaluate<T: Real>(
    checkpoint_path: &Path,
    data: Option<&Path>,
    images: Option<&Path>,
    labels: Option<&Path>,
) -> Result<(), CliError> {
    let (config, model) = checkpoint::load::<T>(checkpoint_path)?;
    let dataset = load_eval_dataset::<T>(data, images, labels)?;
    check_sample_shape(&model, &dataset)?;
    let batch = config.train_config()?.batch_size;
    let report: MetricsReport =
        metrics::evaluate(&model, &dataset, batch, "eval").map_err(model_error)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn cmd_predict(checkpoint_path: &Path, input: &Path) -> Result<(), CliError> {
    let config = checkpoint::peek_config(checkpoint_path)?;
    match config.precision {
        Precision::F64 => run_predict::<f64>(checkpoint_path, input),
        Precision::F32 => run_predict::<f32>(checkpoint_path, input),
    }
}

fn run_predict<T: Real>(checkpoint_path: &Path, input: &Path) -> Result<(), CliError> {
    let (config, model) = checkpoint::load::<T>(checkpoint_path)?;
    let dataset = data::load_native::<T>(input)?;
    let expected = &model.config().input_shape;
    if dataset.sample_shape() != expected.as_slice() {
        return Err(CliError::Shape(format!(
            "input samples are {:?} but the model expects {:?}",
            dataset.sample_shape(),
            expected
        )));
    }
    let batch = config.train_config()?.batch_size;
    let mut start = 0usize;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    while start < dataset.len() {
        let end = (start + batch).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let chunk = dataset.subset(&indices)?;
        let pred = model.predict(&chunk.images).map_err(model_error)?;
        for (offset, &class) in pred.classes.iter().enumerate() {
            let m = model.config().n_classes;
            let prob = if m == 1 {
                let p1 = pred.probabilities.get(&[offset, 0]).to_f64_lossy();
                if class == 1 {
                    p1
                } else {
                    1.0 - p1
                }
            } else {
                pred.probabilities.get(&[offset, class]).to_f64_lossy()
            };
            writeln!(out, "{}\t{}\t{:.6}", start + offset, class, prob)
                .map_err(|e| CliError::Internal(e.to_string()))?;
        }
        start = end;
    }
    Ok(())
}

pub fn cmd_inspect(
    checkpoint_path: Option<&Path>,
    config_path: Option<&Path>,
    config_template: bool,
) -> Result<(), CliError> {
    if config_template {
        println!("{}", RunConfig::template().to_json_pretty());
        return Ok(());
    }
    let config = match (checkpoint_path, config_path) {
        (Some(path), None) => checkpoint::peek_config(path)?,
        (None, Some(path)) => read_config(path)?,
        _ => {
            return Err(CliError::Config(
                "inspect needs --checkpoint, --config or --config-template".into(),
            ))
        }
    };
    // geometry is precision-independent; inspect in f64
    let model = LoTeNetModel::<f64>::new(config.model_config()?).map_err(model_error)?;
    print_structure(&model);
    Ok(())
}

fn print_structure(model: &LoTeNetModel<f64>) {
    let config = model.config();
    println!(
        "LoTeNet: {} layers, bond dim {}, virtual dim {}, feature map {}, {} classes",
        config.layers, config.bond_dim, config.virtual_dim, config.feature_map, config.n_classes
    );
    println!(
        "input {:?} padded to {:?}",
        config.input_shape,
        model.padded_extents()
    );
    println!(
        "{:<6} {:>7} {:>6} {:>9} {:>5} {:>8} {:>12} {:>12}",
        "layer", "blocks", "sites", "site_dim", "bond", "out_dim", "params/blk", "params"
    );
    let mut total = 0usize;
    for (l, geo) in model.geometry().iter().enumerate() {
        let per_block = model.blocks()[l][0].param_count();
        let instances = model.blocks()[l].len();
        let layer_params = per_block * instances;
        total += layer_params;
        println!(
            "{:<6} {:>7} {:>6} {:>9} {:>5} {:>8} {:>12} {:>12}",
            l + 1,
            geo.n_blocks,
            geo.n_sites,
            geo.site_dim,
            config.bond_dim,
            geo.out_dim,
            per_block,
            layer_params
        );
    }
    let bn_params: usize = model
        .bn_layers()
        .iter()
        .map(|bn| bn.gamma.len() + bn.beta.len())
        .sum();
    total += bn_params;
    if bn_params > 0 {
        println!("batch-norm parameters: {bn_params}");
    }
    if model.config().share_weights_per_layer {
        println!("weights shared across patches within each layer");
    }
    println!("total parameters: {total}");
    debug_assert_eq!(total, model.count_parameters());
}

pub fn cmd_synth(kind: &str, count: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind: SyntheticKind = kind
        .parse()
        .map_err(|e: DataError| CliError::Config(e.to_string()))?;
    let dataset = data::gen_synthetic::<f64>(kind, count, size, seed)?;
    data::save_native(&dataset, out)?;
    println!(
        "wrote {} samples of {:?} to {}",
        dataset.len(),
        dataset.sample_shape(),
        out.display()
    );
    Ok(())
}
