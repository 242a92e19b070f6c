use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use evolm::adapt::{
    finetune_classifier, prompt_tune, transductive_finetune, Classifier, PromptModel, TransferReport,
};
use evolm::checkpoint::{self, write_atomic, Header};
use evolm::data::{
    build_vocab, generate_factual_corpus, generate_shift_pair, generate_task_pair_with, labeled_jsonl, num_classes,
    read_corpus, read_labeled_jsonl, read_slots, slots_jsonl, LabeledExample, Sample, Vocabulary,
};
use evolm::evolution::{index_jsonl, self_evolve, self_question_scan};
use evolm::metrics::{self, MetricsRecord};
use evolm::model::Encoder;
use evolm::pretrain::{knowledge_slot_accuracy, pretrain};
use evolm::{Error, Result};

use crate::config::RunConfig;
use crate::plot;

/// Flags shared by every subcommand, after config resolution.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub source: Option<String>,
    pub target: Option<String>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} not found at {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

fn write_metrics(ctx: &Context, name: &str, records: &[MetricsRecord]) -> Result<PathBuf> {
    let path = ctx.cfg.paths.metrics.join(format!("{name}.jsonl"));
    write_text(&path, &metrics::to_jsonl(records))?;
    info!("metrics written to {}", path.display());
    Ok(path)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

impl Context {
    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.cfg.paths.checkpoint.clone())
    }

    fn load_corpus(&self) -> Result<(Vocabulary, Vec<Sample>)> {
        let p = &self.cfg.paths;
        require(&p.vocab, "vocabulary")?;
        require(&p.corpus, "corpus")?;
        let vocab = Vocabulary::load(&p.vocab)?;
        let mut samples = read_corpus(&p.corpus, &vocab)?;
        if p.slots.is_file() {
            read_slots(&p.slots, &mut samples)?;
        }
        Ok((vocab, samples))
    }

    fn task_name(&self, flag: &Option<String>, default: &str) -> String {
        flag.clone().unwrap_or_else(|| default.to_string())
    }

    fn task_file(&self, task: &str, split: &str) -> PathBuf {
        self.cfg.paths.tasks.join(format!("{task}.{split}.jsonl"))
    }

    fn task_vocab(&self, task: &str) -> Result<Vocabulary> {
        let own = self.cfg.paths.tasks.join(format!("{task}.vocab.json"));
        if own.is_file() {
            return Vocabulary::load(&own);
        }
        require(&self.cfg.paths.vocab, &format!("vocabulary for task {task}"))?;
        Vocabulary::load(&self.cfg.paths.vocab)
    }

    fn load_task(&self, task: &str) -> Result<Task> {
        let train_path = self.task_file(task, "train");
        let test_path = self.task_file(task, "test");
        require(&train_path, &format!("training split of task {task}"))?;
        require(&test_path, &format!("test split of task {task}"))?;
        let vocab = self.task_vocab(task)?;
        let train = read_labeled_jsonl(&train_path, &vocab)?;
        let test = read_labeled_jsonl(&test_path, &vocab)?;
        if train.is_empty() {
            return Err(Error::Data(format!("task {task} has no training examples")));
        }
        let classes = num_classes(&train).max(num_classes(&test));
        Ok(Task {
            vocab,
            train,
            test,
            classes,
        })
    }

    /// The `--checkpoint` encoder, or a fresh one sized for `vocab`.
    fn task_encoder(&self, vocab: &Vocabulary) -> Result<Encoder> {
        match &self.checkpoint {
            Some(path) => {
                require(path, "checkpoint")?;
                let enc = checkpoint::load_encoder(path)?;
                if enc.config().vocab_size < vocab.size() {
                    return Err(Error::Config(format!(
                        "checkpoint vocabulary ({}) is smaller than the task vocabulary ({})",
                        enc.config().vocab_size,
                        vocab.size()
                    )));
                }
                Ok(enc)
            }
            None => Encoder::init(self.cfg.model.build(vocab.size(), self.cfg.seed)),
        }
    }

    fn prompt_file(&self, task: &str) -> Result<PathBuf> {
        checkpoint::prompt_path(&self.cfg.paths.prompts, task)
    }
}

struct Task {
    vocab: Vocabulary,
    train: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    classes: usize,
}

pub fn gen_corpus(ctx: &Context) -> Result<()> {
    let corpus = generate_factual_corpus(&ctx.cfg.corpus)?;
    let p = &ctx.cfg.paths;
    let mut text = corpus.lines.join("\n");
    text.push('\n');
    write_text(&p.corpus, &text)?;
    write_text(&p.slots, &slots_jsonl(&corpus.samples))?;
    write_text(&p.vocab, &corpus.vocab.to_json())?;
    println!("{} samples, vocabulary of {}", corpus.samples.len(), corpus.vocab.size());
    Ok(())
}

pub fn build_vocab_cmd(ctx: &Context, corpus: Option<&Path>, max_vocab: Option<usize>) -> Result<()> {
    let path = corpus.map(Path::to_path_buf).unwrap_or_else(|| ctx.cfg.paths.corpus.clone());
    require(&path, "corpus")?;
    let max_vocab = max_vocab.unwrap_or(ctx.cfg.max_vocab);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let vocab = build_vocab(text.lines(), max_vocab)?;
    write_text(&ctx.cfg.paths.vocab, &vocab.to_json())?;
    println!("vocabulary of {} written to {}", vocab.size(), ctx.cfg.paths.vocab.display());
    Ok(())
}

pub fn gen_tasks(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let pair = generate_task_pair_with(&cfg.tasks, cfg.seed, cfg.relatedness)?;
    let shift = generate_shift_pair(&cfg.tasks, cfg.seed)?;
    let files: [(&str, &Vocabulary, &[LabeledExample], &[LabeledExample]); 3] = [
        ("source", &pair.vocab, &pair.source.train, &pair.source.test),
        ("target", &pair.vocab, &pair.target.train, &pair.target.test),
        ("shift", &shift.vocab, &shift.seed_train, &shift.target),
    ];
    for (name, vocab, train, test) in files {
        write_text(&ctx.task_file(name, "train"), &labeled_jsonl(train))?;
        write_text(&ctx.task_file(name, "test"), &labeled_jsonl(test))?;
        write_text(&cfg.paths.tasks.join(format!("{name}.vocab.json")), &vocab.to_json())?;
    }
    println!(
        "tasks source/target (relatedness {}, {} flipped keywords) and shift written to {}",
        cfg.relatedness,
        pair.flipped_keywords,
        cfg.paths.tasks.display()
    );
    Ok(())
}

pub fn pretrain_cmd(ctx: &Context, from: Option<&Path>) -> Result<()> {
    let (vocab, samples) = ctx.load_corpus()?;
    let mut enc = match from {
        Some(p) => {
            require(p, "initial checkpoint")?;
            checkpoint::load_encoder(p)?
        }
        None => Encoder::init(ctx.cfg.model.build(vocab.size(), ctx.cfg.seed))?,
    };
    let out = ctx.checkpoint_path();
    if let Some(dir) = out.parent() {
        ensure_dir(dir)?;
    }
    let records = pretrain(&mut enc, &samples, &ctx.cfg.pretrain)?;
    checkpoint::save_encoder(&enc, &out)?;
    write_metrics(ctx, "pretrain", &records)?;
    if let Some(last) = records.last() {
        print_json(last)?;
    }
    Ok(())
}

pub fn scan(ctx: &Context) -> Result<()> {
    let (_, samples) = ctx.load_corpus()?;
    let path = ctx.checkpoint_path();
    require(&path, "checkpoint")?;
    let enc = checkpoint::load_encoder(&path)?;
    let index = self_question_scan(&enc, &samples, ctx.cfg.scan.margin)?;
    write_text(&ctx.cfg.paths.index, &index_jsonl(&index))?;
    println!("{} neglected tokens written to {}", index.len(), ctx.cfg.paths.index.display());
    Ok(())
}

pub fn evolve(ctx: &Context) -> Result<()> {
    let (_, samples) = ctx.load_corpus()?;
    let path = ctx.checkpoint_path();
    require(&path, "checkpoint")?;
    let mut enc = checkpoint::load_encoder(&path)?;
    if let Some(dir) = ctx.cfg.paths.evolved.parent() {
        ensure_dir(dir)?;
    }
    let run = self_evolve(&mut enc, &samples, &ctx.cfg.evolve)?;
    checkpoint::save_encoder(&enc, &ctx.cfg.paths.evolved)?;
    write_text(&ctx.cfg.paths.index, &index_jsonl(&run.index))?;
    write_metrics(ctx, "evolve", &run.metrics)?;
    if let Some(last) = run.metrics.last() {
        print_json(last)?;
    }
    Ok(())
}

pub fn finetune(ctx: &Context) -> Result<()> {
    let name = ctx.task_name(&ctx.target, "target");
    let task = ctx.load_task(&name)?;
    let enc = ctx.task_encoder(&task.vocab)?;
    let mut model = Classifier::new(enc, task.classes, ctx.cfg.seed);
    let mut records = finetune_classifier(&mut model, &task.train, &ctx.cfg.finetune)?;
    let acc = model.accuracy(&task.test)?;
    let mut r = MetricsRecord::new("eval", ctx.cfg.finetune.steps);
    r.accuracy = Some(acc);
    records.push(r);
    let out = ctx.out.join(format!("{name}.classifier.ckpt"));
    checkpoint::save_classifier(&model, &out)?;
    write_metrics(ctx, &format!("finetune-{name}"), &records)?;
    print_json(&serde_json::json!({ "task": name, "test_accuracy": acc, "checkpoint": out }))
}

pub fn prompt_tune_cmd(ctx: &Context) -> Result<()> {
    let name = ctx.task_name(&ctx.target, "source");
    let task = ctx.load_task(&name)?;
    let enc = ctx.task_encoder(&task.vocab)?;
    let d = enc.config().hidden_size;
    let mut model = PromptModel::new(&name, d, task.classes, &ctx.cfg.prompt)?;
    let mut records = prompt_tune(&enc, &mut model, &task.train, &ctx.cfg.prompt)?;
    let acc = model.accuracy(&enc, &task.test)?;
    let mut r = MetricsRecord::new("eval", ctx.cfg.prompt.steps);
    r.accuracy = Some(acc);
    records.push(r);
    let path = ctx.prompt_file(&name)?;
    ensure_dir(&ctx.cfg.paths.prompts)?;
    checkpoint::save_prompt(&model, &path)?;
    write_metrics(ctx, &format!("prompt-{name}"), &records)?;
    print_json(&serde_json::json!({ "task": name, "test_accuracy": acc, "prompt": path }))
}

pub fn prompt_transfer(ctx: &Context) -> Result<()> {
    let source = ctx.task_name(&ctx.source, "source");
    let target = ctx.task_name(&ctx.target, "target");
    let teacher_path = ctx.prompt_file(&source)?;
    require(&teacher_path, &format!("prompt for source task {source}"))?;
    let task = ctx.load_task(&target)?;
    let threshold = ctx.cfg.low_resource_threshold;
    if task.train.len() >= threshold {
        warn!(
            "target task {target} has {} training examples (low_resource_threshold {threshold}); \
             prompt transfer is intended for low-resource tasks and full fine-tuning is recommended here; proceeding",
            task.train.len()
        );
    }
    let teacher = checkpoint::load_prompt(&teacher_path)?;
    let enc = ctx.task_encoder(&task.vocab)?;
    if teacher.prompt.vectors.last_dim() != enc.config().hidden_size {
        return Err(Error::Config(format!(
            "source prompt width {} does not match the encoder ({})",
            teacher.prompt.vectors.last_dim(),
            enc.config().hidden_size
        )));
    }
    let (report, outcome) = TransferReport::run(&enc, &teacher, &target, &task.train, &task.test, &ctx.cfg.kd_config())?;
    ensure_dir(&ctx.cfg.paths.prompts)?;
    checkpoint::save_prompt(&outcome.student, &ctx.prompt_file(&target)?)?;
    let report_path = ctx.out.join(format!("transfer-{source}-{target}.json"));
    write_text(&report_path, &serde_json::to_string_pretty(&report)?)?;
    write_metrics(ctx, &format!("kd-{source}-{target}"), &outcome.metrics)?;
    print_json(&report)
}

#[derive(Serialize)]
struct TransductiveSummary {
    task: String,
    rounds: usize,
    converged: bool,
    agreements: Vec<f64>,
    target_accuracy: f64,
}

pub fn transductive(ctx: &Context) -> Result<()> {
    let name = ctx.task_name(&ctx.target, "shift");
    let task = ctx.load_task(&name)?;
    let enc = ctx.task_encoder(&task.vocab)?;
    let mut model = Classifier::new(enc, task.classes, ctx.cfg.seed);
    let run = transductive_finetune(&mut model, &task.train, &task.test, &ctx.cfg.transductive_config())?;
    let acc = model.accuracy(&task.test)?;
    let mut records = run.metrics.clone();
    let mut r = MetricsRecord::new("eval", records.last().map_or(0, |r| r.step));
    r.accuracy = Some(acc);
    records.push(r);
    checkpoint::save_classifier(&model, &ctx.out.join(format!("{name}.transductive.ckpt")))?;
    write_metrics(ctx, &format!("transductive-{name}"), &records)?;
    print_json(&TransductiveSummary {
        task: name,
        rounds: run.trace.len(),
        converged: run.converged,
        agreements: run.trace.iter().map(|s| s.agreement).collect(),
        target_accuracy: acc,
    })
}

#[derive(Serialize, Default)]
struct EvalReport {
    checkpoint: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    slot_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neglected_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
}

/// Scores a checkpoint: corpus metrics for encoders when a corpus is
/// present, task accuracy for classifiers, or a stored prompt's accuracy
/// when `--target` names a prompted task.
pub fn eval(ctx: &Context) -> Result<()> {
    let path = ctx.checkpoint_path();
    require(&path, "checkpoint")?;
    let ck = checkpoint::Checkpoint::load(&path)?;
    let mut report = EvalReport {
        checkpoint: path.display().to_string(),
        ..Default::default()
    };
    match ck.header {
        Header::Encoder { .. } => {
            report.kind = "encoder".into();
            let enc = checkpoint::load_encoder(&path)?;
            if ctx.cfg.paths.corpus.is_file() {
                let (_, samples) = ctx.load_corpus()?;
                report.slot_acc = knowledge_slot_accuracy(&enc, &samples)?;
                report.neglected_count = Some(self_question_scan(&enc, &samples, ctx.cfg.scan.margin)?.len());
            }
            if let Some(t) = &ctx.target {
                let prompt = ctx.prompt_file(t)?;
                require(&prompt, &format!("prompt for task {t}"))?;
                let task = ctx.load_task(t)?;
                let model = checkpoint::load_prompt(&prompt)?;
                report.task = Some(t.clone());
                report.accuracy = Some(model.accuracy(&enc, &task.test)?);
            }
        }
        Header::Classifier { .. } => {
            report.kind = "classifier".into();
            let model = checkpoint::load_classifier(&path)?;
            let t = ctx.task_name(&ctx.target, "target");
            let task = ctx.load_task(&t)?;
            report.task = Some(t);
            report.accuracy = Some(model.accuracy(&task.test)?);
        }
        Header::Prompt { task, .. } => {
            return Err(Error::Config(format!(
                "{} is the prompt for task {task}; pass an encoder with --checkpoint and --target {task}",
                path.display()
            )));
        }
    }
    print_json(&report)
}

pub fn report(files: &[PathBuf], plot_path: Option<&Path>) -> Result<()> {
    let mut runs = Vec::new();
    let mut series = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::Io {
            path: f.clone(),
            source: e,
        })?;
        let records = metrics::parse_jsonl(&text).map_err(|e| match e {
            Error::Parse { line, detail } => Error::Parse {
                line,
                detail: format!("{}: {detail}", f.display()),
            },
            other => other,
        })?;
        let name = f.file_stem().map_or_else(|| f.display().to_string(), |s| s.to_string_lossy().into_owned());
        runs.push(metrics::summarize(&name, &records)?);
        series.push((name, records));
    }
    print!("{}", metrics::report_csv(&runs));
    if let Some(p) = plot_path {
        plot::render(&series, p)?;
        info!("plot written to {}", p.display());
    }
    Ok(())
}
