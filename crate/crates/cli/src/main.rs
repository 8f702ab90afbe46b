use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use foqa::classifier::{format_classifier_line, parse_classifier_file, train_classifier, LabeledQuestion, CLASSIFIER_TASK};
use foqa::entity_index::EntityIndex;
use foqa::eval::{
    blame_analysis, evaluate_p_at_1, format_ablation_table, format_blame_table, latency_bench, run_ablations, to_json_lines,
};
use foqa::kb::{load_kb, parse_annotated_questions, KnowledgeBase};
use foqa::nn::{parse_grid, ConfigReport, EmbeddingTable, TrainConfig};
use foqa::pipeline::{
    pass_label, refresh_manifest, write_manifest, AblationConfig, Engine, EngineManifest, QaResult, CLASSIFIER_FILE,
    ENTITY_INDEX_FILE, REACH_INDEX_FILE, TAGGER_FILE,
};
use foqa::reach_index::ReachIndex;
use foqa::synth::{generate, load_spec, SPLITS};
use foqa::tagger::{format_tagger_line, induce_tags, parse_tagger_file, train_tagger, TrainOptions, TAGGER_TASK};
use foqa::text::normalize;

#[derive(Parser)]
#[command(name = "foqa", version, about = "First-order factoid question answering over a fact store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Tagger,
    Classifier,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge base and question splits.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build and serialize the entity and reachability indexes.
    BuildIndex {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        aliases: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn an annotated question file into tagger and classifier training files.
    Convert {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        aliases: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        tagger_out: PathBuf,
        #[arg(long)]
        classifier_out: PathBuf,
    },
    /// Grid-train a tagger or relation classifier.
    Train {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Parallel grid configurations; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Pretrained vectors in word2vec text format.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Padded input length; defaults to the longest question.
        #[arg(long)]
        input_length: Option<usize>,
    },
    /// Generate data, build indexes and train both models into one engine directory.
    BuildEngine {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        tagger_grid: PathBuf,
        #[arg(long)]
        classifier_grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Evaluate P@1 on an annotated question file.
    Eval {
        #[arg(long)]
        engine: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also report the four ablation configurations.
        #[arg(long)]
        ablate: bool,
        /// Also attribute errors to entity detection and relation prediction.
        #[arg(long)]
        blame: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write one JSON record per question.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Exit non-zero when P@1 falls below this value.
        #[arg(long)]
        min_p_at_1: Option<f64>,
    },
    /// Answer questions read from standard input, one per line.
    Ask {
        #[arg(long)]
        engine: PathBuf,
        /// Print one JSON diagnostic record per question instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Measure sequential answering latency.
    Bench {
        #[arg(long)]
        engine: PathBuf,
        /// Plain questions or annotated rows; the last tab-separated field is used.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Use at most this many questions.
        #[arg(long)]
        limit: Option<usize>,
        /// Exit non-zero when the mean latency exceeds this many milliseconds.
        #[arg(long)]
        max_mean_ms: Option<f64>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_engine(dir: &Path) -> Result<Engine> {
    Engine::load(dir).with_context(|| format!("cannot load engine from {}", dir.display()))
}

fn report_table(reports: &[ConfigReport], metric: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{:<4}{:<34}{:>10}{:>8}{:>12}{:>9}", "#", "config", metric, "epoch", "train loss", "secs").unwrap();
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            out,
            "{:<4}{:<34}{:>10.4}{:>8}{:>12.5}{:>9.1}",
            i + 1,
            r.config.to_string(),
            r.metric,
            r.best_epoch,
            r.final_train_loss,
            r.seconds
        )
        .unwrap();
    }
    out
}

fn best_index(reports: &[ConfigReport]) -> usize {
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.metric > reports[best].metric {
            best = i;
        }
    }
    best
}

fn train_model(
    task: Task,
    train: &str,
    valid: &str,
    grid: &[TrainConfig],
    options: &TrainOptions,
) -> Result<(String, Vec<ConfigReport>)> {
    Ok(match task {
        Task::Tagger => {
            let (t, v) = (parse_tagger_file(train)?, parse_tagger_file(valid)?);
            let (model, reports) = train_tagger(&t, &v, grid, options)?;
            (model.to_text(), reports)
        }
        Task::Classifier => {
            let (t, v) = (parse_classifier_file(train)?, parse_classifier_file(valid)?);
            let (model, reports) = train_classifier(&t, &v, grid, options)?;
            (model.to_text(), reports)
        }
    })
}

fn print_training(task: Task, reports: &[ConfigReport]) {
    let (name, metric) = match task {
        Task::Tagger => (TAGGER_TASK, "f1"),
        Task::Classifier => (CLASSIFIER_TASK, "accuracy"),
    };
    print!("{}", report_table(reports, metric));
    let b = best_index(reports);
    println!("selected {name} config #{}: {} ({metric} {:.4})", b + 1, reports[b].config, reports[b].metric);
}

fn build_indexes(kb: &KnowledgeBase, out: &Path) -> Result<()> {
    let idx = EntityIndex::build(kb);
    let reach = ReachIndex::build(kb);
    write(&out.join(ENTITY_INDEX_FILE), &idx.dump())?;
    write(&out.join(REACH_INDEX_FILE), &reach.dump())?;
    let stats = kb.stats();
    println!(
        "indexed {} entities, {} facts, {} relations: {} keys, {} reach entries",
        stats.num_entities,
        stats.num_facts,
        stats.num_relations,
        idx.key_count(),
        reach.total_entries()
    );
    Ok(())
}

fn print_result(r: &QaResult) {
    match r.answer() {
        Some(a) => println!("answer: {}", a.text),
        None => println!("answer: (none)"),
    }
    let q = &r.query;
    let spans: Vec<String> = q.spans.iter().map(|s| format!("\"{s}\"")).collect();
    let note = if q.no_entity { " (no entity tagged)" } else { "" };
    println!("query: entity={}{note} relation={}", spans.join(" | "), q.relation);
    if r.selection.relation != q.relation {
        println!("constrained relation: {}", r.selection.relation);
    }
    let passes: Vec<String> = r.candidates.passes.iter().map(|p| pass_label(p.n)).collect();
    print!("candidates: {} after passes {}", r.candidates.len(), passes.join(" -> "));
    if let Some(a) = r.answer() {
        print!("; source {} score {:.4}", a.source_entity, a.score);
    }
    println!();
    let t = &r.timing;
    println!(
        "timing: tagging {:.3} ms, classification {:.3} ms, linking {:.3} ms, selection {:.3} ms, total {:.3} ms",
        t.tagging_ms, t.classification_ms, t.linking_ms, t.selection_ms, t.total_ms
    );
}

/// Runs a subcommand; `Ok(false)` means a supplied threshold was missed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let mut spec = load_spec(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            data.write_to(&out)?;
            let m = &data.manifest;
            println!(
                "wrote {} entities, {} facts, {} relations; splits {}",
                m.num_entities,
                m.num_facts,
                m.num_relations,
                SPLITS.iter().map(|s| format!("{s} {}", m.splits[*s])).collect::<Vec<_>>().join(", ")
            );
        }
        Command::BuildIndex { kb, aliases, out } => {
            let kb = load_kb(&read(&kb)?, &read(&aliases)?)?;
            build_indexes(&kb, &out)?;
            if out.join(TAGGER_FILE).exists() && out.join(CLASSIFIER_FILE).exists() {
                refresh_manifest(&out)?;
            } else {
                write_manifest(&out, &EngineManifest::base())?;
            }
        }
        Command::Convert { kb, aliases, questions, tagger_out, classifier_out } => {
            let kb = load_kb(&read(&kb)?, &read(&aliases)?)?;
            let qs = parse_annotated_questions(&read(&questions)?)?;
            let induced = induce_tags(&qs, &kb);
            let tagger: String = induced.rows.iter().map(|r| format_tagger_line(r) + "\n").collect();
            let classifier: String = qs
                .iter()
                .map(|q| format_classifier_line(&LabeledQuestion { tokens: normalize(&q.question), relation: q.relation.clone() }) + "\n")
                .collect();
            write(&tagger_out, &tagger)?;
            write(&classifier_out, &classifier)?;
            println!("{} of {} questions tagged", induced.rows.len(), qs.len());
            if !induced.skipped.is_empty() {
                let lines: Vec<String> = induced.skipped.iter().map(usize::to_string).collect();
                println!("skipped {} with no alias match: lines {}", induced.skipped.len(), lines.join(", "));
            }
        }
        Command::Train { task, train, valid, grid, out, seed, jobs, embeddings, input_length } => {
            let grid = parse_grid(&read(&grid)?).context("invalid grid file")?;
            let embeddings = match embeddings {
                Some(p) => Some(EmbeddingTable::from_word2vec(&read(&p)?, seed).context("invalid embeddings")?),
                None => None,
            };
            let options = TrainOptions { seed, input_length, embeddings, jobs };
            let (text, reports) = train_model(task, &read(&train)?, &read(&valid)?, &grid, &options)?;
            write(&out, &text)?;
            print_training(task, &reports);
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if [ENTITY_INDEX_FILE, REACH_INDEX_FILE, TAGGER_FILE, CLASSIFIER_FILE].iter().all(|f| dir.join(f).exists()) {
                refresh_manifest(dir)?;
            }
        }
        Command::BuildEngine { spec, tagger_grid, classifier_grid, out, seed, jobs } => {
            let spec = load_spec(&spec)?;
            let data = generate(&spec)?;
            data.write_to(&out.join("data"))?;
            let kb = load_kb(&data.facts, &data.aliases)?;
            build_indexes(&kb, &out)?;
            let options = TrainOptions { seed, jobs, ..Default::default() };
            let joined = |split: &str, f: &dyn Fn(&foqa::synth::GeneratedQuestion) -> String| {
                data.split(split).iter().map(|q| f(q) + "\n").collect::<String>()
            };
            for (task, grid, file) in
                [(Task::Tagger, &tagger_grid, TAGGER_FILE), (Task::Classifier, &classifier_grid, CLASSIFIER_FILE)]
            {
                let grid = parse_grid(&read(grid)?).context("invalid grid file")?;
                let line = |q: &foqa::synth::GeneratedQuestion| match task {
                    Task::Tagger => format_tagger_line(&q.tagged),
                    Task::Classifier => format_classifier_line(&q.labeled()),
                };
                let (text, reports) =
                    train_model(task, &joined("train", &line), &joined("valid", &line), &grid, &options)?;
                write(&out.join(file), &text)?;
                print_training(task, &reports);
            }
            refresh_manifest(&out)?;
            println!("engine written to {}", out.display());
        }
        Command::Eval { engine, test, ablate, blame, jobs, records, min_p_at_1 } => {
            let engine = load_engine(&engine)?;
            let test = parse_annotated_questions(&read(&test)?)?;
            let report = evaluate_p_at_1(&engine, &test, AblationConfig::FULL, jobs)?;
            println!("P@1 {:.4} ({}/{})", report.accuracy, report.correct, report.total);
            if report.unknown_relation > 0 {
                println!("{} questions have a relation outside the label space", report.unknown_relation);
            }
            if ablate {
                println!();
                print!("{}", format_ablation_table(&run_ablations(&engine, &test, jobs)?));
            }
            if blame {
                println!();
                print!("{}", format_blame_table(&blame_analysis(&report.records)));
            }
            if let Some(p) = records {
                write(&p, &to_json_lines(&report.records))?;
            }
            if let Some(min) = min_p_at_1 {
                if report.accuracy < min {
                    eprintln!("P@1 {:.4} is below the threshold {min}", report.accuracy);
                    return Ok(false);
                }
            }
        }
        Command::Ask { engine, json } => {
            let engine = load_engine(&engine)?;
            let stdin = io::stdin();
            let mut stdout = io::stdout();
            for line in stdin.lock().lines() {
                let line = line.context("cannot read standard input")?;
                if line.trim().is_empty() {
                    continue;
                }
                match engine.answer_question(&line) {
                    Ok(r) if json => println!("{}", serde_json::to_string(&r.diagnostic())?),
                    Ok(r) => print_result(&r),
                    Err(e) => eprintln!("error: {e}"),
                }
                stdout.flush()?;
            }
        }
        Command::Bench { engine, questions, reps, limit, max_mean_ms } => {
            let engine = load_engine(&engine)?;
            let mut qs: Vec<String> = read(&questions)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.rsplit('\t').next().unwrap_or(l).to_string())
                .collect();
            if let Some(n) = limit {
                qs.truncate(n);
            }
            let report = latency_bench(&engine, &qs, reps)?;
            println!("{} questions x {} repetitions", report.questions, report.repetitions);
            print!("{}", report.table());
            println!("latency {}", report.summary());
            if let Some(max) = max_mean_ms {
                if report.total.mean > max {
                    eprintln!("mean latency {:.3} ms exceeds {max} ms", report.total.mean);
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
