use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use msaupaf::baseline::{heuristic_link, labeled_boxes, DistanceMode};
use msaupaf::chargrid::{build_vocab, rasterize};
use msaupaf::decode::DecodedForm;
use msaupaf::eval::{ClassMatch, EvalReport, DEFAULT_IOU};
use msaupaf::funsd::{dataset_stats, load_split, write_form, FormDocument};
use msaupaf::model::{prepare, Model, RunConfig};
use msaupaf::render::{render_svg, Heat};
use msaupaf::synth::{generate, LayoutMode, SynthSpec};
use msaupaf::train::train;
use msaupaf::{Error, Result};

#[derive(Parser)]
#[command(name = "msaupaf", version, about = "Char-grid form labeling and linking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics of annotation directories.
    Stats {
        #[arg(long, required = true)]
        split: Vec<PathBuf>,
    },
    /// Write synthetic annotated forms.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "easy")]
        mode: String,
        #[arg(long, default_value_t = 20)]
        n_forms: usize,
        #[arg(long, default_value_t = 5)]
        rows: usize,
        #[arg(long, default_value_t = 2)]
        columns: usize,
        #[arg(long, default_value_t = 0.2)]
        fan_out: f64,
        #[arg(long, default_value_t = 0.2)]
        distractor: f64,
        #[arg(long, default_value_t = 512)]
        page_width: u32,
        #[arg(long, default_value_t = 512)]
        page_height: u32,
    },
    /// Train a model on an annotation directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode annotation inputs with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth, matching files by name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        #[arg(long, default_value = "joint")]
        class_match: String,
    },
    /// Distance-based linking baseline.
    LinkHeuristic {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Labels::Gt)]
        labels: Labels,
        /// Model whose segmentation provides labels with `--labels pred`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "center")]
        distance: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG overlays of annotations or model predictions.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    Gt,
    Pred,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } | Error::Validation(_) | Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_forms(dir: &Path) -> Result<Vec<(String, FormDocument)>> {
    let forms: Vec<_> = load_split(dir)?.into_iter().map(|(n, f, _)| (n, f)).collect();
    if forms.is_empty() {
        return Err(Error::Config(format!("no annotation files in {}", dir.display())));
    }
    Ok(forms)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Stats { split } => {
            for dir in split {
                let loaded = load_split(&dir)?;
                let forms: Vec<FormDocument> = loaded.iter().map(|(_, f, _)| f.clone()).collect();
                let rejected: usize = loaded.iter().map(|(_, _, r)| r.rejected_links.len()).sum();
                let raw: usize = loaded.iter().map(|(_, _, r)| r.raw_link_entries).sum();
                let stats = dataset_stats(&forms);
                println!("{}", dir.display());
                print!("{}", stats.table());
                print!("{}", stats.key_values());
                println!("raw_link_entries={raw}\nrejected_links={rejected}");
            }
            Ok(())
        }
        Command::Synth {
            seed,
            out,
            mode,
            n_forms,
            rows,
            columns,
            fan_out,
            distractor,
            page_width,
            page_height,
        } => {
            let spec = SynthSpec {
                n_forms,
                page_width,
                page_height,
                rows,
                columns,
                fan_out,
                distractor,
                mode: mode.parse::<LayoutMode>()?,
            };
            let forms = generate(seed, &spec)?;
            create_dir(&out)?;
            for (i, f) in forms.iter().enumerate() {
                write_file(&out.join(format!("form_{i:04}.json")), &write_form(f))?;
            }
            println!("forms={}", forms.len());
            Ok(())
        }
        Command::Train {
            data,
            out,
            config,
            overrides,
            epochs,
            seed,
        } => {
            let mut run = RunConfig::default();
            if let Some(p) = config {
                let text = fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                run.apply_text(&text)?;
            }
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
                run.set(k.trim(), v.trim())?;
            }
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            run.validate()?;
            let forms: Vec<FormDocument> = load_forms(&data)?.into_iter().map(|(_, f)| f).collect();
            let vocab = build_vocab(&forms, run.train.vocab_size)?;
            create_dir(&out)?;
            let log_path = out.join("train.log");
            let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut io_err = None;
            let outcome = train(&forms, &vocab, &run, Some(&out), |line| {
                println!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    io_err.get_or_insert(e);
                }
            });
            if let Some(e) = io_err {
                return Err(Error::io(&log_path, e));
            }
            outcome.map(|_| ())
        }
        Command::Decode { model, input, out } => {
            let m = Model::load(&model)?;
            create_dir(&out)?;
            let forms = load_forms(&input)?;
            for (name, f) in &forms {
                let d = m.predict(f)?;
                write_decoded(&out.join(format!("{name}.json")), &d)?;
            }
            println!("decoded={}", forms.len());
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            iou,
            class_match,
        } => {
            let mode: ClassMatch = class_match.parse()?;
            if !(iou > 0.0 && iou <= 1.0) {
                return Err(Error::Config(format!("iou threshold must lie in (0, 1], got {iou}")));
            }
            let gts = load_forms(&gt)?;
            let preds: std::collections::HashMap<String, FormDocument> = load_split(&pred)?
                .into_iter()
                .map(|(n, f, _)| (n, f))
                .collect();
            let mut report = EvalReport::default();
            for (name, g) in &gts {
                let empty = FormDocument {
                    page_width: g.page_width,
                    page_height: g.page_height,
                    entities: vec![],
                    links: vec![],
                };
                let p = preds.get(name).unwrap_or_else(|| {
                    log::warn!("no prediction for {name}; scoring it as empty");
                    &empty
                });
                report.add_form(p, g, iou, mode);
            }
            print!("{}", report.table());
            print!("{}", report.key_values());
            Ok(())
        }
        Command::LinkHeuristic {
            input,
            labels,
            model,
            distance,
            out,
        } => {
            let mode: DistanceMode = distance.parse()?;
            let m = match (labels, model) {
                (Labels::Pred, Some(p)) => Some(Model::load(&p)?),
                (Labels::Pred, None) => return Err(Error::Config("--labels pred needs --model".into())),
                (Labels::Gt, _) => None,
            };
            if let Some(dir) = &out {
                create_dir(dir)?;
            }
            let mut report = EvalReport::default();
            for (name, g) in load_forms(&input)? {
                let mut pred = match &m {
                    Some(m) => m.predict(&g)?.to_form_document(),
                    None => g.clone(),
                };
                pred.links = heuristic_link(&labeled_boxes(&pred), mode);
                pred.sync_entity_links();
                report.add_form(&pred, &g, DEFAULT_IOU, ClassMatch::Joint);
                if let Some(dir) = &out {
                    write_file(&dir.join(format!("{name}.json")), &write_form(&pred))?;
                }
            }
            print!("{}", report.key_values());
            Ok(())
        }
        Command::Render { input, out, model } => {
            let m = model.map(|p| Model::load(&p)).transpose()?;
            let forms = load_forms(&input)?;
            create_dir(&out)?;
            let all: Vec<FormDocument> = forms.iter().map(|(_, f)| f.clone()).collect();
            let vocab = match &m {
                Some(m) => m.vocab.clone(),
                None => build_vocab(&all, RunConfig::default().train.vocab_size)?,
            };
            for (name, f) in &forms {
                let svg = match &m {
                    Some(m) => {
                        let grid = rasterize(f, &m.vocab, m.run.train.median_height)?;
                        let (_, pif, _) = m.fields(&grid)?;
                        let heat = max_over_classes(&pif.conf, pif.classes, pif.height, pif.width);
                        let cell_px = grid.scale * m.run.net.field_stride as f64;
                        let d = m.predict(f)?.to_form_document();
                        render_svg(&d, &grid, Some(&Heat { height: pif.height, width: pif.width, cell_px, values: heat }))
                    }
                    None => {
                        let run = RunConfig::default();
                        let p = prepare(f, &vocab, &run)?;
                        let t = &p.targets.pif;
                        let heat = max_over_classes(&t.conf, t.classes, t.height, t.width);
                        let cell_px = p.grid.scale * run.net.field_stride as f64;
                        render_svg(f, &p.grid, Some(&Heat { height: t.height, width: t.width, cell_px, values: heat }))
                    }
                };
                write_file(&out.join(format!("{name}.svg")), svg.as_bytes())?;
            }
            println!("rendered={}", forms.len());
            Ok(())
        }
    }
}

fn max_over_classes(conf: &[f64], classes: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    (0..n)
        .map(|p| (0..classes).map(|k| conf[k * n + p]).fold(0.0, f64::max))
        .collect()
}

fn write_decoded(path: &Path, d: &DecodedForm) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(&d.to_json()).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &bytes)
}
