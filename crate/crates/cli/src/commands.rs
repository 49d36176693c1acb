use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use locemb::embedding::{self, EmbeddingStore};
use locemb::eval::{self, AblationArm, EvalOptions};
use locemb::poi::{self, DescriptionVariant};
use locemb::retrieval::{self, CandidateGrid, QuerySource};
use locemb::synth::{self, SynthSpec};
use locemb::trainer::{self, Checkpoint};
use serde_json::json;

use crate::config::{RunConfig, TextSource};
use crate::manifest::Run;
use crate::{AblateArgs, EvalArgs, Invalid, PrepareArgs, Preset, RetrieveArgs, SynthArgs, Task, TrainArgs};

pub const DESCRIPTIONS_FILE: &str = "descriptions.txt";
pub const IDS_FILE: &str = "ids.txt";
pub const VECTORS_FILE: &str = "vectors.gemb";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SPLIT_FILE: &str = "split.json";

fn out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(run: &mut Run, path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    run.output(path);
    Ok(())
}

fn write_json<T: serde::Serialize>(run: &mut Run, path: PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_text(run, path, &text)
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let mut run = Run::start("prepare");
    run.config(&json!({
        "pois": args.pois,
        "variant": args.variant,
        "fallback_dim": args.fallback_dim,
        "fallback_seed": args.fallback_seed,
    }))?;
    let records = poi::load_poi_csv(&args.pois)?;
    run.input(&args.pois)?;
    out_dir(&args.out)?;

    let mut texts = String::new();
    let mut ids = String::new();
    let descs: Vec<_> = records.iter().map(|r| poi::render_description(r, args.variant)).collect();
    for d in &descs {
        if d.text.contains(['\n', '\r']) || d.poi_id.contains(['\n', '\r']) {
            return Err(Invalid(format!("POI {:?} has a line break in its id or description", d.poi_id)).into());
        }
        texts.push_str(&d.text);
        texts.push('\n');
        ids.push_str(&d.poi_id);
        ids.push('\n');
    }
    write_text(&mut run, args.out.join(DESCRIPTIONS_FILE), &texts)?;
    write_text(&mut run, args.out.join(IDS_FILE), &ids)?;

    if let Some(dim) = args.fallback_dim {
        let store = embedding::fallback_store(
            descs.iter().map(|d| (d.poi_id.as_str(), d.text.as_str())),
            dim,
            args.fallback_seed,
        )?;
        let vectors = args.out.join(VECTORS_FILE);
        embedding::write_embeddings(&store, &vectors, args.out.join(IDS_FILE))?;
        run.output(vectors);
    }
    run.finish(&args.out)?;
    println!("{} descriptions ({}) written to {}", descs.len(), args.variant, args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut run = Run::start("train");
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.train.description_variant = v;
    }
    cfg.check()?;
    run.config(&cfg)?;
    run.seeds(&[cfg.train.seed]);
    run.input(&args.config)?;

    let pois = cfg.pois()?;
    let records = poi::load_poi_csv(pois)?;
    run.input(pois)?;
    let store = cfg.data.text.load(&records, cfg.train.description_variant)?;
    for f in cfg.data.text.input_files() {
        run.input(f)?;
    }

    log::info!(
        "training on {} POIs, text dim {} ({})",
        records.len(),
        store.dim(),
        cfg.data.text.tag()
    );
    let outcome = trainer::train(&records, &store, &cfg.train)?;
    out_dir(&args.out)?;
    let ck = &outcome.checkpoint;
    let ck_path = args.out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    run.output(ck_path);
    let log_path = args.out.join(TRAIN_LOG_FILE);
    outcome.log.save_csv(&log_path)?;
    run.output(log_path);
    let split_path = args.out.join(SPLIT_FILE);
    outcome.split.save_json(&split_path)?;
    run.output(split_path);
    run.config_hash(&ck.config_hash);
    run.finish(&args.out)?;

    println!(
        "trained {} epochs; kept epoch {} (val loss {:.6}); checkpoint {}",
        outcome.log.epochs.len(),
        ck.epoch,
        ck.best_val_loss,
        args.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval_options(config: Option<&Path>, run: &mut Run) -> Result<EvalOptions> {
    match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            run.input(p)?;
            Ok(cfg.eval)
        }
        None => Ok(EvalOptions::default()),
    }
}

fn print_reports(reports: &[eval::EvalReport]) {
    for r in reports {
        let cols: Vec<String> = r
            .metrics
            .iter()
            .map(|m| format!("{} {:.2} ± {:.2}", m.name, m.mean * eval::report::TABLE_SCALE, m.std * eval::report::TABLE_SCALE))
            .collect();
        println!("{} {:<6} {}", r.task, r.head.as_str(), cols.join(", "));
        for n in &r.notes {
            println!("  note: {n}");
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut run = Run::start("eval");
    let opts = eval_options(args.config.as_deref(), &mut run)?;
    let seeds = args.probe.seed_list();
    if seeds.is_empty() || args.probe.heads.is_empty() {
        return Err(Invalid("need at least one seed and one head".into()).into());
    }
    let task = match args.task {
        Task::Luc => "luc",
        Task::Sdm => "sdm",
    };
    run.config(&json!({
        "task": task,
        "data": args.data,
        "heads": args.probe.heads,
        "seeds": seeds,
        "eval": opts,
    }))?;
    run.seeds(&seeds);

    let ck = Checkpoint::load(&args.checkpoint)?;
    run.input(&args.checkpoint)?;
    run.config_hash(&ck.config_hash);
    let reports = match args.task {
        Task::Luc => {
            let samples = eval::load_luc_csv(&args.data).with_context(|| format!("reading LUC data {}", args.data.display()))?;
            run.input(&args.data)?;
            eval::run_luc(&ck, &samples, &args.probe.heads, &seeds, &opts)?
        }
        Task::Sdm => {
            let regions = eval::load_sdm_csv(&args.data).with_context(|| format!("reading SDM data {}", args.data.display()))?;
            run.input(&args.data)?;
            eval::run_sdm(&ck, &regions, &args.probe.heads, &seeds, &opts)?
        }
    };

    out_dir(&args.out)?;
    write_json(&mut run, args.out.join(format!("{task}_report.json")), &reports)?;
    let table = args.out.join(format!("{task}_table.csv"));
    eval::write_table_csv(&reports, create(&table)?)?;
    run.output(table);
    run.finish(&args.out)?;
    print_reports(&reports);
    Ok(())
}

fn read_candidates(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let (lon, lat) = (col("lon")?, col("lat")?);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let parse = |c: usize| row.get(c).and_then(|v| v.trim().parse::<f64>().ok());
        match (parse(lon), parse(lat)) {
            (Some(x), Some(y)) if x.is_finite() && y.is_finite() => out.push((x, y)),
            _ => return Err(Invalid(format!("{}: bad coordinate, line {}", path.display(), i + 2)).into()),
        }
    }
    Ok(out)
}

pub fn retrieve(args: &RetrieveArgs) -> Result<()> {
    let mut run = Run::start("retrieve");
    run.config(&json!({
        "query_id": args.query_id,
        "text": args.text,
        "vectors": args.vectors,
        "ids": args.ids,
        "fallback_seed": args.fallback_seed,
        "grid": format!("{}x{}", args.grid.width, args.grid.height),
        "candidates": args.candidates,
        "k": args.k,
        "svg": args.svg,
    }))?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    run.input(&args.checkpoint)?;
    run.config_hash(&ck.config_hash);

    let (label, query) = match (&args.query_id, &args.text) {
        (Some(id), _) => {
            let (v, i) = match (&args.vectors, &args.ids) {
                (Some(v), Some(i)) => (v, i),
                _ => return Err(Invalid("--query-id needs --vectors and --ids".into()).into()),
            };
            let store: EmbeddingStore = embedding::load_embeddings(v, i)?;
            run.input(v)?;
            run.input(i)?;
            let q = retrieval::embed_query(QuerySource::Store { store: &store, key: id }, &ck)?;
            (id.clone(), q)
        }
        (None, Some(text)) => {
            let q = retrieval::embed_query(
                QuerySource::Fallback {
                    text,
                    seed: args.fallback_seed,
                },
                &ck,
            )?;
            (text.clone(), q)
        }
        (None, None) => return Err(Invalid("give --query-id or --text".into()).into()),
    };

    let grid = match &args.candidates {
        Some(p) => {
            let c = read_candidates(p)?;
            run.input(p)?;
            CandidateGrid::custom(c)
        }
        None => CandidateGrid::for_checkpoint(&ck, args.grid.width, args.grid.height)?,
    };
    grid.embed(&ck)?;
    let top = retrieval::topk(query.view(), &grid, args.k, &label)?;
    let field = retrieval::similarity_field(query.view(), &grid)?;

    out_dir(&args.out)?;
    write_json(&mut run, args.out.join("topk.geojson"), &top.to_geojson())?;
    write_json(&mut run, args.out.join("field.geojson"), &field.to_geojson(Some(&top)))?;
    let csv_path = args.out.join("field.csv");
    field.write_csv(create(&csv_path)?)?;
    run.output(csv_path);
    if args.svg {
        write_text(&mut run, args.out.join("heatmap.svg"), &field.to_svg(4)?)?;
    }
    run.finish(&args.out)?;

    println!("top {} of {} candidates for {label:?}:", args.k, grid.len());
    for (i, r) in top.ranked.iter().take(10).enumerate() {
        println!("{:>3}. ({:.6}, {:.6}) {:.6}", i + 1, r.lon, r.lat, r.score);
    }
    Ok(())
}

/// Vector source for each requested variant: explicit `[[arms]]` entries
/// first, else the run's own vectors for the configured variant, else the
/// hashing encoder.
fn ablation_sources(cfg: &RunConfig, variants: &[DescriptionVariant]) -> Vec<(DescriptionVariant, String, TextSource)> {
    let mut out = Vec::new();
    for &v in variants {
        let explicit: Vec<_> = cfg.arms.iter().filter(|a| a.variant == v).collect();
        if explicit.is_empty() {
            let text = if v == cfg.train.description_variant {
                cfg.data.text.clone()
            } else {
                TextSource {
                    vectors: None,
                    ids: None,
                    ..cfg.data.text.clone()
                }
            };
            out.push((v, text.tag().to_string(), text));
        } else {
            for a in explicit {
                let tag = a.source_tag.clone().unwrap_or_else(|| a.text.tag().to_string());
                out.push((v, tag, a.text.clone()));
            }
        }
    }
    out
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let mut run = Run::start("ablate");
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.train_seed {
        cfg.train.seed = s;
    }
    cfg.check()?;
    let seeds = args.probe.seed_list();
    if seeds.is_empty() || args.probe.heads.is_empty() || args.variants.is_empty() {
        return Err(Invalid("need at least one variant, seed and head".into()).into());
    }
    if cfg.data.luc.is_none() && cfg.data.sdm.is_none() {
        return Err(Invalid("ablation needs `data.luc` and/or `data.sdm`".into()).into());
    }
    run.config(&json!({ "run": cfg, "variants": args.variants, "heads": args.probe.heads, "seeds": seeds }))?;
    run.config_hash(&cfg.train.config_hash());
    run.seeds(&seeds);
    run.input(&args.config)?;

    let pois = cfg.pois()?;
    let records = poi::load_poi_csv(pois)?;
    run.input(pois)?;
    let luc = match &cfg.data.luc {
        Some(p) => {
            run.input(p)?;
            eval::load_luc_csv(p)?
        }
        None => Vec::new(),
    };
    let sdm = match &cfg.data.sdm {
        Some(p) => {
            run.input(p)?;
            eval::load_sdm_csv(p)?
        }
        None => Vec::new(),
    };

    let mut arms = Vec::new();
    for (variant, source_tag, text) in ablation_sources(&cfg, &args.variants) {
        let store = text.load(&records, variant)?;
        for f in text.input_files() {
            run.input(f)?;
        }
        arms.push(AblationArm {
            variant,
            source_tag,
            store,
            truncate: None,
        });
    }
    let rows = eval::run_ablation(&records, &arms, &cfg.train, &luc, &sdm, &args.probe.heads, &seeds, &cfg.eval)?;

    out_dir(&args.out)?;
    for row in &rows {
        let name = format!("ablation_{}_{}.json", row.variant, row.source_tag);
        let doc = json!({
            "variant": row.variant,
            "source_tag": row.source_tag,
            "best_epoch": row.best_epoch,
            "best_val_loss": row.best_val_loss,
            "luc": row.luc,
            "sdm": row.sdm,
        });
        write_json(&mut run, args.out.join(name), &doc)?;
    }
    let csv_path = args.out.join("ablation.csv");
    eval::write_ablation_csv(&rows, create(&csv_path)?)?;
    run.output(csv_path);
    run.finish(&args.out)?;

    for row in &rows {
        println!("{} (best epoch {})", row.label(), row.best_epoch);
        print_reports(&row.luc);
        print_reports(&row.sdm);
    }
    Ok(())
}

fn starter_config(variant: DescriptionVariant) -> String {
    format!(
        "# Run config for this synthetic city. Paths are relative to this file.\n\
         [data]\npois = \"pois.csv\"\nluc = \"luc.csv\"\nsdm = \"sdm.csv\"\n\n\
         [data.text]\nvectors = \"{VECTORS_FILE}\"\nids = \"{IDS_FILE}\"\n\n\
         [train]\ndescription_variant = \"{variant}\"\nseed = 0\n"
    )
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut run = Run::start("synth");
    let spec = match &args.config {
        Some(p) => {
            let s = SynthSpec::load_json(p)?;
            run.input(p)?;
            s
        }
        None => {
            let base = match args.preset {
                Preset::FourQuadrants => SynthSpec::four_quadrants(args.pois),
                Preset::SharedCategories => SynthSpec::shared_categories(args.pois, args.blocks),
            };
            SynthSpec {
                unique_names: args.unique_names,
                ..base
            }
        }
    };
    spec.validate()?;
    run.config(&json!({
        "spec": spec,
        "variant": args.variant,
        "fallback_dim": args.fallback_dim,
    }))?;
    run.seeds(&[args.seed]);

    let city = synth::generate_synthetic_city(&spec, args.seed)?;
    out_dir(&args.out)?;
    write_json(&mut run, args.out.join("spec.json"), &spec)?;
    let p = args.out.join("pois.csv");
    poi::write_poi_csv(&p, &city.records)?;
    run.output(p);
    let p = args.out.join("luc.csv");
    let mut w = create(&p)?;
    eval::write_luc_csv(&city.luc_samples, &mut w)?;
    w.flush()?;
    run.output(p);
    let p = args.out.join("sdm.csv");
    let mut w = create(&p)?;
    eval::write_sdm_csv(&city.sdm_regions, &mut w)?;
    w.flush()?;
    run.output(p);

    let store = eval::fallback_variant_store(&city.records, args.variant, args.fallback_dim, 0)?;
    let (v, i) = (args.out.join(VECTORS_FILE), args.out.join(IDS_FILE));
    embedding::write_embeddings(&store, &v, &i)?;
    run.output(v);
    run.output(i);
    write_text(&mut run, args.out.join("config.toml"), &starter_config(args.variant))?;
    run.finish(&args.out)?;

    println!(
        "synthetic city: {} POIs, {} LUC samples, {} SDM regions in {}",
        city.records.len(),
        city.luc_samples.len(),
        city.sdm_regions.len(),
        args.out.display()
    );
    Ok(())
}
