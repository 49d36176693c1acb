//! Release gate. Every check prints one `criterion N ... PASS|FAIL` line to
//! stdout (uncaptured) and then asserts.

use std::io::Write as _;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use locemb::embedding::{self, EmbeddingStore};
use locemb::encoder::{self, EncoderDims, GridEncodingConfig};
use locemb::eval::{self, metrics, EvalOptions, EvalReport, ProbeHead};
use locemb::nn::{self, AdamConfig, AdamState, Parameters};
use locemb::poi::{self, DescriptionVariant, NormalizedCoord};
use locemb::retrieval::{self, CandidateGrid, QuerySource};
use locemb::synth::{self, SynthSpec, SyntheticCity};
use locemb::trainer::{self, Checkpoint, ModelParams, TrainConfig};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const HEADS: [ProbeHead; 2] = [ProbeHead::Linear, ProbeHead::Mlp];

/// Heavy end-to-end checks run one at a time so their timings are honest.
static HEAVY: Mutex<()> = Mutex::new(());

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} {name} ... {} ({detail})", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn mean_metric(reports: &[EvalReport], head: ProbeHead, metric: &str) -> f64 {
    reports
        .iter()
        .find(|r| r.head == head)
        .and_then(|r| r.metric(metric))
        .map(|m| m.mean)
        .expect("metric present")
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_full_objective_gradient() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for b in 0..20u64 {
        // alternate the optional pieces so every parameter kind is covered
        let cfg = TrainConfig {
            grid: GridEncodingConfig {
                num_scales: 4,
                lambda_min: 0.05,
                lambda_max: 2.0,
            },
            encoder: EncoderDims {
                hidden_dim: 16,
                num_residual_blocks: 2,
                output_dim: 8,
            },
            spatial_projection: b % 2 == 1,
            text_projection_bias: b % 4 >= 2,
            normalize_text_inputs: b % 3 == 0,
            seed: b,
            ..TrainConfig::default()
        };
        let text_dim = 12;
        let params = ModelParams::init(&cfg, text_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + b);
        let coords: Vec<NormalizedCoord> = (0..4)
            .map(|_| NormalizedCoord {
                x: rng.random_range(-1.0..1.0),
                y: rng.random_range(-1.0..1.0),
            })
            .collect();
        let x = encoder::grid_encode_batch(&coords, &cfg.grid);
        let t = Array2::from_shape_simple_fn((4, text_dim), || rng.random_range(-1.0..1.0));
        let tau = cfg.temperature;
        let norm = cfg.normalize_text_inputs;
        let (_, g) = trainer::batch_loss_and_grad(&params, x.view(), t.view(), tau, norm).unwrap();
        let mut probe = params.clone();
        let r = nn::finite_diff_check(
            |flat| {
                probe.assign_flat(flat).unwrap();
                trainer::batch_loss(&probe, x.view(), t.view(), tau, norm).unwrap()
            },
            &params.flatten(),
            &g.flatten(),
            1e-5,
            1e-4,
            1e-6,
            None,
        )
        .unwrap();
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 10.0;
    verdict(
        1,
        "gradient check",
        pass,
        &format!("max rel err {worst:.2e} over {checked} coordinates, {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_loss_identities() {
    let one = array![[0.6, 0.8]];
    let n1 = trainer::infonce_loss(one.view(), one.view(), 0.07).unwrap().loss;

    let zs = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
    let zp = array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let ln2 = trainer::infonce_loss(zs.view(), zp.view(), 0.07).unwrap().loss;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sym_ok = true;
    let mut perm_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let d = rng.random_range(2..9);
        let unit = |rng: &mut ChaCha8Rng| {
            let m = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
            nn::l2_normalize_rows(&m).unwrap().0
        };
        let a = unit(&mut rng);
        let b = unit(&mut rng);
        let tau = rng.random_range(0.05..1.0);
        let ab = trainer::infonce_loss(a.view(), b.view(), tau).unwrap().loss;
        let ba = trainer::infonce_loss(b.view(), a.view(), tau).unwrap().loss;
        sym_ok &= ab.to_bits() == ba.to_bits();

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pa = a.select(ndarray::Axis(0), &perm);
        let pb = b.select(ndarray::Axis(0), &perm);
        let p = trainer::infonce_loss(pa.view(), pb.view(), tau).unwrap().loss;
        perm_err = perm_err.max((p - ab).abs());
    }
    let pass = n1 == 0.0 && (ln2 - std::f64::consts::LN_2).abs() <= 1e-12 && sym_ok && perm_err <= 1e-12;
    verdict(
        2,
        "loss identities",
        pass,
        &format!(
            "N=1 {n1}, ln2 err {:.1e}, swap exact {sym_ok}, perm err {perm_err:.1e}",
            (ln2 - std::f64::consts::LN_2).abs()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

struct Scalars(Vec<f64>);

impl Parameters for Scalars {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![("p".into(), &self.0)]
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("p".into(), &mut self.0)]
    }
}

#[test]
fn criterion_3_adam_trajectory() {
    let cfg = AdamConfig::default();
    let grads = [0.5, -2.0, 3.0];
    let mut p = Scalars(vec![0.3]);
    let mut st = AdamState::new(&p);

    // recurrence written out by hand
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 1e-4);
    let (mut theta, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    let mut max_err = 0.0f64;
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        nn::adam_step(&mut p, &Scalars(vec![g]), &mut st, &cfg).unwrap();
        max_err = max_err.max((p.0[0] - theta).abs());
    }

    // first step moves by lr * g / (|g| + eps) whatever the gradient scale
    let mut first_err = 0.0f64;
    for g in [1e-3, 0.7, -5.0, 1e3] {
        let mut q = Scalars(vec![0.0]);
        let mut s = AdamState::new(&q);
        nn::adam_step(&mut q, &Scalars(vec![g]), &mut s, &cfg).unwrap();
        let want = -lr * g / (g.abs() + eps);
        first_err = first_err.max((q.0[0] - want).abs());
        assert!((q.0[0].abs() - lr).abs() < lr * 1e-4);
    }
    let pass = max_err <= 1e-12 && first_err <= 1e-15;
    verdict(
        3,
        "adam trajectory",
        pass,
        &format!("trajectory err {max_err:.1e}, first-step err {first_err:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

fn brute_force_prf(pred: &[usize], labels: &[usize], c: usize) -> (f64, f64, f64) {
    let mut cm = vec![vec![0u32; c]; c];
    for (&p, &l) in pred.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let tp = cm[k][k] as f64;
        let col: f64 = (0..c).map(|i| cm[i][k] as f64).sum();
        let row: f64 = cm[k].iter().map(|&x| x as f64).sum();
        let p = if col > 0.0 { tp / col } else { 0.0 };
        let r = if row > 0.0 { tp / row } else { 0.0 };
        let f = if tp > 0.0 { 2.0 * tp / (col + row) } else { 0.0 };
        ps += p;
        rs += r;
        fs += f;
    }
    (ps / c as f64, rs / c as f64, fs / c as f64)
}

fn sequences(c: usize, n: usize) -> Vec<Vec<usize>> {
    let total = c.pow(n as u32);
    (0..total)
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let d = code % c;
                    code /= c;
                    d
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_4_metric_oracles() {
    let start = Instant::now();
    let mut cases = 0u64;
    let mut max_err = 0.0f64;
    for c in 1..=3 {
        for n in 1..=6 {
            let seqs = sequences(c, n);
            for labels in &seqs {
                for pred in &seqs {
                    let got = metrics::macro_prf(pred, labels, c).unwrap();
                    let (p, r, f) = brute_force_prf(pred, labels, c);
                    let e = (got.precision - p).abs().max((got.recall - r).abs()).max((got.f1 - f).abs());
                    max_err = max_err.max(e);
                    cases += 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bounds_ok = true;
    for i in 0..20_000 {
        let k = rng.random_range(1..8);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..k)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
                .collect();
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                let mut one = vec![0.0; k];
                one[0] = 1.0;
                one
            } else {
                v.into_iter().map(|x| x / s).collect()
            }
        };
        let p = draw(&mut rng);
        let q = if i % 10 == 0 { p.clone() } else { draw(&mut rng) };
        let m = metrics::distribution_metrics(&p, &q, Default::default()).unwrap();
        bounds_ok &= m.l1 <= 2.0 + 1e-12 && m.chebyshev <= 1.0 + 1e-12 && m.kl >= 0.0;
        let all_zero = m.l1 == 0.0 && m.chebyshev == 0.0 && m.kl == 0.0;
        bounds_ok &= all_zero == (p == q);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = max_err <= 1e-12 && bounds_ok && secs < 30.0;
    verdict(
        4,
        "metric oracles",
        pass,
        &format!("{cases} labelings, max err {max_err:.1e}, bounds {bounds_ok}, {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5 & 6

struct QuadrantRun {
    city: SyntheticCity,
    checkpoint: Checkpoint,
    train_time: Duration,
}

fn quadrant_run() -> &'static QuadrantRun {
    static RUN: OnceLock<QuadrantRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let city = synth::generate_synthetic_city(&SynthSpec::four_quadrants(2000), 7).unwrap();
        let store = eval::fallback_variant_store(
            &city.records,
            DescriptionVariant::NameAndType,
            embedding::DEFAULT_TEXT_DIM,
            0,
        )
        .unwrap();
        let cfg = TrainConfig::default();
        let outcome = trainer::train(&city.records, &store, &cfg).unwrap();
        QuadrantRun {
            city,
            checkpoint: outcome.checkpoint,
            train_time: start.elapsed(),
        }
    })
}

#[test]
fn criterion_5_synthetic_land_use() {
    let _g = heavy_lock();
    let run = quadrant_run();
    let start = Instant::now();
    let reports = eval::run_luc(
        &run.checkpoint,
        &run.city.luc_samples,
        &HEADS,
        &PROBE_SEEDS,
        &EvalOptions::default(),
    )
    .unwrap();
    let secs = (run.train_time + start.elapsed()).as_secs_f64();
    let lin = mean_metric(&reports, ProbeHead::Linear, "f1");
    let mlp = mean_metric(&reports, ProbeHead::Mlp, "f1");
    let pass = lin >= 0.90 && mlp >= lin - 0.02 && secs < 300.0;
    verdict(
        5,
        "synthetic land use",
        pass,
        &format!(
            "linear F1 {lin:.4}, mlp F1 {mlp:.4}, best epoch {}, {secs:.1}s",
            run.checkpoint.epoch
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_synthetic_distributions() {
    let _g = heavy_lock();
    let run = quadrant_run();
    let start = Instant::now();
    let reports = eval::run_sdm(
        &run.checkpoint,
        &run.city.sdm_regions,
        &HEADS,
        &PROBE_SEEDS,
        &EvalOptions::default(),
    )
    .unwrap();
    let secs = (run.train_time + start.elapsed()).as_secs_f64();
    let lin = mean_metric(&reports, ProbeHead::Linear, "kl");
    let mlp = mean_metric(&reports, ProbeHead::Mlp, "kl");
    let pass = mlp <= 0.05 && mlp <= lin && secs < 300.0;
    verdict(
        6,
        "synthetic distributions",
        pass,
        &format!("linear KL {lin:.5}, mlp KL {mlp:.5}, {secs:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_description_ablation() {
    let _g = heavy_lock();
    let start = Instant::now();
    let city = synth::generate_synthetic_city(&SynthSpec::shared_categories(2000, 4), 11).unwrap();
    let arms: Vec<eval::AblationArm> = DescriptionVariant::ALL
        .iter()
        .map(|&v| eval::AblationArm {
            variant: v,
            source_tag: "fallback".into(),
            store: eval::fallback_variant_store(&city.records, v, embedding::DEFAULT_TEXT_DIM, 0).unwrap(),
            truncate: None,
        })
        .collect();
    let rows = eval::run_ablation(
        &city.records,
        &arms,
        &TrainConfig::default(),
        &city.luc_samples,
        &[],
        &[ProbeHead::Linear],
        &PROBE_SEEDS,
        &EvalOptions::default(),
    )
    .unwrap();
    let f1 = |v: DescriptionVariant| {
        let row = rows.iter().find(|r| r.variant == v).unwrap();
        mean_metric(&row.luc, ProbeHead::Linear, "f1")
    };
    let (both, name, kind) = (
        f1(DescriptionVariant::NameAndType),
        f1(DescriptionVariant::NameOnly),
        f1(DescriptionVariant::TypeOnly),
    );
    let secs = start.elapsed().as_secs_f64();
    let pass = both - kind >= 0.10 && name - kind >= 0.10;
    verdict(
        7,
        "description ablation",
        pass,
        &format!("F1 name+type {both:.4}, name {name:.4}, type {kind:.4}, {secs:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

const RETRIEVAL_TEXT_DIM: usize = 384;

fn retrieval_config() -> TrainConfig {
    // Memorization wants the last epoch, not the best held-out loss, and
    // a finest wavelength near the 50x50 cell size.
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 150,
        early_stop_patience: 150,
        val_fraction: 0.01,
        keep_final: true,
        grid: GridEncodingConfig {
            lambda_min: 0.03,
            ..GridEncodingConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_8_retrieval_memorization() {
    let _g = heavy_lock();
    let start = Instant::now();
    let spec = SynthSpec {
        unique_names: true,
        ..SynthSpec::four_quadrants(500)
    };
    let city = synth::generate_synthetic_city(&spec, 8).unwrap();
    let variant = DescriptionVariant::NameAndType;
    let store = eval::fallback_variant_store(&city.records, variant, RETRIEVAL_TEXT_DIM, 0).unwrap();
    let outcome = trainer::train(&city.records, &store, &retrieval_config()).unwrap();
    let ck = &outcome.checkpoint;

    let grid = CandidateGrid::for_checkpoint(ck, 50, 50).unwrap();
    grid.embed(ck).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let trained: Vec<&String> = outcome.split.train_ids.iter().collect();
    let mut hits = 0;
    let sampled = 100;
    for _ in 0..sampled {
        let id = trained[rng.random_range(0..trained.len())];
        let rec = city.records.iter().find(|r| &r.id == id).unwrap();
        let q = retrieval::embed_query(QuerySource::Store { store: &store, key: id }, ck).unwrap();
        let top = retrieval::topk(q.view(), &grid, 5, id).unwrap();
        let cell = grid.cell_of(rec.lon, rec.lat).unwrap();
        if top.ranked.iter().any(|r| r.index == cell) {
            hits += 1;
        }
    }
    let rate = hits as f64 / sampled as f64;

    // an exact candidate match scores 1
    let coords = vec![(city.records[0].lon, city.records[0].lat), (city.records[1].lon, city.records[1].lat)];
    let exact = CandidateGrid::custom(coords.clone());
    let probe = trainer::encode_locations(ck, &coords[..1]).unwrap();
    exact.embed(ck).unwrap();
    let self_sim = retrieval::topk(probe.row(0), &exact, 1, "self").unwrap().ranked[0].score;

    let secs = start.elapsed().as_secs_f64();
    let pass = rate >= 0.90 && (self_sim - 1.0).abs() <= 1e-6;
    verdict(
        8,
        "retrieval memorization",
        pass,
        &format!("top-5 hit rate {rate:.2}, self-similarity {self_sim:.9}, best epoch {}, {secs:.1}s", ck.epoch),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let city = synth::generate_synthetic_city(&SynthSpec::four_quadrants(300), 9).unwrap();
    let store = eval::fallback_variant_store(&city.records, DescriptionVariant::NameAndType, 64, 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 4,
        learning_rate: 1e-3,
        seed: 42,
        encoder: EncoderDims {
            hidden_dim: 32,
            num_residual_blocks: 2,
            output_dim: 16,
        },
        ..TrainConfig::default()
    };
    let a = trainer::train(&city.records, &store, &cfg).unwrap();
    let b = trainer::train(&city.records, &store, &cfg).unwrap();
    let bytes_a = checkpoint_bytes(&a.checkpoint);
    let identical_train = bytes_a == checkpoint_bytes(&b.checkpoint) && a.log == b.log && a.split == b.split;

    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let ck_path = dir.path().join("model.ckpt");
    a.checkpoint.save(&ck_path).unwrap();
    let back = Checkpoint::load(&ck_path).unwrap();
    check("checkpoint", checkpoint_bytes(&back) == bytes_a && back == a.checkpoint);

    let poi_path = dir.path().join("pois.csv");
    poi::write_poi_csv(&poi_path, &city.records).unwrap();
    let pois = poi::load_poi_csv(&poi_path).unwrap();
    check("poi csv", pois == city.records);

    let (vp, ip) = (dir.path().join("vec.bin"), dir.path().join("ids.txt"));
    embedding::write_embeddings(&store, &vp, &ip).unwrap();
    let loaded: EmbeddingStore = embedding::load_embeddings(&vp, &ip).unwrap();
    let mut again = (Vec::new(), Vec::new());
    embedding::write_embeddings_to(&loaded, &mut again.0, &mut again.1).unwrap();
    check(
        "embeddings",
        loaded == store && again.0 == std::fs::read(&vp).unwrap() && again.1 == std::fs::read(&ip).unwrap(),
    );

    let split_path = dir.path().join("split.json");
    a.split.save_json(&split_path).unwrap();
    check("split", poi::DatasetSplit::load_json(&split_path).unwrap() == a.split);

    let mut luc = Vec::new();
    eval::write_luc_csv(&city.luc_samples, &mut luc).unwrap();
    check("luc csv", eval::read_luc_csv(luc.as_slice()).unwrap() == city.luc_samples);

    let mut sdm = Vec::new();
    eval::write_sdm_csv(&city.sdm_regions, &mut sdm).unwrap();
    check("sdm csv", eval::read_sdm_csv(sdm.as_slice()).unwrap() == city.sdm_regions);

    let opts = EvalOptions {
        probe: eval::ProbeConfig {
            max_epochs: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let reports = eval::run_luc(&a.checkpoint, &city.luc_samples, &[ProbeHead::Linear], &[0, 1], &opts).unwrap();
    let json = reports[0].to_json().unwrap();
    check("report json", EvalReport::from_json(&json).unwrap() == reports[0]);

    let pass = identical_train && failures.is_empty();
    verdict(
        9,
        "determinism",
        pass,
        &format!("identical retrain {identical_train}, round-trip failures {failures:?}"),
    );
    assert!(pass);
}
