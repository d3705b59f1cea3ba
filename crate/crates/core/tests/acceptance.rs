//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 train seven desk-scale models and take about an hour on
//! one CPU core. Set `SPECTRALSEG_SKIP_TRAINING=1` to report them as skipped.
//! Criterion 8 runs only when `SPECTRALSEG_DUKE_RAW` points at the raw subject
//! files. Failed criteria make the exit status nonzero only when
//! `SPECTRALSEG_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::{brute_dft, fourier_unit_oracle, max_abs, random_labels, random_map, spectral_norm_oracle};
use ndarray::{Array2, Array4, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectralseg::audit::{audit_gradients, AuditOptions};
use spectralseg::data::{generate_synthetic, ingest_duke, Corpus, SyntheticParams};
use spectralseg::losses::{ce_loss, dice_loss, dice_score, miou, one_hot};
use spectralseg::model::{ModelConfig, SegmentationModel, Variant};
use spectralseg::nn::{Mode, Module};
use spectralseg::spectral::{
    apply_frequency_filter, channel_split, fft2_real, inverse_fft2_real, FourierUnit,
    FrequencyFilter, SpectralNorm, Spectrum,
};
use spectralseg::tensor::concat_channels;
use spectralseg::train::{train, RunRecord, SplitData, TrainConfig};

const FFT_ROUND_TRIP_REL: f64 = 1e-5;
const ORACLE_ABS: f64 = 1e-6;
const PARSEVAL_REL: f64 = 1e-10;
const AUDIT_REL: f64 = 1e-2;
const DICE_SELF_MAX: f64 = 1e-6;
const SCALAR_DICE_ABS: f64 = 1e-12;
const CE_UNIFORM_ABS: f64 = 1e-9;
const IOU_DICE_ABS: f64 = 1e-9;
const REPORTED_UNET_PARAMS: f64 = 7.76e6;
const REPORTED_YNET_PARAMS: f64 = 7.46e6;
const PARAM_BAND: f64 = 0.20;
const DESK_MEAN_DICE: f64 = 0.85;
const DESK_FLUID_DICE: f64 = 0.80;
const RERUN_ABS: f64 = 1e-6;
const DUKE_FLUID_DICE: f64 = 0.88;
const DUKE_MEAN_DICE: f64 = 0.855;
const DUKE_MEAN_BAND: f64 = 0.03;

/// Desk-scale recipe for the synthetic runs.
const DESK_SCANS: usize = 200;
const DESK_EPOCHS: usize = 20;
const DESK_SIZE: usize = 224;
const DESK_WIDTH: usize = 4;
const DESK_BATCH: usize = 4;
const DESK_LR: f64 = 1e-2;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut worst_rt: f64 = 0.0;
    for size in [8, 16, 32, 224] {
        let x = random_map(size as u64, (2, 2, size, size));
        let back = inverse_fft2_real(&fft2_real(&x).unwrap(), size, size).unwrap();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = x.iter().zip(back.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst_rt = worst_rt.max(err / norm);
    }
    ok &= worst_rt <= FFT_ROUND_TRIP_REL;
    notes.push(format!("round trip {worst_rt:.1e}"));

    let x = random_map(88, (1, 1, 8, 8));
    let plane = Array2::from_shape_fn((8, 8), |(i, j)| x[[0, 0, i, j]]);
    let (re, im) = brute_dft(&plane);
    let spatial: f64 = x.iter().map(|v| v * v).sum();
    let brute: f64 = re.iter().zip(im.iter()).map(|(a, b)| a * a + b * b).sum::<f64>() / 64.0;
    let s = fft2_real(&x).unwrap();
    let mut half = 0.0;
    let mut coeff_err: f64 = 0.0;
    for kh in 0..8 {
        for kw in 0..5 {
            let m = if kw == 0 || kw == 4 { 1.0 } else { 2.0 };
            half += m * (s.real[[0, 0, kh, kw]].powi(2) + s.imag[[0, 0, kh, kw]].powi(2));
            coeff_err = coeff_err
                .max((s.real[[0, 0, kh, kw]] - re[[kh, kw]]).abs())
                .max((s.imag[[0, 0, kh, kw]] - im[[kh, kw]]).abs());
        }
    }
    let parseval = ((brute - spatial).abs()).max((half / 64.0 - spatial).abs()) / spatial;
    ok &= parseval <= PARSEVAL_REL && coeff_err <= ORACLE_ABS;
    notes.push(format!("Parseval {parseval:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut filters_ok = true;
    for _ in 0..2000 {
        let v: f64 = rng.random_range(-40.0..40.0);
        let a: f64 = rng.random_range(0.5..20.0);
        let spec = Spectrum {
            real: Array4::from_elem((1, 1, 1, 1), v),
            imag: Array4::from_elem((1, 1, 1, 1), -v),
        };
        for f in [FrequencyFilter::keep(a), FrequencyFilter::remove(a)] {
            let once = apply_frequency_filter(&spec, &f);
            filters_ok &= apply_frequency_filter(&once, &f) == once;
        }
        let keep = if v > a { a } else if v < -a { -a } else { v };
        let remove = if v > -a && v <= 0.0 {
            -a
        } else if v > 0.0 && v < a {
            a
        } else {
            v
        };
        filters_ok &= FrequencyFilter::keep(a).apply_value(v) == keep;
        filters_ok &= FrequencyFilter::remove(a).apply_value(v) == remove;
    }
    let r10 = FrequencyFilter::remove(10.0);
    filters_ok &= r10.apply_value(0.5) == 10.0 && r10.apply_value(9.9) == 10.0 && r10.apply_value(-0.5) == -10.0;
    ok &= filters_ok;
    notes.push(format!("filters {}", if filters_ok { "exact" } else { "MISMATCH" }));

    let mut split_ok = true;
    for c in 1..10 {
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0, 0.33] {
            let x = random_map(c as u64, (2, c, 3, 5));
            let (g, l) = channel_split(&x, alpha).unwrap();
            split_ok &= concat_channels(&g, &l).unwrap() == x;
        }
    }
    ok &= split_ok;
    notes.push(format!("split/concat {}", if split_ok { "identity" } else { "BROKEN" }));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for filter in [FrequencyFilter::none(), FrequencyFilter::keep(2.0), FrequencyFilter::remove(2.0)] {
        let mut fu = FourierUnit::new(3, filter, &mut rng);
        let x = random_map(3, (2, 3, 8, 6));
        worst = worst.max(max_abs(&fu.forward(&x, Mode::Train).unwrap(), &fourier_unit_oracle(&x, &fu)));
    }
    for alpha in [0.0, 0.5, 1.0] {
        let mut sn = SpectralNorm::new(3, 4, alpha, FrequencyFilter::none(), &mut rng).unwrap();
        let x = random_map(4, (2, 3, 8, 8));
        worst = worst.max(max_abs(&sn.forward(&x, Mode::Train).unwrap(), &spectral_norm_oracle(&x, &sn)));
    }
    ok &= worst <= ORACLE_ABS;
    notes.push(format!("composition oracles {worst:.1e}"));
    verdict(ok, notes.join(", "))
}

fn criterion_2() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for variant in [Variant::Ynet, Variant::Unet, Variant::YnetConvBranch] {
        let cfg = ModelConfig {
            variant,
            base_width: 4,
            input_size: (32, 32),
            ..ModelConfig::default()
        };
        let opts = AuditOptions {
            tolerance: AUDIT_REL,
            ..AuditOptions::default()
        };
        match audit_gradients(&cfg, &opts) {
            Ok(r) => {
                ok &= r.passed();
                let worst = r
                    .layers
                    .iter()
                    .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                    .map(|l| l.name.clone())
                    .unwrap_or_default();
                notes.push(format!("{variant} {} tensors max {:.1e} ({worst})", r.layers.len(), r.max_rel_error));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{variant} error: {e}"));
            }
        }
    }
    verdict(ok, notes.join("; "))
}

fn criterion_3() -> Outcome {
    let x = random_map(5, (1, 1, 224, 224));
    let mut model = SegmentationModel::from_seed(ModelConfig::default(), 0).unwrap();
    let logits = model.forward(&x, Mode::Eval).unwrap();
    let spatial: Vec<usize> = model.trace().spatial.iter().map(|d| d.1).collect();
    let second: Vec<usize> = model.trace().second.iter().map(|d| d.1).collect();
    let shapes_ok = logits.dim() == (1, 9, 224, 224) && spatial == [112, 56, 28, 14] && second == spatial;

    let mut full = SegmentationModel::from_seed(ModelConfig::default(), 3).unwrap();
    let mut branchless = SegmentationModel::from_seed(ModelConfig::default(), 3)
        .unwrap()
        .strip_second_branch();
    let mut params = Vec::new();
    full.params("", &mut params);
    for (name, p) in params {
        if name.starts_with("spectral.3.norm_") {
            p.value.fill(0.0);
        }
    }
    let x = random_map(6, (2, 1, 224, 224));
    let a = full.forward(&x, Mode::Eval).unwrap();
    let b = branchless.forward(&x, Mode::Eval).unwrap();
    let bitwise = a == b;
    verdict(
        shapes_ok && bitwise,
        format!(
            "logits {:?}, stages {spatial:?}, spectral stages {second:?}, zeroed-branch logits {}",
            logits.dim(),
            if bitwise { "bitwise equal" } else { "DIFFER" }
        ),
    )
}

fn criterion_4() -> Outcome {
    let y = one_hot(&random_labels(1, (2, 32, 32), 9), 9).unwrap();
    let self_dice = dice_loss(&y, &y, 1e-6).unwrap();
    let scalar = dice_loss(
        &Array4::from_elem((1, 1, 1, 1), 1.0),
        &Array4::from_elem((1, 1, 1, 1), 0.5),
        0.0,
    )
    .unwrap();
    let ce = ce_loss(&random_labels(2, (2, 8, 8), 9), &Array4::from_elem((2, 9, 8, 8), 1.0 / 9.0)).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let a = random_labels(2 * seed, (1, 16, 16), 4).index_axis_move(Axis(0), 0);
        let b = random_labels(2 * seed + 1, (1, 16, 16), 4).index_axis_move(Axis(0), 0);
        let class = (seed % 4) as u8;
        let d = dice_score(a.view(), b.view(), class).unwrap().unwrap();
        let i = miou(a.view(), b.view(), class).unwrap().unwrap();
        worst = worst.max((i - d / (2.0 - d)).abs());
    }
    let ok = self_dice <= DICE_SELF_MAX
        && (scalar - 1.0 / 3.0).abs() <= SCALAR_DICE_ABS
        && (ce - 9f64.ln()).abs() <= CE_UNIFORM_ABS
        && worst <= IOU_DICE_ABS;
    verdict(
        ok,
        format!(
            "dice(y,y) {self_dice:.1e}, scalar {scalar:.12}, ce {:.1e} from ln 9, IoU-dice {worst:.1e} over 1000 pairs",
            (ce - 9f64.ln()).abs()
        ),
    )
}

fn grouped(model: &mut SegmentationModel) -> BTreeMap<String, usize> {
    let mut params = Vec::new();
    model.params("", &mut params);
    let mut out = BTreeMap::new();
    for (name, p) in params {
        let parts: Vec<&str> = name.split('.').collect();
        let key = if parts[0] == "head" { "head".into() } else { format!("{}.{}", parts[0], parts[1]) };
        *out.entry(key).or_insert(0) += p.len();
    }
    out
}

fn criterion_5() -> Outcome {
    let fixture = include_str!("fixtures/param_counts_w32.csv");
    let mut ok = true;
    let mut counts = BTreeMap::new();
    for variant in [Variant::Unet, Variant::Ynet, Variant::YnetConvBranch] {
        let mut m = SegmentationModel::from_seed(ModelConfig { variant, ..ModelConfig::default() }, 0).unwrap();
        let want: BTreeMap<String, usize> = fixture
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0] == variant.to_string()).then(|| (f[1].to_string(), f[2].parse().unwrap()))
            })
            .collect();
        ok &= grouped(&mut m) == want;
        counts.insert(variant.to_string(), m.count_parameters() as f64);
    }
    let (u, y) = (counts["unet"], counts["ynet"]);
    let within = |n: f64, reported: f64| (n - reported).abs() <= PARAM_BAND * reported;
    let mut smaller = true;
    for w in [4, 8, 16, 32] {
        let c = |variant| {
            SegmentationModel::from_seed(ModelConfig { variant, base_width: w, ..ModelConfig::default() }, 0)
                .unwrap()
                .count_parameters()
        };
        smaller &= c(Variant::Ynet) < c(Variant::Unet);
    }
    ok &= smaller && within(u, REPORTED_UNET_PARAMS) && within(y, REPORTED_YNET_PARAMS);
    verdict(
        ok,
        format!(
            "unet {u:.0} ({:+.1}%), ynet {y:.0} ({:+.1}%), conv branch {:.0}; ynet < unet at widths 4-32: {smaller}",
            100.0 * (u / REPORTED_UNET_PARAMS - 1.0),
            100.0 * (y / REPORTED_YNET_PARAMS - 1.0),
            counts["ynet_conv_branch"]
        ),
    )
}

struct Desk {
    data: SplitData,
    _dir: tempfile::TempDir,
}

fn desk_data() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(0, DESK_SCANS, dir.path(), SyntheticParams::default()).unwrap();
    let data = SplitData::load(&Corpus::open(dir.path()).unwrap(), DESK_SIZE).unwrap();
    Desk { data, _dir: dir }
}

fn desk_model(filter: FrequencyFilter) -> ModelConfig {
    ModelConfig {
        base_width: DESK_WIDTH,
        filter,
        input_size: (DESK_SIZE, DESK_SIZE),
        ..ModelConfig::default()
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: DESK_BATCH,
        learning_rate: DESK_LR,
        max_epochs: DESK_EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

fn timed_run(desk: &Desk, filter: FrequencyFilter, seed: u64) -> RunRecord {
    let t = Instant::now();
    let r = train(&desk_model(filter), &desk.data, &desk_train(seed)).unwrap();
    println!(
        "    run {filter} seed {seed}: mean {:.4}, fluid {:.4}, best epoch {}, {:.0}s",
        r.test.mean_dice,
        r.test.fluid_dice().unwrap_or(f64::NAN),
        r.best_epoch,
        t.elapsed().as_secs_f64()
    );
    r
}

fn criterion_6(desk: &Desk, first: &RunRecord) -> Outcome {
    let again = timed_run(desk, FrequencyFilter::none(), DESK_SEEDS[0]);
    let mut drift: f64 = (first.test.mean_dice - again.test.mean_dice).abs();
    for (a, b) in first.test.classes.iter().zip(&again.test.classes) {
        if let (Some(x), Some(y)) = (a.dice, b.dice) {
            drift = drift.max((x - y).abs());
        }
    }
    let mean = first.test.mean_dice;
    let fluid = first.test.fluid_dice().unwrap_or(0.0);
    verdict(
        mean >= DESK_MEAN_DICE && fluid >= DESK_FLUID_DICE && drift <= RERUN_ABS,
        format!("mean dice {mean:.4} (>= {DESK_MEAN_DICE}), fluid {fluid:.4} (>= {DESK_FLUID_DICE}), rerun drift {drift:.1e}"),
    )
}

fn criterion_7(desk: &Desk, first: &RunRecord) -> Outcome {
    let mut none = vec![first.test.fluid_dice().unwrap_or(0.0)];
    for &seed in &DESK_SEEDS[1..] {
        none.push(timed_run(desk, FrequencyFilter::none(), seed).test.fluid_dice().unwrap_or(0.0));
    }
    let remove: Vec<f64> = DESK_SEEDS
        .iter()
        .map(|&s| timed_run(desk, FrequencyFilter::remove(10.0), s).test.fluid_dice().unwrap_or(0.0))
        .collect();
    let min_none = none.iter().copied().fold(f64::INFINITY, f64::min);
    let max_remove = remove.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        min_none > max_remove,
        format!("fluid dice none {none:.4?} vs remove(10) {remove:.4?}; min(none) {min_none:.4} vs max(remove) {max_remove:.4}"),
    )
}

fn criterion_8() -> Outcome {
    let Some(raw) = std::env::var_os("SPECTRALSEG_DUKE_RAW").map(PathBuf::from) else {
        return Outcome::Skip("extended criterion; set SPECTRALSEG_DUKE_RAW to the raw subject files".into());
    };
    let out = tempfile::tempdir().unwrap();
    if let Err(e) = ingest_duke(&raw, out.path()) {
        return Outcome::Fail(format!("ingestion failed: {e}"));
    }
    let data = SplitData::load(&Corpus::open(out.path()).unwrap(), 224).unwrap();
    let r = train(&ModelConfig::default(), &data, &TrainConfig::default()).unwrap();
    let mean = r.test.mean_dice;
    let fluid = r.test.fluid_dice().unwrap_or(0.0);
    verdict(
        fluid >= DUKE_FLUID_DICE && (mean - DUKE_MEAN_DICE).abs() <= DUKE_MEAN_BAND,
        format!("mean dice {mean:.4}, fluid {fluid:.4}"),
    )
}

fn main() -> ExitCode {
    let skip_training = std::env::var_os("SPECTRALSEG_SKIP_TRAINING").is_some();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS  criterion {id} {name} [{secs:.0}s]: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  criterion {id} {name} [{secs:.0}s]: {d}");
            }
            Outcome::Skip(d) => println!("SKIP  criterion {id} {name}: {d}"),
        }
    };

    let t = Instant::now();
    report(1, "spectral property suite", t, criterion_1());
    let t = Instant::now();
    report(2, "gradient audit", t, criterion_2());
    let t = Instant::now();
    report(3, "shape and identity suite", t, criterion_3());
    let t = Instant::now();
    report(4, "loss oracles", t, criterion_4());
    let t = Instant::now();
    report(5, "parameter accounting", t, criterion_5());

    if skip_training {
        report(6, "desk-scale learning", Instant::now(), Outcome::Skip("SPECTRALSEG_SKIP_TRAINING is set".into()));
        report(7, "directional frequency ablation", Instant::now(), Outcome::Skip("SPECTRALSEG_SKIP_TRAINING is set".into()));
    } else {
        let desk = desk_data();
        let t = Instant::now();
        let first = timed_run(&desk, FrequencyFilter::none(), DESK_SEEDS[0]);
        report(6, "desk-scale learning", t, criterion_6(&desk, &first));
        let t = Instant::now();
        report(7, "directional frequency ablation", t, criterion_7(&desk, &first));
    }
    let t = Instant::now();
    report(8, "Duke reproduction", t, criterion_8());

    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criterion(s) failed");
    if std::env::var_os("SPECTRALSEG_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
