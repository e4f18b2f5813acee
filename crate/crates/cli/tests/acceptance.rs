//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Corpus-backed checks run only when `ELP_MITBIH_DIR` and/or
//! `ELP_AFIB_DIR` point at local copies of the MIT-BIH arrhythmia and
//! MIT-BIH atrial fibrillation databases.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elp_cli::waves::WaveDataset;
use elp_cli::{Pipeline, PipelineConfig, Task};
use elp_core::embed::{pair_loss_and_grad, skipgram_train, EmbeddingMatrix, SkipGramConfig};
use elp_core::ingest::{
    cut_afib_segments, read_wfdb_record, write_wfdb_record, Annotation, ChannelInfo, EcgRecord, SegmentLabelConfig,
    SignalFormat,
};
use elp_core::metrics::{macro_f1, per_class_metrics, ConfusionMatrix};
use elp_core::qrs::{match_peaks, pan_tompkins};
use elp_core::synth::{generate, SynthSpec};
use elp_core::vocab::{kmeans_fit, KMeansConfig, TokenSequence, WaveVocabulary};
use elp_neural::checkpoint::{load_checkpoint, save_checkpoint};
use elp_neural::gradcheck::{self, relative_error};
use elp_neural::{Model, ModelSpec};

struct Check {
    /// `None` when the criterion could not be run here.
    pass: Option<bool>,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass: Some(pass),
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self {
            pass: None,
            detail: detail.into(),
        }
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

// (matrix, class names, printed acc/ppv/sen/spec per class)
type GoldenTable = (Vec<Vec<u64>>, Vec<String>, Vec<[f64; 4]>);

fn mitbih_table() -> GoldenTable {
    (
        vec![
            vec![89774, 203, 357, 37, 91],
            vec![757, 1945, 56, 1, 18],
            vec![632, 51, 6449, 44, 47],
            vec![175, 3, 95, 527, 2],
            vec![639, 11, 62, 1, 7314],
        ],
        names(&["N", "S", "V", "F", "Q"]),
        vec![
            [97.35, 97.60, 99.24, 88.30],
            [98.99, 87.89, 70.04, 99.75],
            [98.77, 91.88, 89.28, 99.94],
            [99.67, 86.39, 65.71, 99.92],
            [99.20, 97.89, 91.12, 99.84],
        ],
    )
}

fn challenge_table() -> GoldenTable {
    (
        vec![
            vec![4221, 53, 738, 63],
            vec![70, 463, 207, 18],
            vec![839, 172, 1348, 53],
            vec![57, 13, 51, 157],
        ],
        names(&["N", "A", "O", "~"]),
        vec![
            [78.65, 81.83, 83.17, 71.98],
            [93.75, 66.05, 61.08, 96.93],
            [75.83, 57.51, 55.89, 83.70],
            [97.01, 53.95, 56.47, 98.37],
        ],
    )
}

fn golden_metrics() -> Check {
    let mut checked = 0;
    let mut misses = Vec::new();
    for (label, (counts, classes, printed)) in [("5-class", mitbih_table()), ("4-class", challenge_table())] {
        let m = ConfusionMatrix::from_counts(classes.clone(), counts).unwrap();
        for (c, row) in printed.iter().enumerate() {
            let got = per_class_metrics(&m, c).unwrap();
            let got = [got.acc, got.ppv, got.sen, got.spec].map(Option::unwrap);
            for (metric, (g, p)) in ["acc", "ppv", "sen", "spec"].iter().zip(got.iter().zip(row)) {
                checked += 1;
                if (g - p).abs() > 0.01 + 1e-9 {
                    misses.push(format!(
                        "{label} {} {metric}: computed {g:.4}, table {p:.2}",
                        classes[c]
                    ));
                }
            }
        }
    }
    let detail = if misses.is_empty() {
        format!("{checked}/{checked} values within 0.01")
    } else {
        format!(
            "{}/{checked} values within 0.01; off: {}",
            checked - misses.len(),
            misses.join("; ")
        )
    };
    Check::new(misses.is_empty(), detail)
}

fn golden_mf1() -> Check {
    let f1s = [82.26, 63.47, 56.69, 55.18].map(Some);
    let mf1 = macro_f1(&f1s).unwrap();
    Check::new((mf1 - 64.40).abs() <= 0.005, format!("MF1 {mf1:.4}"))
}

/// Every assignment of AFIB/non-AFIB rhythm to 1..=10 beats inside one
/// segment, for every threshold p = j/m with m <= 10.
fn p_rule() -> Check {
    let fs = 100.0;
    let mut thresholds: Vec<(usize, usize)> = Vec::new();
    for m in 1..=10 {
        for j in 0..=m {
            thresholds.push((j, m));
        }
    }
    let mut cases = 0usize;
    let mut wrong = Vec::new();
    for n in 1..=10usize {
        let beats: Vec<usize> = (0..n).map(|i| 25 + 45 * i).collect();
        for pattern in 0u32..(1 << n) {
            let mut annotations = Vec::new();
            for (i, &b) in beats.iter().enumerate() {
                let aux = if pattern >> i & 1 == 1 { "(AFIB" } else { "(N" };
                annotations.push(Annotation::new(b - 10, "+").with_aux(aux));
                annotations.push(Annotation::new(b, "N"));
            }
            let record = EcgRecord::new(
                "p",
                vec![ChannelInfo::new("ECG1")],
                vec![vec![0.0; 500]],
                fs,
                annotations,
            )
            .unwrap();
            let afib = pattern.count_ones() as usize;
            for &(j, m) in &thresholds {
                let cfg = SegmentLabelConfig {
                    segment_seconds: 5.0,
                    p_threshold: j as f64 / m as f64,
                    positive_rhythm_label: "AFIB".into(),
                };
                let cut = cut_afib_segments(&record, 0, &beats, &cfg).unwrap();
                cases += 1;
                // afib / n >= j / m, in integers
                let expected = usize::from(afib * m >= j * n);
                if cut.examples.len() != 1 || cut.examples[0].label != expected {
                    wrong.push(format!("n={n} pattern={pattern:b} p={j}/{m}"));
                }
            }
        }
    }
    let detail = if wrong.is_empty() {
        format!("{cases} cases agree with the brute-force rule")
    } else {
        format!("{} of {cases} disagree, first: {}", wrong.len(), wrong[0])
    };
    Check::new(wrong.is_empty(), detail)
}

fn detector() -> Check {
    let mut worst_sen = f64::INFINITY;
    let mut worst_ppv = f64::INFINITY;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut scale_breaks = Vec::new();
    for snr in [20.0, 10.0] {
        for seed in 0..10 {
            let spec = SynthSpec {
                duration_s: 60.0,
                snr_db: Some(snr),
                seed,
                ..SynthSpec::default()
            };
            let synth = generate(&spec).unwrap();
            let signal = synth.record.channel(0).unwrap();
            let fs = synth.record.fs;
            let found = pan_tompkins(signal, fs).unwrap();
            let m = match_peaks(&found.indices, &synth.peaks, 50.0, fs);
            worst_sen = worst_sen.min(100.0 * m.sensitivity());
            worst_ppv = worst_ppv.min(100.0 * m.ppv());
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
            for c in [0.5, 2.0, 10.0] {
                let scaled: Vec<f64> = signal.iter().map(|v| v * c).collect();
                if pan_tompkins(&scaled, fs).unwrap().indices != found.indices {
                    scale_breaks.push(format!("seed {seed} snr {snr} x{c}"));
                }
            }
        }
    }
    let pass = worst_sen >= 99.0 && worst_ppv >= 97.0 && scale_breaks.is_empty();
    Check::new(
        pass,
        format!(
            "20 records: min sensitivity {worst_sen:.2}%, min PPV {worst_ppv:.2}% (tp {tp}, fp {fp}, fn {fn_}); \
             scale invariance broken in {} of 60 runs{}",
            scale_breaks.len(),
            scale_breaks
                .first()
                .map(|s| format!(" (first: {s})"))
                .unwrap_or_default()
        ),
    )
}

/// Lowest within-cluster sum of squares over all partitions into at most
/// `k` clusters.
fn exhaustive_optimum(data: &[Vec<f64>], k: usize) -> f64 {
    let n = data.len();
    let dim = data[0].len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut sse = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = data
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                let mean = members.iter().map(|x| x[d]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(sse);
        // next assignment in base k
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn clustering() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = 0.0f64;
    let mut worst_rise = 0.0f64;
    let mut fits = 0;
    for instance in 0..10u64 {
        let n = rng.random_range(4..=8);
        let k = rng.random_range(2..=3);
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cfg = KMeansConfig {
            restarts: 20,
            max_iter: 200,
            tol: 0.0,
            ..KMeansConfig::new(k, instance)
        };
        let fit = kmeans_fit(&data, &cfg).unwrap();
        fits += fit.histories.len();
        for h in &fit.histories {
            for w in h.windows(2) {
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
        worst_gap = worst_gap.max((fit.objective - exhaustive_optimum(&data, k)).abs());
    }
    Check::new(
        worst_gap <= 1e-9 && worst_rise <= 1e-12,
        format!("10 instances: max gap to optimum {worst_gap:.3e}; largest objective increase over {fits} Lloyd runs {worst_rise:.3e}"),
    )
}

fn skipgram_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let mut vecs: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..dim).map(|_| rng.random_range(-0.8..0.8)).collect())
        .collect();
    let loss = |v: &[Vec<f64>]| {
        let negs: Vec<&[f64]> = v[2..].iter().map(Vec::as_slice).collect();
        pair_loss_and_grad(&v[0], &v[1], &negs).loss
    };
    let g = {
        let negs: Vec<&[f64]> = vecs[2..].iter().map(Vec::as_slice).collect();
        pair_loss_and_grad(&vecs[0], &vecs[1], &negs)
    };
    let analytic: Vec<Vec<f64>> = [g.center, g.context].into_iter().chain(g.negatives).collect();
    let h = gradcheck::STEP;
    let mut worst = 0.0f64;
    for r in 0..vecs.len() {
        for d in 0..dim {
            let x = vecs[r][d];
            vecs[r][d] = x + h;
            let up = loss(&vecs);
            vecs[r][d] = x - h;
            let down = loss(&vecs);
            vecs[r][d] = x;
            worst = worst.max(relative_error(analytic[r][d], (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn gradients() -> Check {
    let mut worst: (f64, String) = (0.0, String::new());
    for seed in 0..10 {
        let mut results = gradcheck::run_all(seed).unwrap();
        results.push(("skipgram_pair", skipgram_fd(seed)));
        for (name, err) in results {
            if err >= worst.0 {
                worst = (err, format!("{name} seed {seed}"));
            }
        }
    }
    Check::new(
        worst.0 < 1e-4,
        format!("10 seeds, 10 ops: max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

const DESK_CONFIG: &str = r#"
task = "synth"
seed = 1

[synth]
records = 400

[vocab]
k = 8

[model]
head = "cnn"
conv_filters = 16
dense = 16

[embed]
dim = 16
epochs = 3

[train]
max_epochs = 8
batch_size = 32

[eval]
folds = 5
"#;

fn desk_experiment() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: PipelineConfig = toml::from_str(DESK_CONFIG).unwrap();
    cfg.out_dir = dir.path().join("out");
    let start = Instant::now();
    let report = Pipeline::new(cfg).run_all().unwrap();
    let took = start.elapsed();
    let acc = report.overall_accuracy.unwrap_or(0.0);
    Check::new(
        acc >= 95.0 && !report.partial && took < Duration::from_secs(300),
        format!(
            "400 records, 5 folds: pooled accuracy {acc:.2}% in {:.1} s",
            took.as_secs_f64()
        ),
    )
}

fn random_record(rng: &mut ChaCha8Rng, index: usize) -> EcgRecord {
    let n_ch = rng.random_range(1..=2);
    let len = rng.random_range(1..=2000);
    let channels: Vec<ChannelInfo> = (0..n_ch)
        .map(|c| ChannelInfo {
            name: format!("lead{c}"),
            gain: [100.0, 200.0, 400.0][rng.random_range(0..3)],
            baseline: rng.random_range(-64..=64),
            resolution_bits: 12,
        })
        .collect();
    let signal = channels
        .iter()
        .map(|ch| (0..len).map(|_| ch.to_mv(rng.random_range(-2048..=2047))).collect())
        .collect();
    let mut annotations = Vec::new();
    let mut at = 0usize;
    loop {
        at += rng.random_range(0..1500);
        if at >= len {
            break;
        }
        let ann = match rng.random_range(0..4) {
            0 => Annotation::new(at, "+").with_aux("(AFIB"),
            1 => Annotation::new(at, "V"),
            2 => Annotation::new(at, "A"),
            _ => Annotation::new(at, "N"),
        };
        annotations.push(ann);
    }
    EcgRecord::new(format!("r{index:03}"), channels, signal, 360.0, annotations).unwrap()
}

fn wfdb_round_trip(dir: &Path) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(212);
    for i in 0..100 {
        let rec = random_record(&mut rng, i);
        write_wfdb_record(dir, &rec, SignalFormat::Format212).map_err(|e| e.to_string())?;
        let back = read_wfdb_record(dir, &rec.record_id, Some("atr")).map_err(|e| e.to_string())?;
        let bits = |r: &EcgRecord| r.signal.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&back) != bits(&rec) || back.annotations != rec.annotations || back.channels != rec.channels {
            return Err(format!("record {} differs after the round trip", rec.record_id));
        }
    }
    Ok(100)
}

fn serialization_round_trips(dir: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let waves: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..64).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let vocab = WaveVocabulary::fit(&waves, &KMeansConfig::new(6, 3), 1e-8).map_err(|e| e.to_string())?;
    let path = dir.join("vocab.json");
    vocab.save(&path).map_err(|e| e.to_string())?;
    let back = WaveVocabulary::load(&path).map_err(|e| e.to_string())?;
    let cbits = |v: &WaveVocabulary| v.centroids.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    if back != vocab || cbits(&back) != cbits(&vocab) {
        return Err("vocabulary differs after reload".into());
    }

    let seqs: Vec<TokenSequence> = (0..40)
        .map(|i| TokenSequence {
            id: format!("s{i}"),
            tokens: (0..12).map(|_| rng.random_range(1..8)).collect(),
            label: None,
            original_len: 12,
        })
        .collect();
    let cfg = SkipGramConfig {
        dim: 8,
        epochs: 2,
        ..SkipGramConfig::default()
    };
    let emb = skipgram_train(&seqs, 8, &vocab.training_hash, &cfg)
        .map_err(|e| e.to_string())?
        .embedding;
    let path = dir.join("embedding.json");
    emb.save(&path).map_err(|e| e.to_string())?;
    let back = EmbeddingMatrix::load(&path).map_err(|e| e.to_string())?;
    let wbits = |e: &EmbeddingMatrix| e.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if back != emb || wbits(&back) != wbits(&emb) {
        return Err("embedding differs after reload".into());
    }

    for spec in [
        ModelSpec {
            embed_dim: 8,
            conv_filters: 6,
            dense: 5,
            ..ModelSpec::cnn_two_block(8, 30, 3)
        },
        ModelSpec {
            embed_dim: 8,
            lstm_hidden: 4,
            attention_dim: 5,
            dense: 5,
            ..ModelSpec::rnn(8, 30, 3, true)
        },
    ] {
        let model = Model::new(spec, vocab.training_hash.clone(), 5, Some(&emb)).map_err(|e| e.to_string())?;
        let path = save_checkpoint(&model, dir, "model").map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let pbits = |m: &Model| {
            m.params
                .tensors
                .iter()
                .flat_map(|t| t.data.iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        };
        if back != model || pbits(&back) != pbits(&model) {
            return Err(format!("{:?} checkpoint differs after reload", model.spec.head));
        }
    }
    Ok(())
}

fn round_trips() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let wfdb = wfdb_round_trip(dir.path());
    let ser = serialization_round_trips(dir.path());
    match (wfdb, ser) {
        (Ok(n), Ok(())) => Check::new(
            n == 100,
            format!("{n}/100 random format 212 records identical; vocabulary, embedding and checkpoints bit-exact"),
        ),
        (Err(e), _) | (_, Err(e)) => Check::new(false, e),
    }
}

fn corpus_run(task: Task, dir: &str, out: &Path) -> Result<(f64, Option<(usize, usize)>), String> {
    let mut cfg = PipelineConfig {
        task,
        ..PipelineConfig::default()
    };
    cfg.data.dir = Some(dir.into());
    cfg.out_dir = out.to_path_buf();
    cfg.eval.folds = Some(10);
    let mut counts = None;
    if task == Task::Afib5s {
        let mut unbalanced = cfg.clone();
        unbalanced.data.balance = false;
        let p = Pipeline::new(unbalanced);
        p.ingest().map_err(|e| format!("{e:#}"))?;
        p.detect().map_err(|e| format!("{e:#}"))?;
        let seg = p.segment().map_err(|e| format!("{e:#}"))?;
        let ds = WaveDataset::load(&seg.artifact).map_err(|e| format!("{e:#}"))?;
        let c = ds.class_counts();
        counts = Some((c.iter().sum(), c[1]));
    }
    let report = Pipeline::new(cfg).run_all().map_err(|e| format!("{e:#}"))?;
    Ok((report.overall_accuracy.unwrap_or(0.0), counts))
}

fn full_corpus() -> Check {
    let mitbih = std::env::var("ELP_MITBIH_DIR").ok();
    let afib = std::env::var("ELP_AFIB_DIR").ok();
    if mitbih.is_none() && afib.is_none() {
        return Check::skip("set ELP_MITBIH_DIR and/or ELP_AFIB_DIR to run the corpus-scale targets");
    }
    let out = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    if let Some(dir) = mitbih {
        match corpus_run(Task::Mitbih, &dir, &out.path().join("mitbih")) {
            Ok((acc, _)) => {
                pass &= acc >= 90.0;
                parts.push(format!(
                    "MIT-BIH 10-fold CNN accuracy {acc:.2}% (target 90, published 97.00)"
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("MIT-BIH run failed: {e}"));
            }
        }
    }
    if let Some(dir) = afib {
        match corpus_run(Task::Afib5s, &dir, &out.path().join("afib")) {
            Ok((acc, counts)) => {
                let (total, positive) = counts.unwrap_or_default();
                let within = |got: usize, want: f64| ((got as f64 - want) / want).abs() <= 0.02;
                pass &= acc >= 94.0 && within(total, 167_422.0) && within(positive, 66_939.0);
                parts.push(format!(
                    "AFIB 10-fold accuracy {acc:.2}% (target 94, published 98.17); {total} segments, {positive} AFIB (published 167422 / 66939, 2% tolerance)"
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("AFIB run failed: {e}"));
            }
        }
    }
    Check::new(pass, parts.join("; "))
}

// name, runtime budget, check
type Criterion = (&'static str, Duration, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("metric golden values", Duration::from_secs(1), golden_metrics),
        ("macro F1 golden value", Duration::from_secs(1), golden_mf1),
        ("segment p-threshold rule", Duration::from_secs(1), p_rule),
        ("detector properties", Duration::from_secs(30), detector),
        (
            "k-means against exhaustive optimum",
            Duration::from_secs(10),
            clustering,
        ),
        ("gradient checks", Duration::from_secs(60), gradients),
        (
            "desk-scale end-to-end experiment",
            Duration::from_secs(300),
            desk_experiment,
        ),
        (
            "format and serialization round trips",
            Duration::from_secs(60),
            round_trips,
        ),
        ("full-corpus targets", Duration::MAX, full_corpus),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Check::new(false, format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let (status, detail) = match result.pass {
            None => ("SKIP", result.detail),
            Some(true) if took > budget => ("FAIL", format!("{} (over the {:?} budget)", result.detail, budget)),
            Some(true) => ("PASS", result.detail),
            Some(false) => ("FAIL", result.detail),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {}. {name} [{:.2} s]: {detail}", i + 1, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
