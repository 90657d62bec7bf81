use std::path::Path;
use std::process::{Command, Output};

use durnn::Variant;
use durnn_cli::checkpoint::Checkpoint;
use durnn_cli::config::{ExperimentConfig, LayerConfig, LrModeConfig, PRESETS};
use durnn_cli::trace::{export_traces, read_traces, Sublayer};
use durnn_cli::train::{DataSource, Trainer};
use proptest::prelude::*;

fn durnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_durnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn tiny_adding() -> ExperimentConfig {
    let steps = 12;
    ExperimentConfig {
        seq_len: steps,
        layers: vec![
            LayerConfig::standard(6, Variant::Durnn, steps, false),
            LayerConfig::standard(5, Variant::Durnn, steps, true),
        ],
        batch_size: 8,
        lr: 1e-3,
        max_iters: 20,
        log_interval: 5,
        eval_interval: 10,
        eval_samples: 32,
        checkpoint_interval: 10,
        constraint_check_interval: 10,
        ..ExperimentConfig::adding(steps)
    }
}

fn params_in_json(text: &str) -> Vec<String> {
    let mut names: Vec<String> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).expect("valid JSON line");
            v["param"].as_str().expect("param field").to_string()
        })
        .collect();
    names.sort();
    names.dedup();
    names
}

#[test]
fn verify_reports_every_parameter_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = durnn(
        &[
            "verify", "--sizes", "3,2,4,2", "--instances", "3", "--fd-instances", "2", "--bound-lengths", "20",
            "--bound-instances", "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("verify_report.jsonl")).unwrap();
    let names = params_in_json(&json);
    for p in ["w_in", "w_rec", "w_s", "u", "w_ss", "w_ls", "b_short", "b_long", "b_s", "b_thre"] {
        assert!(names.iter().any(|n| n == p), "{p} missing from {names:?}");
    }
}

#[test]
fn corrupted_gradient_fails_and_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let out = durnn(
        &[
            "verify", "--sizes", "3,2,4,2", "--instances", "2", "--fd-instances", "1", "--bound-lengths", "20",
            "--bound-instances", "1", "--variants", "durnn", "--corrupt", "w_s",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let json = std::fs::read_to_string(dir.path().join("verify_report.jsonl")).unwrap();
    let failed: Vec<String> = json
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["pass"] == false)
        .map(|v| v["param"].as_str().unwrap().to_string())
        .collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|p| p == "w_s"), "{failed:?}");
}

#[test]
fn bad_requests_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["train", "--preset", "nope"],
        &["verify", "--variants", "lstm"],
        &["show-config", "--preset", "adding7"],
        &["frobnicate"],
    ];
    for args in cases {
        let out = durnn(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn untrained_model_on_zero_input_traces_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_adding();
    let data = DataSource::load(&cfg).unwrap();
    Trainer::new(cfg.clone(), data).unwrap().checkpoint().save(&dir.path().join("init.ckpt")).unwrap();

    let ckpt = Checkpoint::load(&dir.path().join("init.ckpt")).unwrap();
    let mut seq = DataSource::load(&cfg).unwrap().trace_sequence(3).unwrap();
    seq.inputs.iter_mut().for_each(|m| m.fill(0.0));
    let rows = export_traces(&ckpt, &seq).unwrap();
    assert_eq!(rows.len(), 2 * cfg.seq_len * (6 + 5));
    // Initial biases are zero, so nothing can switch on without input.
    assert!(rows.iter().all(|r| r.activation == 0.0));

    let out = durnn(&["trace", "--ckpt", "init.ckpt", "--out", "trace.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let read = read_traces(&dir.path().join("trace.csv")).unwrap();
    assert_eq!(read.len(), rows.len());
    assert!(read.iter().any(|r| r.sublayer == Sublayer::Long && r.layer == 2));
}

#[test]
fn ablation_covers_exactly_the_requested_variants() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), tiny_adding().to_text()).unwrap();
    let out = durnn(
        &["ablate", "--quiet", "--config", "tiny.cfg", "--variants", "durnn,indrnn,rnn_relu", "--out", "abl"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let mut seen: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    seen.dedup();
    assert_eq!(seen, ["durnn", "indrnn", "rnn_relu"]);
    for v in ["durnn", "indrnn", "rnn_relu"] {
        assert!(dir.path().join("abl").join(v).join("checkpoint.ckpt").exists());
    }
    assert!(!dir.path().join("abl/no_selection").exists());
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in PRESETS {
        let file = ExperimentConfig::load(&root.join(format!("{name}.cfg"))).unwrap();
        assert_eq!(file, ExperimentConfig::preset(name).unwrap(), "{name}");
    }
}

fn arb_variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(vec![
        Variant::Durnn,
        Variant::NoSelection,
        Variant::IndPlusSelection,
        Variant::RnnRelu,
        Variant::IndRnn,
    ])
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        prop::collection::vec((1usize..200, arb_variant(), 0.01f64..1.0, 1.0f64..4.0, 0.1f64..1.0), 1..4),
        (2usize..2000, any::<u64>(), 1usize..128, 1e-6f64..1.0),
        (any::<bool>(), prop::option::of(1e-6f64..1.0), any::<bool>(), 0usize..100, any::<u64>()),
    )
        .prop_map(|(layers, (seq_len, seed, batch, lr), (plateau, target, sel, limit, trace_seed))| {
            let mut c = ExperimentConfig::adding(seq_len);
            c.seed = seed;
            c.batch_size = batch;
            c.lr = lr;
            c.lr_mode = if plateau { LrModeConfig::Plateau } else { LrModeConfig::Fixed };
            c.target_loss = target;
            c.selection_bias = sel;
            c.train_limit = limit;
            c.trace_seed = trace_seed;
            c.layers = layers
                .into_iter()
                .map(|(n, variant, epsilon, gamma, delta)| LayerConfig {
                    neurons: n,
                    variant,
                    epsilon,
                    gamma,
                    delta,
                    horizon: seq_len,
                })
                .collect();
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(cfg in arb_config()) {
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
